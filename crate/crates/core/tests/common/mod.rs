#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use unipan::config::{ModelConfig, Pathway};
use unipan::data::{ClassInfo, PanopticLabel};
use unipan::postprocess::{PanopticPrediction, Segment};
use unipan::Tensor64;

pub const STUFF_IDS: [i32; 2] = [0, 1];
pub const THING_IDS: [i32; 2] = [2, 3];

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn tiny_config(pathway: Pathway) -> ModelConfig {
    ModelConfig {
        backbone_widths: vec![4, 8, 8, 8],
        fpn_channels: 8,
        d_f: 4,
        d_phi: 4,
        generator_internal_channels: 8,
        d_emb: 4,
        gn_groups: 2,
        pathway,
        ..ModelConfig::new(2, 2)
    }
}

pub fn class_table() -> Vec<ClassInfo> {
    let stuff = STUFF_IDS.iter().map(|&c| ClassInfo {
        class_id: c as u32,
        is_thing: false,
    });
    stuff
        .chain(THING_IDS.iter().map(|&c| ClassInfo {
            class_id: c as u32,
            is_thing: true,
        }))
        .collect()
}

fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r0 = rng.random_range(0..h);
    let c0 = rng.random_range(0..w);
    let r1 = rng.random_range(r0 + 1..=h);
    let c1 = rng.random_range(c0 + 1..=w);
    (r0, r1, c0, c1)
}

/// Stuff split by a random column, a few overlapping thing rectangles and
/// an optional void rectangle.
pub fn random_label(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PanopticLabel {
    let n = h * w;
    let cut = rng.random_range(0..=w);
    let mut semantic: Vec<i32> = (0..n)
        .map(|p| {
            if p % w < cut {
                STUFF_IDS[0]
            } else {
                STUFF_IDS[1]
            }
        })
        .collect();
    let mut instance = vec![0; n];
    for inst in 1..=rng.random_range(0..5) {
        let class = THING_IDS[rng.random_range(0..2)];
        let (r0, r1, c0, c1) = random_rect(rng, h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                semantic[r * w + c] = class;
                instance[r * w + c] = inst;
            }
        }
    }
    if rng.random_bool(0.3) {
        let (r0, r1, c0, c1) = random_rect(rng, h, w);
        for r in r0..r1.min(r0 + 2) {
            for c in c0..c1 {
                semantic[r * w + c] = -1;
                instance[r * w + c] = 0;
            }
        }
    }
    PanopticLabel {
        height: h,
        width: w,
        semantic,
        instance,
        class_table: class_table(),
        image: vec![0.0; n * 3],
    }
}

/// A prediction near `gt`: its segments, relabelled and perturbed by an extra
/// rectangle, pixel noise and the odd class swap.
pub fn perturbed_prediction(rng: &mut ChaCha8Rng, gt: &PanopticLabel) -> PanopticPrediction {
    let n = gt.height * gt.width;
    let mut keys: Vec<(i32, i32)> = Vec::new();
    let mut map = vec![0u32; n];
    for (p, (&sem, &inst)) in gt.semantic.iter().zip(&gt.instance).enumerate() {
        if sem < 0 {
            continue;
        }
        let key = (sem, inst);
        let id = match keys.iter().position(|&k| k == key) {
            Some(k) => k,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        map[p] = id as u32 + 1;
    }
    let mut classes: Vec<i32> = keys.iter().map(|k| k.0).collect();
    if rng.random_bool(0.5) {
        let (r0, r1, c0, c1) = random_rect(rng, gt.height, gt.width);
        classes.push(THING_IDS[rng.random_range(0..2)]);
        for r in r0..r1 {
            for c in c0..c1 {
                map[r * gt.width + c] = classes.len() as u32;
            }
        }
    }
    let noise = rng.random_range(0.0..0.3);
    for v in map.iter_mut() {
        if rng.random_bool(noise) {
            *v = rng.random_range(0..=classes.len() as u32);
        }
    }
    for c in classes.iter_mut() {
        if rng.random_bool(0.1) {
            *c = [STUFF_IDS, THING_IDS].concat()[rng.random_range(0..4)];
        }
    }
    let segments = (1..=classes.len() as u32)
        .filter(|id| map.contains(id))
        .map(|id| {
            let class_id = classes[id as usize - 1];
            Segment {
                id,
                class_id,
                is_thing: THING_IDS.contains(&class_id),
                score: 1.0,
            }
        })
        .collect();
    PanopticPrediction {
        height: gt.height,
        width: gt.width,
        segment_map: map,
        segments,
    }
}
