//! Randomised invariants across the pipeline.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipan::config::{Level, LossConfig, ModelConfig, Pathway, PostConfig, Preset, TrainConfig};
use unipan::data::{
    contour_ground_truth, decode_label, encode_label, generate_dataset, generate_scene, SceneSpec,
};
use unipan::fpn::{Backbone, Fpn};
use unipan::graph::Graph;
use unipan::head::single_shot_conv;
use unipan::losses::{intra_triplet, split_mask};
use unipan::model::{ImageTargets, Model};
use unipan::nn::{Init, ParamStore};
use unipan::postprocess::{mask_nms, pq_evaluate, InstanceCandidate};
use unipan::sampler::assign_and_sample_train;
use unipan::trainer::Trainer;
use unipan::Tensor64;

use common::*;

fn scene_spec() -> impl Strategy<Value = SceneSpec> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=5, 1usize..=5).prop_map(|(hm, wm, nt, ns, mi)| {
        SceneSpec {
            height: 32 * hm,
            width: 32 * wm,
            num_things: nt,
            num_stuff: ns,
            max_instances: mi,
        }
    })
}

/// Contour oracle: count neighbours through explicit offsets.
fn brute_contour(sem: &[i32], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for (p, o) in out.iter_mut().enumerate() {
        let (i, j) = ((p / w) as i64, (p % w) as i64);
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                continue;
            }
            if sem[(ni as usize) * w + nj as usize] != sem[p] {
                *o = 1;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_validate_and_round_trip(seed in any::<u64>(), spec in scene_spec()) {
        let label = generate_scene(seed, &spec).unwrap();
        prop_assert!(label.validate().is_ok());
        prop_assert_eq!((label.height, label.width), (spec.height, spec.width));
        prop_assert!(label.instances().len() <= spec.max_instances);
        let back = decode_label(&encode_label(&label)).unwrap();
        prop_assert_eq!(back, label.clone());
        prop_assert_eq!(generate_scene(seed, &spec).unwrap(), label);
    }

    #[test]
    fn contour_matches_neighbour_scan(seed in any::<u64>(), h in 1usize..=32, w in 1usize..=32) {
        let label = random_label(&mut ChaCha8Rng::seed_from_u64(seed), h, w);
        let c = contour_ground_truth(&label);
        prop_assert_eq!(c.map, brute_contour(&label.semantic, h, w));
    }

    #[test]
    fn split_halves_partition_the_mask(seed in any::<u64>(), h in 1usize..=24, w in 1usize..=24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label = random_label(&mut rng, h, w);
        let mask: Vec<bool> = label.semantic.iter().map(|&s| s == STUFF_IDS[1]).collect();
        let count = mask.iter().filter(|&&m| m).count();
        match split_mask(&mask, h, w, &mut rng) {
            None => prop_assert!(count < 2),
            Some((a, b)) => {
                prop_assert!(a.contains(&true) && b.contains(&true));
                for p in 0..h * w {
                    prop_assert_eq!(a[p] || b[p], mask[p]);
                    prop_assert!(!(a[p] && b[p]));
                }
            }
        }
    }

    #[test]
    fn triplet_is_translation_invariant(seed in any::<u64>(), n in 1usize..5, d in 1usize..6, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embs: Vec<Tensor64> = (0..3 * n).map(|_| random_tensor(&mut rng, &[1, d], 1.0)).collect();
        let value = |offset: f64| {
            let mut g = Graph::<f64>::new();
            let v: Vec<_> = embs.iter().map(|e| g.constant(e.map(|x| x + offset))).collect();
            let t: Vec<_> = (0..n).map(|k| (v[3 * k], v[3 * k + 1], v[3 * k + 2])).collect();
            let out = intra_triplet(&mut g, &t).unwrap();
            g.value(out).data()[0]
        };
        prop_assert!((value(0.0) - value(shift)).abs() < 1e-10);
    }

    #[test]
    fn pq_is_bounded_consistent_and_id_invariant(seed in any::<u64>(), h in 4usize..=24, w in 4usize..=24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_label(&mut rng, h, w);
        let pred = perturbed_prediction(&mut rng, &gt);
        let r = pq_evaluate(&pred, &gt).unwrap();
        for v in [r.pq, r.sq, r.rq, r.pq_thing, r.pq_stuff] {
            prop_assert!((0.0..=1.0).contains(&v), "{:?}", r);
        }
        for row in &r.per_class {
            prop_assert!((row.pq() - row.sq() * row.rq()).abs() < 1e-12);
        }
        // relabel predicted ids by a random bijection onto fresh values
        let mut ids: Vec<u32> = (1..=pred.segments.len() as u32 + 5).collect();
        ids.shuffle(&mut rng);
        let map = |id: u32| if id == 0 { 0 } else { ids[id as usize - 1] + 100 };
        let mut relabelled = pred.clone();
        relabelled.segment_map.iter_mut().for_each(|v| *v = map(*v));
        relabelled.segments.iter_mut().for_each(|s| s.id = map(s.id));
        relabelled.segments.shuffle(&mut rng);
        prop_assert_eq!(pq_evaluate(&relabelled, &gt).unwrap(), r);
    }

    #[test]
    fn nms_ignores_input_order(seed in any::<u64>(), n in 0usize..8, thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
        scores.shuffle(&mut rng);
        let cands: Vec<InstanceCandidate> = scores
            .iter()
            .map(|&score| {
                let label = random_label(&mut rng, 8, 8);
                InstanceCandidate { mask: label.instance.iter().map(|&i| i != 0).collect(), class_id: THING_IDS[0], score }
            })
            .collect();
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(mask_nms(cands, thr), mask_nms(shuffled, thr));
    }

    #[test]
    fn permuting_filters_permutes_thing_rows_only(seed in any::<u64>(), m in 1usize..6, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let phi = random_tensor(&mut rng, &[d, 5, 6], 1.0);
        let things = random_tensor(&mut rng, &[m, k * k * d + 1], 1.0);
        let sw = random_tensor(&mut rng, &[2, k * k * d], 1.0);
        let sb = random_tensor(&mut rng, &[2], 1.0);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let row = k * k * d + 1;
        let permuted = Tensor64::new(vec![m, row], perm.iter().flat_map(|&r| things.data()[r * row..(r + 1) * row].to_vec()).collect()).unwrap();
        let run = |t: &Tensor64| {
            let mut g = Graph::<f64>::new();
            let (p, t, w, b) = (g.constant(phi.clone()), g.constant(t.clone()), g.constant(sw.clone()), g.constant(sb.clone()));
            let out = single_shot_conv(&mut g, p, Some(t), w, b, k).unwrap();
            (g.value(out.things.unwrap()).clone(), g.value(out.stuff).clone())
        };
        let (ta, sa) = run(&things);
        let (tb, sb2) = run(&permuted);
        prop_assert_eq!(sa, sb2);
        let plane = 5 * 6;
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&tb.data()[dst * plane..(dst + 1) * plane], &ta.data()[src * plane..(src + 1) * plane]);
        }
    }

    #[test]
    fn lr_schedule_matches_stepwise_decay(
        base in 1e-4f64..1.0,
        factor in 0.01f64..1.0,
        mut steps in prop::collection::vec(0usize..200, 0..4),
        it in 0usize..250,
    ) {
        steps.sort_unstable();
        let t = TrainConfig { base_lr: base, decay_factor: factor, lr_decay_steps: steps.clone(), ..TrainConfig::default() };
        let mut lr = base;
        for s in &steps {
            if it >= *s {
                lr *= factor;
            }
        }
        prop_assert!((t.lr_at(it) - lr).abs() <= 1e-15 * base);
    }

    #[test]
    fn sampling_counts_and_reproducibility(seed in any::<u64>(), spi in 1usize..6) {
        let spec = SceneSpec { height: 64, width: 64, num_things: 2, num_stuff: 2, max_instances: 4 };
        let label = generate_scene(seed, &spec).unwrap();
        let grids: Vec<(Level, usize, usize)> = [Level::P2, Level::P3, Level::P4, Level::P5]
            .iter()
            .map(|&l| (l, 64 / l.stride(), 64 / l.stride()))
            .collect();
        let draw = || assign_and_sample_train(&label, &grids, 2, spi, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = draw();
        let positives: usize = s.assignment.assigned.iter().map(|a| a.positives.len()).sum();
        prop_assert_eq!(s.positive_count(), positives);
        let per_instance: usize = s.assignment.assigned.iter().map(|a| a.positives.len().min(spi)).sum();
        prop_assert_eq!(s.entries.len(), per_instance);
        prop_assert_eq!(s.assignment.assigned.len() + s.assignment.skipped.len(), label.instances().len());
        prop_assert_eq!(draw().entries, s.entries);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pyramid_shapes_follow_level_strides(hm in 1usize..=4, wm in 1usize..=4, seed in any::<u64>()) {
        let (h, w) = (32 * hm, 32 * wm);
        let cfg = ModelConfig { include_p6: true, ..tiny_config(Pathway::Integrated) };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let backbone = Backbone::new(&mut store, &mut init, &cfg);
        let fpn = Fpn::new(&mut store, &mut init, &cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[3, h, w], 1.0));
        let c = backbone.forward(&mut g, &p, x).unwrap();
        for (v, s, ch) in [(c.c2, 4, 4), (c.c3, 8, 8), (c.c4, 16, 8), (c.c5, 32, 8)] {
            prop_assert_eq!(g.shape(v), &[ch, h / s, w / s][..]);
        }
        let pyr = fpn.forward(&mut g, &p, &c);
        let names: Vec<Level> = pyr.levels.iter().map(|l| l.0).collect();
        prop_assert_eq!(names, Level::ALL.to_vec());
        for (level, v) in pyr.levels {
            let s = level.stride();
            prop_assert_eq!(g.shape(v), &[cfg.fpn_channels, h.div_ceil(s), w.div_ceil(s)][..], "{}", level);
        }
    }

    #[test]
    fn loss_components_are_finite_and_non_negative(seed in any::<u64>(), separated in any::<bool>()) {
        let spec = SceneSpec { height: 32, width: 32, num_things: 2, num_stuff: 2, max_instances: 3 };
        let label = generate_scene(seed, &spec).unwrap();
        let pathway = if separated { Pathway::Separated } else { Pathway::Integrated };
        let model = Model::<f64>::new(tiny_config(pathway), label.class_table.clone(), seed).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let losses = LossConfig::from_preset(Preset::Cityscapes);
        let targets = ImageTargets::new(&label);
        let (total, r) = model.training_loss(&mut g, &p, &label, &targets, &losses, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for v in [r.cls, r.stuff_ce, r.stuff_mcd, r.thing_dice, r.inter_contour, r.intra_triplet, r.total] {
            prop_assert!(v.is_finite() && v >= 0.0, "{:?}", r);
        }
        let l = losses.lambdas;
        let expect = l[0] * r.cls + l[1] * (r.stuff_ce + r.stuff_mcd) + l[2] * r.thing_dice + l[3] * r.inter_contour + l[4] * r.intra_triplet;
        prop_assert!((r.total - expect).abs() <= 1e-9 * expect.max(1.0));
        prop_assert!((g.value(total).data()[0] - r.total).abs() <= 1e-9 * expect.max(1.0));
    }
}

/// With a single non-zero loss weight and no weight decay, one step moves
/// exactly the parameters that loss can reach.
#[test]
fn each_loss_reaches_only_its_parameters() {
    const SHARED: [&str; 2] = ["backbone.", "fpn."];
    let cases: [(usize, &[&str]); 5] = [
        (0, &["sampler.class_head."]),
        (1, &["generator.", "stuff_filters."]),
        (
            2,
            &["generator.", "sampler.filter_head.", "sampler.projection."],
        ),
        (3, &["generator.", "contour_head."]),
        (4, &["generator.", "embedding."]),
    ];
    let spec = SceneSpec {
        height: 32,
        width: 32,
        num_things: 2,
        num_stuff: 2,
        max_instances: 3,
    };
    let data = generate_dataset(5, &spec, 2).unwrap();
    assert!(data.iter().all(|l| !l.instances().is_empty()));
    for (k, own) in cases {
        let mut lambdas = [0.0; 5];
        lambdas[k] = 1.0;
        let losses = LossConfig {
            lambdas,
            ..LossConfig::from_preset(Preset::Cityscapes)
        };
        let train = TrainConfig {
            iterations: 1,
            batch_size: 2,
            weight_decay: 0.0,
            lr_decay_steps: vec![],
            ..TrainConfig::default()
        };
        let model = Model::<f64>::new(
            tiny_config(Pathway::Integrated),
            data[0].class_table.clone(),
            1,
        )
        .unwrap();
        let before = model.params.clone();
        let mut t = Trainer::new(model, train, losses, data.clone()).unwrap();
        t.step().unwrap();
        let mut moved_groups = std::collections::BTreeSet::new();
        for ((name, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
            let reachable = SHARED.iter().chain(own).find(|p| name.starts_with(*p));
            let moved = a != b;
            match reachable {
                Some(prefix) => {
                    if moved {
                        moved_groups.insert(*prefix);
                    }
                }
                None => assert!(!moved, "loss {k} moved unreachable `{name}`"),
            }
        }
        for prefix in SHARED.iter().chain(own) {
            assert!(
                moved_groups.contains(prefix),
                "loss {k} left `{prefix}` untouched"
            );
        }
    }
}

#[test]
fn inference_is_a_partition_for_random_models() {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        num_things: 2,
        num_stuff: 2,
        max_instances: 3,
    };
    for seed in 0..4 {
        let label = generate_scene(seed, &spec).unwrap();
        let model = Model::<f64>::new(
            tiny_config(Pathway::Integrated),
            label.class_table.clone(),
            seed,
        )
        .unwrap();
        let post = PostConfig {
            score_threshold: 0.0,
            min_thing_area: 0,
            min_stuff_area: 0,
            ..PostConfig::default()
        };
        let pred = model.predict(&label, &post).unwrap();
        pred.validate().unwrap();
        assert_eq!(pred.segment_map.len(), 32 * 32);
    }
}
