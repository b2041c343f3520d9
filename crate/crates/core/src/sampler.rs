//! Dynamic filter sampling.
//!
//! A class head scores every pyramid location and a filter head, which also
//! sees the coordinate map, describes it. Only the chosen locations are pooled
//! and projected into convolution weights for the single-shot head.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::config::{Level, ModelConfig};
use crate::data::PanopticLabel;
use crate::error::{Error, Result};
use crate::fpn::FeaturePyramid;
use crate::generator::positional_encoding;
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, ConvBlock, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Focal-loss style prior for the initial foreground probability.
pub const CLASS_PRIOR: f64 = 0.01;
/// Upper edges of the `sqrt(area)` tiers for P3, P4 and P5.
pub const SCALE_TIERS: [f64; 3] = [64.0, 128.0, 256.0];

/// Four conv blocks and an output convolution, applied with the same weights at every level.
#[derive(Debug, Clone)]
pub struct Tower {
    blocks: [ConvBlock; 4],
    out: Conv2d,
}

impl Tower {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        groups: usize,
    ) -> Self {
        let blocks = std::array::from_fn(|i| {
            let c = if i == 0 { cin } else { width };
            ConvBlock::new(
                store,
                init,
                &format!("{name}.block{i}"),
                c,
                width,
                1,
                groups,
            )
        });
        let out = Conv2d::new(store, init, &format!("{name}.out"), width, cout, 3, 1, true);
        Self { blocks, out }
    }

    pub fn out(&self) -> &Conv2d {
        &self.out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let x = self.blocks.iter().fold(x, |x, b| b.forward(g, p, x));
        self.out.forward(g, p, x)
    }
}

/// One location chosen to emit a dynamic filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterEntry {
    pub level: Level,
    pub i: usize,
    pub j: usize,
    /// Thing channel.
    pub class: usize,
    pub score: f64,
    /// Source instance during training, 0 at inference.
    pub instance: i32,
}

/// Post-sigmoid class probabilities, `[N_t, H_l, W_l]` per level.
#[derive(Debug, Clone)]
pub struct ClassScoreMaps {
    pub levels: Vec<(Level, Tensor<f64>)>,
}

/// Projected filters of a [`FilterEntry`] list.
#[derive(Debug, Clone)]
pub struct DynamicFilterSet {
    pub entries: Vec<FilterEntry>,
    /// `[M, k²·D_φ + 1]`: weights followed by the bias.
    pub filters: Option<Var>,
}

/// Level and positive locations of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAssignment {
    pub instance: i32,
    pub class: usize,
    pub level: Level,
    pub positives: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct LevelAssignment {
    pub assigned: Vec<InstanceAssignment>,
    /// Instances with no positive location on their level.
    pub skipped: Vec<i32>,
}

/// Everything the training step needs from the sampler.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub assignment: LevelAssignment,
    pub entries: Vec<FilterEntry>,
    /// One-hot thing targets per filter level, `[N_t, H_l, W_l]`.
    pub class_targets: Vec<(Level, Tensor<f64>)>,
}

impl TrainSample {
    pub fn positive_count(&self) -> usize {
        self.class_targets
            .iter()
            .map(|(_, t)| t.data().iter().filter(|&&v| v > 0.0).count())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct FilterSampler {
    class_head: Tower,
    filter_head: Tower,
    projection: Linear,
    k: usize,
    d_f: usize,
    d_phi: usize,
    num_things: usize,
    levels: Vec<Level>,
}

impl FilterSampler {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.fpn_channels;
        let class_head = Tower::new(
            store,
            init,
            "sampler.class_head",
            c,
            c,
            cfg.num_things,
            cfg.gn_groups,
        );
        let prior = T::lit(-((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
        let bias = class_head.out.bias.expect("class head output has a bias");
        store
            .get_mut(bias)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        let filter_head = Tower::new(
            store,
            init,
            "sampler.filter_head",
            c + 2,
            c,
            cfg.d_f,
            cfg.gn_groups,
        );
        let din = cfg.raw_filter_len();
        let projection = Linear::new(
            store,
            init,
            "sampler.projection",
            din,
            cfg.filter_len() + 1,
            (1.0 / din as f64).sqrt(),
        );
        Self {
            class_head,
            filter_head,
            projection,
            k: cfg.kernel_k,
            d_f: cfg.d_f,
            d_phi: cfg.d_phi,
            num_things: cfg.num_things,
            levels: cfg.filter_levels.clone(),
        }
    }

    pub fn class_head(&self) -> &Tower {
        &self.class_head
    }

    pub fn filter_head(&self) -> &Tower {
        &self.filter_head
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Thing logits `[N_t, H_l, W_l]` of one level.
    pub fn class_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, level: Var) -> Var {
        self.class_head.forward(g, p, level)
    }

    /// Filter features `[D_f, H_l, W_l]` of one level.
    pub fn filter_features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, level: Var) -> Var {
        let (_, h, w) = g.value(level).chw();
        let coords = g.constant(positional_encoding(h, w));
        let x = g.concat(&[level, coords]);
        self.filter_head.forward(g, p, x)
    }

    /// Class logits and filter features of every filter level.
    pub fn heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<HeadOutputs> {
        let mut out = HeadOutputs::default();
        for &level in &self.levels {
            let x = pyramid.require(level)?;
            out.class_logits.push((level, self.class_logits(g, p, x)));
            out.filter_maps.push((level, self.filter_features(g, p, x)));
        }
        Ok(out)
    }

    /// Pools and projects the filters of `entries`, in entry order.
    pub fn dynamic_filters<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        filter_maps: &[(Level, Var)],
        entries: Vec<FilterEntry>,
    ) -> Result<DynamicFilterSet> {
        if entries.is_empty() {
            return Ok(DynamicFilterSet {
                entries,
                filters: None,
            });
        }
        let mut by_level: BTreeMap<Level, Vec<usize>> = BTreeMap::new();
        for (n, e) in entries.iter().enumerate() {
            by_level.entry(e.level).or_default().push(n);
        }
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(entries.len());
        for (level, idx) in &by_level {
            let fmap = filter_maps
                .iter()
                .find(|(l, _)| l == level)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::MissingLevel(level.name().into()))?;
            let locs: Vec<(usize, usize)> =
                idx.iter().map(|&n| (entries[n].i, entries[n].j)).collect();
            parts.push(pool_filter(g, fmap, &locs, self.k)?);
            order.extend_from_slice(idx);
        }
        let pooled = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts)
        };
        // row r of `pooled` holds entry order[r]; invert to restore entry order
        let mut rows = vec![0; order.len()];
        for (r, &n) in order.iter().enumerate() {
            rows[n] = r;
        }
        let pooled = if rows.iter().enumerate().all(|(a, &b)| a == b) {
            pooled
        } else {
            g.select_rows(pooled, &rows)
        };
        let filters = self.project_filter(g, p, pooled)?;
        Ok(DynamicFilterSet {
            entries,
            filters: Some(filters),
        })
    }

    /// `[M, k²·D_f]` → `[M, k²·D_φ + 1]`.
    pub fn project_filter<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, raw: Var) -> Result<Var> {
        let want = self.k * self.k * self.d_f;
        match g.shape(raw) {
            [_, d] if *d == want => Ok(self.projection.forward(g, p, raw)),
            s => Err(Error::Shape(format!(
                "raw filters must be [M, {want}], got {s:?}"
            ))),
        }
    }

    pub fn filter_len(&self) -> usize {
        self.k * self.k * self.d_phi
    }

    pub fn num_things(&self) -> usize {
        self.num_things
    }
}

/// Per-level head outputs.
#[derive(Debug, Clone, Default)]
pub struct HeadOutputs {
    pub class_logits: Vec<(Level, Var)>,
    pub filter_maps: Vec<(Level, Var)>,
}

/// Zero-padded `k×k` windows of `fmap: [D_f, H, W]` centred at `locs`,
/// flattened window-row-major with channels innermost → `[M, k²·D_f]`.
pub fn pool_filter<T: Scalar>(
    g: &mut Graph<T>,
    fmap: Var,
    locs: &[(usize, usize)],
    k: usize,
) -> Result<Var> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel_k must be odd, got {k}")));
    }
    let (_, h, w) = g.value(fmap).chw();
    if let Some(&(i, j)) = locs.iter().find(|&&(i, j)| i >= h || j >= w) {
        return Err(Error::LocationOutOfBounds { i, j, h, w });
    }
    Ok(g.gather_windows(fmap, locs, k))
}

/// Level of an instance from `sqrt(area)`. Sizes below 64 go to `P3`, below
/// 128 to `P4`, and larger ones to `P5`; when `P6` is available it takes
/// everything from 256 up. A level missing from `available` falls back to
/// the nearest available one, preferring the finer.
pub fn assign_level(sqrt_area: f64, available: &[Level]) -> Option<Level> {
    let p6 = available.contains(&Level::P6);
    let wanted = if sqrt_area < SCALE_TIERS[0] {
        Level::P3
    } else if sqrt_area < SCALE_TIERS[1] {
        Level::P4
    } else if p6 && sqrt_area >= SCALE_TIERS[2] {
        Level::P6
    } else {
        Level::P5
    };
    let rank = |l: Level| {
        Level::ALL
            .iter()
            .position(|&x| x == l)
            .expect("known level") as isize
    };
    available
        .iter()
        .copied()
        .min_by_key(|&l| ((rank(l) - rank(wanted)).abs(), rank(l)))
}

/// Grid locations of a level whose centre pixel lies inside `mask`.
pub fn positive_locations(
    mask: &[bool],
    height: usize,
    width: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let (gh, gw) = (height.div_ceil(stride), width.div_ceil(stride));
    let mut out = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let (y, x) = (stride * i + stride / 2, stride * j + stride / 2);
            if y < height && x < width && mask[y * width + x] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Assigns every instance to a level, builds one-hot class targets and draws
/// up to `samples_per_instance` locations per instance without replacement.
/// `grids` gives the spatial size of each filter level.
pub fn assign_and_sample_train<R: Rng>(
    label: &PanopticLabel,
    grids: &[(Level, usize, usize)],
    num_things: usize,
    samples_per_instance: usize,
    rng: &mut R,
) -> Result<TrainSample> {
    let available: Vec<Level> = grids.iter().map(|g| g.0).collect();
    let mut class_targets: Vec<(Level, Tensor<f64>)> = grids
        .iter()
        .map(|&(l, h, w)| (l, Tensor::zeros(&[num_things, h, w])))
        .collect();
    let mut assignment = LevelAssignment::default();
    let mut entries = Vec::new();
    for (inst, class_id) in label.instances() {
        let class = label
            .class_channel(class_id)
            .filter(|&c| c < num_things)
            .ok_or_else(|| {
                Error::Config(format!(
                    "thing class {class_id} outside the model's {num_things} classes"
                ))
            })?;
        let mask = label.instance_mask(inst);
        let area = mask.iter().filter(|&&m| m).count();
        let level = assign_level((area as f64).sqrt(), &available)
            .ok_or(Error::MissingLevel("any".into()))?;
        let slot = available
            .iter()
            .position(|&l| l == level)
            .expect("assigned level is available");
        let (_, gh, gw) = grids[slot];
        let positives: Vec<(usize, usize)> =
            positive_locations(&mask, label.height, label.width, level.stride())
                .into_iter()
                .filter(|&(i, j)| i < gh && j < gw)
                .collect();
        if positives.is_empty() {
            assignment.skipped.push(inst);
            continue;
        }
        let target = class_targets[slot].1.data_mut();
        for &(i, j) in &positives {
            target[(class * gh + i) * gw + j] = 1.0;
        }
        for &(i, j) in positives.choose_multiple(rng, samples_per_instance) {
            entries.push(FilterEntry {
                level,
                i,
                j,
                class,
                score: 1.0,
                instance: inst,
            });
        }
        assignment.assigned.push(InstanceAssignment {
            instance: inst,
            class,
            level,
            positives,
        });
    }
    Ok(TrainSample {
        assignment,
        entries,
        class_targets,
    })
}

/// Every location whose best class probability reaches `threshold`, best
/// first; ties go to the earlier level, then row, then column.
pub fn sample_inference(maps: &ClassScoreMaps, threshold: f64) -> Vec<FilterEntry> {
    let mut out = Vec::new();
    for (level, probs) in &maps.levels {
        let (n, h, w) = probs.chw();
        for i in 0..h {
            for j in 0..w {
                let (class, score) = (0..n).map(|c| (c, probs.at3(c, i, j))).fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
                if score >= threshold {
                    out.push(FilterEntry {
                        level: *level,
                        i,
                        j,
                        class,
                        score,
                        instance: 0,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.level.cmp(&b.level))
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    out
}

/// Post-sigmoid copies of the class logits.
pub fn score_maps<T: Scalar>(g: &Graph<T>, class_logits: &[(Level, Var)]) -> ClassScoreMaps {
    let levels = class_logits
        .iter()
        .map(|(l, v)| {
            let t = g.value(*v).cast::<f64>();
            (*l, t.map(crate::kernels::sigmoid))
        })
        .collect();
    ClassScoreMaps { levels }
}
