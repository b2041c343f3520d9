//! Convolutional backbone and the feature pyramid.
//!
//! The pyramid follows the usual top-down construction for `P3..P5`. `P2` is
//! built from `C2` average-pooled to stride 8, laterally projected and summed
//! with the top-down `P3` map, so `P2` and `P3` share a resolution.

use crate::config::{Level, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, ConvBlock, Init, ParamStore};
use crate::scalar::Scalar;

/// Backbone outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBlock,
    stages: Vec<[ConvBlock; 2]>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let w = &cfg.backbone_widths;
        let stem = ConvBlock::new(store, init, "backbone.stem", 3, w[0], 2, cfg.gn_groups);
        let mut cin = w[0];
        let stages = w
            .iter()
            .enumerate()
            .map(|(s, &cout)| {
                let down = ConvBlock::new(
                    store,
                    init,
                    &format!("backbone.stage{}.0", s + 1),
                    cin,
                    cout,
                    2,
                    cfg.gn_groups,
                );
                let conv = ConvBlock::new(
                    store,
                    init,
                    &format!("backbone.stage{}.1", s + 1),
                    cout,
                    cout,
                    1,
                    cfg.gn_groups,
                );
                cin = cout;
                [down, conv]
            })
            .collect();
        Self { stem, stages }
    }

    /// `image: [3, H, W]` with `H`, `W` divisible by 32.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
    ) -> Result<BackboneFeatures> {
        let (c, h, w) = g.value(image).chw();
        if c != 3 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be [3, H, W] with H, W divisible by 32, got [{c}, {h}, {w}]"
            )));
        }
        let mut x = self.stem.forward(g, p, image);
        let mut outs = Vec::with_capacity(4);
        for [down, conv] in &self.stages {
            x = down.forward(g, p, x);
            x = conv.forward(g, p, x);
            outs.push(x);
        }
        Ok(BackboneFeatures {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }
}

/// Pyramid levels in ascending stride order, all with `fpn_channels` channels.
#[derive(Debug, Clone, Default)]
pub struct FeaturePyramid {
    pub levels: Vec<(Level, Var)>,
}

impl FeaturePyramid {
    pub fn get(&self, level: Level) -> Option<Var> {
        self.levels
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, v)| *v)
    }

    pub fn require(&self, level: Level) -> Result<Var> {
        self.get(level)
            .ok_or_else(|| Error::MissingLevel(level.name().into()))
    }
}

#[derive(Debug, Clone)]
pub struct Fpn {
    /// Lateral 1×1 projections of `C2..C5`.
    lateral: [Conv2d; 4],
    /// 3×3 smoothing of `P2..P5`.
    smooth: [Conv2d; 4],
    p6: Option<Conv2d>,
}

impl Fpn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.fpn_channels;
        let lateral = std::array::from_fn(|i| {
            Conv2d::new(
                store,
                init,
                &format!("fpn.lateral{}", i + 2),
                cfg.backbone_widths[i],
                c,
                1,
                1,
                true,
            )
        });
        let smooth = std::array::from_fn(|i| {
            Conv2d::new(
                store,
                init,
                &format!("fpn.smooth{}", i + 2),
                c,
                c,
                3,
                1,
                true,
            )
        });
        let p6 = cfg
            .include_p6
            .then(|| Conv2d::new(store, init, "fpn.p6", c, c, 3, 2, true));
        Self {
            lateral,
            smooth,
            p6,
        }
    }

    pub fn lateral(&self) -> &[Conv2d; 4] {
        &self.lateral
    }

    pub fn smooth(&self) -> &[Conv2d; 4] {
        &self.smooth
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f: &BackboneFeatures,
    ) -> FeaturePyramid {
        let inner5 = self.lateral[3].forward(g, p, f.c5);
        let lat4 = self.lateral[2].forward(g, p, f.c4);
        let up5 = g.upsample_nearest(inner5, 2);
        let inner4 = g.add(lat4, up5);
        let lat3 = self.lateral[1].forward(g, p, f.c3);
        let up4 = g.upsample_nearest(inner4, 2);
        let inner3 = g.add(lat3, up4);
        // halve C2 spatially so P2 lives on the stride-8 grid
        let halved = g.avg_pool2(f.c2);
        let lat2 = self.lateral[0].forward(g, p, halved);
        let inner2 = g.add(lat2, inner3);

        let p2 = self.smooth[0].forward(g, p, inner2);
        let p3 = self.smooth[1].forward(g, p, inner3);
        let p4 = self.smooth[2].forward(g, p, inner4);
        let p5 = self.smooth[3].forward(g, p, inner5);
        let mut levels = vec![
            (Level::P2, p2),
            (Level::P3, p3),
            (Level::P4, p4),
            (Level::P5, p5),
        ];
        if let Some(conv) = &self.p6 {
            levels.push((Level::P6, conv.forward(g, p, p5)));
        }
        FeaturePyramid { levels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            backbone_widths: vec![4, 4, 8, 8],
            fpn_channels: 4,
            gn_groups: 2,
            ..ModelConfig::new(2, 2)
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore<f64>, Backbone, Fpn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let bb = Backbone::new(&mut store, &mut init, cfg);
        let fpn = Fpn::new(&mut store, &mut init, cfg);
        (store, bb, fpn)
    }

    fn spatial(g: &Graph<f64>, v: Var) -> (usize, usize) {
        let (_, h, w) = g.value(v).chw();
        (h, w)
    }

    #[test]
    fn stride_table() {
        let (store, bb, fpn) = build(&small_cfg());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 64, 64], 0.3));
        let f = bb.forward(&mut g, &p, img).unwrap();
        assert_eq!(spatial(&g, f.c2), (16, 16));
        assert_eq!(spatial(&g, f.c3), (8, 8));
        assert_eq!(spatial(&g, f.c4), (4, 4));
        assert_eq!(spatial(&g, f.c5), (2, 2));
        let pyr = fpn.forward(&mut g, &p, &f);
        assert_eq!(spatial(&g, pyr.require(Level::P2).unwrap()), (8, 8));
        assert_eq!(spatial(&g, pyr.require(Level::P3).unwrap()), (8, 8));
        assert!(pyr.get(Level::P6).is_none());

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 96, 64], 0.3));
        let f = bb.forward(&mut g, &p, img).unwrap();
        assert_eq!(spatial(&g, f.c3), (12, 8));
    }

    #[test]
    fn bad_input_size_is_a_shape_error() {
        let (store, bb, _) = build(&small_cfg());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 65, 64], 0.3));
        assert!(matches!(bb.forward(&mut g, &p, img), Err(Error::Shape(_))));
    }

    #[test]
    fn p6_is_one_pixel_at_64() {
        let cfg = ModelConfig {
            include_p6: true,
            ..small_cfg()
        };
        let (store, bb, fpn) = build(&cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::full(&[3, 64, 64], 0.3));
        let f = bb.forward(&mut g, &p, img).unwrap();
        let pyr = fpn.forward(&mut g, &p, &f);
        assert_eq!(spatial(&g, pyr.require(Level::P6).unwrap()), (1, 1));
    }

    #[test]
    fn zero_fpn_weights_give_zero_levels() {
        let (mut store, bb, fpn) = build(&small_cfg());
        for conv in fpn.lateral().iter().chain(fpn.smooth()) {
            store
                .get_mut(conv.weight)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.1).sin()));
        let f = bb.forward(&mut g, &p, img).unwrap();
        let pyr = fpn.forward(&mut g, &p, &f);
        for (_, v) in &pyr.levels {
            assert!(g.value(*v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn perturbing_c2_only_moves_p2() {
        let cfg = small_cfg();
        let (store, _, fpn) = build(&cfg);
        let run = |bump: f64| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let c2 = g.constant(Tensor::from_fn(&[4, 8, 8], |i| {
                (i as f64 * 0.3).cos() + bump
            }));
            let c3 = g.constant(Tensor::from_fn(&[4, 4, 4], |i| (i as f64 * 0.7).sin()));
            let c4 = g.constant(Tensor::from_fn(&[8, 2, 2], |i| i as f64 * 0.1));
            let c5 = g.constant(Tensor::from_fn(&[8, 1, 1], |i| 1.0 - i as f64 * 0.2));
            let pyr = fpn.forward(&mut g, &p, &BackboneFeatures { c2, c3, c4, c5 });
            pyr.levels
                .iter()
                .map(|(l, v)| (*l, g.value(*v).clone()))
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(0.0), run(0.5));
        for ((l, x), (_, y)) in a.iter().zip(&b) {
            let moved = x.max_abs_diff(y) > 1e-9;
            assert_eq!(moved, *l == Level::P2, "{l}");
        }
    }
}
