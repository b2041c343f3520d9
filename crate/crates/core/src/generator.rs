//! The unified feature map shared by every thing and stuff mask.
//!
//! `P2..P5` are each convolved, resized to the stride-8 grid and summed. The
//! sum is concatenated with a normalised coordinate map, passed through two
//! 3×3 convolutions, and a stride-2 transposed convolution lifts it to stride 4.

use crate::config::{Level, ModelConfig};
use crate::error::Result;
use crate::fpn::FeaturePyramid;
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ConvBlock, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MERGE_STRIDE: usize = 8;
pub const OUTPUT_STRIDE: usize = 4;
const MERGED_LEVELS: [Level; 4] = [Level::P2, Level::P3, Level::P4, Level::P5];

/// Two coordinate channels `[x, y]`, each ramping linearly from −1 to 1.
/// An axis of length 1 is all zeros.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let ramp = |i: usize, n: usize| {
        if n <= 1 {
            T::zero()
        } else {
            T::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
        }
    };
    Tensor::from_fn(&[2, h, w], |idx| {
        let (c, rem) = (idx / (h * w), idx % (h * w));
        if c == 0 {
            ramp(rem % w, w)
        } else {
            ramp(rem / w, h)
        }
    })
}

/// Output of [`PanopticFeatureGenerator::forward`].
#[derive(Debug, Clone, Copy)]
pub struct PanopticFeature {
    /// `[D_φ, H/4, W/4]`.
    pub phi: Var,
    /// The stride-8 map entering the transposed convolution.
    pub internal: Var,
}

#[derive(Debug, Clone)]
pub struct PanopticFeatureGenerator {
    level_convs: [ConvBlock; 4],
    fuse: [ConvBlock; 2],
    deconv_weight: ParamId,
    deconv_bias: ParamId,
}

impl PanopticFeatureGenerator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &ModelConfig,
        name: &str,
    ) -> Self {
        let ci = cfg.generator_internal_channels;
        let level_convs = std::array::from_fn(|i| {
            ConvBlock::new(
                store,
                init,
                &format!("{name}.level{}", i + 2),
                cfg.fpn_channels,
                ci,
                1,
                cfg.gn_groups,
            )
        });
        let fuse = [
            ConvBlock::new(
                store,
                init,
                &format!("{name}.fuse0"),
                ci + 2,
                ci,
                1,
                cfg.gn_groups,
            ),
            ConvBlock::new(
                store,
                init,
                &format!("{name}.fuse1"),
                ci,
                ci,
                1,
                cfg.gn_groups,
            ),
        ];
        let deconv_weight = store.add(
            format!("{name}.deconv.weight"),
            init.kaiming(&[ci, cfg.d_phi, 2, 2], ci),
        );
        let deconv_bias = store.add(format!("{name}.deconv.bias"), Tensor::zeros(&[cfg.d_phi]));
        Self {
            level_convs,
            fuse,
            deconv_weight,
            deconv_bias,
        }
    }

    pub fn deconv_weight(&self) -> ParamId {
        self.deconv_weight
    }

    /// Consumes `P2..P5`; any further level is ignored.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<PanopticFeature> {
        let mut vars = Vec::with_capacity(4);
        for level in MERGED_LEVELS {
            vars.push(pyramid.require(level)?);
        }
        let (_, h8, w8) = g.value(vars[0]).chw();
        let mut merged = Vec::with_capacity(4);
        for (conv, v) in self.level_convs.iter().zip(vars) {
            let y = conv.forward(g, p, v);
            merged.push(g.resize_bilinear(y, h8, w8));
        }
        let terms: Vec<(Var, T)> = merged.into_iter().map(|v| (v, T::one())).collect();
        let sum = g.weighted_sum(&terms);
        let coords = g.constant(positional_encoding(h8, w8));
        let x = g.concat(&[sum, coords]);
        let x = self.fuse[0].forward(g, p, x);
        let internal = self.fuse[1].forward(g, p, x);
        let phi = g.conv_transpose2d(
            internal,
            p.var(self.deconv_weight),
            Some(p.var(self.deconv_bias)),
            2,
            0,
        );
        Ok(PanopticFeature { phi, internal })
    }
}
