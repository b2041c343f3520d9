//! One convolution producing every mask logit: dynamic thing filters and the
//! learned stuff filters are stacked as output channels of a single kernel.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STUFF_INIT_STD: f64 = 0.01;

/// Learned stuff filters, laid out exactly like the dynamic filters.
#[derive(Debug, Clone, Copy)]
pub struct StuffFilterBank {
    /// `[N_s, k²·D_φ]`.
    pub weight: ParamId,
    /// `[N_s]`.
    pub bias: ParamId,
}

impl StuffFilterBank {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &ModelConfig,
        name: &str,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init.normal(&[cfg.num_stuff, cfg.filter_len()], STUFF_INIT_STD),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cfg.num_stuff])),
        }
    }
}

/// Mask logits on the stride-4 grid.
#[derive(Debug, Clone, Copy)]
pub struct MaskLogits {
    /// `[M, h, w]`, one map per dynamic filter in entry order; `None` when `M = 0`.
    pub things: Option<Var>,
    /// `[N_s, h, w]`.
    pub stuff: Var,
}

/// Applies `things: [M, k²·D_φ + 1]` (weights then bias) and the stuff bank to
/// `phi: [D_φ, h, w]` as one `k×k` convolution with same padding.
#[allow(clippy::too_many_arguments)]
pub fn single_shot_conv<T: Scalar>(
    g: &mut Graph<T>,
    phi: Var,
    things: Option<Var>,
    stuff_weight: Var,
    stuff_bias: Var,
    k: usize,
) -> Result<MaskLogits> {
    let (d_phi, _, _) = g.value(phi).chw();
    let len = k * k * d_phi;
    let stuff_shape = g.shape(stuff_weight).to_vec();
    if stuff_shape.len() != 2 || stuff_shape[1] != len {
        return Err(Error::Shape(format!(
            "stuff filters must be [N_s, {len}], got {stuff_shape:?}"
        )));
    }
    let n_s = stuff_shape[0];
    let (weights, bias, m) = match things {
        None => (stuff_weight, stuff_bias, 0),
        Some(t) => {
            let ts = g.shape(t).to_vec();
            if ts.len() != 2 || ts[1] != len + 1 {
                return Err(Error::Shape(format!(
                    "thing filters must be [M, {}], got {ts:?}",
                    len + 1
                )));
            }
            let m = ts[0];
            let tw = g.slice_cols(t, 0, len);
            let tb = g.slice_cols(t, len, len + 1);
            let tb = g.reshape(tb, &[m]);
            (
                g.concat(&[tw, stuff_weight]),
                g.concat(&[tb, stuff_bias]),
                m,
            )
        }
    };
    let kernel = g.reshape(weights, &[m + n_s, d_phi, k, k]);
    let out = g.conv2d(phi, kernel, Some(bias), 1, k / 2);
    if m == 0 {
        return Ok(MaskLogits {
            things: None,
            stuff: out,
        });
    }
    let thing_logits = g.slice(out, 0, m);
    let stuff_logits = g.slice(out, m, m + n_s);
    Ok(MaskLogits {
        things: Some(thing_logits),
        stuff: stuff_logits,
    })
}

impl StuffFilterBank {
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        phi: Var,
        things: Option<Var>,
        k: usize,
    ) -> Result<MaskLogits> {
        single_shot_conv(g, phi, things, p.var(self.weight), p.var(self.bias), k)
    }
}
