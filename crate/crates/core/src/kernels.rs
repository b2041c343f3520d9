//! Raw `[C, H, W]` kernels used by the autograd tape and by inference-only code.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfolds `x` into a `[C·k·k, OH·OW]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let n = oh * ow;
    let mut col = vec![T::zero(); g.channels * k * k * n];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    let dst = &mut col[row + oi * ow..row + (oi + 1) * ow];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            *d = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column matrix back, accumulating into `x`.
pub fn col2im<T: Scalar>(col: &[T], g: ConvGeom, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let n = oh * ow;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src = &col[row + oi * ow..row + (oi + 1) * ow];
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Per-group statistics of a group normalization forward pass.
pub struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const GN_EPS: f64 = 1e-5;

pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormSaved<T>) {
    let per = c / groups * h * w;
    let hw = h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); groups];
    let n = T::lit(per as f64);
    for gi in 0..groups {
        let xs = &x[gi * per..(gi + 1) * per];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + T::lit(GN_EPS)).sqrt();
        rstd[gi] = r;
        for (o, &v) in xhat[gi * per..(gi + 1) * per].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
    }
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        for p in 0..hw {
            let idx = ch * hw + p;
            y[idx] = xhat[idx] * gamma[ch] + beta[ch];
        }
    }
    (y, GroupNormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    saved: &GroupNormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let per = c / groups * hw;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); dy.len()];
    for ch in 0..c {
        for p in 0..hw {
            let idx = ch * hw + p;
            dgamma[ch] += dy[idx] * saved.xhat[idx];
            dbeta[ch] += dy[idx];
            dxhat[idx] = dy[idx] * gamma[ch];
        }
    }
    let n = T::lit(per as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for gi in 0..groups {
        let r = gi * per..(gi + 1) * per;
        let dxh = &dxhat[r.clone()];
        let xh = &saved.xhat[r.clone()];
        let sum_d = dxh.iter().copied().sum::<T>();
        let sum_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        let scale = saved.rstd[gi] / n;
        for ((o, &d), &x) in dx[r].iter_mut().zip(dxh).zip(xh) {
            *o = scale * (n * d - sum_d - x * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Source taps for one output index of a half-pixel-aligned linear resize.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

pub fn linear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::lit(1.0 - frac),
                w1: T::lit(frac),
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = linear_taps::<T>(h, oh);
    let tx = linear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oi, a) in ty.iter().enumerate() {
            for (oj, b) in tx.iter().enumerate() {
                dst[oi * ow + oj] = a.w0
                    * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1])
                    + a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ty = linear_taps::<T>(h, oh);
    let tx = linear_taps::<T>(w, ow);
    for ch in 0..c {
        let src = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, a) in ty.iter().enumerate() {
            for (oj, b) in tx.iter().enumerate() {
                let g = src[oi * ow + oj];
                dst[a.i0 * w + b.i0] += a.w0 * b.w0 * g;
                dst[a.i0 * w + b.i1] += a.w0 * b.w1 * g;
                dst[a.i1 * w + b.i0] += a.w1 * b.w0 * g;
                dst[a.i1 * w + b.i1] += a.w1 * b.w1 * g;
            }
        }
    }
}

/// `[C·r², h, w] → [C, h·r, w·r]`; channel `c·r² + a·r + b` lands at offset `(a, b)` of each block.
pub fn pixel_shuffle<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), r: usize) -> Vec<T> {
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for co in 0..oc {
        for a in 0..r {
            for b in 0..r {
                let ci = co * r * r + a * r + b;
                for i in 0..h {
                    for j in 0..w {
                        out[(co * oh + i * r + a) * ow + j * r + b] = x[(ci * h + i) * w + j];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; `(c, h, w)` describes the shuffled (large) tensor.
pub fn pixel_unshuffle<T: Scalar>(y: &[T], (c, h, w): (usize, usize, usize), r: usize) -> Vec<T> {
    let (ih, iw) = (h / r, w / r);
    let mut out = vec![T::zero(); y.len()];
    for co in 0..c {
        for a in 0..r {
            for b in 0..r {
                let ci = co * r * r + a * r + b;
                for i in 0..ih {
                    for j in 0..iw {
                        out[(ci * ih + i) * iw + j] = y[(co * h + i * r + a) * w + j * r + b];
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let col = im2col(&x, g);
        let y: Vec<f64> = (0..col.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_identity_and_adjoint() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&x, (1, 3, 4), 3, 4), x);
        let up = resize_bilinear(&x, (1, 3, 4), 6, 8);
        let dy: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).cos()).collect();
        let lhs: f64 = up.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 12];
        resize_bilinear_backward(&dy, (1, 3, 4), 6, 8, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let x = vec![2.5f64; 2 * 2 * 2];
        assert!(resize_bilinear(&x, (2, 2, 2), 8, 8)
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn pixel_shuffle_layout_and_inverse() {
        let x: Vec<f64> = (0..16 * 2 * 3).map(|v| v as f64).collect();
        let y = pixel_shuffle(&x, (16, 2, 3), 4);
        // channel 4*r + cc → offset (r, cc) inside each 4x4 block
        for r in 0..4 {
            for cc in 0..4 {
                let ch = 4 * r + cc;
                for i in 0..2 {
                    for j in 0..3 {
                        assert_eq!(y[(i * 4 + r) * 12 + j * 4 + cc], x[(ch * 2 + i) * 3 + j]);
                    }
                }
            }
        }
        assert_eq!(pixel_unshuffle(&y, (1, 8, 12), 4), x);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(-1.0f64) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!(softplus(1000.0f64).is_finite());
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
