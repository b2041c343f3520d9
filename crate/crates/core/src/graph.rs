//! Reverse-mode automatic differentiation over `[C, H, W]` feature maps.
//!
//! A [`Graph`] is built per image and per step. Every operation records its
//! inputs together with whatever it needs for the backward pass; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse.
//!
//! Losses are fused: the loss routines in [`crate::losses`] return the value
//! together with analytic input gradients, and [`Graph::loss`] stores both.

use crate::kernels::{self, ConvGeom, GroupNormSaved};
use crate::scalar::{matmul, matmul_at, matmul_bt, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    WeightedSum(Vec<(Var, T)>),
    Relu(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the (larger) output, seen as the input of the adjoint convolution.
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    AvgPool2(Var),
    UpsampleNearest(Var, usize),
    ResizeBilinear(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GatherWindows {
        x: Var,
        locs: Vec<(usize, usize)>,
        k: usize,
    },
    PixelShuffle(Var, usize),
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Loss {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            assert_eq!(self.shape(v), &shape[..], "weighted_sum shape mismatch");
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(out, Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, T::one()), (b, T::one())])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[1] == cin && ws[2] == ws[3],
            "conv2d weight {ws:?} vs input channels {cin}"
        );
        let cout = ws[0];
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let n = oh * ow;
        let kdim = cin * ws[2] * ws[3];
        let col = kernels::im2col(self.value(x).data(), geom);
        let mut out = vec![T::zero(); cout * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), cout);
            for (c, &bv) in bias.iter().enumerate() {
                out[c * n..(c + 1) * n].iter_mut().for_each(|o| *o = bv);
            }
        }
        matmul(
            cout,
            kdim,
            n,
            self.value(w).data(),
            &col,
            &mut out,
            b.is_some(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        let value = Tensor::new(vec![cout, oh, ow], out).expect("conv output shape");
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                col: if ng { col } else { Vec::new() },
            },
            ng,
        )
    }

    /// `x: [Cin, H, W]`, `w: [Cin, Cout, k, k]`; output side `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[0] == cin && ws[2] == ws[3],
            "conv_transpose2d weight {ws:?}"
        );
        let (cout, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let rows = cout * k * k;
        let mut col = vec![T::zero(); rows * h * wd];
        matmul_at(
            rows,
            cin,
            h * wd,
            self.value(w).data(),
            self.value(x).data(),
            &mut col,
            false,
        );
        let mut out = vec![T::zero(); cout * oh * ow];
        kernels::col2im(&col, geom, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for c in 0..cout {
                out[c * oh * ow..(c + 1) * oh * ow]
                    .iter_mut()
                    .for_each(|o| *o += bias[c]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        let value = Tensor::new(vec![cout, oh, ow], out).expect("deconv output shape");
        self.push(value, Op::ConvTranspose { x, w, b, geom }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let dims = self.value(x).chw();
        assert_eq!(
            dims.0 % groups,
            0,
            "channels {} not divisible by {groups} groups",
            dims.0
        );
        let (y, saved) = kernels::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let ng = self.ng(&[x, gamma, beta]);
        let value = Tensor::new(vec![dims.0, dims.1, dims.2], y).expect("gn shape");
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            ng,
        )
    }

    /// 2×2 average pooling with stride 2; `H`, `W` must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even sides, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let out = Tensor::from_fn(&[c, oh, ow], |idx| {
            let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
            let (i, j) = (rem / ow, rem % ow);
            let base = ch * h * w;
            quarter
                * (src[base + 2 * i * w + 2 * j]
                    + src[base + 2 * i * w + 2 * j + 1]
                    + src[base + (2 * i + 1) * w + 2 * j]
                    + src[base + (2 * i + 1) * w + 2 * j + 1])
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::AvgPool2(x), ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let out = Tensor::from_fn(&[c, oh, ow], |idx| {
            let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
            src[(ch * h + (rem / ow) / factor) * w + (rem % ow) / factor]
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::UpsampleNearest(x, factor), ng)
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let dims = self.value(x).chw();
        if (dims.1, dims.2) == (oh, ow) {
            return x;
        }
        let out = kernels::resize_bilinear(self.value(x).data(), dims, oh, ow);
        let ng = self.ng(&[x]);
        let value = Tensor::new(vec![dims.0, oh, ow], out).expect("resize shape");
        self.push(value, Op::ResizeBilinear(x), ng)
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(
                &self.shape(p)[1..],
                &tail[..],
                "concat trailing shape mismatch"
            );
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(parts);
        self.push(
            Tensor::new(shape, data).expect("concat shape"),
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            start <= end && end <= shape[0],
            "slice {start}..{end} of {shape:?}"
        );
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(out_shape, data).expect("slice shape"),
            Op::Slice { x, start },
            ng,
        )
    }

    /// Columns `start..end` of a `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() == 2 && start <= end && end <= shape[1]);
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let width = end - start;
        let data: Vec<T> = (0..n)
            .flat_map(|r| src[r * d + start..r * d + end].iter().copied())
            .collect();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![n, width], data).expect("slice_cols"),
            Op::SliceCols { x, start },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape numel");
        let ng = self.ng(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Gathers leading-axis rows in the given order (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < shape[0], "row {r} out of {}", shape[0]);
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(&[x]);
        let value = Tensor::new(out_shape, data).expect("select_rows");
        self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear {xs:?} x {ws:?}"
        );
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..n {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        matmul_bt(
            n,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            b.is_some(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        self.push(
            Tensor::new(vec![n, dout], out).expect("linear"),
            Op::Linear { x, w, b },
            ng,
        )
    }

    /// Zero-padded `k×k` windows of `x: [C, H, W]` centred at each location,
    /// flattened window-row-major with channels innermost → `[M, k·k·C]`.
    pub fn gather_windows(&mut self, x: Var, locs: &[(usize, usize)], k: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(k % 2 == 1, "window size must be odd");
        let r = (k / 2) as isize;
        let src = self.value(x).data();
        let width = k * k * c;
        let mut data = vec![T::zero(); locs.len() * width];
        for (m, &(i, j)) in locs.iter().enumerate() {
            assert!(i < h && j < w, "window centre out of bounds");
            for di in 0..k {
                for dj in 0..k {
                    let ii = i as isize + di as isize - r;
                    let jj = j as isize + dj as isize - r;
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let base = m * width + (di * k + dj) * c;
                    for ch in 0..c {
                        data[base + ch] = src[(ch * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        let value = Tensor::new(vec![locs.len(), width], data).expect("gather");
        self.push(
            value,
            Op::GatherWindows {
                x,
                locs: locs.to_vec(),
                k,
            },
            ng,
        )
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(c % (r * r), 0, "pixel_shuffle channels");
        let out = kernels::pixel_shuffle(self.value(x).data(), (c, h, w), r);
        let ng = self.ng(&[x]);
        let value = Tensor::new(vec![c / (r * r), h * r, w * r], out).expect("shuffle");
        self.push(value, Op::PixelShuffle(x, r), ng)
    }

    /// Per-channel mean of `x: [C, H, W]` over the pixels where `mask` is set → `[1, C]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(mask.len(), h * w, "mask size");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_mean over an empty mask");
        let src = self.value(x).data();
        let inv = T::one() / T::lit(count as f64);
        let data: Vec<T> = (0..c)
            .map(|ch| {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                plane
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .sum::<T>()
                    * inv
            })
            .collect();
        let ng = self.ng(&[x]);
        let value = Tensor::new(vec![1, c], data).expect("masked mean");
        self.push(
            value,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            ng,
        )
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn loss(&mut self, value: T, inputs: &[Var], grads: Vec<Vec<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).numel(), g.len(), "loss gradient size");
        }
        let ng = self.ng(inputs);
        self.push(
            Tensor::scalar(value),
            Op::Loss {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        )
    }

    /// Backpropagates from a single-element node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            // keep grads of intermediate nodes out of memory, leaves keep theirs
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, &x)| *e += x),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.acc_with(grads, v, |g| {
                        g.iter_mut().zip(gy).for_each(|(o, &d)| *o += c * d)
                    });
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                self.acc_with(grads, *x, |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(y) {
                        if v > T::zero() {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc_with(grads, *x, |g| {
                    for ((o, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                        *o += d * s * (T::one() - s);
                    }
                });
            }
            Op::Conv { x, w, b, geom, col } => {
                let cout = node.value.shape()[0];
                let (oh, ow) = geom.out_hw();
                let n = oh * ow;
                let kdim = geom.channels * geom.kernel * geom.kernel;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |g| {
                        for c in 0..cout {
                            g[c] += gy[c * n..(c + 1) * n].iter().copied().sum::<T>();
                        }
                    });
                }
                self.acc_with(grads, *w, |g| matmul_bt(cout, n, kdim, gy, col, g, true));
                if self.nodes[x.0].needs_grad {
                    let mut dcol = vec![T::zero(); kdim * n];
                    matmul_at(kdim, cout, n, self.value(*w).data(), gy, &mut dcol, false);
                    self.acc_with(grads, *x, |g| kernels::col2im(&dcol, *geom, g));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (cin, h, wd) = self.value(*x).chw();
                let cout = geom.channels;
                let rows = cout * geom.kernel * geom.kernel;
                let plane = geom.height * geom.width;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |g| {
                        for c in 0..cout {
                            g[c] += gy[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
                        }
                    });
                }
                let dcol = kernels::im2col(gy, *geom);
                self.acc_with(grads, *w, |g| {
                    matmul_bt(cin, h * wd, rows, self.value(*x).data(), &dcol, g, true)
                });
                self.acc_with(grads, *x, |g| {
                    matmul(cin, rows, h * wd, self.value(*w).data(), &dcol, g, true)
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let dims = node.value.chw();
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    gy,
                    dims,
                    *groups,
                    self.value(*gamma).data(),
                    saved,
                );
                self.acc(grads, *x, &dx);
                self.acc(grads, *gamma, &dgamma);
                self.acc(grads, *beta, &dbeta);
            }
            Op::AvgPool2(x) => {
                let (_, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let quarter = T::lit(0.25);
                self.acc_with(grads, *x, |g| {
                    for (idx, o) in g.iter_mut().enumerate() {
                        let (ch, rem) = (idx / (h * w), idx % (h * w));
                        let (i, j) = (rem / w, rem % w);
                        *o += quarter * gy[(ch * oh + i / 2) * ow + j / 2];
                    }
                });
            }
            Op::UpsampleNearest(x, factor) => {
                let (_, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                self.acc_with(grads, *x, |g| {
                    for (idx, &d) in gy.iter().enumerate() {
                        let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
                        g[(ch * h + (rem / ow) / factor) * w + (rem % ow) / factor] += d;
                    }
                });
            }
            Op::ResizeBilinear(x) => {
                let dims = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                self.acc_with(grads, *x, |g| {
                    kernels::resize_bilinear_backward(gy, dims, oh, ow, g)
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, &gy[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let off = start * inner;
                self.acc_with(grads, *x, |g| {
                    g[off..off + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(o, &d)| *o += d)
                });
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let (n, width) = (node.value.shape()[0], node.value.shape()[1]);
                self.acc_with(grads, *x, |g| {
                    for r in 0..n {
                        for c in 0..width {
                            g[r * d + start + c] += gy[r * width + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, gy),
            Op::SelectRows { x, rows } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                self.acc_with(grads, *x, |g| {
                    for (o, &r) in rows.iter().enumerate() {
                        g[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&gy[o * inner..(o + 1) * inner])
                            .for_each(|(a, &d)| *a += d);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if let Some(b) = b {
                    self.acc_with(grads, *b, |g| {
                        for r in 0..n {
                            g.iter_mut()
                                .zip(&gy[r * dout..(r + 1) * dout])
                                .for_each(|(o, &d)| *o += d);
                        }
                    });
                }
                self.acc_with(grads, *w, |g| {
                    matmul_at(dout, n, din, gy, self.value(*x).data(), g, true)
                });
                self.acc_with(grads, *x, |g| {
                    matmul(n, dout, din, gy, self.value(*w).data(), g, true)
                });
            }
            Op::GatherWindows { x, locs, k } => {
                let (c, h, w) = self.value(*x).chw();
                let r = (*k / 2) as isize;
                let width = k * k * c;
                self.acc_with(grads, *x, |g| {
                    for (m, &(i, j)) in locs.iter().enumerate() {
                        for di in 0..*k {
                            for dj in 0..*k {
                                let ii = i as isize + di as isize - r;
                                let jj = j as isize + dj as isize - r;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let base = m * width + (di * k + dj) * c;
                                for ch in 0..c {
                                    g[(ch * h + ii as usize) * w + jj as usize] += gy[base + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::PixelShuffle(x, r) => {
                let dims = node.value.chw();
                let back = kernels::pixel_unshuffle(gy, dims, *r);
                self.acc(grads, *x, &back);
            }
            Op::MaskedMean { x, mask, count } => {
                let (_, h, w) = self.value(*x).chw();
                let inv = T::one() / T::lit(*count as f64);
                self.acc_with(grads, *x, |g| {
                    for (ch, &d) in gy.iter().enumerate() {
                        let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                        for (o, &m) in plane.iter_mut().zip(mask) {
                            if m {
                                *o += d * inv;
                            }
                        }
                    }
                });
            }
            Op::Loss {
                inputs,
                grads: local,
            } => {
                let up = gy[0];
                for (&v, lg) in inputs.iter().zip(local) {
                    self.acc_with(grads, v, |g| {
                        g.iter_mut().zip(lg).for_each(|(o, &d)| *o += up * d)
                    });
                }
            }
        }
    }
}
