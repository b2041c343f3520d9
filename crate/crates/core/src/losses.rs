//! Training objectives.
//!
//! Each loss is a fused tape op: the value and its analytic gradient are
//! computed together in double precision and recorded with [`Graph::loss`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, ModelConfig, Preset};
use crate::data::ContourTarget;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{sigmoid, softplus};
use crate::nn::{Bound, Conv2d, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;
/// Sub-pixel factor of the contour head.
pub const CONTOUR_SHUFFLE: usize = 4;
/// Side of the coarse noise grid used to split instance masks.
pub const SPLIT_GRID: usize = 8;
pub const SPLIT_ATTEMPTS: usize = 8;

fn values<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|x| x.as_f64()).collect()
}

fn record<T: Scalar>(g: &mut Graph<T>, value: f64, inputs: &[Var], grads: Vec<Vec<f64>>) -> Var {
    let grads = grads
        .into_iter()
        .map(|v| v.into_iter().map(T::lit).collect())
        .collect();
    g.loss(T::lit(value), inputs, grads)
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// `1 − 2Σpy / max(Σp² + Σy², ε)`; the floor only matters for empty masks.
pub fn dice(y: &[f64], p: &[f64]) -> Result<f64> {
    Ok(dice_with_grad(y, p)?.0)
}

/// Dice loss and its gradient with respect to `p`.
pub fn dice_with_grad(y: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.len() != p.len() {
        return Err(Error::Shape(format!(
            "dice inputs of {} and {} elements",
            y.len(),
            p.len()
        )));
    }
    let inter: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
    let raw: f64 = p.iter().map(|v| v * v).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>();
    let s = raw.max(DICE_EPS);
    let floored = raw < DICE_EPS;
    let grad = y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            if floored {
                -2.0 * yi / s
            } else {
                -2.0 * (yi * s - inter * 2.0 * pi) / (s * s)
            }
        })
        .collect();
    Ok((1.0 - 2.0 * inter / s, grad))
}

/// Mean dice between each logit map's sigmoid and its binary target.
/// `logits: [M, h, w]`, one target of `h·w` pixels per map; zero when `M = 0`.
pub fn thing_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Option<Var>,
    targets: &[Vec<bool>],
) -> Result<Var> {
    let Some(logits) = logits else {
        return if targets.is_empty() {
            Ok(zero(g))
        } else {
            Err(Error::Shape("targets without logits".into()))
        };
    };
    let (m, h, w) = g.value(logits).chw();
    if targets.len() != m || targets.iter().any(|t| t.len() != h * w) {
        return Err(Error::Shape(format!(
            "{} thing targets for [{m}, {h}, {w}] logits",
            targets.len()
        )));
    }
    let x = values(g, logits);
    let n = h * w;
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (k, t) in targets.iter().enumerate() {
        let p: Vec<f64> = x[k * n..(k + 1) * n].iter().map(|&v| sigmoid(v)).collect();
        let y: Vec<f64> = t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (l, dp) = dice_with_grad(&y, &p)?;
        total += l;
        for i in 0..n {
            grad[k * n + i] = dp[i] * p[i] * (1.0 - p[i]) / m as f64;
        }
    }
    Ok(record(g, total / m as f64, &[logits], vec![grad]))
}

fn softmax_columns(x: &[f64], c: usize, n: usize, i: usize) -> Vec<f64> {
    let mx = (0..c)
        .map(|k| x[k * n + i])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..c).map(|k| (x[k * n + i] - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_stuff(
    g: &Graph<impl Scalar>,
    logits: Var,
    target: &[Option<usize>],
) -> Result<(usize, usize)> {
    let (c, h, w) = g.value(logits).chw();
    if target.len() != h * w {
        return Err(Error::Shape(format!(
            "{} stuff targets for a {h}x{w} grid",
            target.len()
        )));
    }
    if let Some(t) = target.iter().flatten().find(|&&t| t >= c) {
        return Err(Error::Shape(format!(
            "stuff target {t} outside {c} channels"
        )));
    }
    Ok((c, h * w))
}

/// Dice between the stuff softmax and one-hot targets, averaged over the
/// classes present among the target pixels. `None` pixels (things, void) are
/// left out of every sum.
pub fn multi_class_dice<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &[Option<usize>],
) -> Result<Var> {
    let (c, n) = check_stuff(g, logits, target)?;
    let pix: Vec<usize> = (0..n).filter(|&i| target[i].is_some()).collect();
    let mut present = vec![false; c];
    for &i in &pix {
        present[target[i].expect("filtered")] = true;
    }
    let classes: Vec<usize> = (0..c).filter(|&k| present[k]).collect();
    if classes.is_empty() {
        return Ok(zero(g));
    }
    let x = values(g, logits);
    let probs: Vec<Vec<f64>> = pix.iter().map(|&i| softmax_columns(&x, c, n, i)).collect();
    // dL/dp per (class, selected pixel)
    let mut gp = vec![vec![0.0; pix.len()]; c];
    let mut total = 0.0;
    for &k in &classes {
        let y: Vec<f64> = pix
            .iter()
            .map(|&i| if target[i] == Some(k) { 1.0 } else { 0.0 })
            .collect();
        let p: Vec<f64> = probs.iter().map(|pr| pr[k]).collect();
        let (l, dp) = dice_with_grad(&y, &p)?;
        total += l;
        gp[k] = dp.into_iter().map(|v| v / classes.len() as f64).collect();
    }
    let mut grad = vec![0.0; x.len()];
    for (s, &i) in pix.iter().enumerate() {
        let pr = &probs[s];
        let dot: f64 = (0..c).map(|k| gp[k][s] * pr[k]).sum();
        for k in 0..c {
            grad[k * n + i] = pr[k] * (gp[k][s] - dot);
        }
    }
    Ok(record(
        g,
        total / classes.len() as f64,
        &[logits],
        vec![grad],
    ))
}

/// Number of pixels kept by the bootstrapped average.
pub fn topk_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Mean of the largest `⌈ratio·N⌉` per-pixel losses, stable in pixel order on ties.
pub fn topk_mean(losses: &[f64], ratio: f64) -> (f64, Vec<usize>) {
    let k = topk_count(ratio, losses.len());
    if k == 0 {
        return (0.0, Vec::new());
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    order.truncate(k);
    (
        order.iter().map(|&i| losses[i]).sum::<f64>() / k as f64,
        order,
    )
}

/// Softmax cross entropy over stuff channels, averaged over the hardest
/// `⌈ratio·N⌉` of the `N` target pixels.
pub fn bootstrapped_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &[Option<usize>],
    ratio: f64,
) -> Result<Var> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "topk_ratio must be in (0, 1], got {ratio}"
        )));
    }
    let (c, n) = check_stuff(g, logits, target)?;
    let pix: Vec<usize> = (0..n).filter(|&i| target[i].is_some()).collect();
    if pix.is_empty() {
        return Ok(zero(g));
    }
    let x = values(g, logits);
    let probs: Vec<Vec<f64>> = pix.iter().map(|&i| softmax_columns(&x, c, n, i)).collect();
    let losses: Vec<f64> = pix
        .iter()
        .map(|&i| {
            let mx = (0..c)
                .map(|k| x[k * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|k| (x[k * n + i] - mx).exp()).sum::<f64>().ln();
            lse - x[target[i].expect("filtered") * n + i]
        })
        .collect();
    let (value, kept) = topk_mean(&losses, ratio);
    let mut grad = vec![0.0; x.len()];
    let inv = 1.0 / kept.len() as f64;
    for s in kept {
        let i = pix[s];
        let t = target[i].expect("filtered");
        for k in 0..c {
            grad[k * n + i] = (probs[s][k] - if k == t { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(record(g, value, &[logits], vec![grad]))
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let w = (1.0 - p).powf(gamma);
        (
            -alpha * w * log_p,
            alpha * w * (gamma * p * log_p - (1.0 - p)),
        )
    } else {
        let log_q = -softplus(x);
        let w = p.powf(gamma);
        (
            -(1.0 - alpha) * w * log_q,
            (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q),
        )
    }
}

/// Focal loss summed over every level, class and location, divided by the
/// number of positive targets (at least one). Targets are 0/1 and match the
/// logits' shapes.
pub fn focal_cls<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var],
    targets: &[&Tensor<f64>],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let positives = targets
        .iter()
        .map(|t| t.data().iter().filter(|&&v| v > 0.5).count())
        .sum::<usize>();
    let norm = positives.max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&v, t) in logits.iter().zip(targets) {
        if g.shape(v) != t.shape() {
            return Err(Error::Shape(format!(
                "class logits {:?} vs targets {:?}",
                g.shape(v),
                t.shape()
            )));
        }
        let x = values(g, v);
        let mut grad = Vec::with_capacity(x.len());
        for (&xi, &yi) in x.iter().zip(t.data()) {
            let (l, d) = focal_term(xi, yi > 0.5, alpha, gamma);
            total += l;
            grad.push(d / norm);
        }
        grads.push(grad);
    }
    Ok(record(g, total / norm, logits, grads))
}

/// 1×1 convolution to 16 channels, pixel-shuffled into one full-resolution map.
#[derive(Debug, Clone, Copy)]
pub struct ContourHead {
    pub conv: Conv2d,
}

impl ContourHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let r2 = CONTOUR_SHUFFLE * CONTOUR_SHUFFLE;
        let conv = Conv2d::new(store, init, "contour_head", cfg.d_phi, r2, 1, 1, true);
        let prior = T::lit(-(99.0f64).ln());
        store
            .get_mut(conv.bias.expect("bias"))
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        Self { conv }
    }

    /// `[1, 4h, 4w]` logits from `phi: [D_φ, h, w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, phi: Var) -> Var {
        let y = self.conv.forward(g, p, phi);
        g.pixel_shuffle(y, CONTOUR_SHUFFLE)
    }
}

/// Focal loss averaged over every pixel of the contour map.
pub fn contour_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &ContourTarget,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let (c, h, w) = g.value(logits).chw();
    if c != 1 || h != gt.height || w != gt.width {
        return Err(Error::Shape(format!(
            "contour logits [{c}, {h}, {w}] vs a {}x{} target",
            gt.height, gt.width
        )));
    }
    let x = values(g, logits);
    let n = (h * w) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&xi, &yi) in x.iter().zip(&gt.map) {
        let (l, d) = focal_term(xi, yi != 0, alpha, gamma);
        total += l;
        grad.push(d / n);
    }
    Ok(record(g, total / n, &[logits], vec![grad]))
}

/// Partitions a mask into two non-empty halves with coarse random noise,
/// falling back to a random half-plane cut. `None` for masks under two pixels.
pub fn split_mask<R: Rng>(
    mask: &[bool],
    h: usize,
    w: usize,
    rng: &mut R,
) -> Option<(Vec<bool>, Vec<bool>)> {
    assert_eq!(mask.len(), h * w, "mask size");
    let count = mask.iter().filter(|&&m| m).count();
    if count < 2 {
        return None;
    }
    for _ in 0..SPLIT_ATTEMPTS {
        let cells: Vec<bool> = (0..SPLIT_GRID * SPLIT_GRID)
            .map(|_| rng.random_bool(0.5))
            .collect();
        let noise: Vec<bool> = (0..h * w)
            .map(|p| cells[(p / w) * SPLIT_GRID / h * SPLIT_GRID + (p % w) * SPLIT_GRID / w])
            .collect();
        if let Some(halves) = halves(mask, &noise) {
            return Some(halves);
        }
    }
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let mut pixels: Vec<(f64, usize)> = (0..h * w)
        .filter(|&p| mask[p])
        .map(|p| ((p / w) as f64 * s + (p % w) as f64 * c, p))
        .collect();
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut side = vec![false; h * w];
    for &(_, p) in &pixels[..count / 2] {
        side[p] = true;
    }
    halves(mask, &side)
}

fn halves(mask: &[bool], side: &[bool]) -> Option<(Vec<bool>, Vec<bool>)> {
    let a: Vec<bool> = mask.iter().zip(side).map(|(&m, &s)| m && s).collect();
    let b: Vec<bool> = mask.iter().zip(side).map(|(&m, &s)| m && !s).collect();
    (a.contains(&true) && b.contains(&true)).then_some((a, b))
}

/// Masked channel average of φ followed by one shared linear layer.
#[derive(Debug, Clone, Copy)]
pub struct MaskEmbedding {
    pub fc: Linear,
}

impl MaskEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            fc: Linear::new(
                store,
                init,
                "embedding",
                cfg.d_phi,
                cfg.d_emb,
                (1.0 / cfg.d_phi as f64).sqrt(),
            ),
        }
    }

    /// `[1, D_emb]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        phi: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let v = masked_average(g, phi, mask)?;
        Ok(self.fc.forward(g, p, v))
    }
}

/// Per-channel mean of `phi: [C, h, w]` over `mask` → `[1, C]`.
pub fn masked_average<T: Scalar>(g: &mut Graph<T>, phi: Var, mask: &[bool]) -> Result<Var> {
    let (_, h, w) = g.value(phi).chw();
    if mask.len() != h * w {
        return Err(Error::Shape(format!(
            "mask of {} pixels on a {h}x{w} map",
            mask.len()
        )));
    }
    if !mask.contains(&true) {
        return Err(Error::EmptyMask);
    }
    Ok(g.masked_mean(phi, mask))
}

/// For each of `n` instances, a uniformly chosen different instance.
pub fn mine_negatives<R: Rng>(n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|a| {
            let r = rng.random_range(0..n - 1);
            (a, if r >= a { r + 1 } else { r })
        })
        .collect()
}

fn dist_and_unit(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit = if d > 0.0 {
        diff.iter().map(|v| v / d).collect()
    } else {
        vec![0.0; diff.len()]
    };
    (d, unit)
}

/// `−log(e^{−‖a−p‖} / (e^{−‖a−p‖} + e^{−‖a−n‖}))` for plain vectors.
pub fn triplet_value(a: &[f64], p: &[f64], n: &[f64]) -> f64 {
    softplus(dist_and_unit(a, p).0 - dist_and_unit(a, n).0)
}

/// Mean triplet loss over `(anchor, positive, negative)` embeddings; zero when empty.
pub fn intra_triplet<T: Scalar>(g: &mut Graph<T>, triplets: &[(Var, Var, Var)]) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(zero(g));
    }
    let count = triplets.len() as f64;
    let mut inputs = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut total = 0.0;
    for &(va, vp, vn) in triplets {
        let (a, p, n) = (values(g, va), values(g, vp), values(g, vn));
        if a.len() != p.len() || a.len() != n.len() {
            return Err(Error::Shape("triplet embeddings differ in length".into()));
        }
        let (dp, up) = dist_and_unit(&a, &p);
        let (dn, un) = dist_and_unit(&a, &n);
        total += softplus(dp - dn);
        let s = sigmoid(dp - dn) / count;
        grads.push(up.iter().zip(&un).map(|(x, y)| s * (x - y)).collect());
        grads.push(up.iter().map(|x| -s * x).collect());
        grads.push(un.iter().map(|y| s * y).collect());
        inputs.extend([va, vp, vn]);
    }
    // an embedding used in several roles receives the sum of its gradients
    let mut merged_inputs: Vec<Var> = Vec::new();
    let mut merged: Vec<Vec<f64>> = Vec::new();
    for (v, gr) in inputs.into_iter().zip(grads) {
        match merged_inputs.iter().position(|&u| u == v) {
            Some(k) => merged[k].iter_mut().zip(gr).for_each(|(x, y)| *x += y),
            None => {
                merged_inputs.push(v);
                merged.push(gr);
            }
        }
    }
    Ok(record(g, total / count, &merged_inputs, merged))
}

/// Named loss values before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub stuff_ce: f64,
    pub stuff_mcd: f64,
    pub thing_dice: f64,
    pub inter_contour: f64,
    pub intra_triplet: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub sampled_filter_sets: usize,
    pub triplet_sets: usize,
    /// Instances with no positive location on their level.
    pub skipped_instances: usize,
    /// Instances too small to split into two halves.
    pub skipped_splits: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub stuff_ce: f64,
    pub stuff_mcd: f64,
    pub thing_dice: f64,
    pub inter_contour: f64,
    pub intra_triplet: f64,
    pub total: f64,
    pub counts: LossCounts,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            cls: self.cls,
            stuff_ce: self.stuff_ce,
            stuff_mcd: self.stuff_mcd,
            thing_dice: self.thing_dice,
            inter_contour: self.inter_contour,
            intra_triplet: self.intra_triplet,
        }
    }

    /// Averages reports of a batch: loss values are means, counts are sums.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        if reports.is_empty() {
            return out;
        }
        let k = reports.len() as f64;
        for r in reports {
            out.cls += r.cls / k;
            out.stuff_ce += r.stuff_ce / k;
            out.stuff_mcd += r.stuff_mcd / k;
            out.thing_dice += r.thing_dice / k;
            out.inter_contour += r.inter_contour / k;
            out.intra_triplet += r.intra_triplet / k;
            out.total += r.total / k;
            out.counts.sampled_filter_sets += r.counts.sampled_filter_sets;
            out.counts.triplet_sets += r.counts.triplet_sets;
            out.counts.skipped_instances += r.counts.skipped_instances;
            out.counts.skipped_splits += r.counts.skipped_splits;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cls,
            self.stuff_ce,
            self.stuff_mcd,
            self.thing_dice,
            self.inter_contour,
            self.intra_triplet,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `λ0·cls + λ1·(ce + mcd) + λ2·thing + λ3·contour + λ4·triplet`.
pub fn weighted_total(c: &LossComponents, cfg: &LossConfig) -> f64 {
    let l = cfg.lambdas;
    l[0] * c.cls
        + l[1] * (c.stuff_ce + c.stuff_mcd)
        + l[2] * c.thing_dice
        + l[3] * c.inter_contour
        + l[4] * c.intra_triplet
}

pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> LossReport {
    LossReport {
        cls: c.cls,
        stuff_ce: c.stuff_ce,
        stuff_mcd: c.stuff_mcd,
        thing_dice: c.thing_dice,
        inter_contour: c.inter_contour,
        intra_triplet: c.intra_triplet,
        total: weighted_total(c, cfg),
        counts: LossCounts::default(),
    }
}

/// [`total_loss`] with the weights of a named preset.
pub fn total_loss_for_preset(c: &LossComponents, preset: &str) -> Result<LossReport> {
    let preset: Preset = preset.parse()?;
    Ok(total_loss(c, &LossConfig::from_preset(preset)))
}

/// Tape nodes of the six components.
#[derive(Debug, Clone, Copy)]
pub struct ComponentVars {
    pub cls: Var,
    pub stuff_ce: Var,
    pub stuff_mcd: Var,
    pub thing_dice: Var,
    pub inter_contour: Var,
    pub intra_triplet: Var,
}

impl ComponentVars {
    /// The weighted total as a tape node.
    pub fn total<T: Scalar>(&self, g: &mut Graph<T>, cfg: &LossConfig) -> Var {
        let l = cfg.lambdas;
        let terms = [
            (self.cls, l[0]),
            (self.stuff_ce, l[1]),
            (self.stuff_mcd, l[1]),
            (self.thing_dice, l[2]),
            (self.inter_contour, l[3]),
            (self.intra_triplet, l[4]),
        ];
        let terms: Vec<(Var, T)> = terms
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|&(v, w)| (v, T::lit(w)))
            .collect();
        if terms.is_empty() {
            return zero(g);
        }
        g.weighted_sum(&terms)
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossComponents {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossComponents {
            cls: v(self.cls),
            stuff_ce: v(self.stuff_ce),
            stuff_mcd: v(self.stuff_mcd),
            thing_dice: v(self.thing_dice),
            inter_contour: v(self.inter_contour),
            intra_triplet: v(self.intra_triplet),
        }
    }
}
