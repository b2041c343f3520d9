//! From mask logits to a panoptic map, its quality against ground truth, and
//! a rendered overlay.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PostConfig;
use crate::data::{hsv_to_rgb, PanopticLabel};
use crate::error::{Error, Result};
use crate::kernels::{resize_bilinear, sigmoid};
use crate::tensor::Tensor;

/// Matched segments must overlap by strictly more than this.
pub const MATCH_IOU: f64 = 0.5;
pub const VOID_GRAY: [u8; 3] = [128, 128, 128];

/// A full-resolution thing mask awaiting deduplication and merging.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    pub mask: Vec<bool>,
    pub class_id: i32,
    pub score: f64,
}

impl InstanceCandidate {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub class_id: i32,
    pub is_thing: bool,
    pub score: f64,
}

/// A partition of the image into segments; id 0 is void.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticPrediction {
    pub height: usize,
    pub width: usize,
    pub segment_map: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticPrediction {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            segment_map: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    /// Every non-zero id in the map is listed exactly once, and every listed
    /// segment owns at least one pixel.
    pub fn validate(&self) -> Result<()> {
        if self.segment_map.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "segment map of {} pixels for {}x{}",
                self.segment_map.len(),
                self.height,
                self.width
            )));
        }
        let mut listed = BTreeMap::new();
        for s in &self.segments {
            if s.id == 0 || listed.insert(s.id, 0usize).is_some() {
                return Err(Error::format(
                    "segments",
                    format!("segment id {} is void or repeated", s.id),
                ));
            }
        }
        for &id in &self.segment_map {
            if id != 0 {
                *listed.get_mut(&id).ok_or_else(|| {
                    Error::format("segment_map", format!("id {id} is not listed"))
                })? += 1;
            }
        }
        if let Some((id, _)) = listed.iter().find(|(_, &n)| n == 0) {
            return Err(Error::format(
                "segments",
                format!("segment {id} owns no pixel"),
            ));
        }
        Ok(())
    }
}

/// Thing masks at `height×width` from stride-4 logits `[M, h, w]`: bilinear
/// upsampling, then probability ≥ `threshold`.
pub fn upsample_masks(
    logits: &Tensor<f64>,
    height: usize,
    width: usize,
    threshold: f64,
) -> Vec<Vec<bool>> {
    let (m, h, w) = logits.chw();
    let up = resize_bilinear(logits.data(), (m, h, w), height, width);
    up.chunks(height * width)
        .map(|c| c.iter().map(|&x| sigmoid(x) >= threshold).collect())
        .collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy class-agnostic suppression in descending score order: a candidate
/// is dropped when its IoU with any kept one reaches `threshold`.
pub fn mask_nms(mut candidates: Vec<InstanceCandidate>, threshold: f64) -> Vec<InstanceCandidate> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<InstanceCandidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| iou(&k.mask, &c.mask) < threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Paints instances in the given order onto unclaimed pixels, then fills the
/// rest with the per-pixel best stuff class. `stuff_logits: [N_s, H, W]` at
/// full resolution; channel `c` is class `stuff_classes[c]`.
pub fn panoptic_merge(
    instances: &[InstanceCandidate],
    stuff_logits: &Tensor<f64>,
    stuff_classes: &[i32],
    cfg: &PostConfig,
) -> Result<PanopticPrediction> {
    let (ns, h, w) = stuff_logits.chw();
    if ns != stuff_classes.len() || ns == 0 {
        return Err(Error::Shape(format!(
            "{ns} stuff channels for {} stuff classes",
            stuff_classes.len()
        )));
    }
    let n = h * w;
    let mut pred = PanopticPrediction::empty(h, w);
    let mut next = 1u32;
    for inst in instances {
        if inst.mask.len() != n {
            return Err(Error::Shape(format!(
                "instance mask of {} pixels on a {h}x{w} image",
                inst.mask.len()
            )));
        }
        let original = inst.area();
        let visible: Vec<usize> = (0..n)
            .filter(|&p| inst.mask[p] && pred.segment_map[p] == 0)
            .collect();
        if original == 0
            || visible.len() < cfg.min_thing_area
            || (visible.len() as f64) < cfg.overlap_ratio * original as f64
        {
            continue;
        }
        for &p in &visible {
            pred.segment_map[p] = next;
        }
        pred.segments.push(Segment {
            id: next,
            class_id: inst.class_id,
            is_thing: true,
            score: inst.score,
        });
        next += 1;
    }
    let mut stuff_pixels: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in (0..n).filter(|&p| pred.segment_map[p] == 0) {
        let best = (0..ns).fold(0, |b, c| {
            if stuff_logits.data()[c * n + p] > stuff_logits.data()[b * n + p] {
                c
            } else {
                b
            }
        });
        stuff_pixels.entry(best).or_default().push(p);
    }
    for (c, pixels) in stuff_pixels {
        if pixels.len() < cfg.min_stuff_area {
            continue;
        }
        let mean_prob = {
            let s: f64 = pixels
                .iter()
                .map(|&p| {
                    let col: Vec<f64> = (0..ns).map(|k| stuff_logits.data()[k * n + p]).collect();
                    let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = col.iter().map(|v| (v - mx).exp()).sum();
                    (col[c] - mx).exp() / z
                })
                .sum();
            s / pixels.len() as f64
        };
        for &p in &pixels {
            pred.segment_map[p] = next;
        }
        pred.segments.push(Segment {
            id: next,
            class_id: stuff_classes[c],
            is_thing: false,
            score: mean_prob,
        });
        next += 1;
    }
    Ok(pred)
}

/// Matching counters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: i32,
    pub is_thing: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassRow {
    fn denominator(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn pq(&self) -> f64 {
        let d = self.denominator();
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.denominator();
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub per_class: Vec<ClassRow>,
}

/// Per-class counters summed over images; the report is taken at the end.
#[derive(Debug, Clone, Default)]
pub struct PqAccumulator {
    rows: BTreeMap<i32, ClassRow>,
}

/// One matched pair of ground-truth and predicted segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
}

/// A segment as a class and a pixel set, used by matching.
#[derive(Debug, Clone)]
pub struct SegmentArea {
    pub class_id: i32,
    pub is_thing: bool,
    pub pixels: Vec<usize>,
}

/// Ground-truth segments: one per instance and one per stuff class present.
pub fn gt_segments(gt: &PanopticLabel) -> Vec<SegmentArea> {
    let mut things: BTreeMap<i32, SegmentArea> = BTreeMap::new();
    let mut stuff: BTreeMap<i32, SegmentArea> = BTreeMap::new();
    for (p, (&sem, &inst)) in gt.semantic.iter().zip(&gt.instance).enumerate() {
        if sem < 0 {
            continue;
        }
        let (map, key, thing) = if inst != 0 {
            (&mut things, inst, true)
        } else {
            (&mut stuff, sem, false)
        };
        map.entry(key)
            .or_insert_with(|| SegmentArea {
                class_id: sem,
                is_thing: thing,
                pixels: Vec::new(),
            })
            .pixels
            .push(p);
    }
    things.into_values().chain(stuff.into_values()).collect()
}

pub fn pred_segments(pred: &PanopticPrediction) -> Vec<SegmentArea> {
    let index: BTreeMap<u32, usize> = pred
        .segments
        .iter()
        .enumerate()
        .map(|(k, s)| (s.id, k))
        .collect();
    let mut out: Vec<SegmentArea> = pred
        .segments
        .iter()
        .map(|s| SegmentArea {
            class_id: s.class_id,
            is_thing: s.is_thing,
            pixels: Vec::new(),
        })
        .collect();
    for (p, &id) in pred.segment_map.iter().enumerate() {
        if let Some(&k) = index.get(&id) {
            out[k].pixels.push(p);
        }
    }
    out
}

/// Pairs of same-class segments with IoU above one half. At most one such
/// partner exists per segment, so the greedy scan is already optimal.
/// `void` marks ground-truth void pixels, which are left out of unions.
pub fn match_segments(
    gt: &[SegmentArea],
    pred: &[SegmentArea],
    n: usize,
    void: &[bool],
) -> Vec<Match> {
    let mut owner = vec![usize::MAX; n];
    for (k, s) in gt.iter().enumerate() {
        for &p in &s.pixels {
            owner[p] = k;
        }
    }
    let mut matches = Vec::new();
    for (pk, ps) in pred.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        let mut in_void = 0;
        for &p in &ps.pixels {
            if void.get(p).copied().unwrap_or(false) {
                in_void += 1;
            } else if owner[p] != usize::MAX {
                *inter.entry(owner[p]).or_default() += 1;
            }
        }
        for (gk, i) in inter {
            if gt[gk].class_id != ps.class_id {
                continue;
            }
            let union = gt[gk].pixels.len() + ps.pixels.len() - in_void - i;
            let v = i as f64 / union as f64;
            if v > MATCH_IOU {
                matches.push(Match {
                    gt: gk,
                    pred: pk,
                    iou: v,
                });
            }
        }
    }
    matches
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn row(&mut self, class_id: i32, is_thing: bool) -> &mut ClassRow {
        self.rows.entry(class_id).or_insert(ClassRow {
            class_id,
            is_thing,
            tp: 0,
            fp: 0,
            fn_: 0,
            iou_sum: 0.0,
        })
    }

    pub fn add(&mut self, pred: &PanopticPrediction, gt: &PanopticLabel) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        pred.validate()?;
        let g = gt_segments(gt);
        let p = pred_segments(pred);
        let void: Vec<bool> = gt.semantic.iter().map(|&s| s < 0).collect();
        let matches = match_segments(&g, &p, gt.height * gt.width, &void);
        let mut gt_hit = vec![false; g.len()];
        let mut pred_hit = vec![false; p.len()];
        for m in &matches {
            gt_hit[m.gt] = true;
            pred_hit[m.pred] = true;
            let row = self.row(g[m.gt].class_id, g[m.gt].is_thing);
            row.tp += 1;
            row.iou_sum += m.iou;
        }
        for (s, _) in g.iter().zip(&gt_hit).filter(|(_, &h)| !h) {
            self.row(s.class_id, s.is_thing).fn_ += 1;
        }
        for (s, _) in p.iter().zip(&pred_hit).filter(|(_, &h)| !h) {
            let is_thing = gt
                .class_table
                .iter()
                .find(|c| c.class_id as i32 == s.class_id)
                .map_or(s.is_thing, |c| c.is_thing);
            self.row(s.class_id, is_thing).fp += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> PQReport {
        let rows: Vec<ClassRow> = self
            .rows
            .values()
            .filter(|r| r.tp + r.fp + r.fn_ > 0)
            .cloned()
            .collect();
        let mean = |f: &dyn Fn(&ClassRow) -> f64, keep: &dyn Fn(&ClassRow) -> bool| {
            let sel: Vec<f64> = rows.iter().filter(|r| keep(r)).map(f).collect();
            if sel.is_empty() {
                0.0
            } else {
                sel.iter().sum::<f64>() / sel.len() as f64
            }
        };
        PQReport {
            pq: mean(&ClassRow::pq, &|_| true),
            sq: mean(&ClassRow::sq, &|_| true),
            rq: mean(&ClassRow::rq, &|_| true),
            pq_thing: mean(&ClassRow::pq, &|r| r.is_thing),
            pq_stuff: mean(&ClassRow::pq, &|r| !r.is_thing),
            per_class: rows,
        }
    }
}

/// PQ of a single image.
pub fn pq_evaluate(pred: &PanopticPrediction, gt: &PanopticLabel) -> Result<PQReport> {
    let mut acc = PqAccumulator::new();
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Deterministic overlay colour of a segment id; void is gray.
pub fn segment_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return VOID_GRAY;
    }
    let hue = (id as f64 * 0.618_033_988_749_895).fract();
    let sat = if id.is_multiple_of(2) { 0.65 } else { 0.9 };
    hsv_to_rgb(hue, sat, 0.95).map(|v| (v * 255.0).round() as u8)
}

/// RGB bytes of the image (left) beside the colour-keyed segment overlay (right).
pub fn render_rgb(pred: &PanopticPrediction, image: &[f32]) -> Result<Vec<u8>> {
    let (h, w) = (pred.height, pred.width);
    if image.len() != h * w * 3 || pred.segment_map.len() != h * w {
        return Err(Error::Shape(format!(
            "image of {} values for a {h}x{w} prediction",
            image.len()
        )));
    }
    let mut out = vec![0u8; h * 2 * w * 3];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let px: [f64; 3] = std::array::from_fn(|c| image[p * 3 + c].clamp(0.0, 1.0) as f64);
            let color = segment_color(pred.segment_map[p]);
            for c in 0..3 {
                out[(i * 2 * w + j) * 3 + c] = (px[c] * 255.0).round() as u8;
                let blend = if pred.segment_map[p] == 0 {
                    color[c] as f64
                } else {
                    0.35 * px[c] * 255.0 + 0.65 * color[c] as f64
                };
                out[(i * 2 * w + w + j) * 3 + c] = blend.round() as u8;
            }
        }
    }
    Ok(out)
}

/// Writes [`render_rgb`] as an 8-bit RGB PNG of `2W×H`.
pub fn render(pred: &PanopticPrediction, image: &[f32], path: &Path) -> Result<()> {
    let rgb = render_rgb(pred, image)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        (pred.width * 2) as u32,
        pred.height as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
