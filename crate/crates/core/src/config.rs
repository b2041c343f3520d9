//! Run configuration: a flat JSON object with preset expansion.
//!
//! Resolution order is built-in defaults, then the preset, then the file,
//! then command-line overrides. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Pyramid levels. `P2` and `P3` share stride 8 because `P2` is built from a
/// spatially halved `C2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::P2, Level::P3, Level::P4, Level::P5, Level::P6];

    pub fn stride(self) -> usize {
        match self {
            Level::P2 | Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
            Level::P6 => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::P2 => "P2",
            Level::P3 => "P3",
            Level::P4 => "P4",
            Level::P5 => "P5",
            Level::P6 => "P6",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether thing and stuff masks share one generated feature map or each get their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    #[default]
    Integrated,
    Separated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Cityscapes,
    Coco,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cityscapes" | "cityscapes-style" => Ok(Preset::Cityscapes),
            "coco" | "coco-style" => Ok(Preset::Coco),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

/// Architecture hyper-parameters. Class counts come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_things: usize,
    pub num_stuff: usize,
    pub backbone_widths: Vec<usize>,
    pub fpn_channels: usize,
    pub include_p6: bool,
    pub kernel_k: usize,
    pub d_f: usize,
    pub d_phi: usize,
    pub filter_levels: Vec<Level>,
    pub generator_internal_channels: usize,
    pub d_emb: usize,
    pub gn_groups: usize,
    pub pathway: Pathway,
}

impl ModelConfig {
    /// Defaults at the given class counts.
    pub fn new(num_things: usize, num_stuff: usize) -> Self {
        Self {
            num_things,
            num_stuff,
            backbone_widths: vec![32, 64, 128, 256],
            fpn_channels: 64,
            include_p6: false,
            kernel_k: 1,
            d_f: 16,
            d_phi: 16,
            filter_levels: vec![Level::P2, Level::P3, Level::P4, Level::P5],
            generator_internal_channels: 64,
            d_emb: 32,
            gn_groups: 8,
            pathway: Pathway::Integrated,
        }
    }

    /// Length of one dynamic or learned filter.
    pub fn filter_len(&self) -> usize {
        self.kernel_k * self.kernel_k * self.d_phi
    }

    /// Length of one pooled filter-head window.
    pub fn raw_filter_len(&self) -> usize {
        self.kernel_k * self.kernel_k * self.d_f
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_things == 0 || self.num_stuff == 0 {
            return bad("num_things and num_stuff must be at least 1".into());
        }
        if self.backbone_widths.len() != 4 || self.backbone_widths.contains(&0) {
            return bad(format!(
                "backbone_widths must hold 4 positive widths, got {:?}",
                self.backbone_widths
            ));
        }
        if self.kernel_k.is_multiple_of(2) {
            return bad(format!("kernel_k must be odd, got {}", self.kernel_k));
        }
        for (name, v) in [
            ("fpn_channels", self.fpn_channels),
            ("d_f", self.d_f),
            ("d_phi", self.d_phi),
            (
                "generator_internal_channels",
                self.generator_internal_channels,
            ),
            ("d_emb", self.d_emb),
            ("gn_groups", self.gn_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.filter_levels.is_empty() {
            return bad("filter_levels must not be empty".into());
        }
        if self.filter_levels.contains(&Level::P6) && !self.include_p6 {
            return bad("filter_levels contains P6 but include_p6 is false".into());
        }
        let mut sorted = self.filter_levels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.filter_levels.len() {
            return bad("filter_levels has duplicates".into());
        }
        Ok(())
    }
}

/// Loss weights and loss hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// `(cls, stuff, thing, contour, triplet)`.
    pub lambdas: [f64; 5],
    pub topk_ratio: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl LossConfig {
    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::Cityscapes | Preset::Custom => Self {
                lambdas: [1.0, 1.0, 5.0, 20.0, 1.0],
                topk_ratio: 0.2,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
            },
            Preset::Coco => Self {
                lambdas: [1.0, 0.5, 3.0, 0.0, 1.0],
                topk_ratio: 1.0,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
            },
        }
    }
}

/// Inference sampling and merge thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub mask_threshold: f64,
    pub min_thing_area: usize,
    pub min_stuff_area: usize,
    pub overlap_ratio: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.45,
            nms_threshold: 0.6,
            mask_threshold: 0.5,
            min_thing_area: 16,
            min_stuff_area: 64,
            overlap_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub samples_per_instance: usize,
    /// Iterations over which the bootstrapped fraction falls linearly from
    /// 1 to `topk_ratio`; 0 applies `topk_ratio` from the start.
    pub topk_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            base_lr: 0.01,
            lr_decay_steps: vec![800, 900],
            decay_factor: 0.1,
            seed: 0,
            checkpoint_every: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            samples_per_instance: 4,
            topk_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        // written negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive".into());
        }
        if self.lr_decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_decay_steps must be strictly increasing: {:?}",
                self.lr_decay_steps
            ));
        }
        if self
            .lr_decay_steps
            .last()
            .is_some_and(|&s| s >= self.iterations)
        {
            return bad("lr_decay_steps must be below iterations".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            ));
        }
        if self.samples_per_instance == 0 {
            return bad("samples_per_instance must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self
            .lr_decay_steps
            .iter()
            .filter(|&&s| iteration >= s)
            .count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }

    /// Bootstrapped fraction in effect at a 0-based iteration.
    pub fn topk_ratio_at(&self, target: f64, iteration: usize) -> f64 {
        if iteration >= self.topk_warmup {
            return target;
        }
        1.0 - (1.0 - target) * iteration as f64 / self.topk_warmup as f64
    }
}

/// Every configurable key of a run, flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(alias = "loss_preset")]
    pub preset: Preset,
    pub data: String,
    pub out: String,

    pub backbone_widths: Vec<usize>,
    pub fpn_channels: usize,
    pub include_p6: bool,
    pub kernel_k: usize,
    pub d_f: usize,
    pub d_phi: usize,
    pub filter_levels: Vec<Level>,
    pub generator_internal_channels: usize,
    pub d_emb: usize,
    pub gn_groups: usize,
    pub pathway: Pathway,
    pub samples_per_instance: usize,

    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub topk_ratio: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,

    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub mask_threshold: f64,
    pub min_thing_area: usize,
    pub min_stuff_area: usize,
    pub overlap_ratio: f64,

    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub topk_warmup: usize,
}

/// Keys that have no default and must come from the file or the command line.
pub const REQUIRED_KEYS: [&str; 2] = ["data", "out"];

impl RunConfig {
    /// Default values for every key except [`REQUIRED_KEYS`], after applying `preset`.
    pub fn preset_values(preset: Preset) -> Map<String, Value> {
        let model = ModelConfig::new(1, 1);
        let losses = LossConfig::from_preset(preset);
        let post = PostConfig::default();
        let train = TrainConfig::default();
        let (include_p6, levels) = match preset {
            Preset::Coco => (true, vec!["P2", "P3", "P4", "P5", "P6"]),
            _ => (false, vec!["P2", "P3", "P4", "P5"]),
        };
        let v = json!({
            "preset": preset,
            "backbone_widths": model.backbone_widths,
            "fpn_channels": model.fpn_channels,
            "include_p6": include_p6,
            "kernel_k": model.kernel_k,
            "d_f": model.d_f,
            "d_phi": model.d_phi,
            "filter_levels": levels,
            "generator_internal_channels": model.generator_internal_channels,
            "d_emb": model.d_emb,
            "gn_groups": model.gn_groups,
            "pathway": model.pathway,
            "samples_per_instance": train.samples_per_instance,
            "lambda0": losses.lambdas[0],
            "lambda1": losses.lambdas[1],
            "lambda2": losses.lambdas[2],
            "lambda3": losses.lambdas[3],
            "lambda4": losses.lambdas[4],
            "topk_ratio": losses.topk_ratio,
            "focal_alpha": losses.focal_alpha,
            "focal_gamma": losses.focal_gamma,
            "score_threshold": post.score_threshold,
            "nms_threshold": post.nms_threshold,
            "mask_threshold": post.mask_threshold,
            "min_thing_area": post.min_thing_area,
            "min_stuff_area": post.min_stuff_area,
            "overlap_ratio": post.overlap_ratio,
            "iterations": train.iterations,
            "batch_size": train.batch_size,
            "base_lr": train.base_lr,
            "lr_decay_steps": train.lr_decay_steps,
            "decay_factor": train.decay_factor,
            "seed": train.seed,
            "checkpoint_every": train.checkpoint_every,
            "momentum": train.momentum,
            "weight_decay": train.weight_decay,
            "clip_norm": train.clip_norm,
            "topk_warmup": train.topk_warmup,
        });
        match v {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Resolves a flat JSON object plus overrides into a validated config.
    pub fn resolve(file: &Map<String, Value>, overrides: &Map<String, Value>) -> Result<Self> {
        let known = Self::known_keys();
        for key in file.keys().chain(overrides.keys()) {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let preset_value = overrides
            .get("preset")
            .or_else(|| overrides.get("loss_preset"))
            .or_else(|| file.get("preset"))
            .or_else(|| file.get("loss_preset"));
        let preset = match preset_value {
            None => Preset::Custom,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => {
                return Err(Error::Config(format!(
                    "preset must be a string, got {other}"
                )))
            }
        };
        let mut merged = Self::preset_values(preset);
        for (k, v) in file.iter().chain(overrides.iter()) {
            let key = if k == "loss_preset" {
                "preset".to_string()
            } else {
                k.clone()
            };
            merged.insert(key, v.clone());
        }
        for key in REQUIRED_KEYS {
            if !merged.contains_key(key) {
                return Err(Error::Config(format!("missing key `{key}`")));
            }
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &Map<String, Value>) -> Result<Self> {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        match v {
            Value::Object(m) => Self::resolve(&m, overrides),
            _ => Err(Error::Config("config must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path, overrides: &Map<String, Value>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = vec![
            "preset",
            "loss_preset",
            "data",
            "out",
            "backbone_widths",
            "fpn_channels",
            "include_p6",
            "kernel_k",
            "d_f",
            "d_phi",
            "filter_levels",
            "generator_internal_channels",
            "d_emb",
            "gn_groups",
            "pathway",
            "samples_per_instance",
            "topk_ratio",
            "focal_alpha",
            "focal_gamma",
            "score_threshold",
            "nms_threshold",
            "mask_threshold",
            "min_thing_area",
            "min_stuff_area",
            "overlap_ratio",
            "iterations",
            "batch_size",
            "base_lr",
            "lr_decay_steps",
            "decay_factor",
            "seed",
            "checkpoint_every",
            "momentum",
            "weight_decay",
            "clip_norm",
            "topk_warmup",
        ];
        keys.extend(["lambda0", "lambda1", "lambda2", "lambda3", "lambda4"]);
        keys
    }

    pub fn model(&self, num_things: usize, num_stuff: usize) -> ModelConfig {
        ModelConfig {
            num_things,
            num_stuff,
            backbone_widths: self.backbone_widths.clone(),
            fpn_channels: self.fpn_channels,
            include_p6: self.include_p6,
            kernel_k: self.kernel_k,
            d_f: self.d_f,
            d_phi: self.d_phi,
            filter_levels: self.filter_levels.clone(),
            generator_internal_channels: self.generator_internal_channels,
            d_emb: self.d_emb,
            gn_groups: self.gn_groups,
            pathway: self.pathway,
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            lambdas: [
                self.lambda0,
                self.lambda1,
                self.lambda2,
                self.lambda3,
                self.lambda4,
            ],
            topk_ratio: self.topk_ratio,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn post(&self) -> PostConfig {
        PostConfig {
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            mask_threshold: self.mask_threshold,
            min_thing_area: self.min_thing_area,
            min_stuff_area: self.min_stuff_area,
            overlap_ratio: self.overlap_ratio,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_decay_steps: self.lr_decay_steps.clone(),
            decay_factor: self.decay_factor,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            samples_per_instance: self.samples_per_instance,
            topk_warmup: self.topk_warmup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(1, 1).validate()?;
        self.train().validate()?;
        let l = self.losses();
        if l.lambdas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "lambda weights must be finite and non-negative: {:?}",
                l.lambdas
            )));
        }
        if !(l.topk_ratio > 0.0 && l.topk_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "topk_ratio must lie in (0, 1], got {}",
                l.topk_ratio
            )));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score_threshold must lie in (0, 1), got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }
}
