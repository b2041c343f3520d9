//! The full network: training forward pass with every loss, and inference to
//! a panoptic prediction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig, Pathway, PostConfig};
use crate::data::{
    contour_ground_truth, downsample_labels, ClassInfo, ContourTarget, PanopticLabel,
};
use crate::error::{Error, Result};
use crate::fpn::{Backbone, FeaturePyramid, Fpn};
use crate::generator::{PanopticFeatureGenerator, OUTPUT_STRIDE};
use crate::graph::{Graph, Var};
use crate::head::{MaskLogits, StuffFilterBank};
use crate::losses::{self, ComponentVars, ContourHead, LossCounts, LossReport, MaskEmbedding};
use crate::nn::{Bound, Init, ParamStore};
use crate::postprocess::{
    mask_nms, panoptic_merge, upsample_masks, InstanceCandidate, PanopticPrediction,
};
use crate::sampler::{
    assign_and_sample_train, sample_inference, score_maps, FilterSampler, HeadOutputs,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Targets derived once per image.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    /// Stride-4 grid size.
    pub grid: (usize, usize),
    /// Stride-4 instance map.
    pub instance: Vec<i32>,
    /// Stuff channel per stride-4 pixel; `None` on things.
    pub stuff: Vec<Option<usize>>,
    pub contour: ContourTarget,
}

impl ImageTargets {
    pub fn new(label: &PanopticLabel) -> Self {
        let (h, w, sem, inst) = downsample_labels(label, OUTPUT_STRIDE);
        let stuff_ids = label.classes(false);
        let stuff = sem
            .iter()
            .zip(&inst)
            .map(|(&s, &i)| {
                if i == 0 {
                    stuff_ids.iter().position(|&c| c == s)
                } else {
                    None
                }
            })
            .collect();
        Self {
            grid: (h, w),
            instance: inst,
            stuff,
            contour: contour_ground_truth(label),
        }
    }

    pub fn instance_mask(&self, inst: i32) -> Vec<bool> {
        self.instance.iter().map(|&v| v == inst).collect()
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Features {
    pub pyramid: FeaturePyramid,
    pub heads: HeadOutputs,
    /// Feature map used by the thing filters (and the auxiliary heads).
    pub phi: Var,
    /// Feature map used by the stuff filters; equals `phi` when integrated.
    pub phi_stuff: Var,
    /// Stride-8 map before the transposed convolution.
    pub merged: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub classes: Vec<ClassInfo>,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub sampler: FilterSampler,
    pub generator: PanopticFeatureGenerator,
    pub stuff_generator: Option<PanopticFeatureGenerator>,
    pub stuff_bank: StuffFilterBank,
    pub contour: ContourHead,
    pub embedding: MaskEmbedding,
}

/// Image `[3, H, W]` scaled to `[-1, 1]`.
pub fn image_tensor<T: Scalar>(label: &PanopticLabel) -> Tensor<T> {
    let (h, w) = (label.height, label.width);
    Tensor::from_fn(&[3, h, w], |n| {
        let (c, p) = (n / (h * w), n % (h * w));
        T::lit(2.0 * label.image[p * 3 + c] as f64 - 1.0)
    })
}

impl<T: Scalar> Model<T> {
    /// Seeded initialisation. `classes` must hold `num_things` thing and
    /// `num_stuff` stuff classes.
    pub fn new(cfg: ModelConfig, classes: Vec<ClassInfo>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let things = classes.iter().filter(|c| c.is_thing).count();
        if things != cfg.num_things || classes.len() - things != cfg.num_stuff {
            return Err(Error::Config(format!(
                "class table has {things} thing and {} stuff classes, model expects {} and {}",
                classes.len() - things,
                cfg.num_things,
                cfg.num_stuff
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &mut init, &cfg);
        let fpn = Fpn::new(&mut params, &mut init, &cfg);
        let sampler = FilterSampler::new(&mut params, &mut init, &cfg);
        let (generator, stuff_generator) = match cfg.pathway {
            Pathway::Integrated => (
                PanopticFeatureGenerator::new(&mut params, &mut init, &cfg, "generator"),
                None,
            ),
            Pathway::Separated => (
                PanopticFeatureGenerator::new(&mut params, &mut init, &cfg, "generator_thing"),
                Some(PanopticFeatureGenerator::new(
                    &mut params,
                    &mut init,
                    &cfg,
                    "generator_stuff",
                )),
            ),
        };
        let stuff_bank = StuffFilterBank::new(&mut params, &mut init, &cfg, "stuff_filters");
        let contour = ContourHead::new(&mut params, &mut init, &cfg);
        let embedding = MaskEmbedding::new(&mut params, &mut init, &cfg);
        Ok(Self {
            cfg,
            classes,
            params,
            backbone,
            fpn,
            sampler,
            generator,
            stuff_generator,
            stuff_bank,
            contour,
            embedding,
        })
    }

    fn label_for(&self) -> PanopticLabel {
        PanopticLabel {
            height: 0,
            width: 0,
            semantic: Vec::new(),
            instance: Vec::new(),
            class_table: self.classes.clone(),
            image: Vec::new(),
        }
    }

    pub fn thing_classes(&self) -> Vec<i32> {
        self.label_for().classes(true)
    }

    pub fn stuff_classes(&self) -> Vec<i32> {
        self.label_for().classes(false)
    }

    /// Checks that a label fits this model.
    pub fn check_label(&self, label: &PanopticLabel) -> Result<()> {
        let mut mine = self.classes.clone();
        let mut theirs = label.class_table.clone();
        mine.sort_by_key(|c| c.class_id);
        theirs.sort_by_key(|c| c.class_id);
        if mine != theirs {
            return Err(Error::Config(
                "label class table differs from the model's".into(),
            ));
        }
        if !label.height.is_multiple_of(32)
            || !label.width.is_multiple_of(32)
            || label.height == 0
            || label.width == 0
        {
            return Err(Error::Shape(format!(
                "image {}x{} is not a positive multiple of 32",
                label.height, label.width
            )));
        }
        Ok(())
    }

    pub fn features(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Features> {
        let c = self.backbone.forward(g, p, image)?;
        let pyramid = self.fpn.forward(g, p, &c);
        let heads = self.sampler.heads(g, p, &pyramid)?;
        let out = self.generator.forward(g, p, &pyramid)?;
        let phi_stuff = match &self.stuff_generator {
            Some(gen) => gen.forward(g, p, &pyramid)?.phi,
            None => out.phi,
        };
        Ok(Features {
            pyramid,
            heads,
            phi: out.phi,
            phi_stuff,
            merged: out.internal,
        })
    }

    fn mask_logits(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f: &Features,
        things: Option<Var>,
    ) -> Result<MaskLogits> {
        let k = self.cfg.kernel_k;
        let out = self.stuff_bank.apply(g, p, f.phi, things, k)?;
        if self.stuff_generator.is_none() {
            return Ok(out);
        }
        let stuff = self.stuff_bank.apply(g, p, f.phi_stuff, None, k)?.stuff;
        Ok(MaskLogits {
            things: out.things,
            stuff,
        })
    }

    /// Builds the training graph of one image and returns the weighted total
    /// loss node with its report.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss<R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        label: &PanopticLabel,
        targets: &ImageTargets,
        losses_cfg: &LossConfig,
        samples_per_instance: usize,
        rng: &mut R,
    ) -> Result<(Var, LossReport)> {
        let image = g.constant(image_tensor(label));
        let f = self.features(g, p, image)?;
        let grids: Vec<_> = f
            .heads
            .class_logits
            .iter()
            .map(|(l, v)| {
                let (_, h, w) = g.value(*v).chw();
                (*l, h, w)
            })
            .collect();
        let sample = assign_and_sample_train(
            label,
            &grids,
            self.cfg.num_things,
            samples_per_instance,
            rng,
        )?;
        let (alpha, gamma) = (losses_cfg.focal_alpha, losses_cfg.focal_gamma);

        let logit_vars: Vec<Var> = f.heads.class_logits.iter().map(|(_, v)| *v).collect();
        let target_refs: Vec<&Tensor<f64>> = sample.class_targets.iter().map(|(_, t)| t).collect();
        let cls = losses::focal_cls(g, &logit_vars, &target_refs, alpha, gamma)?;

        let thing_targets: Vec<Vec<bool>> = sample
            .entries
            .iter()
            .map(|e| targets.instance_mask(e.instance))
            .collect();
        let set = self
            .sampler
            .dynamic_filters(g, p, &f.heads.filter_maps, sample.entries)?;
        let logits = self.mask_logits(g, p, &f, set.filters)?;
        let thing_dice = losses::thing_loss(g, logits.things, &thing_targets)?;
        let stuff_ce =
            losses::bootstrapped_ce(g, logits.stuff, &targets.stuff, losses_cfg.topk_ratio)?;
        let stuff_mcd = losses::multi_class_dice(g, logits.stuff, &targets.stuff)?;

        let contour_logits = self.contour.forward(g, p, f.phi);
        let inter_contour =
            losses::contour_loss(g, contour_logits, &targets.contour, alpha, gamma)?;

        let (gh, gw) = targets.grid;
        let mut halves = Vec::new();
        let mut skipped_splits = 0;
        for (inst, _) in label.instances() {
            let mask = targets.instance_mask(inst);
            match losses::split_mask(&mask, gh, gw, rng) {
                Some(pair) => halves.push(pair),
                None => skipped_splits += 1,
            }
        }
        let pairs = losses::mine_negatives(halves.len(), rng);
        let mut embeds: Vec<Option<(Var, Var)>> = vec![None; halves.len()];
        let mut triplets = Vec::with_capacity(pairs.len());
        for &(a, n) in &pairs {
            for k in [a, n] {
                if embeds[k].is_none() {
                    let ea = self.embedding.forward(g, p, f.phi, &halves[k].0)?;
                    let eb = self.embedding.forward(g, p, f.phi, &halves[k].1)?;
                    embeds[k] = Some((ea, eb));
                }
            }
            let (va, vp) = embeds[a].expect("embedded");
            let (vn, _) = embeds[n].expect("embedded");
            triplets.push((va, vp, vn));
        }
        let intra_triplet = losses::intra_triplet(g, &triplets)?;

        let comps = ComponentVars {
            cls,
            stuff_ce,
            stuff_mcd,
            thing_dice,
            inter_contour,
            intra_triplet,
        };
        let total = comps.total(g, losses_cfg);
        let mut report = losses::total_loss(&comps.values(g), losses_cfg);
        report.counts = LossCounts {
            sampled_filter_sets: thing_targets.len(),
            triplet_sets: triplets.len(),
            skipped_instances: sample.assignment.skipped.len(),
            skipped_splits,
        };
        Ok((total, report))
    }

    /// Full inference: sampling, single-shot masks, suppression and merge.
    pub fn predict(&self, label: &PanopticLabel, post: &PostConfig) -> Result<PanopticPrediction> {
        let (h, w) = (label.height, label.width);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let image = g.constant(image_tensor(label));
        let f = self.features(&mut g, &p, image)?;
        let entries =
            sample_inference(&score_maps(&g, &f.heads.class_logits), post.score_threshold);
        let set = self
            .sampler
            .dynamic_filters(&mut g, &p, &f.heads.filter_maps, entries)?;
        let logits = self.mask_logits(&mut g, &p, &f, set.filters)?;
        let thing_ids = self.thing_classes();
        let mut candidates = Vec::new();
        if let Some(t) = logits.things {
            let masks = upsample_masks(&g.value(t).cast::<f64>(), h, w, post.mask_threshold);
            for (mask, e) in masks.into_iter().zip(&set.entries) {
                if mask.contains(&true) {
                    candidates.push(InstanceCandidate {
                        mask,
                        class_id: thing_ids[e.class],
                        score: e.score,
                    });
                }
            }
        }
        let kept = mask_nms(candidates, post.nms_threshold);
        let stuff = g.value(logits.stuff).cast::<f64>();
        let (ns, sh, sw) = stuff.chw();
        let up = Tensor::new(
            vec![ns, h, w],
            crate::kernels::resize_bilinear(stuff.data(), (ns, sh, sw), h, w),
        )?;
        panoptic_merge(&kept, &up, &self.stuff_classes(), post)
    }
}

/// Number of trainable scalars of a model built from `cfg`.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    let classes = (0..cfg.num_stuff)
        .map(|c| ClassInfo {
            class_id: c as u32,
            is_thing: false,
        })
        .chain((0..cfg.num_things).map(|t| ClassInfo {
            class_id: (cfg.num_stuff + t) as u32,
            is_thing: true,
        }))
        .collect();
    Ok(Model::<f32>::new(cfg.clone(), classes, 0)?.params.count())
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};

    fn tiny(pathway: Pathway) -> ModelConfig {
        ModelConfig {
            backbone_widths: vec![4, 8, 8, 8],
            fpn_channels: 8,
            d_f: 4,
            d_phi: 4,
            generator_internal_channels: 8,
            d_emb: 4,
            gn_groups: 2,
            pathway,
            ..ModelConfig::new(2, 2)
        }
    }

    fn scene(seed: u64) -> PanopticLabel {
        generate_scene(
            seed,
            &SceneSpec {
                height: 64,
                width: 64,
                num_things: 2,
                num_stuff: 2,
                max_instances: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn separated_pathway_has_more_parameters() {
        let a = parameter_count(&tiny(Pathway::Integrated)).unwrap();
        let b = parameter_count(&tiny(Pathway::Separated)).unwrap();
        assert!(a < b);
    }

    #[test]
    fn training_loss_is_finite_and_deterministic() {
        let label = scene(3);
        let model =
            Model::<f64>::new(tiny(Pathway::Integrated), label.class_table.clone(), 1).unwrap();
        let targets = ImageTargets::new(&label);
        let run = || {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let cfg = LossConfig::from_preset(crate::config::Preset::Cityscapes);
            let (total, report) = model
                .training_loss(&mut g, &p, &label, &targets, &cfg, 4, &mut rng)
                .unwrap();
            let grads = g.backward(total);
            let gnorm: f64 = p
                .vars()
                .iter()
                .filter_map(|v| grads.get(*v))
                .flatten()
                .map(|x| x * x)
                .sum();
            (report, gnorm)
        };
        let (r, gn) = run();
        assert!(r.is_finite() && r.total > 0.0);
        assert!(gn > 0.0 && gn.is_finite());
        assert_eq!(run(), (r, gn));
    }

    #[test]
    fn prediction_is_a_valid_partition() {
        let label = scene(4);
        let model =
            Model::<f32>::new(tiny(Pathway::Separated), label.class_table.clone(), 2).unwrap();
        let post = PostConfig {
            score_threshold: 0.001,
            ..PostConfig::default()
        };
        let pred = model.predict(&label, &post).unwrap();
        pred.validate().unwrap();
        assert_eq!(pred.segment_map.len(), 64 * 64);
    }

    #[test]
    fn class_table_mismatch_is_rejected() {
        let label = scene(5);
        assert!(Model::<f32>::new(ModelConfig::new(3, 2), label.class_table.clone(), 0).is_err());
    }
}
