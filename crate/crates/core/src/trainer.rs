//! SGD training loop, evaluation and the run-level driver used by the CLI.
//!
//! Every image of a batch builds its own graph and draws from its own RNG,
//! seeded from the master stream before the batch starts. Images may run in
//! parallel; their gradients are summed in batch order, so results do not
//! depend on the thread count.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{LossConfig, PostConfig, RunConfig, TrainConfig};
use crate::data::{read_dataset, PanopticLabel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossReport;
use crate::model::{ImageTargets, Model};
use crate::postprocess::{PQReport, PqAccumulator};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based index of the step that produced this record.
    pub iteration: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub momentum: Vec<Tensor<T>>,
    pub iteration: usize,
    rng: ChaCha8Rng,
    train: TrainConfig,
    losses: LossConfig,
    data: Vec<(PanopticLabel, ImageTargets)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        train: TrainConfig,
        losses: LossConfig,
        dataset: Vec<PanopticLabel>,
    ) -> Result<Self> {
        let momentum = model
            .params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        Self::assemble(
            Checkpoint {
                model,
                momentum,
                iteration: 0,
                rng,
            },
            train,
            losses,
            dataset,
        )
    }

    /// Continues from a checkpoint; the remaining steps replay exactly.
    pub fn resume(
        ck: Checkpoint<T>,
        train: TrainConfig,
        losses: LossConfig,
        dataset: Vec<PanopticLabel>,
    ) -> Result<Self> {
        if ck.iteration > train.iterations {
            return Err(Error::Config(format!(
                "checkpoint is at iteration {}, beyond the configured {}",
                ck.iteration, train.iterations
            )));
        }
        Self::assemble(ck, train, losses, dataset)
    }

    fn assemble(
        ck: Checkpoint<T>,
        train: TrainConfig,
        losses: LossConfig,
        dataset: Vec<PanopticLabel>,
    ) -> Result<Self> {
        train.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        for label in &dataset {
            ck.model.check_label(label)?;
        }
        let data = dataset.into_iter().map(|l| {
            let t = ImageTargets::new(&l);
            (l, t)
        });
        Ok(Self {
            model: ck.model,
            momentum: ck.momentum,
            iteration: ck.iteration,
            rng: ck.rng,
            train,
            losses,
            data: data.collect(),
        })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.train.iterations
    }

    /// Dataset indices of the batch at `iteration`.
    pub fn batch_indices(&self, iteration: usize) -> Vec<usize> {
        let b = self.train.batch_size;
        (0..b)
            .map(|k| (iteration * b + k) % self.data.len())
            .collect()
    }

    /// Mean loss gradient of a batch without updating anything.
    pub fn batch_gradient(&mut self) -> Result<(Vec<Vec<T>>, LossReport)> {
        let idx = self.batch_indices(self.iteration);
        let seeds: Vec<u64> = idx.iter().map(|_| self.rng.next_u64()).collect();
        let model = &self.model;
        let losses = &LossConfig {
            topk_ratio: self
                .train
                .topk_ratio_at(self.losses.topk_ratio, self.iteration),
            ..self.losses.clone()
        };
        let spi = self.train.samples_per_instance;
        let data = &self.data;
        let per_image: Vec<Result<(Vec<Vec<T>>, LossReport)>> = idx
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&i, &seed)| {
                let (label, targets) = &data[i];
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (total, report) =
                    model.training_loss(&mut g, &p, label, targets, losses, spi, &mut rng)?;
                let mut grads = g.backward(total);
                let out = model
                    .params
                    .iter()
                    .zip(p.vars())
                    .map(|((_, t), v)| grads.take(*v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
                    .collect();
                Ok((out, report))
            })
            .collect();
        let inv = T::one() / T::lit(idx.len() as f64);
        let mut sum: Vec<Vec<T>> = self
            .model
            .params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.numel()])
            .collect();
        let mut reports = Vec::with_capacity(idx.len());
        for r in per_image {
            let (grads, report) = r?;
            for (acc, g) in sum.iter_mut().zip(grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
            }
            reports.push(report);
        }
        Ok((sum, LossReport::mean(&reports)))
    }

    /// One SGD step with momentum, weight decay and global-norm clipping.
    pub fn step(&mut self) -> Result<StepRecord> {
        let lr = self.train.lr_at(self.iteration);
        let (mut grads, report) = self.batch_gradient()?;
        if !report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: {:?}",
                self.iteration, report
            )));
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at iteration {}",
                self.iteration
            )));
        }
        if norm > self.train.clip_norm {
            let s = T::lit(self.train.clip_norm / norm);
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let (mu, wd, lr_t) = (
            T::lit(self.train.momentum),
            T::lit(self.train.weight_decay),
            T::lit(lr),
        );
        for ((param, buf), grad) in self
            .model
            .params
            .tensors_mut()
            .zip(&mut self.momentum)
            .zip(&grads)
        {
            for ((w, v), &g) in param.data_mut().iter_mut().zip(buf.data_mut()).zip(grad) {
                *v = mu * *v + g + wd * *w;
                *w -= lr_t * *v;
            }
        }
        let record = StepRecord {
            iteration: self.iteration,
            lr,
            grad_norm: norm,
            loss: report,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            momentum: self.momentum.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &PanopticLabel> {
        self.data.iter().map(|(l, _)| l)
    }
}

/// Dataset-level PQ: per-class counters are summed over images first.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &[PanopticLabel],
    post: &PostConfig,
) -> Result<PQReport> {
    let preds: Vec<_> = dataset.par_iter().map(|l| model.predict(l, post)).collect();
    let mut acc = PqAccumulator::new();
    for (pred, label) in preds.into_iter().zip(dataset) {
        acc.add(&pred?, label)?;
    }
    Ok(acc.report())
}

/// Outcome of [`train_run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub iterations: usize,
    pub last: Option<StepRecord>,
}

fn load_labels(dir: &Path) -> Result<Vec<PanopticLabel>> {
    Ok(read_dataset(dir)?.1.into_iter().map(|(_, l)| l).collect())
}

/// Keeps only metrics lines of iterations before `iteration`.
fn truncate_metrics(path: &Path, iteration: usize) -> Result<()> {
    let Ok(file) = File::open(path) else {
        return Ok(());
    };
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: StepRecord = serde_json::from_str(&line)?;
        if rec.iteration < iteration {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains per `run`, writing the checkpoint, metrics log and resolved config
/// under `run.out`. `resume` continues from an earlier checkpoint.
pub fn train_run<T: Scalar>(run: &RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    train_run_with::<T>(run, resume, |_| {})
}

pub fn train_run_with<T: Scalar>(
    run: &RunConfig,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<RunSummary> {
    let dataset = load_labels(Path::new(&run.data))?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config(format!("no scenes in {}", run.data)))?;
    let cfg = run.model(first.num_things(), first.num_stuff());
    let out = PathBuf::from(&run.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let config_path = out.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&run.to_json())?;
    std::fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    let metrics = out.join(METRICS_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);

    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load::<T>(path)?;
            if ck.model.cfg != cfg {
                return Err(Error::Shape(format!(
                    "checkpoint architecture differs from the config: {:?} vs {:?}",
                    ck.model.cfg, cfg
                )));
            }
            truncate_metrics(&metrics, ck.iteration)?;
            Trainer::resume(ck, run.train(), run.losses(), dataset)?
        }
        None => {
            let _ = std::fs::remove_file(&metrics);
            let model = Model::<T>::new(cfg, first.class_table.clone(), run.seed)?;
            Trainer::new(model, run.train(), run.losses(), dataset)?
        }
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let mut last = None;
    while !trainer.is_done() {
        let rec = trainer.step()?;
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics, e))?;
        on_step(&rec);
        last = Some(rec);
        let every = run.checkpoint_every;
        if every > 0 && trainer.iteration % every == 0 && !trainer.is_done() {
            checkpoint::save(&ckpt_path, &trainer.checkpoint())?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    checkpoint::save(&ckpt_path, &trainer.checkpoint())?;
    Ok(RunSummary {
        checkpoint: ckpt_path,
        metrics,
        iterations: trainer.iteration,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Preset};
    use crate::data::{generate_scene, SceneSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone_widths: vec![4, 8, 8, 8],
            fpn_channels: 8,
            d_f: 4,
            d_phi: 4,
            generator_internal_channels: 8,
            d_emb: 4,
            gn_groups: 2,
            ..ModelConfig::new(2, 2)
        }
    }

    fn scenes(n: usize) -> Vec<PanopticLabel> {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            num_things: 2,
            num_stuff: 2,
            max_instances: 2,
        };
        (0..n)
            .map(|i| generate_scene(i as u64 + 10, &spec).unwrap())
            .collect()
    }

    fn trainer(iters: usize) -> Trainer<f64> {
        let data = scenes(3);
        let model = Model::new(tiny(), data[0].class_table.clone(), 1).unwrap();
        let train = TrainConfig {
            iterations: iters,
            batch_size: 2,
            lr_decay_steps: vec![],
            ..TrainConfig::default()
        };
        Trainer::new(
            model,
            train,
            LossConfig::from_preset(Preset::Cityscapes),
            data,
        )
        .unwrap()
    }

    #[test]
    fn batches_wrap_around() {
        let t = trainer(4);
        assert_eq!(t.batch_indices(0), vec![0, 1]);
        assert_eq!(t.batch_indices(1), vec![2, 0]);
    }

    #[test]
    fn resume_replays_exactly() {
        let mut a = trainer(4);
        for _ in 0..4 {
            a.step().unwrap();
        }
        let mut b = trainer(4);
        b.step().unwrap();
        b.step().unwrap();
        let bytes = checkpoint::encode(&b.checkpoint()).unwrap();
        let ck = checkpoint::decode::<f64>(&bytes).unwrap();
        let mut c = Trainer::resume(ck, b.train.clone(), b.losses.clone(), scenes(3)).unwrap();
        c.step().unwrap();
        c.step().unwrap();
        for ((_, x), (_, y)) in a.model.params.iter().zip(c.model.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = Model::<f64>::new(tiny(), scenes(1)[0].class_table.clone(), 1).unwrap();
        let r = Trainer::new(
            model,
            TrainConfig::default(),
            LossConfig::from_preset(Preset::Coco),
            vec![],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
