//! Optimization, evaluation, checkpoints and ablation runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{breakdown, Interval, MetricsReport, PredictionRecord, DEFAULT_GRID};
use crate::fusion::FusionMode;
use crate::layers::ParamStore;
use crate::membank::{MemoryState, Mode};
use crate::model::Model;
use crate::numcore::{Mat, Tape};
use crate::synthdata::{Corpus, GroundingSample, Split};

pub const CHECKPOINT_VERSION: u32 = 1;

/// First/second-moment adaptive descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self { learning_rate, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for ((p, g), (m, v)) in store.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Validation R@1, IoU=0.5.
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: Vec<(String, Mat)>,
    pub memory: MemoryState,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
    pub best_val_recall: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Format { what: "checkpoint", msg: format!("unsupported version {}", c.version) });
        }
        Ok(c)
    }

    /// Rebuilds the model this checkpoint describes.
    pub fn model(&self, corpus: &Corpus) -> Result<(Model, MemoryState)> {
        let (mut model, _) = Model::new(&self.config.model, corpus.vocab.len(), corpus.config.frame_dim, self.config.seed);
        model.store.load_named(self.params.clone())?;
        Ok((model, self.memory.clone()))
    }
}

/// Training state that advances one epoch at a time.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub memory: MemoryState,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub best_val_recall: Option<f64>,
}

fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

impl Trainer {
    pub fn new(config: &RunConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let (model, memory) = Model::new(&config.model, corpus.vocab.len(), corpus.config.frame_dim, config.seed);
        let o = &config.optim;
        let optimizer = Adam::new(&model.store, o.learning_rate, o.beta1, o.beta2, o.eps);
        Ok(Self {
            config: config.clone(),
            model,
            memory,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7472_6169_6e)),
            epoch: 0,
            history: Vec::new(),
            best_val_recall: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, corpus: &Corpus) -> Result<Self> {
        let (model, memory) = ckpt.model(corpus)?;
        Ok(Self {
            config: ckpt.config,
            model,
            memory,
            optimizer: ckpt.optimizer,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            history: ckpt.history,
            best_val_recall: ckpt.best_val_recall,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.model.store.names().iter().cloned().zip(self.model.store.values().iter().cloned()).collect(),
            memory: self.memory.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
            best_val_recall: self.best_val_recall,
        }
    }

    /// One pass over the training split; returns the mean training loss.
    pub fn train_epoch(&mut self, corpus: &Corpus) -> Result<f64> {
        let mut order: Vec<&GroundingSample> = corpus.split(Split::Train);
        if order.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        order.shuffle(&mut self.rng);
        let o = &self.config.optim;
        self.optimizer.learning_rate = o.schedule.rate(o.learning_rate, self.epoch, o.epochs);
        let batch_size = self.config.optim.batch_size;
        let weights = self.config.loss;
        let mut total = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let mut grads: Vec<Mat> = self.model.store.values().iter().map(|p| Mat::zeros(p.dim())).collect();
            for sample in batch {
                let mut tape = Tape::new();
                let p = self.model.store.bind(&mut tape, true);
                let losses = self.model.loss(&mut tape, &p, &mut self.memory, sample, &weights, Mode::Train)?;
                let value = tape.scalar(losses.total);
                if !value.is_finite() {
                    let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
                    error!("non-finite loss in epoch {} batch {b}; sample ids {ids:?}", self.epoch + 1);
                    return Err(Error::Diverged { epoch: self.epoch + 1, batch: b });
                }
                total += value;
                tape.backward(losses.total)?;
                for (g, &v) in grads.iter_mut().zip(p.vars()) {
                    g.scaled_add(1.0 / batch.len() as f64, &tape.grad(v));
                }
            }
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch + 1, batch: b });
            }
            let clip = self.config.optim.clip_norm;
            if clip > 0.0 && norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
            self.optimizer.update(&mut self.model.store, &grads);
        }
        Ok(total / order.len() as f64)
    }

    /// Trains until `epochs` epochs are complete in total. With `out_dir`,
    /// writes the best-validation checkpoint as it improves.
    pub fn run(&mut self, corpus: &Corpus, epochs: usize, out_dir: Option<&Path>) -> Result<()> {
        while self.epoch < epochs {
            let train_loss = self.train_epoch(corpus)?;
            self.epoch += 1;
            let (val_loss, val_recall) = if self.config.validate && !corpus.split(Split::Val).is_empty() {
                let val = corpus.split(Split::Val);
                let loss = mean_loss(&self.model, &self.memory, &val, &self.config)?;
                let (report, _) = evaluate(&self.model, &self.memory, corpus, Split::Val, 1)?;
                (Some(loss), report.get(1, 0.5).map(|r| r.overall))
            } else {
                (None, None)
            };
            info!(
                "epoch {} train loss {train_loss:.4} val loss {} val R@1,0.5 {}",
                self.epoch,
                val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                val_recall.map_or("-".into(), |v| format!("{v:.2}")),
            );
            self.history.push(EpochStats { epoch: self.epoch, train_loss, val_loss, val_recall });
            if let Some(r) = val_recall {
                if self.best_val_recall.is_none_or(|b| r > b) {
                    self.best_val_recall = Some(r);
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("best.json"))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.train_loss).collect()
    }
}

/// Mean total loss over `samples` in evaluation mode.
pub fn mean_loss(model: &Model, memory: &MemoryState, samples: &[&GroundingSample], cfg: &RunConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let mut frozen = memory.clone();
        let l = model.loss(&mut tape, &p, &mut frozen, s, &cfg.loss, Mode::Eval)?;
        total += tape.scalar(l.total);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Evaluation-mode predictions and metrics for one split.
pub fn evaluate(model: &Model, memory: &MemoryState, corpus: &Corpus, split: Split, top_n: usize) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let samples = corpus.split(split);
    if samples.is_empty() {
        return Err(Error::Input(format!("split {split} has no samples")));
    }
    let top_n = top_n.max(5);
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let preds = model.predict(memory, s, top_n)?;
        records.push(PredictionRecord {
            id: s.id,
            rare: s.rare,
            gt: Interval { start: s.gt.0 as f64, end: s.gt.1 as f64 },
            predictions: preds.iter().map(|p| (p.interval, p.score)).collect(),
        });
    }
    let sets: Vec<_> = records.iter().map(PredictionRecord::prediction_set).collect();
    let gts: Vec<_> = records.iter().map(|r| r.gt).collect();
    let rare: Vec<_> = records.iter().map(|r| r.rare).collect();
    let report = breakdown(&split.to_string(), &sets, &gts, &rare, &DEFAULT_GRID)?;
    Ok((report, records))
}

pub fn write_loss_csv<W: Write>(history: &[EpochStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format { what: "loss csv", msg: e.to_string() };
    w.write_record(["epoch", "train_loss", "val_loss", "val_recall"]).map_err(err)?;
    for h in history {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        w.write_record([h.epoch.to_string(), h.train_loss.to_string(), opt(h.val_loss), opt(h.val_recall)]).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// One configuration in an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub memory: bool,
    pub separate_memory: bool,
    pub fusion: FusionMode,
}

impl Variant {
    pub fn new(name: &str, memory: bool, separate_memory: bool, fusion: FusionMode) -> Self {
        Self { name: name.into(), memory, separate_memory, fusion }
    }

    fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.memory = self.memory;
        c.model.separate_memory = self.separate_memory;
        c.model.fusion = self.fusion;
        c
    }
}

/// Memory rows (shared, separate, none) and fusion rows (full down to no attention).
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::new("full", true, false, FusionMode::Full),
        Variant::new("separate-memory", true, true, FusionMode::Full),
        Variant::new("no-memory", false, false, FusionMode::Full),
        Variant::new("no-calibration", true, false, FusionMode::NoCalibration),
        Variant::new("no-self", true, false, FusionMode::NoSelf),
        Variant::new("inter-only", true, false, FusionMode::InterOnly),
        Variant::new("no-heterogeneous-attention", true, false, FusionMode::Plain),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub report: MetricsReport,
}

/// Trains every variant under every seed with the same budget and reports
/// test metrics.
pub fn ablate(cfg: &RunConfig, corpus: &Corpus, variants: &[Variant], seeds: &[u64], split: Split) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut c = v.apply(cfg);
            c.seed = seed;
            let mut trainer = Trainer::new(&c, corpus)?;
            trainer.run(corpus, c.optim.epochs, None)?;
            let (report, _) = evaluate(&trainer.model, &trainer.memory, corpus, split, 5)?;
            info!("ablation {} seed {seed}: R@1,0.5 {:.2}", v.name, report.get(1, 0.5).map_or(f64::NAN, |r| r.overall));
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                final_train_loss: trainer.loss_curve().last().copied().unwrap_or(f64::NAN),
                report,
            });
        }
    }
    Ok(rows)
}

/// One line per (variant, seed) with the standard recall columns.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format { what: "ablation csv", msg: e.to_string() };
    let mut header = vec!["variant".to_string(), "seed".into(), "train_loss".into()];
    for (n, m) in DEFAULT_GRID {
        header.push(format!("r{n}_iou{m}"));
    }
    header.extend(["rare_r1_iou0.5".into(), "common_r1_iou0.5".into()]);
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.seed.to_string(), r.final_train_loss.to_string()];
        for (n, m) in DEFAULT_GRID {
            rec.push(r.report.get(n, m).map_or(String::new(), |e| format!("{:.2}", e.overall)));
        }
        let e = r.report.get(1, 0.5);
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.2}"));
        rec.push(opt(e.and_then(|e| e.rare)));
        rec.push(opt(e.and_then(|e| e.common)));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
