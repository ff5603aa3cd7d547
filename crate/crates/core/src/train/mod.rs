//! The dual-network training loop.
//!
//! Batches, augmentation draws and network seeds are all pure functions of
//! the configured seed and the global step, so a resumed run continues
//! exactly where an uninterrupted one would be.

mod config;
mod step;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{lr_at, LrSchedule, TrainConfig, POLY_POWER};
pub use step::{
    build_step, objective, Heads, LabeledBatch, Objective, Sgd, StepGraph, Targets, UnlabeledBatch,
    UnlabeledHeads,
};

use crate::augment::{apply_geom, build_views, sample_geom};
use crate::checkpoint::Archive;
use crate::data::{load_samples, DatasetIndex, Sample, SplitManifest, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::LossBreakdown;
use crate::model::{init_pair, ArchConfig, ModelPair, SegModel};
use crate::rng::{derive_seed, substream};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";

const EVAL_BATCH: usize = 8;

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_s: f64,
    pub l_cps_u: f64,
    pub l_cps_l: f64,
    pub total: f64,
    pub miou_val: f64,
    pub lr: f64,
    pub retained_fraction: f64,
    pub wall_seconds: f64,
}

/// Decoded images of one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub source_checksum: String,
}

/// Number of labeled images held out for validation: `ceil(f * n)`, leaving
/// at least one for training.
pub fn val_count(labeled: usize, fraction: f64) -> usize {
    let want = (fraction * labeled as f64).ceil() as usize;
    want.min(labeled.saturating_sub(1))
}

/// Splits labeled ids into `(train, validation)`, both sorted, by a
/// seed-keyed shuffle.
pub fn carve_validation(
    labeled: &[String],
    seed: u64,
    fraction: f64,
) -> (Vec<String>, Vec<String>) {
    let mut ids = labeled.to_vec();
    ids.sort();
    ids.shuffle(&mut substream(seed, "validation", &[]));
    let n_val = val_count(ids.len(), fraction);
    let mut val: Vec<String> = ids.drain(..n_val).collect();
    ids.sort();
    val.sort();
    (ids, val)
}

impl TrainData {
    /// Loads the split and carves the validation set out of its labeled
    /// part. With a single labeled image, validation reuses it.
    pub fn prepare(
        index: &DatasetIndex,
        manifest: &SplitManifest,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        manifest.validate(index)?;
        let (labeled_ids, val_ids) =
            carve_validation(&manifest.labeled, cfg.seed, cfg.val_fraction);
        let load = |ids: &[String]| load_samples(&index.select(ids)?, cfg.image_size);
        let labeled = load(&labeled_ids)?;
        let unlabeled = load(&manifest.unlabeled)?;
        let val = if val_ids.is_empty() {
            log::warn!(
                "no labeled image to spare for validation; validating on the training image"
            );
            labeled.clone()
        } else {
            load(&val_ids)?
        };
        let first = (labeled[0].image.height(), labeled[0].image.width());
        if let Some(s) = labeled
            .iter()
            .chain(&unlabeled)
            .find(|s| (s.image.height(), s.image.width()) != first)
        {
            return Err(Error::Data(format!(
                "{} is {}x{} but {} is {}x{}; set image_size to train on mixed sizes",
                s.id,
                s.image.height(),
                s.image.width(),
                labeled[0].id,
                first.0,
                first.1
            )));
        }
        Ok(Self {
            labeled,
            unlabeled,
            val,
            source_checksum: manifest.source_checksum.clone(),
        })
    }
}

/// Training state of both networks.
pub struct Trainer {
    cfg: TrainConfig,
    data: TrainData,
    pair: ModelPair,
    sgd: [Sgd; 2],
    step: usize,
    history: Vec<EpochMetrics>,
    best: Option<(usize, f64)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::Data("no labeled training images".into()));
        }
        let arch = ArchConfig::new(cfg.backbone, CLASS_COUNT);
        let pair = init_pair(
            &arch,
            (derive_seed(cfg.seed, "net1"), derive_seed(cfg.seed, "net2")),
        )?;
        let sgd = [
            Sgd::new(cfg.momentum, cfg.weight_decay),
            Sgd::new(cfg.momentum, cfg.weight_decay),
        ];
        Ok(Self {
            cfg,
            data,
            pair,
            sgd,
            step: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn pair(&self) -> &ModelPair {
        &self.pair
    }

    /// Copies pretrained encoder weights into both networks.
    pub fn init_backbone(&mut self, source: &SegModel) -> Result<()> {
        self.pair.net1.load_backbone(source)?;
        self.pair.net2.load_backbone(source)?;
        Ok(())
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// `(epoch, mIoU)` of the best validation score so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn uses_unlabeled(&self) -> bool {
        !self.cfg.is_supervised_only() && !self.data.unlabeled.is_empty()
    }

    pub fn steps_per_epoch(&self) -> usize {
        // A supervised-only run keeps the semi-supervised step count.
        if !self.data.unlabeled.is_empty() {
            self.data.unlabeled.len().div_ceil(self.cfg.batch_unlabeled)
        } else {
            self.data.labeled.len().div_ceil(self.cfg.batch_labeled)
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    /// Labeled batch of global step `step`: consecutive slots of a stream
    /// that reshuffles the labeled set every full pass.
    fn labeled_batch(&self, step: usize) -> Result<LabeledBatch> {
        let n = self.data.labeled.len();
        let b = self.cfg.batch_labeled;
        let mut perm_cache: Option<(usize, Vec<usize>)> = None;
        let mut images = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for j in 0..b {
            let q = step * b + j;
            let cycle = q / n;
            if perm_cache.as_ref().is_none_or(|(c, _)| *c != cycle) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut substream(
                    self.cfg.seed,
                    "labeled-order",
                    &[cycle as u64],
                ));
                perm_cache = Some((cycle, perm));
            }
            let idx = perm_cache.as_ref().expect("cached").1[q % n];
            let s = &self.data.labeled[idx];
            let mut rng = substream(self.cfg.seed, "augment-labeled", &[step as u64, j as u64]);
            let g = sample_geom(&mut rng, &self.cfg.geometry);
            let (img, mask) = apply_geom(&s.image, Some(&s.mask), &g)?;
            images.push(img.to_tensor());
            masks.push(mask.expect("mask warped"));
        }
        Ok(LabeledBatch {
            images: Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            masks,
        })
    }

    fn unlabeled_batch(&self, step: usize) -> Result<UnlabeledBatch> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        let n = self.data.unlabeled.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(
            self.cfg.seed,
            "unlabeled-order",
            &[epoch as u64],
        ));
        let b = self.cfg.batch_unlabeled;
        let picked = &order[within * b..((within + 1) * b).min(n)];
        let mut target = Vec::with_capacity(picked.len());
        let mut student = Vec::with_capacity(picked.len());
        let mut correspondence = Vec::with_capacity(picked.len());
        for (j, &idx) in picked.iter().enumerate() {
            let mut rng = substream(self.cfg.seed, "augment-unlabeled", &[step as u64, j as u64]);
            let v = build_views(
                &self.data.unlabeled[idx].image,
                self.cfg.strategy,
                &mut rng,
                &self.cfg.geometry,
                &self.cfg.photometric,
            );
            target.push(v.target.to_tensor());
            student.push(v.student.to_tensor());
            correspondence.push(v.correspondence);
        }
        Ok(UnlabeledBatch {
            target: Tensor::stack(&target.iter().collect::<Vec<_>>())?,
            student: Tensor::stack(&student.iter().collect::<Vec<_>>())?,
            correspondence,
        })
    }

    /// Runs one optimization step and returns its loss components.
    pub fn train_step(&mut self) -> Result<(LossBreakdown, usize, usize)> {
        let total = self.total_steps();
        let step = self.step;
        let lr = self.cfg.lr_at(step, total);
        let omega = self.cfg.omega_at(step, total);
        let labeled = self.labeled_batch(step)?;
        let unlabeled = if self.uses_unlabeled() {
            Some(self.unlabeled_batch(step)?)
        } else {
            None
        };
        let graph = build_step(
            &self.pair,
            &labeled,
            unlabeled.as_ref(),
            omega,
            Targets::Compute {
                tau: self.cfg.confidence_tau,
            },
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        let grads = graph.gradients(&self.pair)?;
        let [g1, g2] = grads;
        self.sgd[0].step(&mut self.pair.net1, &g1, lr)?;
        self.sgd[1].step(&mut self.pair.net2, &g2, lr)?;
        self.pair.net1.apply_stats(&graph.stats[0])?;
        self.pair.net2.apply_stats(&graph.stats[1])?;
        self.step += 1;
        let o = &graph.objective;
        Ok((o.breakdown, o.kept_pixels, o.unlabeled_pixels))
    }

    /// Validation mIoU of the first network.
    pub fn validate(&self) -> Result<f64> {
        Ok(evaluate(&self.pair.net1, &self.data.val, EVAL_BATCH)?.miou)
    }

    /// Trains one epoch, validates and records the metrics row.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let spe = self.steps_per_epoch();
        let mut sums = [0.0; 4];
        let (mut kept, mut pixels) = (0usize, 0usize);
        for _ in 0..spe {
            let (b, k, p) = self.train_step()?;
            for (s, v) in sums.iter_mut().zip([b.l_s, b.l_cps_u, b.l_cps_l, b.total]) {
                *s += v;
            }
            kept += k;
            pixels += p;
        }
        let miou_val = self.validate()?;
        let epoch = self.history.len() + 1;
        let n = spe as f64;
        let row = EpochMetrics {
            epoch,
            l_s: sums[0] / n,
            l_cps_u: sums[1] / n,
            l_cps_l: sums[2] / n,
            total: sums[3] / n,
            miou_val,
            lr: self.cfg.lr_at(self.step - 1, self.total_steps()),
            retained_fraction: if pixels == 0 {
                0.0
            } else {
                kept as f64 / pixels as f64
            },
            wall_seconds: if self.cfg.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        };
        if self.best.is_none_or(|(_, m)| miou_val > m) {
            self.best = Some((epoch, miou_val));
        }
        log::info!(
            "epoch {epoch}/{}: total {:.4} l_s {:.4} miou_val {:.4} retained {:.3}",
            self.cfg.epochs,
            row.total,
            row.l_s,
            row.miou_val,
            row.retained_fraction
        );
        self.history.push(row.clone());
        Ok(row)
    }

    /// Full training state: both networks, optimizer velocities and
    /// progress.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::json!({
            "arch": self.pair.net1.arch(),
            "config": self.cfg.to_toml(),
            "source_checksum": self.data.source_checksum,
            "step": self.step,
            "history": self.history,
            "best": self.best,
        }));
        self.pair.net1.write_into(&mut a, "net1");
        self.pair.net2.write_into(&mut a, "net2");
        for (n, sgd) in self.sgd.iter().enumerate() {
            for (name, v) in sgd.velocity() {
                a.insert(format!("net{}/momentum/{name}", n + 1), v.clone());
            }
        }
        a
    }

    /// Restores state saved by [`Trainer::to_archive`]. The configuration
    /// and data checksum must match the ones the archive was written with.
    pub fn restore(&mut self, a: &Archive) -> Result<()> {
        let meta = &a.meta;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {k}")))
        };
        let parse =
            |k: &str, e: serde_json::Error| Error::Checkpoint(format!("checkpoint field {k}: {e}"));
        let saved_cfg = TrainConfig::from_toml(field("config")?.as_str().unwrap_or_default())?;
        if saved_cfg != self.cfg {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        if field("source_checksum")?.as_str() != Some(self.data.source_checksum.as_str()) {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different dataset".into(),
            ));
        }
        let arch: ArchConfig =
            serde_json::from_value(field("arch")?.clone()).map_err(|e| parse("arch", e))?;
        self.pair = ModelPair {
            net1: SegModel::read_from(a, "net1", arch.clone())?,
            net2: SegModel::read_from(a, "net2", arch)?,
        };
        for n in 0..2 {
            self.sgd[n].set_velocity(a.section(&format!("net{}/momentum/", n + 1)));
        }
        self.step = serde_json::from_value(field("step")?.clone()).map_err(|e| parse("step", e))?;
        self.history =
            serde_json::from_value(field("history")?.clone()).map_err(|e| parse("history", e))?;
        self.best = serde_json::from_value(field("best")?.clone()).map_err(|e| parse("best", e))?;
        Ok(())
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_miou_val: f64,
    pub param_count: usize,
    pub history: Vec<EpochMetrics>,
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "l_s",
            "l_cps_u",
            "l_cps_l",
            "total",
            "miou_val",
            "lr",
            "retained_fraction",
            "wall_seconds",
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `metrics.csv` file.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `out_dir/last.ckpt` when present.
    pub resume: bool,
    /// Checkpoint whose encoder weights initialize both networks.
    pub init_backbone: Option<PathBuf>,
}

/// Trains both networks for `cfg.epochs` epochs, writing metrics,
/// checkpoints and the frozen configuration into `out_dir`.
pub fn fit(
    cfg: &TrainConfig,
    index: &DatasetIndex,
    manifest: &SplitManifest,
    out_dir: &Path,
    options: &FitOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = TrainData::prepare(index, manifest, cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    if let Some(path) = &options.init_backbone {
        trainer.init_backbone(&load_model(path)?)?;
    }
    let last = out_dir.join(LAST_CHECKPOINT);
    if options.resume && last.exists() {
        trainer.restore(&Archive::load(&last)?)?;
        log::info!("resumed after epoch {}", trainer.epochs_done());
    }
    let (target, student) = cfg.strategy.pipelines();
    write_file(
        &out_dir.join(CONFIG_FILE),
        &format!(
            "# unlabeled pipelines: target {}, student {}\n{}",
            target.as_str(),
            student.as_str(),
            cfg.to_toml()
        ),
    )?;
    let metrics = out_dir.join(METRICS_FILE);
    write_metrics(&metrics, trainer.history())?;
    let started = Instant::now();
    while trainer.epochs_done() < cfg.epochs {
        let before = trainer.best();
        trainer.train_epoch()?;
        write_metrics(&metrics, trainer.history())?;
        let archive = trainer.to_archive();
        archive.save(&last)?;
        if trainer.best() != before {
            archive.save(&out_dir.join(BEST_CHECKPOINT))?;
        }
    }
    let (best_epoch, best_miou_val) = trainer.best().unwrap_or((0, 0.0));
    let summary = RunSummary {
        epochs: trainer.epochs_done(),
        best_epoch,
        best_miou_val,
        param_count: trainer.pair().net1.param_count(),
        history: trainer.history().to_vec(),
    };
    let wall = if cfg.deterministic {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
    let run = serde_json::json!({
        "epochs": summary.epochs,
        "best_epoch": best_epoch,
        "best_miou_val": best_miou_val,
        "param_count": summary.param_count,
        "strategy": cfg.strategy,
        "pipelines": { "target": target.as_str(), "student": student.as_str() },
        "backbone": cfg.backbone,
        "fraction": manifest.fraction.to_string(),
        "labeled": trainer.data.labeled.len(),
        "validation": trainer.data.val.len(),
        "unlabeled": trainer.data.unlabeled.len(),
        "source_checksum": manifest.source_checksum,
        "wall_seconds": wall,
    });
    write_file(
        &out_dir.join(RUN_FILE),
        &(serde_json::to_string_pretty(&run).expect("json") + "\n"),
    )?;
    Ok(summary)
}

/// Loads the first network of a training checkpoint.
pub fn load_model(path: &Path) -> Result<SegModel> {
    let a = Archive::load(path)?;
    let arch = a.meta.get("arch").cloned().ok_or_else(|| {
        Error::Checkpoint(format!("{} has no architecture record", path.display()))
    })?;
    let arch: ArchConfig = serde_json::from_value(arch)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    SegModel::read_from(&a, "net1", arch)
}

/// Output directory layout of one run.
pub fn run_files(out_dir: &Path) -> [PathBuf; 5] {
    [
        METRICS_FILE,
        LAST_CHECKPOINT,
        BEST_CHECKPOINT,
        CONFIG_FILE,
        RUN_FILE,
    ]
    .map(|f| out_dir.join(f))
}
