use std::fs;
use std::path::{Path, PathBuf};

use dfcps::checkpoint::Archive;
use dfcps::data::{generate_synthetic, load_dataset, load_samples, make_split};
use dfcps::eval::{evaluate, reference_miou, time_inference, REFERENCE_FRACTIONS};
use dfcps::train::{
    carve_validation, fit, read_metrics, EpochMetrics, FitOptions, TrainConfig, CONFIG_FILE,
    METRICS_FILE, RUN_FILE,
};
use dfcps::{
    AblationStrategy, ArchConfig, BackboneKind, Error, Fraction, Result, SegModel, SplitManifest,
};

use crate::plot;

pub fn split(data_root: &Path, fraction: &str, seed: u64, out: &Path) -> Result<()> {
    let fraction: Fraction = fraction.parse()?;
    let index = load_dataset(data_root)?;
    let manifest = make_split(&index, fraction, seed)?;
    manifest.save(out)?;
    println!(
        "{}: {} labeled, {} unlabeled of {} images",
        out.display(),
        manifest.labeled.len(),
        manifest.unlabeled.len(),
        index.len()
    );
    Ok(())
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let index = generate_synthetic(count, size, seed, out)?;
    println!("{}: {} images of {size}x{size}", out.display(), index.len());
    Ok(())
}

pub struct TrainRequest {
    pub config: Option<PathBuf>,
    pub manifest: PathBuf,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub init_backbone: Option<PathBuf>,
    pub resume: bool,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_training(cfg: &TrainConfig, req: &TrainRequest, out: &Path) -> Result<()> {
    let index = load_dataset(&req.data_root)?;
    let manifest = SplitManifest::load(&req.manifest)?;
    let options = FitOptions {
        resume: req.resume,
        init_backbone: req.init_backbone.clone(),
    };
    let summary = fit(cfg, &index, &manifest, out, &options)?;
    println!(
        "{}: best miou_val {:.4} at epoch {} of {}",
        out.display(),
        summary.best_miou_val,
        summary.best_epoch,
        summary.epochs
    );
    Ok(())
}

pub fn train(req: &TrainRequest) -> Result<()> {
    let cfg = load_config(req.config.as_deref())?;
    run_training(&cfg, req, &req.out)
}

/// Parses `--strategy` values; `all` expands to every strategy.
pub fn parse_strategies(values: &[String]) -> Result<Vec<AblationStrategy>> {
    let mut out = Vec::new();
    for v in values {
        let found: Vec<AblationStrategy> = if v == "all" {
            AblationStrategy::ALL.to_vec()
        } else {
            vec![v.parse()?]
        };
        for s in found {
            if !out.contains(&s) {
                out.push(s);
            }
        }
    }
    Ok(out)
}

pub fn ablate(strategies: &[String], req: &TrainRequest) -> Result<()> {
    let strategies = parse_strategies(strategies)?;
    let base = load_config(req.config.as_deref())?;
    for s in strategies {
        let cfg = TrainConfig {
            strategy: s,
            ..base.clone()
        };
        run_training(&cfg, req, &req.out.join(s.as_str()))?;
    }
    Ok(())
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    pub manifest: Option<PathBuf>,
    pub subset: String,
    pub backbone: Option<BackboneKind>,
    pub image_size: Option<usize>,
    pub timing_runs: usize,
    pub out: Option<PathBuf>,
}

/// Table row name for a strategy in the reference tables.
fn reference_row(strategy: AblationStrategy) -> &'static str {
    match strategy {
        AblationStrategy::StrongWeak => "DFCPS",
        other => other.as_str(),
    }
}

fn reference_for(strategy: AblationStrategy, fraction: Fraction) -> Option<f64> {
    (fraction.numerator() == 1 && REFERENCE_FRACTIONS.contains(&fraction.denominator()))
        .then(|| reference_miou(reference_row(strategy), fraction.denominator()))
        .flatten()
}

pub fn eval(req: &EvalRequest) -> Result<()> {
    let archive = Archive::load(&req.checkpoint)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", req.checkpoint.display()));
    let arch: ArchConfig = serde_json::from_value(
        archive
            .meta
            .get("arch")
            .cloned()
            .ok_or_else(|| bad("no architecture record".into()))?,
    )
    .map_err(|e| bad(e.to_string()))?;
    if let Some(expected) = req.backbone {
        if expected != arch.backbone {
            return Err(bad(format!(
                "architecture mismatch: checkpoint holds a {} network, {} was requested",
                arch.backbone, expected
            )));
        }
    }
    let model = SegModel::read_from(&archive, "net1", arch)?;
    let cfg = match archive.meta.get("config").and_then(|c| c.as_str()) {
        Some(text) => TrainConfig::from_toml(text)?,
        None => TrainConfig::default(),
    };
    let index = load_dataset(&req.data_root)?;
    let manifest = req
        .manifest
        .as_deref()
        .map(SplitManifest::load)
        .transpose()?;
    let ids: Vec<String> = match (req.subset.as_str(), &manifest) {
        ("all", _) => index.ids().map(str::to_owned).collect(),
        (subset @ ("val" | "labeled" | "unlabeled"), Some(m)) => {
            m.validate(&index)?;
            let (train, val) = carve_validation(&m.labeled, cfg.seed, cfg.val_fraction);
            match subset {
                "val" if val.is_empty() => train,
                "val" => val,
                "labeled" => train,
                _ => m.unlabeled.clone(),
            }
        }
        ("val" | "labeled" | "unlabeled", None) => {
            return Err(Error::Usage(format!(
                "--subset {} needs --manifest",
                req.subset
            )))
        }
        (other, _) => {
            return Err(Error::Usage(format!(
                "unknown subset {other:?}; expected val, labeled, unlabeled or all"
            )))
        }
    };
    if ids.is_empty() {
        return Err(Error::Data(format!("subset {} is empty", req.subset)));
    }
    let samples = load_samples(&index.select(&ids)?, req.image_size.or(cfg.image_size))?;
    let report = evaluate(&model, &samples, 8)?;
    let seconds_per_image = if req.timing_runs > 0 {
        let one = samples[0].image.to_tensor().reshape(&[
            1,
            3,
            samples[0].image.height(),
            samples[0].image.width(),
        ])?;
        time_inference(&model, &one, 1, req.timing_runs)?
    } else {
        report.seconds_per_image
    };
    let reference_delta = manifest
        .as_ref()
        .and_then(|m| reference_for(cfg.strategy, m.fraction))
        .map(|r| 100.0 * report.miou - r);
    let json = serde_json::json!({
        "miou": report.miou,
        "per_class_iou": report.per_class_iou,
        "pixels": report.pixels,
        "seconds_per_image": seconds_per_image,
        "reference_delta": reference_delta,
        "images": samples.len(),
        "subset": req.subset,
        "checkpoint": req.checkpoint,
    });
    let text = serde_json::to_string_pretty(&json).expect("json") + "\n";
    print!("{text}");
    if let Some(out) = &req.out {
        fs::write(out, &text).map_err(|e| Error::io(out.clone(), e))?;
    }
    Ok(())
}

/// One finished run as shown by `report`.
pub struct RunRow {
    pub name: String,
    pub strategy: String,
    pub fraction: String,
    pub best_miou_val: f64,
    pub best_epoch: usize,
    pub reference: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

fn find_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for root in roots {
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "{} is not a directory",
                root.display()
            )));
        }
        if root.join(METRICS_FILE).is_file() {
            runs.push(root.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root.clone(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        if children.is_empty() {
            return Err(Error::Data(format!(
                "no {METRICS_FILE} in {} or its subdirectories",
                root.display()
            )));
        }
        children.sort();
        runs.extend(children);
    }
    Ok(runs)
}

fn load_row(dir: &Path) -> Result<RunRow> {
    let history = read_metrics(&dir.join(METRICS_FILE))?;
    let best = history
        .iter()
        .fold(None::<&EpochMetrics>, |b, m| match b {
            Some(b) if b.miou_val >= m.miou_val => Some(b),
            _ => Some(m),
        })
        .ok_or_else(|| {
            Error::Data(format!(
                "{} records no epochs",
                dir.join(METRICS_FILE).display()
            ))
        })?;
    let strategy = TrainConfig::load(&dir.join(CONFIG_FILE))
        .ok()
        .map(|c| c.strategy);
    let fraction: Option<Fraction> = fs::read_to_string(dir.join(RUN_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("fraction")?.as_str()?.parse().ok());
    let reference = match (strategy, fraction) {
        (Some(s), Some(f)) => reference_for(s, f),
        _ => None,
    };
    Ok(RunRow {
        name: dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        ),
        strategy: strategy.map_or("-".into(), |s| s.as_str().to_owned()),
        fraction: fraction.map_or("-".into(), |f| f.to_string()),
        best_miou_val: best.miou_val,
        best_epoch: best.epoch,
        reference,
        history,
    })
}

pub fn render_table(rows: &[RunRow]) -> String {
    let mut out = format!(
        "{:<24} {:<14} {:<8} {:>13} {:>10} {:>7} {:>13} {:<7}\n",
        "run",
        "strategy",
        "fraction",
        "best_miou_val",
        "best_epoch",
        "epochs",
        "reference_pct",
        "color"
    );
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<24} {:<14} {:<8} {:>13.4} {:>10} {:>7} {:>13} {:<7}\n",
            r.name,
            r.strategy,
            r.fraction,
            r.best_miou_val,
            r.best_epoch,
            r.history.len(),
            r.reference.map_or("-".into(), |v| format!("{v:.2}")),
            plot::color_name(i),
        ));
    }
    out
}

pub fn report(roots: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = find_runs(roots)?
        .iter()
        .map(|d| load_row(d))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.best_miou_val
            .total_cmp(&a.best_miou_val)
            .then_with(|| a.name.cmp(&b.name))
    });
    let table = render_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, &table).map_err(|e| Error::io(txt, e))?;
        let series: Vec<&[EpochMetrics]> = rows.iter().map(|r| r.history.as_slice()).collect();
        plot::draw_curves(&series)
            .save(dir.join("report.png"))
            .map_err(|e| Error::Image {
                path: dir.join("report.png"),
                source: e,
            })?;
    }
    Ok(())
}
