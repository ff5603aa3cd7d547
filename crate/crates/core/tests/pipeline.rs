use dfcps::data::{generate_synthetic, load_dataset, load_samples, make_split};
use dfcps::eval::{evaluate, Segmenter};
use dfcps::train::{
    fit, load_model, read_metrics, FitOptions, TrainData, Trainer, BEST_CHECKPOINT,
    LAST_CHECKPOINT, METRICS_FILE,
};
use dfcps::{Fraction, Result, Sample, Tensor, TrainConfig};

/// Answers with the ground truth of the samples it was built from.
struct Oracle(Vec<Sample>);

impl Segmenter for Oracle {
    fn classes(&self) -> usize {
        2
    }

    fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        let per = images.len() / images.shape()[0];
        let found = images
            .data()
            .chunks(per)
            .map(|img| {
                let s = self
                    .0
                    .iter()
                    .find(|s| s.image.data() == img)
                    .expect("known image");
                s.mask.labels().to_vec()
            })
            .collect();
        Ok(found)
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_labeled: 3,
        batch_unlabeled: 4,
        lr_max: 0.02,
        lr_min: 2e-4,
        seed: 3,
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_split_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(20, 32, 9, dir.path().join("data")).unwrap();
    assert_eq!(load_dataset(dir.path().join("data")).unwrap(), index);
    let manifest = make_split(&index, Fraction::new(1, 4).unwrap(), 9).unwrap();
    assert_eq!(manifest.labeled.len(), 5);

    let out = dir.path().join("run");
    let summary = fit(
        &small_config(),
        &index,
        &manifest,
        &out,
        &FitOptions::default(),
    )
    .unwrap();
    assert_eq!(summary.epochs, 2);
    assert!((0.0..=1.0).contains(&summary.best_miou_val));
    let rows = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.total.is_finite() && r.l_s > 0.0));

    let model = load_model(&out.join(BEST_CHECKPOINT)).unwrap();
    let entries: Vec<_> = index.entries.iter().collect();
    let samples = load_samples(&entries, None).unwrap();
    let report = evaluate(&model, &samples, 8).unwrap();
    assert!((0.0..=1.0).contains(&report.miou));
    assert_eq!(report.pixels, 20 * 32 * 32);

    let perfect = evaluate(&Oracle(samples.clone()), &samples, 8).unwrap();
    assert_eq!(perfect.miou, 1.0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(16, 32, 4, dir.path().join("data")).unwrap();
    let manifest = make_split(&index, Fraction::new(1, 4).unwrap(), 4).unwrap();
    let full = small_config();
    let straight = dir.path().join("straight");
    fit(&full, &index, &manifest, &straight, &FitOptions::default()).unwrap();

    // The first epoch of a two-epoch run, then the rest from its checkpoint.
    let resumed = dir.path().join("resumed");
    let opts = FitOptions {
        resume: true,
        ..FitOptions::default()
    };
    {
        let data = TrainData::prepare(&index, &manifest, &full).unwrap();
        let mut t = Trainer::new(full.clone(), data).unwrap();
        t.train_epoch().unwrap();
        std::fs::create_dir_all(&resumed).unwrap();
        t.to_archive().save(&resumed.join(LAST_CHECKPOINT)).unwrap();
    }
    fit(&full, &index, &manifest, &resumed, &opts).unwrap();
    assert_eq!(
        std::fs::read(straight.join(METRICS_FILE)).unwrap(),
        std::fs::read(resumed.join(METRICS_FILE)).unwrap()
    );
}
