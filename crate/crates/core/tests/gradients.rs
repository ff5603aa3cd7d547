//! Whole-model gradient checks of the training objective against central
//! differences, on inputs large enough that every normalization layer sees
//! more than one spatial position.

use dfcps::model::init_pair;
use dfcps::rng::substream;
use dfcps::train::{build_step, LabeledBatch, Targets, UnlabeledBatch};
use dfcps::{ArchConfig, BackboneKind, MaskTensor, ModelPair, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Rng64 = rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;
/// A ReLU kink inside one interval spoils that step only, so a check passes
/// when any step of the ladder agrees.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
const REL_TOL: f64 = 1e-3;

fn random_tensor(r: &mut Rng64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

fn random_mask(r: &mut Rng64) -> MaskTensor {
    MaskTensor::new(
        SIDE,
        SIDE,
        (0..SIDE * SIDE).map(|_| r.random_range(0..2u8)).collect(),
    )
    .unwrap()
}

struct Setup {
    pair: ModelPair,
    lab: LabeledBatch,
    unl: UnlabeledBatch,
}

impl Setup {
    fn new(seed: u64) -> Self {
        let mut r = substream(seed, "gradient-test", &[]);
        let arch = ArchConfig::new(BackboneKind::Toy, 2);
        Self {
            pair: init_pair(&arch, (seed, seed + 1)).unwrap(),
            lab: LabeledBatch {
                images: random_tensor(&mut r, &[2, 3, SIDE, SIDE]),
                masks: vec![random_mask(&mut r), random_mask(&mut r)],
            },
            unl: UnlabeledBatch {
                target: random_tensor(&mut r, &[2, 3, SIDE, SIDE]),
                student: random_tensor(&mut r, &[2, 3, SIDE, SIDE]),
                correspondence: vec![None, None],
            },
        }
    }

    fn loss(&self, pair: &ModelPair, targets: &Targets) -> f64 {
        let s = build_step(pair, &self.lab, Some(&self.unl), 1.0, targets.clone()).unwrap();
        s.graph.value(s.objective.loss).item()
    }
}

#[test]
fn every_toy_parameter_tensor_matches_central_differences() {
    let setup = Setup::new(21);
    let step = build_step(
        &setup.pair,
        &setup.lab,
        Some(&setup.unl),
        1.0,
        Targets::Compute { tau: 0.7 },
    )
    .unwrap();
    let (y1, y2) = step.objective.targets.clone().unwrap();
    let frozen = Targets::Fixed { y1, y2 };
    let grads = step.gradients(&setup.pair).unwrap();
    let mut r = substream(21, "gradient-directions", &[]);
    let mut misses = Vec::new();
    for (net, net_grads) in grads.iter().enumerate() {
        for (name, g) in net_grads {
            let mut d: Vec<f64> = (0..g.len())
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = g.data().iter().zip(&d).map(|(a, b)| a * b).sum();
            let at = |s: f64| {
                let mut p = setup.pair.clone();
                let m = if net == 0 { &mut p.net1 } else { &mut p.net2 };
                let t = m.params_mut().get_mut(name).unwrap();
                t.data_mut()
                    .iter_mut()
                    .zip(&d)
                    .for_each(|(x, v)| *x += s * v);
                setup.loss(&p, &frozen)
            };
            let errs: Vec<f64> = STEPS
                .iter()
                .map(|&eps| {
                    let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
                })
                .collect();
            if errs.iter().all(|&e| e > REL_TOL) {
                misses.push(format!(
                    "net{} {name}: {analytic}, relative errors {errs:?}",
                    net + 1
                ));
            }
        }
    }
    assert!(misses.is_empty(), "{misses:#?}");
}

#[test]
fn frozen_and_live_targets_give_identical_gradients() {
    let setup = Setup::new(5);
    let live = build_step(
        &setup.pair,
        &setup.lab,
        Some(&setup.unl),
        1.0,
        Targets::Compute { tau: 0.8 },
    )
    .unwrap();
    let (y1, y2) = live.objective.targets.clone().unwrap();
    let frozen = build_step(
        &setup.pair,
        &setup.lab,
        Some(&setup.unl),
        1.0,
        Targets::Fixed { y1, y2 },
    )
    .unwrap();
    assert_eq!(
        live.gradients(&setup.pair).unwrap(),
        frozen.gradients(&setup.pair).unwrap()
    );
}

#[test]
fn zero_omega_ignores_unlabeled_views() {
    let setup = Setup::new(8);
    let with = build_step(
        &setup.pair,
        &setup.lab,
        Some(&setup.unl),
        0.0,
        Targets::Compute { tau: 0.9 },
    )
    .unwrap();
    let without = build_step(
        &setup.pair,
        &setup.lab,
        None,
        0.0,
        Targets::Compute { tau: 0.9 },
    )
    .unwrap();
    assert_eq!(
        with.objective.breakdown.total,
        without.objective.breakdown.total
    );
    let a = with.gradients(&setup.pair).unwrap();
    let b = without.gradients(&setup.pair).unwrap();
    for net in 0..2 {
        for (name, g) in &a[net] {
            let h = &b[net][name];
            for (x, y) in g.data().iter().zip(h.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name}");
            }
        }
    }
}
