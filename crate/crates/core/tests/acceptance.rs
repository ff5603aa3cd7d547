//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and limits
//! are pinned in the constants below. Set `DFCPS_ACCEPTANCE_STRICT` to exit
//! non-zero when any criterion fails; pass criterion numbers as arguments
//! to run a subset.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dfcps::autodiff::{Graph, NodeId};
use dfcps::data::{generate_synthetic, make_split, DatasetEntry};
use dfcps::eval::{miou, ConfusionMatrix};
use dfcps::losses::{cps_unlabeled_loss, cps_weak_cross_loss, supervised_loss, PROB_FLOOR};
use dfcps::model::init_pair;
use dfcps::pseudolabel::harden;
use dfcps::rng::substream;
use dfcps::train::{
    build_step, fit, lr_at, objective, FitOptions, Heads, LabeledBatch, LrSchedule, Targets,
    TrainData, Trainer, UnlabeledBatch, UnlabeledHeads, METRICS_FILE,
};
use dfcps::{
    AblationStrategy, ArchConfig, BackboneKind, DatasetIndex, Fraction, LossBreakdown, MaskTensor,
    ModelPair, ProbabilityMap, PseudoLabel, Tensor, TrainConfig,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Rng64 = rand_chacha::ChaCha8Rng;

const LOSS_INSTANCES: usize = 200;
const LOSS_TOL: f64 = 1e-6;
const LOSS_SECONDS: f64 = 10.0;

const GRAD_EPS: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely, scaled by the
/// relative tolerance.
const GRAD_FLOOR: f64 = 1e-5;
/// Step used only to diagnose checks that miss at `GRAD_EPS`.
const GRAD_FINE_EPS: f64 = 1e-5;
const GRAD_SIDE: usize = 8;
const GRAD_ENTRIES_PER_TENSOR: usize = 2;
const GRAD_SECONDS: f64 = 60.0;

const TAU_ABOVE_ONE: f64 = 1.000001;
const MONOTONE_MAPS: usize = 1000;

const SYMMETRY_INSTANCES: usize = 200;
const SYMMETRY_TOL: f64 = 1e-9;

const MIOU_PAIRS: usize = 100;
const MIOU_TOL: f64 = 1e-9;

const SPLIT_ITEMS: usize = 1000;

const BENEFIT_IMAGES: usize = 200;
const BENEFIT_SIDE: usize = 64;
const BENEFIT_EPOCHS: usize = 30;
const BENEFIT_SEEDS: [u64; 3] = [0, 1, 2];
const BENEFIT_LR_MAX: f64 = 0.02;
const BENEFIT_LR_MIN: f64 = 2e-4;
const BENEFIT_SECONDS: f64 = 1800.0;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(tag: &str) -> Rng64 {
    substream(20_260_101, tag, &[])
}

fn normal(r: &mut Rng64) -> f64 {
    StandardNormal.sample(r)
}

fn random_tensor(r: &mut Rng64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * normal(r)).collect()).unwrap()
}

fn random_mask(r: &mut Rng64, h: usize, w: usize) -> MaskTensor {
    MaskTensor::new(h, w, (0..h * w).map(|_| r.random_range(0..2u8)).collect()).unwrap()
}

fn random_label(r: &mut Rng64, h: usize, w: usize) -> PseudoLabel {
    PseudoLabel {
        height: h,
        width: w,
        labels: (0..h * w).map(|_| r.random_range(0..2u8)).collect(),
        keep: (0..h * w).map(|_| r.random_bool(0.6)).collect(),
        tau: 0.5,
    }
}

/// Softmax probabilities, occasionally with exact zeros to reach the floor.
fn random_prob(r: &mut Rng64, k: usize, h: usize, w: usize) -> ProbabilityMap {
    let hw = h * w;
    let mut data = vec![0.0; k * hw];
    for p in 0..hw {
        if r.random_bool(0.1) {
            let hot = r.random_range(0..k);
            data[hot * hw + p] = 1.0;
            continue;
        }
        let logits: Vec<f64> = (0..k).map(|_| 3.0 * normal(r)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..k {
            data[c * hw + p] = (logits[c] - m).exp() / z;
        }
    }
    ProbabilityMap::new(k, h, w, data).unwrap()
}

/// Masked per-image mean of `-ln max(p, floor)`, averaged over the batch.
fn oracle_term(probs: &[ProbabilityMap], labels: &[Vec<u8>], keep: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for ((p, y), m) in probs.iter().zip(labels).zip(keep) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in 0..p.height() {
            for col in 0..p.width() {
                let i = row * p.width() + col;
                if m[i] {
                    sum -= p.get(y[i] as usize, row, col).max(PROB_FLOOR).ln();
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / probs.len() as f64
}

fn labels_of(ys: &[PseudoLabel]) -> (Vec<Vec<u8>>, Vec<Vec<bool>>) {
    (
        ys.iter().map(|y| y.labels.clone()).collect(),
        ys.iter().map(|y| y.keep.clone()).collect(),
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng("loss-oracles");
    let mut worst: f64 = 0.0;
    for _ in 0..LOSS_INSTANCES {
        let b = r.random_range(1..=2);
        let side = r.random_range(1..=8);
        let (h, w) = (side, side);
        let maps = |r: &mut Rng64| -> Vec<ProbabilityMap> {
            (0..b).map(|_| random_prob(r, 2, h, w)).collect()
        };
        let (p1, p2, pw1, pw2, ps1, ps2) = (
            maps(&mut r),
            maps(&mut r),
            maps(&mut r),
            maps(&mut r),
            maps(&mut r),
            maps(&mut r),
        );
        let gt: Vec<MaskTensor> = (0..b).map(|_| random_mask(&mut r, h, w)).collect();
        let y1: Vec<PseudoLabel> = (0..b).map(|_| random_label(&mut r, h, w)).collect();
        let y2: Vec<PseudoLabel> = (0..b).map(|_| random_label(&mut r, h, w)).collect();

        let gt_labels: Vec<Vec<u8>> = gt.iter().map(|m| m.labels().to_vec()).collect();
        let all: Vec<Vec<bool>> = vec![vec![true; h * w]; b];
        let (l1, k1) = labels_of(&y1);
        let (l2, k2) = labels_of(&y2);
        let expect_s = oracle_term(&p1, &gt_labels, &all) + oracle_term(&p2, &gt_labels, &all);
        let expect_u = oracle_term(&ps1, &l1, &k1) + oracle_term(&ps2, &l2, &k2);
        let expect_l = oracle_term(&pw1, &l2, &k2) + oracle_term(&pw2, &l1, &k1);

        let got_s = supervised_loss(&p1, &p2, &gt).unwrap();
        let got_u = cps_unlabeled_loss(&ps1, &ps2, &y1, &y2).unwrap();
        let got_l = cps_weak_cross_loss(&pw1, &pw2, &y1, &y2).unwrap();
        for (e, g) in [(expect_s, got_s), (expect_u, got_u), (expect_l, got_l)] {
            worst = worst.max((e - g).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < LOSS_TOL && secs < LOSS_SECONDS,
        format!("{LOSS_INSTANCES} instances x 3 terms, max |d| {worst:.2e} (tol {LOSS_TOL:.0e}), {secs:.2}s"),
    )
}

/// Six logit heads of a random two-image batch and their ground truth.
struct LogitInstance {
    logits: Vec<Tensor>,
    gt: Vec<MaskTensor>,
}

impl LogitInstance {
    fn random(r: &mut Rng64, b: usize, side: usize) -> Self {
        Self {
            logits: (0..6)
                .map(|_| random_tensor(r, &[b, 2, side, side], 2.0))
                .collect(),
            gt: (0..b).map(|_| random_mask(r, side, side)).collect(),
        }
    }

    /// Builds the objective with heads in `order`: labeled 1/2, target 1/2,
    /// student 1/2.
    fn build(
        &self,
        order: [usize; 6],
        targets: Targets,
        leaf: bool,
    ) -> (Graph, Vec<NodeId>, dfcps::train::Objective) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self
            .logits
            .iter()
            .map(|t| {
                if leaf {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let b = self.gt.len();
        let heads = Heads {
            labeled: [ids[order[0]], ids[order[1]]],
            unlabeled: Some(UnlabeledHeads {
                target: [ids[order[2]], ids[order[3]]],
                student: [ids[order[4]], ids[order[5]]],
                correspondence: vec![None; b],
            }),
        };
        let obj = objective(&mut g, &heads, &self.gt, targets, 1.0).unwrap();
        (g, ids, obj)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn close(a: f64, n: f64) -> bool {
    rel_err(a, n) <= GRAD_REL_TOL
}

fn step_loss(pair: &ModelPair, lab: &LabeledBatch, unl: &UnlabeledBatch, targets: &Targets) -> f64 {
    let s = build_step(pair, lab, Some(unl), 1.0, targets.clone()).unwrap();
    s.graph.value(s.objective.loss).item()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng("gradient-check");
    let tau = 0.7;
    let mut checked = 0usize;
    let mut failures = Vec::new();
    let mut worst_logit: f64 = 0.0;

    // Logits of every head.
    let inst = LogitInstance::random(&mut r, 2, GRAD_SIDE);
    let (g, ids, obj) = inst.build([0, 1, 2, 3, 4, 5], Targets::Compute { tau }, true);
    let (y1, y2) = obj.targets.clone().unwrap();
    let frozen = Targets::Fixed { y1, y2 };
    let grads = g.backward(obj.loss).unwrap();
    for (h, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id).unwrap().clone();
        for i in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut shifted = LogitInstance {
                    logits: inst.logits.clone(),
                    gt: inst.gt.clone(),
                };
                shifted.logits[h].data_mut()[i] += delta;
                let (g, _, o) = shifted.build([0, 1, 2, 3, 4, 5], frozen.clone(), false);
                g.value(o.loss).item()
            };
            let numeric = (eval(GRAD_EPS) - eval(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            checked += 1;
            worst_logit = worst_logit.max(rel_err(analytic.data()[i], numeric));
            if !close(analytic.data()[i], numeric) {
                failures.push(format!(
                    "logits head {h}[{i}]: {} vs {numeric}",
                    analytic.data()[i]
                ));
            }
        }
    }

    // Every parameter tensor of both toy networks: one random unit direction
    // over the whole tensor plus a few single entries.
    let arch = ArchConfig::new(BackboneKind::Toy, 2);
    let pair = init_pair(&arch, (11, 12)).unwrap();
    let lab = LabeledBatch {
        images: random_tensor(&mut r, &[2, 3, GRAD_SIDE, GRAD_SIDE], 1.0),
        masks: (0..2)
            .map(|_| random_mask(&mut r, GRAD_SIDE, GRAD_SIDE))
            .collect(),
    };
    let unl = UnlabeledBatch {
        target: random_tensor(&mut r, &[2, 3, GRAD_SIDE, GRAD_SIDE], 1.0),
        student: random_tensor(&mut r, &[2, 3, GRAD_SIDE, GRAD_SIDE], 1.0),
        correspondence: vec![None, None],
    };
    let step = build_step(&pair, &lab, Some(&unl), 1.0, Targets::Compute { tau }).unwrap();
    let (y1, y2) = step.objective.targets.clone().unwrap();
    let frozen = Targets::Fixed { y1, y2 };
    let grads = step.gradients(&pair).unwrap();
    let mut tensors = 0usize;
    let mut worst_rel: f64 = worst_logit;
    let mut fine_ok = 0usize;
    for (net, net_grads) in grads.iter().enumerate() {
        for (name, analytic) in net_grads {
            tensors += 1;
            let diff = |dir: &dyn Fn(&mut Tensor, f64), eps: f64| {
                let eval = |delta: f64| {
                    let mut p = pair.clone();
                    let m = if net == 0 { &mut p.net1 } else { &mut p.net2 };
                    dir(m.params_mut().get_mut(name).unwrap(), delta);
                    step_loss(&p, &lab, &unl, &frozen)
                };
                (eval(eps) - eval(-eps)) / (2.0 * eps)
            };
            let mut check = |what: String, a: f64, dir: &dyn Fn(&mut Tensor, f64)| {
                let n = diff(dir, GRAD_EPS);
                checked += 1;
                worst_rel = worst_rel.max(rel_err(a, n));
                if !close(a, n) {
                    fine_ok += usize::from(close(a, diff(dir, GRAD_FINE_EPS)));
                    failures.push(format!("net{} {what}: {a} vs {n}", net + 1));
                }
            };
            let mut d: Vec<f64> = (0..analytic.len()).map(|_| normal(&mut r)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let a: f64 = analytic.data().iter().zip(&d).map(|(g, v)| g * v).sum();
            check(format!("{name} direction"), a, &|t: &mut Tensor, s: f64| {
                t.data_mut()
                    .iter_mut()
                    .zip(&d)
                    .for_each(|(x, v)| *x += s * v)
            });
            for _ in 0..GRAD_ENTRIES_PER_TENSOR {
                let i = r.random_range(0..analytic.len());
                check(
                    format!("{name}[{i}]"),
                    analytic.data()[i],
                    &|t: &mut Tensor, s: f64| t.data_mut()[i] += s,
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!(
        "{checked} checks over 6 logit heads and {tensors} parameter tensors, eps {GRAD_EPS:.0e}, rel tol {GRAD_REL_TOL:.0e}, worst rel err {worst_rel:.1e}, {secs:.1}s"
    );
    if let Some(first) = failures.first() {
        detail += &format!(
            "; {} over tol (first {first}), {fine_ok} of them within tol at eps {GRAD_FINE_EPS:.0e}",
            failures.len()
        );
    }
    Outcome::new(failures.is_empty() && secs < GRAD_SECONDS, detail)
}

fn criterion_3() -> Outcome {
    let mut r = rng("stop-gradient");
    let arch = ArchConfig::new(BackboneKind::Toy, 2);
    let pair = init_pair(&arch, (3, 4)).unwrap();
    let side = 16;
    let lab = LabeledBatch {
        images: random_tensor(&mut r, &[2, 3, side, side], 1.0),
        masks: (0..2).map(|_| random_mask(&mut r, side, side)).collect(),
    };
    let unl = UnlabeledBatch {
        target: random_tensor(&mut r, &[2, 3, side, side], 1.0),
        student: random_tensor(&mut r, &[2, 3, side, side], 1.0),
        correspondence: vec![None, None],
    };
    let live = build_step(&pair, &lab, Some(&unl), 1.0, Targets::Compute { tau: 0.6 }).unwrap();
    let (y1, y2) = live.objective.targets.clone().unwrap();
    let frozen = build_step(&pair, &lab, Some(&unl), 1.0, Targets::Fixed { y1, y2 }).unwrap();
    let a = live.gradients(&pair).unwrap();
    let b = frozen.gradients(&pair).unwrap();
    let same_loss =
        live.graph.value(live.objective.loss) == frozen.graph.value(frozen.objective.loss);
    let tensors = a[0].len() + a[1].len();
    let identical = a == b;
    Outcome::new(
        identical && same_loss,
        format!("{tensors} gradient tensors bitwise identical: {identical}, loss identical: {same_loss}"),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng("threshold");
    let mut notes = Vec::new();
    let mut pass = true;

    let inst = LogitInstance::random(&mut r, 2, 8);
    let (_, _, zero) = inst.build([0, 1, 2, 3, 4, 5], Targets::Compute { tau: 0.0 }, false);
    pass &= zero.breakdown.retained_fraction == 1.0;
    notes.push(format!(
        "tau 0 retained {}",
        zero.breakdown.retained_fraction
    ));

    let (_, _, above) = inst.build(
        [0, 1, 2, 3, 4, 5],
        Targets::Compute { tau: TAU_ABOVE_ONE },
        false,
    );
    pass &= above.breakdown.l_cps_u == 0.0 && above.breakdown.l_cps_l == 0.0;
    notes.push(format!(
        "tau {TAU_ABOVE_ONE} L_u {} L_l {}",
        above.breakdown.l_cps_u, above.breakdown.l_cps_l
    ));

    let mut violations = 0usize;
    for _ in 0..MONOTONE_MAPS {
        let k = r.random_range(2..=4);
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let p = random_prob(&mut r, k, h, w);
        let mut taus: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
        taus.extend([0.0, 1.0, TAU_ABOVE_ONE]);
        taus.sort_by(f64::total_cmp);
        let ys: Vec<PseudoLabel> = taus.iter().map(|&t| harden(&p, t)).collect();
        pass &= ys[0].retained_fraction() == 1.0 && ys[ys.len() - 1].kept() == 0;
        for pair in ys.windows(2) {
            let subset = pair[1]
                .keep
                .iter()
                .zip(&pair[0].keep)
                .all(|(&hi, &lo)| !hi || lo);
            if !subset || pair[0].labels != pair[1].labels {
                violations += 1;
            }
        }
    }
    pass &= violations == 0;
    notes.push(format!(
        "{MONOTONE_MAPS} maps, {violations} monotonicity violations"
    ));
    Outcome::new(pass, notes.join(", "))
}

fn components(b: &LossBreakdown) -> [f64; 5] {
    [b.l_s, b.l_cps_u, b.l_cps_l, b.total, b.retained_fraction]
}

fn criterion_5() -> Outcome {
    let mut r = rng("symmetry");
    let mut worst: f64 = 0.0;
    for _ in 0..SYMMETRY_INSTANCES {
        let b = r.random_range(1..=2);
        let side = r.random_range(1..=8);
        let inst = LogitInstance::random(&mut r, b, side);
        let tau = r.random_range(0.5..1.0);
        let (_, _, a) = inst.build([0, 1, 2, 3, 4, 5], Targets::Compute { tau }, false);
        let (_, _, s) = inst.build([1, 0, 3, 2, 5, 4], Targets::Compute { tau }, false);
        for (x, y) in components(&a.breakdown)
            .iter()
            .zip(components(&s.breakdown))
        {
            worst = worst.max((x - y).abs());
        }

        let maps = |r: &mut Rng64| -> Vec<ProbabilityMap> {
            (0..b).map(|_| random_prob(r, 2, side, side)).collect()
        };
        let (p1, p2) = (maps(&mut r), maps(&mut r));
        let gt: Vec<MaskTensor> = (0..b).map(|_| random_mask(&mut r, side, side)).collect();
        let y1: Vec<PseudoLabel> = (0..b).map(|_| random_label(&mut r, side, side)).collect();
        let y2: Vec<PseudoLabel> = (0..b).map(|_| random_label(&mut r, side, side)).collect();
        let pairs = [
            (
                supervised_loss(&p1, &p2, &gt).unwrap(),
                supervised_loss(&p2, &p1, &gt).unwrap(),
            ),
            (
                cps_unlabeled_loss(&p1, &p2, &y1, &y2).unwrap(),
                cps_unlabeled_loss(&p2, &p1, &y2, &y1).unwrap(),
            ),
            (
                cps_weak_cross_loss(&p1, &p2, &y1, &y2).unwrap(),
                cps_weak_cross_loss(&p2, &p1, &y2, &y1).unwrap(),
            ),
        ];
        for (x, y) in pairs {
            worst = worst.max((x - y).abs());
        }
    }
    Outcome::new(
        worst < SYMMETRY_TOL,
        format!("{SYMMETRY_INSTANCES} instances, max |d| {worst:.2e} (tol {SYMMETRY_TOL:.0e})"),
    )
}

/// Mean over present classes of |pred ∩ gt| / |pred ∪ gt| as pixel sets.
fn brute_miou(pred: &[u8], gt: &[u8], classes: u8) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let t: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let union = p.union(&t).count();
        if union > 0 {
            sum += p.intersection(&t).count() as f64 / union as f64;
            present += 1;
        }
    }
    sum / present as f64
}

fn criterion_6() -> Outcome {
    let mut r = rng("miou");
    let mut worst: f64 = 0.0;
    for _ in 0..MIOU_PAIRS {
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let bias = r.random_range(0.0..1.0);
        let gt = random_mask(&mut r, h, w);
        let pred = MaskTensor::new(
            h,
            w,
            gt.labels()
                .iter()
                .map(|&v| if r.random_bool(bias) { 1 - v } else { v })
                .collect(),
        )
        .unwrap();
        let got = miou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 2).unwrap();
        worst = worst.max((got - brute_miou(pred.labels(), gt.labels(), 2)).abs());

        // Wider label sets through the confusion matrix directly.
        let k = r.random_range(2..=5u8);
        let a: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k)).collect();
        let b: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k)).collect();
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&a, &b).unwrap();
        worst = worst.max((cm.miou().unwrap() - brute_miou(&a, &b, k)).abs());
    }
    let gt = MaskTensor::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = MaskTensor::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let hand = miou(&[pred], std::slice::from_ref(&gt), 2).unwrap();
    let perfect = miou(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 2).unwrap();
    let pass = worst < MIOU_TOL && perfect == 1.0 && (hand - 7.0 / 12.0).abs() < MIOU_TOL;
    Outcome::new(
        pass,
        format!(
            "{MIOU_PAIRS} pairs max |d| {worst:.2e}, perfect {perfect}, hand example {hand:.12}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let index = DatasetIndex {
        root: PathBuf::from("synthetic"),
        entries: (0..SPLIT_ITEMS)
            .map(|i| DatasetEntry {
                id: format!("item{i:04}"),
                image_path: PathBuf::from(format!("images/item{i:04}.png")),
                mask_path: PathBuf::from(format!("masks/item{i:04}.png")),
            })
            .collect(),
        class_count: 2,
    };
    let mut pass = true;
    let mut counts = Vec::new();
    for (den, expect) in [(2, 500), (4, 250), (8, 125), (16, 62)] {
        let f = Fraction::new(1, den).unwrap();
        let a = make_split(&index, f, 7).unwrap();
        let b = make_split(&index, f, 7).unwrap();
        let lab: HashSet<&String> = a.labeled.iter().collect();
        let disjoint = a.unlabeled.iter().all(|id| !lab.contains(id));
        let covers =
            a.labeled.len() + a.unlabeled.len() == SPLIT_ITEMS && lab.len() == a.labeled.len();
        pass &=
            a.labeled.len() == expect && disjoint && covers && a == b && a.validate(&index).is_ok();
        counts.push(a.labeled.len().to_string());
    }
    Outcome::new(
        pass,
        format!(
            "labeled counts {} of {SPLIT_ITEMS}, disjoint and repeatable",
            counts.join("/")
        ),
    )
}

fn best_of(index: &DatasetIndex, seed: u64, omega: f64, strategy: AblationStrategy) -> f64 {
    let manifest = make_split(index, Fraction::new(1, 8).unwrap(), seed).unwrap();
    let cfg = TrainConfig {
        epochs: BENEFIT_EPOCHS,
        omega,
        lr_max: BENEFIT_LR_MAX,
        lr_min: BENEFIT_LR_MIN,
        seed,
        strategy,
        deterministic: true,
        ..TrainConfig::default()
    };
    let data = TrainData::prepare(index, &manifest, &cfg).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    for _ in 0..BENEFIT_EPOCHS {
        t.train_epoch().unwrap();
    }
    t.best().map_or(0.0, |(_, m)| m)
}

fn criterion_8(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let index = generate_synthetic(BENEFIT_IMAGES, BENEFIT_SIDE, 0, scratch.join("blobs")).unwrap();
    let mut runs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in BENEFIT_SEEDS {
        runs.entry("dfcps").or_default().push(best_of(
            &index,
            seed,
            1.0,
            AblationStrategy::StrongWeak,
        ));
        runs.entry("supervised").or_default().push(best_of(
            &index,
            seed,
            0.0,
            AblationStrategy::StrongWeak,
        ));
        runs.entry("original").or_default().push(best_of(
            &index,
            seed,
            1.0,
            AblationStrategy::Original,
        ));
    }
    let mean = |k: &str| runs[k].iter().sum::<f64>() / runs[k].len() as f64;
    let (d, s, o) = (mean("dfcps"), mean("supervised"), mean("original"));
    let secs = start.elapsed().as_secs_f64();
    let fmt = |k: &str| {
        runs[k]
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome::new(
        d > s && d >= o && secs < BENEFIT_SECONDS,
        format!(
            "seed-mean best val mIoU: strong-weak {d:.4} [{}], supervised {s:.4} [{}], original {o:.4} [{}], margin {:+.4}, {secs:.0}s",
            fmt("dfcps"),
            fmt("supervised"),
            fmt("original"),
            d - s
        ),
    )
}

fn criterion_9(scratch: &Path) -> Outcome {
    let index = generate_synthetic(24, 32, 5, scratch.join("small")).unwrap();
    let manifest = make_split(&index, Fraction::new(1, 4).unwrap(), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_labeled: 4,
        batch_unlabeled: 6,
        lr_max: 0.02,
        lr_min: 2e-4,
        seed: 5,
        deterministic: true,
        ..TrainConfig::default()
    };
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = scratch.join(format!("run-{run}"));
        fit(&cfg, &index, &manifest, &out, &FitOptions::default()).unwrap();
        files.push(std::fs::read(out.join(METRICS_FILE)).unwrap());
    }
    let same = files[0] == files[1];
    Outcome::new(
        same,
        format!(
            "two 3-epoch runs, metrics.csv byte-identical: {same} ({} bytes)",
            files[0].len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let cfg = TrainConfig::default();
    let total = cfg.epochs * 15;
    let first = cfg.lr_at(0, total);
    let last = cfg.lr_at(total, total);
    let poly = (
        lr_at(LrSchedule::Poly, 1e-4, 1e-6, 0, total),
        lr_at(LrSchedule::Poly, 1e-4, 1e-6, total, total),
    );
    let pass = first == 1e-4 && last == 1e-6 && poly == (1e-4, 1e-6);
    Outcome::new(
        pass,
        format!(
            "cosine lr(0) {first:e}, lr(T) {last:e}; poly {:e}, {:e}",
            poly.0, poly.1
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let criteria: [Criterion; 10] = [
        ("loss oracles", Box::new(criterion_1)),
        ("gradient check", Box::new(criterion_2)),
        ("stop-gradient", Box::new(criterion_3)),
        ("threshold semantics", Box::new(criterion_4)),
        ("group symmetry", Box::new(criterion_5)),
        ("mIoU oracle", Box::new(criterion_6)),
        ("split protocol", Box::new(criterion_7)),
        (
            "semi-supervision benefit",
            Box::new(|| criterion_8(scratch.path())),
        ),
        ("determinism", Box::new(|| criterion_9(scratch.path()))),
        ("lr endpoints", Box::new(criterion_10)),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name}: {}", i + 1, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        // Unmet criteria are reported, not enforced, unless asked.
        if std::env::var_os("DFCPS_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
