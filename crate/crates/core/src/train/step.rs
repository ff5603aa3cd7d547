use std::collections::BTreeMap;

use crate::augment::transport_label;
use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::data::MaskTensor;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{Mode, ModelPair, ParamNodes, SegModel};
use crate::pseudolabel::{harden_batch, PseudoLabel};
use crate::tensor::Tensor;

/// Ground-truth images for one step, already augmented.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// `(B, 3, H, W)`.
    pub images: Tensor,
    pub masks: Vec<MaskTensor>,
}

/// Two views per unlabeled image.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    /// Views whose predictions become pseudo-labels, `(B, 3, H, W)`.
    pub target: Tensor,
    /// Views trained against those pseudo-labels, `(B, 3, H, W)`.
    pub student: Tensor,
    /// Per image, the student-to-target pixel map when the two views differ
    /// geometrically.
    pub correspondence: Vec<Option<Vec<Option<u32>>>>,
}

/// Where the pseudo-labels of a step come from.
#[derive(Clone, Debug)]
pub enum Targets {
    /// Harden each network's own target-view prediction at this threshold.
    Compute { tau: f64 },
    /// Use these labels, given in the target-view frame, for networks 1 and 2.
    Fixed {
        y1: Vec<PseudoLabel>,
        y2: Vec<PseudoLabel>,
    },
}

/// Logit nodes of both networks, `[net1, net2]`.
#[derive(Clone, Debug)]
pub struct Heads {
    pub labeled: [NodeId; 2],
    pub unlabeled: Option<UnlabeledHeads>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledHeads {
    pub target: [NodeId; 2],
    pub student: [NodeId; 2],
    pub correspondence: Vec<Option<Vec<Option<u32>>>>,
}

/// Scalar objective assembled on a graph.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
    /// Target-frame pseudo-labels of networks 1 and 2.
    pub targets: Option<(Vec<PseudoLabel>, Vec<PseudoLabel>)>,
    pub kept_pixels: usize,
    pub unlabeled_pixels: usize,
}

fn flatten_masks(masks: &[MaskTensor]) -> Vec<u8> {
    masks
        .iter()
        .flat_map(|m| m.labels().iter().copied())
        .collect()
}

fn flatten_labels(ys: &[PseudoLabel]) -> (Vec<u8>, Vec<bool>) {
    let labels = ys.iter().flat_map(|y| y.labels.iter().copied()).collect();
    let keep = ys.iter().flat_map(|y| y.keep.iter().copied()).collect();
    (labels, keep)
}

/// Builds `L_S + omega * (L_CPS^l + L_CPS^u)` from logit nodes.
///
/// `L_S` sums both networks' cross-entropy against `gt`. `L_CPS^u` trains
/// each network's student-view prediction against its own target-view
/// pseudo-label, `L_CPS^l` trains each network's target-view prediction
/// against the other network's pseudo-label. Every term is a per-image
/// masked mean averaged over the batch. Pseudo-labels enter as constants.
pub fn objective(
    g: &mut Graph,
    heads: &Heads,
    gt: &[MaskTensor],
    targets: Targets,
    omega: f64,
) -> Result<Objective> {
    let gt_flat = flatten_masks(gt);
    let keep_all = vec![true; gt_flat.len()];
    let mut terms = Vec::with_capacity(6);
    let mut l_s = 0.0;
    for &logits in &heads.labeled {
        let p = g.softmax(logits)?;
        let t = g.masked_nll(p, gt_flat.clone(), keep_all.clone())?;
        l_s += g.value(t).item();
        terms.push((t, 1.0));
    }
    let Some(u) = &heads.unlabeled else {
        let loss = g.weighted_sum(&terms)?;
        let mut breakdown = total_loss(l_s, 0.0, 0.0, omega)?;
        breakdown.retained_fraction = 0.0;
        return Ok(Objective {
            loss,
            breakdown,
            targets: None,
            kept_pixels: 0,
            unlabeled_pixels: 0,
        });
    };
    let pw = [g.softmax(u.target[0])?, g.softmax(u.target[1])?];
    let ps = [g.softmax(u.student[0])?, g.softmax(u.student[1])?];
    let (y1, y2) = match targets {
        Targets::Compute { tau } => (
            harden_batch(g.value(pw[0]), tau)?,
            harden_batch(g.value(pw[1]), tau)?,
        ),
        Targets::Fixed { y1, y2 } => (y1, y2),
    };
    let b = g.value(pw[0]).shape()[0];
    if y1.len() != b || y2.len() != b || u.correspondence.len() != b {
        return Err(Error::Shape(format!(
            "{b} unlabeled images but {} and {} pseudo-labels",
            y1.len(),
            y2.len()
        )));
    }
    let to_student = |ys: &[PseudoLabel]| -> Vec<PseudoLabel> {
        ys.iter()
            .zip(&u.correspondence)
            .map(|(y, map)| match map {
                Some(m) => transport_label(y, m),
                None => y.clone(),
            })
            .collect()
    };
    let mut l_u = 0.0;
    let mut l_l = 0.0;
    // Own pseudo-label on the student view.
    for (p, ys) in [(ps[0], to_student(&y1)), (ps[1], to_student(&y2))] {
        let (labels, keep) = flatten_labels(&ys);
        let t = g.masked_nll(p, labels, keep)?;
        l_u += g.value(t).item();
        terms.push((t, omega));
    }
    // The other network's pseudo-label on the target view.
    for (p, ys) in [(pw[0], &y2), (pw[1], &y1)] {
        let (labels, keep) = flatten_labels(ys);
        let t = g.masked_nll(p, labels, keep)?;
        l_l += g.value(t).item();
        terms.push((t, omega));
    }
    let loss = g.weighted_sum(&terms)?;
    let kept_pixels: usize = y1.iter().chain(&y2).map(PseudoLabel::kept).sum();
    let unlabeled_pixels: usize = y1.iter().chain(&y2).map(|y| y.keep.len()).sum();
    let mut breakdown = total_loss(l_s, l_u, l_l, omega)?;
    breakdown.retained_fraction = if unlabeled_pixels == 0 {
        0.0
    } else {
        kept_pixels as f64 / unlabeled_pixels as f64
    };
    Ok(Objective {
        loss,
        breakdown,
        targets: Some((y1, y2)),
        kept_pixels,
        unlabeled_pixels,
    })
}

/// One step's graph over both networks.
pub struct StepGraph {
    pub graph: Graph,
    pub params: [ParamNodes; 2],
    pub heads: Heads,
    pub objective: Objective,
    /// Batch statistics per network, in forward order.
    pub stats: [Vec<(String, BatchStats)>; 2],
}

fn run(
    model: &SegModel,
    g: &mut Graph,
    params: &ParamNodes,
    x: NodeId,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<NodeId> {
    let f = model.forward(g, params, x, Mode::Train)?;
    stats.extend(f.stats);
    Ok(f.logits)
}

/// Forward passes of both networks plus the objective. Each network sees
/// the labeled batch, then target views, then student views, each as its
/// own normalization batch.
pub fn build_step(
    pair: &ModelPair,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    omega: f64,
    targets: Targets,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let nets = [&pair.net1, &pair.net2];
    let params = [nets[0].bind(&mut g), nets[1].bind(&mut g)];
    let mut stats = [Vec::new(), Vec::new()];
    let xl = g.input(labeled.images.clone());
    let mut lab = [xl; 2];
    for n in 0..2 {
        lab[n] = run(nets[n], &mut g, &params[n], xl, &mut stats[n])?;
    }
    let unlabeled_heads = match unlabeled {
        None => None,
        Some(u) => {
            let xt = g.input(u.target.clone());
            let xs = g.input(u.student.clone());
            let mut target = [xt; 2];
            let mut student = [xs; 2];
            for n in 0..2 {
                target[n] = run(nets[n], &mut g, &params[n], xt, &mut stats[n])?;
                student[n] = run(nets[n], &mut g, &params[n], xs, &mut stats[n])?;
            }
            Some(UnlabeledHeads {
                target,
                student,
                correspondence: u.correspondence.clone(),
            })
        }
    };
    let heads = Heads {
        labeled: lab,
        unlabeled: unlabeled_heads,
    };
    let objective = objective(&mut g, &heads, &labeled.masks, targets, omega)?;
    Ok(StepGraph {
        graph: g,
        params,
        heads,
        objective,
        stats,
    })
}

impl StepGraph {
    /// Gradients of the objective by parameter name, per network. Unused
    /// parameters get zeros.
    pub fn gradients(&self, pair: &ModelPair) -> Result<[BTreeMap<String, Tensor>; 2]> {
        let mut grads = self.graph.backward(self.objective.loss)?;
        let nets = [&pair.net1, &pair.net2];
        let mut out = [BTreeMap::new(), BTreeMap::new()];
        for n in 0..2 {
            for (name, &id) in &self.params[n] {
                let g = grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(nets[n].params()[name].shape()));
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for net{} {name}",
                        n + 1
                    )));
                }
                out[n].insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: BTreeMap<String, Tensor>) {
        self.velocity = v;
    }

    pub fn step(
        &mut self,
        model: &mut SegModel,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in model.params_mut().iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Numeric(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
