//! Training objectives: Hungarian matching, mask and instance losses,
//! symmetric cross-modal contrastive loss and position regression losses.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TextLocError};
use crate::geometry::VoxelGrid;
use crate::scene::Cell;

pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1.0;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_inst: f64,
    pub tau_init: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_inst: 0.5,
            tau_init: 0.07,
        }
    }
}

/// Injective, cost-minimal assignment of predictions to ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (prediction index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a ground-truth partner.
    pub unmatched_predictions: Vec<usize>,
}

/// Hungarian algorithm (potentials formulation), O(n^2 m). Matches
/// min(p, g) pairs at globally minimal total cost.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(TextLocError::Argument("hungarian_match: non-finite cost".into()));
    }
    let (p, g) = (cost.nrows(), cost.ncols());
    if p == 0 || g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_predictions: (0..p).collect(),
        });
    }
    // The core routine needs rows <= cols; transpose if necessary.
    let transposed = p > g;
    let work = if transposed { cost.t().to_owned() } else { cost.clone() };
    let (n, m) = (work.nrows(), work.ncols());

    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // column j -> row (1-based)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = work[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::new();
    for j in 1..=m {
        if matched_row[j] != 0 {
            let (row, col) = (matched_row[j] - 1, j - 1);
            if transposed {
                pairs.push((col, row));
            } else {
                pairs.push((row, col));
            }
        }
    }
    pairs.sort();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(i, _)| i).collect();
    Ok(Assignment {
        pairs,
        unmatched_predictions: (0..p).filter(|i| !matched.contains(i)).collect(),
    })
}

fn bce_scalar(m: f64, target: f64) -> f64 {
    let m = m.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * m.ln() + (1.0 - target) * (1.0 - m).ln())
}

fn mask_loss_scalar(heatmap: &Array1<f64>, gt: &Array1<f64>) -> f64 {
    let n = heatmap.len() as f64;
    let bce: f64 = heatmap
        .iter()
        .zip(gt.iter())
        .map(|(&m, &t)| bce_scalar(m, t))
        .sum::<f64>()
        / n;
    let inter: f64 = heatmap.iter().zip(gt.iter()).map(|(&m, &t)| m * t).sum();
    let dice = 1.0
        - (2.0 * inter + DICE_SMOOTHING)
            / (heatmap.sum() + gt.sum() + DICE_SMOOTHING);
    bce + dice
}

/// Matching cost matrix: mask loss (BCE + dice on soft heatmaps) plus the
/// weighted negative log-probability of the true class.
pub fn match_cost(
    heatmaps: &Array2<f64>,
    class_probs: &Array2<f64>,
    gt_masks: &Array2<f64>,
    gt_classes: &[usize],
    lambda_c: f64,
) -> Array2<f64> {
    let (p, g) = (heatmaps.nrows(), gt_masks.nrows());
    let mut cost = Array2::zeros((p, g));
    for i in 0..p {
        let h = heatmaps.row(i).to_owned();
        for j in 0..g {
            let m = mask_loss_scalar(&h, &gt_masks.row(j).to_owned());
            let prob = class_probs[[i, gt_classes[j]]].clamp(PROB_EPS, 1.0);
            cost[[i, j]] = m + lambda_c * (-prob.ln());
        }
    }
    cost
}

/// Differentiable BCE + dice mask loss on a 1D soft heatmap node.
pub fn mask_loss(g: &mut Graph, heatmap: NodeId, gt: &Array1<f64>) -> Result<NodeId> {
    let len = g.value(heatmap).len();
    if len != gt.len() {
        return Err(TextLocError::Argument(format!(
            "mask_loss: heatmap length {len} vs ground truth {}",
            gt.len()
        )));
    }
    let m = g.clamp(heatmap, PROB_EPS, 1.0 - PROB_EPS);
    let t = g.constant(gt.clone());
    let one_minus_t = g.constant(gt.mapv(|v| 1.0 - v));
    let log_m = g.log(m);
    let pos = g.mul(t, log_m);
    let ones = g.constant(Array1::from_elem(len, 1.0));
    let m_compl = g.sub(ones, m);
    let log_compl = g.log(m_compl);
    let neg = g.mul(one_minus_t, log_compl);
    let s = g.add(pos, neg);
    let bce_sum = g.mean_all(s);
    let bce = g.scale(bce_sum, -1.0);

    let t2 = g.constant(gt.clone());
    let inter = g.mul(m, t2);
    let inter_sum = g.sum_all(inter);
    let num = g.scale(inter_sum, 2.0);
    let smooth = g.constant_scalar(DICE_SMOOTHING);
    let num = g.add(num, smooth);
    let m_sum = g.sum_all(m);
    let t_sum = g.constant_scalar(gt.sum());
    let den = g.add(m_sum, t_sum);
    let smooth2 = g.constant_scalar(DICE_SMOOTHING);
    let den = g.add(den, smooth2);
    let den_inv = g.unary(crate::autodiff::UnaryKind::Recip, den);
    let ratio = g.mul(num, den_inv);
    let one = g.constant_scalar(1.0);
    let dice = g.sub(one, ratio);
    Ok(g.add(bce, dice))
}

/// Cross-entropy of one logit row against a target class index.
pub fn cross_entropy_row(g: &mut Graph, logits: NodeId, row: usize, target: usize) -> NodeId {
    let r = g.row(logits, row);
    let n = g.value(r).len();
    let m = g.stack_rows(&[r]);
    let probs = g.softmax_rows(m);
    let mut onehot = Array2::zeros((1, n));
    onehot[[0, target]] = 1.0;
    let oh = g.constant(onehot);
    let picked = g.mul(probs, oh);
    let p = g.sum_all(picked);
    let p = g.clamp(p, PROB_EPS, 1.0);
    let lp = g.log(p);
    g.scale(lp, -1.0)
}

/// Auxiliary instance objective: mask loss plus weighted class
/// cross-entropy over Hungarian-matched pairs; unmatched predictions get
/// cross-entropy toward the trailing no-object class.
pub fn instance_loss(
    g: &mut Graph,
    heatmaps: NodeId,
    class_logits: NodeId,
    gt_masks: &Array2<f64>,
    gt_classes: &[usize],
    weights: &LossWeights,
) -> Result<NodeId> {
    let num_classes = g.value(class_logits).shape()[1];
    let no_object = num_classes - 1;
    let heat_vals = g.value2(heatmaps);
    let logit_vals = g.value2(class_logits);
    let probs = softmax_rows_plain(&logit_vals);
    let cost = match_cost(&heat_vals, &probs, gt_masks, gt_classes, weights.lambda_c);
    let assignment = hungarian_match(&cost)?;

    let mut terms = Vec::new();
    for &(pi, gj) in &assignment.pairs {
        let h = g.row(heatmaps, pi);
        let ml = mask_loss(g, h, &gt_masks.row(gj).to_owned())?;
        terms.push(ml);
        let ce = cross_entropy_row(g, class_logits, pi, gt_classes[gj]);
        terms.push(g.scale(ce, weights.lambda_c));
    }
    for &pi in &assignment.unmatched_predictions {
        let ce = cross_entropy_row(g, class_logits, pi, no_object);
        terms.push(g.scale(ce, weights.lambda_c));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

pub fn softmax_rows_plain(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Per-pair symmetric contrastive losses for a batch of matched unit-norm
/// text/cell embeddings. Returns a 1D node of length N.
pub fn contrastive_pair_losses(
    g: &mut Graph,
    text_embs: NodeId,
    cell_embs: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    if g.scalar(tau) <= 0.0 {
        return Err(TextLocError::Argument("temperature must be positive".into()));
    }
    let n = g.value(text_embs).shape()[0];
    let cell_t = g.transpose(cell_embs);
    let sims = g.matmul(text_embs, cell_t);
    let inv_tau = g.unary(crate::autodiff::UnaryKind::Recip, tau);
    let logits = g.scale_by(sims, inv_tau);

    let eye = g.constant(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else {
            0.0
        }
    }));
    let text_sm = g.softmax_rows(logits);
    let diag_t = g.mul(text_sm, eye);
    let diag_t = g.sum_axis(diag_t, 1);
    let diag_t = g.clamp(diag_t, PROB_EPS, 1.0);
    let lt = g.log(diag_t);

    let logits_t = g.transpose(logits);
    let cell_sm = g.softmax_rows(logits_t);
    let diag_c = g.mul(cell_sm, eye);
    let diag_c = g.sum_axis(diag_c, 1);
    let diag_c = g.clamp(diag_c, PROB_EPS, 1.0);
    let lc = g.log(diag_c);

    let s = g.add(lt, lc);
    Ok(g.scale(s, -1.0))
}

/// Loss of a single matched pair within its batch.
pub fn contrastive_pair_loss(
    g: &mut Graph,
    index: usize,
    text_embs: NodeId,
    cell_embs: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    let losses = contrastive_pair_losses(g, text_embs, cell_embs, tau)?;
    let n = g.value(losses).len();
    let mut pick = Array1::zeros(n);
    pick[index] = 1.0;
    let sel = g.constant(pick);
    let p = g.mul(losses, sel);
    Ok(g.sum_all(p))
}

/// Mean of the per-pair contrastive losses over the batch.
pub fn contrastive_batch_loss(
    g: &mut Graph,
    text_embs: NodeId,
    cell_embs: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    let losses = contrastive_pair_losses(g, text_embs, cell_embs, tau)?;
    Ok(g.mean_all(losses))
}

/// Coarse objective: contrastive term plus weighted instance term.
pub fn coarse_loss(
    g: &mut Graph,
    contrastive: NodeId,
    instance: NodeId,
    lambda_inst: f64,
) -> NodeId {
    let scaled = g.scale(instance, lambda_inst);
    g.add(contrastive, scaled)
}

/// Euclidean distance between predicted and ground-truth 2D positions.
pub fn mse_loss(g: &mut Graph, pred: NodeId, gt: [f64; 2]) -> NodeId {
    let t = g.constant(ndarray::arr1(&gt));
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let s = g.sum_all(sq);
    g.unary(crate::autodiff::UnaryKind::Sqrt, s)
}

/// Fine objective: regression distance plus weighted instance term.
pub fn fine_loss(g: &mut Graph, mse: NodeId, instance: NodeId, lambda_inst: f64) -> NodeId {
    let scaled = g.scale(instance, lambda_inst);
    g.add(mse, scaled)
}

/// Ground-truth voxel masks for a cell: each voxel belongs to the instance
/// owning the most of its points (ties to the lowest instance id).
/// Returns (g x V masks, per-instance class ids, instance ids).
pub fn gt_voxel_masks(cell: &Cell, grid: &VoxelGrid) -> (Array2<f64>, Vec<usize>, Vec<u32>) {
    use std::collections::BTreeMap;
    let v = grid.voxel_count();
    let mut owner: Vec<u32> = Vec::with_capacity(v);
    let members = grid.members();
    for m in &members {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &p in m {
            *counts.entry(cell.point_instance_ids[p]).or_insert(0) += 1;
        }
        let (&best, _) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap();
        owner.push(best);
    }
    let mut present: Vec<u32> = owner.clone();
    present.sort();
    present.dedup();
    let mut masks = Array2::zeros((present.len(), v));
    let mut classes = Vec::with_capacity(present.len());
    for (gi, &inst) in present.iter().enumerate() {
        for (vi, &o) in owner.iter().enumerate() {
            if o == inst {
                masks[[gi, vi]] = 1.0;
            }
        }
        let class = cell
            .point_instance_ids
            .iter()
            .position(|&id| id == inst)
            .map(|p| cell.point_class_ids[p] as usize)
            .unwrap_or(0);
        classes.push(class);
    }
    (masks, classes, present)
}
