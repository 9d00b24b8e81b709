//! Training objective: hard-assigned Gaussian NLL per decoder layer plus a
//! classification term, and the auxiliary dense-future L1 loss.
//!
//! The NLL follows the expanded closed form
//! `log sx + log sy + 0.5 log(1-rho^2) + quad - log p_h` with the constant
//! `log 2pi` omitted, averaged over valid future steps. One positive mode is
//! selected per sample and reused by every layer's loss.

use crate::autodiff::{Graph, Mat, Var};
use crate::decoder::{LayerPrediction, GAUSS_PARAMS, RHO_SCALE, SIGMA_RAW_MIN, SIGMA_RAW_MAX};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Which signal picks the positive mixture component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStrategy {
    /// Nearest intention point to the ground-truth endpoint.
    AlphaIntentionPoint,
    /// Nearest final-layer predicted endpoint to the ground-truth endpoint.
    BetaPredictedTrajectory,
}

/// Ground-truth future of the interested agent in the agent-centric frame.
#[derive(Clone, Debug)]
pub struct GtFuture {
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl GtFuture {
    pub fn endpoint(&self) -> Option<[f64; 2]> {
        match self.valid.last() {
            Some(true) => self.positions.last().copied(),
            _ => None,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Dense-future regression targets for all valid agents.
#[derive(Clone, Debug)]
pub struct DenseGt {
    /// `[n_valid_agents, t_future * 4]`, channels `[x, y, vx, vy]` per step.
    pub targets: Mat,
    /// Same shape; 1.0 where the agent-step is valid.
    pub mask: Mat,
    /// Number of valid agent-steps.
    pub n_valid_steps: usize,
}

/// Select the positive mode. Ties resolve to the lowest index.
pub fn assign_positive(
    strategy: AssignmentStrategy,
    intention_points: &[[f64; 2]],
    final_layer_endpoints: &[[f64; 2]],
    gt_endpoint: [f64; 2],
) -> usize {
    let anchors = match strategy {
        AssignmentStrategy::AlphaIntentionPoint => intention_points,
        AssignmentStrategy::BetaPredictedTrajectory => final_layer_endpoints,
    };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, a) in anchors.iter().enumerate() {
        let d = (a[0] - gt_endpoint[0]).powi(2) + (a[1] - gt_endpoint[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// The appendix closed form for one timestep, for oracle fixtures.
pub fn gaussian_nll_closed_form(dx: f64, dy: f64, sx: f64, sy: f64, rho: f64, p_h: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    sx.ln()
        + sy.ln()
        + 0.5 * one_m.ln()
        + ((dx / sx).powi(2) + (dy / sy).powi(2) - 2.0 * rho * dx * dy / (sx * sy)) / (2.0 * one_m)
        - p_h.ln()
}

/// Per-layer Gaussian regression NLL (mean over valid steps) and the
/// `-log p_h` classification term, as graph nodes.
pub fn gaussian_nll_layer(
    g: &mut Graph,
    raw: Var,
    logits: Var,
    positive: usize,
    gt: &GtFuture,
) -> Result<(Var, Var)> {
    let t = gt.positions.len();
    let n_valid = gt.n_valid();
    if n_valid == 0 {
        return Err(Error::domain("ground-truth future has no valid steps"));
    }
    let k_modes = g.shape(logits).1;
    if positive >= k_modes {
        return Err(Error::config(format!(
            "positive mode {positive} out of range for {k_modes} modes"
        )));
    }

    let row = g.gather_rows(raw, Rc::new(vec![positive]));
    let per_step = g.reshape(row, t, GAUSS_PARAMS);
    let mu = g.slice_cols(per_step, 0, 2);
    let raw_sx = g.slice_cols(per_step, 2, 3);
    let raw_sy = g.slice_cols(per_step, 3, 4);
    let raw_rho = g.slice_cols(per_step, 4, 5);

    let log_sx = g.clamp(raw_sx, SIGMA_RAW_MIN, SIGMA_RAW_MAX);
    let log_sy = g.clamp(raw_sy, SIGMA_RAW_MIN, SIGMA_RAW_MAX);
    let tanh_rho = g.tanh(raw_rho);
    let rho = g.scale(tanh_rho, RHO_SCALE);

    let gt_pos = g.constant(Mat::from_fn(t, 2, |r, c| gt.positions[r][c]));
    let diff = g.sub(gt_pos, mu);
    let dx = g.slice_cols(diff, 0, 1);
    let dy = g.slice_cols(diff, 1, 2);
    let neg_lsx = g.neg(log_sx);
    let neg_lsy = g.neg(log_sy);
    let inv_sx = g.exp(neg_lsx);
    let inv_sy = g.exp(neg_lsy);
    let dxn = g.mul(dx, inv_sx);
    let dyn_ = g.mul(dy, inv_sy);

    let rho2 = g.mul(rho, rho);
    let neg_rho2 = g.neg(rho2);
    let one_m = g.add_const(neg_rho2, 1.0);
    let ln_one_m = g.ln(one_m);
    let neg_ln = g.neg(ln_one_m);
    let recip_one_m = g.exp(neg_ln);

    let t1 = g.mul(dxn, dxn);
    let t2 = g.mul(dyn_, dyn_);
    let cross = g.mul(dxn, dyn_);
    let cross = g.mul(cross, rho);
    let cross = g.scale(cross, 2.0);
    let sum12 = g.add(t1, t2);
    let quad = g.sub(sum12, cross);
    let quad = g.mul(quad, recip_one_m);
    let quad = g.scale(quad, 0.5);

    let half_ln = g.scale(ln_one_m, 0.5);
    let sig_terms = g.add(log_sx, log_sy);
    let step_loss = g.add(sig_terms, half_ln);
    let step_loss = g.add(step_loss, quad);

    let mask = g.constant(Mat::from_fn(t, 1, |r, _| if gt.valid[r] { 1.0 } else { 0.0 }));
    let masked = g.mul(step_loss, mask);
    let total = g.sum_all(masked);
    let nll = g.scale(total, 1.0 / n_valid as f64);

    let lse = g.row_logsumexp(logits);
    let lh = g.slice_cols(logits, positive, positive + 1);
    let cls = g.sub(lse, lh);

    Ok((nll, cls))
}

/// Mean absolute error over valid agent-steps and the four channels.
pub fn auxiliary_l1(g: &mut Graph, dense_future: Var, gt: &DenseGt) -> Result<Var> {
    if gt.n_valid_steps == 0 {
        return Err(Error::domain("no valid agent-steps for the auxiliary loss"));
    }
    let target = g.constant(gt.targets.clone());
    let mask = g.constant(gt.mask.clone());
    let diff = g.sub(dense_future, target);
    let absd = g.abs(diff);
    let masked = g.mul(absd, mask);
    let total = g.sum_all(masked);
    Ok(g.scale(total, 1.0 / (4.0 * gt.n_valid_steps as f64)))
}

/// Scalar summary of one sample's loss terms.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub nll_per_layer: Vec<f64>,
    pub classification_per_layer: Vec<f64>,
    pub auxiliary: f64,
    pub total: f64,
    pub positive_mode: usize,
}

/// Sum every decoder layer's NLL and classification terms (equal weights)
/// plus the auxiliary loss. The positive mode is assigned once per sample.
pub fn total_loss(
    g: &mut Graph,
    layers: &[LayerPrediction],
    dense_future: Option<Var>,
    dense_gt: Option<&DenseGt>,
    gt: &GtFuture,
    strategy: AssignmentStrategy,
    intention_points: &[[f64; 2]],
) -> Result<(Var, LossReport)> {
    let endpoint = gt
        .endpoint()
        .ok_or_else(|| Error::domain("ground-truth endpoint invalid; sample must be excluded"))?;
    let final_layer = layers.last().ok_or_else(|| Error::config("no decoder layers"))?;
    let final_endpoints: Vec<[f64; 2]> = (0..final_layer.gmm.n_modes)
        .map(|k| final_layer.gmm.endpoint(k))
        .collect();
    let positive = assign_positive(strategy, intention_points, &final_endpoints, endpoint);

    let mut total: Option<Var> = None;
    let mut nll_per_layer = Vec::with_capacity(layers.len());
    let mut classification_per_layer = Vec::with_capacity(layers.len());
    for layer in layers {
        let (nll, cls) = gaussian_nll_layer(g, layer.raw, layer.logits, positive, gt)?;
        nll_per_layer.push(g.value(nll).item());
        classification_per_layer.push(g.value(cls).item());
        let layer_sum = g.add(nll, cls);
        total = Some(match total {
            Some(acc) => g.add(acc, layer_sum),
            None => layer_sum,
        });
    }
    let mut total = total.expect("at least one layer");

    let auxiliary = match (dense_future, dense_gt) {
        (Some(s), Some(gt_dense)) => {
            let aux = auxiliary_l1(g, s, gt_dense)?;
            total = g.add(total, aux);
            g.value(aux).item()
        }
        _ => 0.0,
    };

    let report = LossReport {
        nll_per_layer,
        classification_per_layer,
        auxiliary,
        total: g.value(total).item(),
        positive_mode: positive,
    };
    if !report.total.is_finite() {
        return Err(Error::domain(format!("non-finite loss: {report:?}")));
    }
    Ok((total, report))
}
