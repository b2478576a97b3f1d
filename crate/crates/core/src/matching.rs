//! Many-to-one assignment of predicted trajectories to target branches and
//! the loss terms built on top of it.
//!
//! With n predictions and m <= n targets, the target set is replicated
//! column-wise into a square n x n cost matrix, solved exactly with the
//! Hungarian algorithm, and the original target index is recovered modulo m.
//! Every target therefore receives floor(n/m) or ceil(n/m) predictions.
//!
//! The assignment is computed once from the first decoding step and reused
//! for all later refinement steps: position/radius losses are per step, end
//! and divergence losses use only the final step.

use crate::traj::{ConfluentTrajectorySet, TrajectoryTargets};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite cost at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("need at least as many predictions as targets, got n={n} < m={m}")]
    TooFewPredictions { n: usize, m: usize },
    #[error("empty cost matrix")]
    Empty,
    #[error("trajectory length mismatch: predictions L={pred}, targets L={target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("prediction sequence has no steps")]
    EmptySequence,
    #[error("prediction steps disagree on n/L")]
    InconsistentSteps,
    #[error("assignment covers {got} predictions, expected {expected}")]
    BadAssignment { got: usize, expected: usize },
}

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub lambda_pos: f64,
    pub lambda_rad: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { lambda_pos: 3.0, lambda_rad: 1.0 }
    }
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_pos: f64,
    pub alpha_rad: f64,
    pub alpha_end: f64,
    pub alpha_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_pos: 4.2, alpha_rad: 1.15, alpha_end: 0.94, alpha_div: 0.3 }
    }
}

/// Predicted trajectory snapshots across S refinement steps.
///
/// All steps share n and L; end and divergence entries are meaningful only
/// in the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub steps: Vec<ConfluentTrajectorySet>,
}

impl PredictionSequence {
    pub fn new(steps: Vec<ConfluentTrajectorySet>) -> Result<Self, MatchError> {
        let seq = PredictionSequence { steps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let first = self.steps.first().ok_or(MatchError::EmptySequence)?;
        let (n, l) = (first.n(), first.traj_len());
        for step in &self.steps {
            if step.n() != n || step.traj_len() != l {
                return Err(MatchError::InconsistentSteps);
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.steps.first().map(|s| s.n()).unwrap_or(0)
    }

    pub fn traj_len(&self) -> usize {
        self.steps.first().map(|s| s.traj_len()).unwrap_or(0)
    }

    pub fn first_step(&self) -> &ConfluentTrajectorySet {
        &self.steps[0]
    }

    pub fn last_step(&self) -> &ConfluentTrajectorySet {
        self.steps.last().expect("validated sequence is non-empty")
    }
}

/// Prediction-to-target assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Replicated-column index assigned to each prediction; a permutation.
    pub sigma: Vec<usize>,
    /// Original target index per prediction: `sigma[i] mod m`.
    pub j_hat: Vec<usize>,
}

/// Per-pair matching cost: mean L1 position distance plus mean absolute
/// radius difference along the shared sequence, weighted.
pub fn cost_matrix(
    pred: &ConfluentTrajectorySet,
    targets: &TrajectoryTargets,
    w: &MatchWeights,
) -> Result<Vec<Vec<f64>>, MatchError> {
    let l = pred.traj_len();
    if l != targets.traj_len() {
        return Err(MatchError::LengthMismatch { pred: l, target: targets.traj_len() });
    }
    let inv_l = 1.0 / l as f64;
    let mut c = vec![vec![0.0; targets.m()]; pred.n()];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut pos = 0.0;
            let mut rad = 0.0;
            for idx in 0..l {
                pos += pred.positions[i][idx].l1_dist(&targets.positions[j][idx]);
                rad += (pred.radii[i][idx] - targets.radii[j][idx]).abs();
            }
            *cell = w.lambda_pos * pos * inv_l + w.lambda_rad * rad * inv_l;
        }
    }
    Ok(c)
}

/// Cycles the m target columns until the matrix is square n x n.
///
/// Returns the widened matrix and the column-to-target map (`k mod m`).
pub fn replicate_targets(c: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<usize>), MatchError> {
    let n = c.len();
    let m = c.first().map(Vec::len).unwrap_or(0);
    if n == 0 || m == 0 {
        return Err(MatchError::Empty);
    }
    if n < m {
        return Err(MatchError::TooFewPredictions { n, m });
    }
    let col_to_target: Vec<usize> = (0..n).map(|k| k % m).collect();
    let wide: Vec<Vec<f64>> =
        c.iter().map(|row| col_to_target.iter().map(|&t| row[t]).collect()).collect();
    Ok((wide, col_to_target))
}

/// Exact minimum-cost assignment of a square matrix.
///
/// Classic O(n^3) Hungarian algorithm with row/column potentials; returns
/// `sigma` with `sigma[row] = col` minimizing the total cost. No
/// approximation: the optimum is exact for any finite costs.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>, MatchError> {
    let n = cost.len();
    if n == 0 {
        return Err(MatchError::Empty);
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(MatchError::NotSquare { rows: n, cols: row.len() });
        }
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(MatchError::NonFinite { row: i, col: j });
            }
        }
    }

    // 1-based arrays; p[j] = row matched to column j, column 0 is virtual
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    Ok(sigma)
}

/// Total cost of an assignment under `cost`.
pub fn assignment_cost(cost: &[Vec<f64>], sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Matches predictions to targets once, from the first decoding step.
pub fn assign(
    pred: &PredictionSequence,
    targets: &TrajectoryTargets,
    w: &MatchWeights,
) -> Result<Assignment, MatchError> {
    pred.validate()?;
    let c = cost_matrix(pred.first_step(), targets, w)?;
    let (wide, col_to_target) = replicate_targets(&c)?;
    let sigma = hungarian(&wide)?;
    let j_hat = sigma.iter().map(|&col| col_to_target[col]).collect();
    Ok(Assignment { sigma, j_hat })
}

fn check_assignment(a: &Assignment, n: usize) -> Result<(), MatchError> {
    if a.j_hat.len() != n || a.sigma.len() != n {
        return Err(MatchError::BadAssignment { got: a.j_hat.len(), expected: n });
    }
    Ok(())
}

/// Per-step position and radius losses: mean L1 over all assigned pairs and
/// sequence positions.
pub fn loss_pos_rad(
    pred: &PredictionSequence,
    targets: &TrajectoryTargets,
    a: &Assignment,
) -> Result<Vec<(f64, f64)>, MatchError> {
    pred.validate()?;
    let n = pred.n();
    let l = pred.traj_len();
    if l != targets.traj_len() {
        return Err(MatchError::LengthMismatch { pred: l, target: targets.traj_len() });
    }
    check_assignment(a, n)?;
    let scale = 1.0 / (n as f64 * l as f64);
    let mut out = Vec::with_capacity(pred.steps.len());
    for step in &pred.steps {
        let mut pos = 0.0;
        let mut rad = 0.0;
        for i in 0..n {
            let j = a.j_hat[i];
            for idx in 0..l {
                pos += step.positions[i][idx].l1_dist(&targets.positions[j][idx]);
                rad += (step.radii[i][idx] - targets.radii[j][idx]).abs();
            }
        }
        out.push((pos * scale, rad * scale));
    }
    Ok(out)
}

/// Mean absolute end-position error at the final step.
pub fn loss_end(
    pred: &PredictionSequence,
    targets: &TrajectoryTargets,
    a: &Assignment,
) -> Result<f64, MatchError> {
    pred.validate()?;
    let n = pred.n();
    check_assignment(a, n)?;
    let last = pred.last_step();
    let sum: f64 =
        (0..n).map(|i| (last.end_pos[i] - targets.end_pos(a.j_hat[i])).abs()).sum();
    Ok(sum / n as f64)
}

/// Mean absolute divergence error at the final step, over ordered pairs.
///
/// The target divergence matrix is reordered through the assignment; pairs
/// of predictions sharing one target read the target's own end position off
/// the diagonal. Returns 0 for n < 2 by convention.
pub fn loss_div(
    pred: &PredictionSequence,
    targets: &TrajectoryTargets,
    a: &Assignment,
) -> Result<f64, MatchError> {
    pred.validate()?;
    let n = pred.n();
    check_assignment(a, n)?;
    if n < 2 {
        return Ok(0.0);
    }
    let last = pred.last_step();
    let mut sum = 0.0;
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let reordered = targets.divergence[a.j_hat[i]][a.j_hat[k]];
            sum += (last.divergence[i][k] - reordered).abs();
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// Components of the total loss, kept separate for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Per-step (position, radius) losses.
    pub per_step: Vec<(f64, f64)>,
    pub end: f64,
    pub divergence: f64,
    pub total: f64,
}

/// Weighted sum of per-step position/radius losses plus the final-step end
/// and divergence losses.
pub fn total_loss(
    pred: &PredictionSequence,
    targets: &TrajectoryTargets,
    a: &Assignment,
    lw: &LossWeights,
) -> Result<LossBreakdown, MatchError> {
    let per_step = loss_pos_rad(pred, targets, a)?;
    let end = loss_end(pred, targets, a)?;
    let divergence = loss_div(pred, targets, a)?;
    let steps_sum: f64 =
        per_step.iter().map(|&(pos, rad)| lw.alpha_pos * pos + lw.alpha_rad * rad).sum();
    let total = steps_sum + lw.alpha_end * end + lw.alpha_div * divergence;
    Ok(LossBreakdown { per_step, end, divergence, total })
}
