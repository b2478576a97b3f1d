//! Radius-aware evaluation of predicted centerline trees.
//!
//! Point-level precision/recall/F1 are computed per threshold factor and
//! averaged over the sweep tau_rad in [0.25, 0.75] step 0.05; a predicted
//! node is a true positive when it lies within `max(1.5, tau_rad * r)` of a
//! still-unmatched ground-truth node of radius r. Branch-level metrics fix
//! tau_rad = 0.5 and sweep the required overlap fraction tau_match over
//! [0.5, 0.9] step 0.05.
//!
//! Matching is deterministic greedy: candidate pairs ordered by distance
//! (ties by gt id, then pred id) for points, and by overlap (ties by longer
//! gt branch, then branch indices) for branches.

use crate::graph::{Branch, CenterlineNode, CenterlineTree, GraphError};
use crate::spatial::KdTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ground truth tree has no nodes to score against")]
    EmptyGroundTruth,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Fixed lower bound of the match threshold, voxels.
pub const THRESHOLD_FLOOR: f64 = 1.5;

/// Threshold factor sweep for point-level metrics: 0.25..=0.75 step 0.05.
pub fn tau_rad_sweep() -> Vec<f64> {
    (0..11).map(|k| (25 + 5 * k) as f64 / 100.0).collect()
}

/// Overlap sweep for branch-level metrics: 0.5..=0.9 step 0.05.
pub fn tau_match_sweep() -> Vec<f64> {
    (0..9).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Threshold factor at which branch overlap and radius MAE are computed.
pub const TAU_RAD_FIXED: f64 = 0.5;

/// Distance below which a prediction can match a ground-truth node of
/// radius `r`.
pub fn match_threshold(r: f64, tau_rad: f64) -> f64 {
    THRESHOLD_FLOOR.max(tau_rad * r)
}

/// One row of the point-level sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointThresholdEntry {
    pub tau_rad: f64,
    pub tp: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One row of the branch-level sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchThresholdEntry {
    pub tau_match: f64,
    pub tp: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Point- and branch-level scores, percentages in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rap: f64,
    pub rar: f64,
    pub rf1: f64,
    /// Mean absolute radius error over pairs matched at tau_rad = 0.5;
    /// absent when nothing matched.
    pub radius_mae: Option<f64>,
    pub rbap: f64,
    pub rbar: f64,
    pub rbf1: f64,
    pub point_thresholds: Vec<PointThresholdEntry>,
    pub branch_thresholds: Vec<BranchThresholdEntry>,
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy one-to-one pairing of predicted and ground-truth nodes.
///
/// All pairs within the radius-aware threshold are sorted ascending by
/// distance (ties by gt id, then pred id) and accepted while both endpoints
/// are unmatched. Returns `(pred_index, gt_index, distance)` triples.
pub fn match_points(
    pred: &[CenterlineNode],
    gt: &[CenterlineNode],
    tau_rad: f64,
) -> Vec<(usize, usize, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    let gt_index = KdTree::build(gt.iter().enumerate().map(|(i, n)| (n.pos, i as i64)));
    let max_radius = gt
        .iter()
        .map(|n| match_threshold(n.radius, tau_rad))
        .fold(0.0f64, f64::max);

    let mut pairs: Vec<(f64, i64, i64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, dist) in gt_index.within(&p.pos, max_radius) {
            let g = &gt[gi as usize];
            if dist <= match_threshold(g.radius, tau_rad) {
                pairs.push((dist, g.id, p.id, pi, gi as usize));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (dist, _, _, pi, gi) in pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            matches.push((pi, gi, dist));
        }
    }
    matches
}

fn sorted_nodes(tree: &CenterlineTree) -> Vec<CenterlineNode> {
    tree.nodes().copied().collect() // already ascending by id
}

/// Point-level rAP/rAR/rF1 over the tau_rad sweep plus radius MAE.
pub fn point_metrics(
    pred: &CenterlineTree,
    gt: &CenterlineTree,
) -> Result<(f64, f64, f64, Option<f64>, Vec<PointThresholdEntry>), MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let pred_nodes = sorted_nodes(pred);
    let gt_nodes = sorted_nodes(gt);

    let mut entries = Vec::new();
    let mut radius_mae = None;
    for tau in tau_rad_sweep() {
        let matches = match_points(&pred_nodes, &gt_nodes, tau);
        let tp = matches.len();
        let precision =
            if pred_nodes.is_empty() { 0.0 } else { 100.0 * tp as f64 / pred_nodes.len() as f64 };
        let recall = 100.0 * tp as f64 / gt_nodes.len() as f64;
        entries.push(PointThresholdEntry {
            tau_rad: tau,
            tp,
            precision,
            recall,
            f1: f1_of(precision, recall),
        });
    }
    {
        let matches = match_points(&pred_nodes, &gt_nodes, TAU_RAD_FIXED);
        if !matches.is_empty() {
            let sum: f64 = matches
                .iter()
                .map(|&(pi, gi, _)| (pred_nodes[pi].radius - gt_nodes[gi].radius).abs())
                .sum();
            radius_mae = Some(sum / matches.len() as f64);
        }
    }

    let k = entries.len() as f64;
    let rap = entries.iter().map(|e| e.precision).sum::<f64>() / k;
    let rar = entries.iter().map(|e| e.recall).sum::<f64>() / k;
    let rf1 = entries.iter().map(|e| e.f1).sum::<f64>() / k;
    Ok((rap, rar, rf1, radius_mae, entries))
}

/// Fraction of `gt_branch` nodes having a node of `pred_branch` within the
/// fixed radius-aware threshold.
fn branch_overlaps(
    pred: &CenterlineTree,
    pred_branches: &[Branch],
    gt: &CenterlineTree,
    gt_branches: &[Branch],
) -> Vec<Vec<f64>> {
    // pred node -> owning branch, via one kd-tree over all pred nodes
    let mut branch_of = std::collections::BTreeMap::new();
    for (bi, b) in pred_branches.iter().enumerate() {
        for &id in &b.nodes {
            branch_of.insert(id, bi);
        }
    }
    let pred_index = KdTree::build(pred.nodes().map(|n| (n.pos, n.id)));

    let mut covered = vec![vec![0usize; gt_branches.len()]; pred_branches.len()];
    for (gi, gb) in gt_branches.iter().enumerate() {
        for &gid in &gb.nodes {
            let gnode = gt.node(gid).unwrap();
            let thr = match_threshold(gnode.radius, TAU_RAD_FIXED);
            let mut seen = std::collections::BTreeSet::new();
            for (pid, _) in pred_index.within(&gnode.pos, thr) {
                seen.insert(branch_of[&pid]);
            }
            for bi in seen {
                covered[bi][gi] += 1;
            }
        }
    }
    covered
        .into_iter()
        .enumerate()
        .map(|(_, row)| {
            row.into_iter()
                .enumerate()
                .map(|(gi, c)| c as f64 / gt_branches[gi].len() as f64)
                .collect()
        })
        .collect()
}

/// Branch-level rBAP/rBAR/rBF1 over the tau_match sweep.
pub fn branch_metrics(
    pred: &CenterlineTree,
    gt: &CenterlineTree,
) -> Result<(f64, f64, f64, Vec<BranchThresholdEntry>), MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let pred_branches = pred.branch_decomposition()?;
    let gt_branches = gt.branch_decomposition()?;
    let overlap = branch_overlaps(pred, &pred_branches, gt, &gt_branches);

    // candidate pairs sorted once: overlap desc, longer gt branch first,
    // then branch indices for a total order
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, row) in overlap.iter().enumerate() {
        for (gi, &ov) in row.iter().enumerate() {
            if ov > 0.0 {
                candidates.push((ov, pi, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(gt_branches[b.2].len().cmp(&gt_branches[a.2].len()))
            .then(a.2.cmp(&b.2))
            .then(a.1.cmp(&b.1))
    });

    let mut entries = Vec::new();
    for tau in tau_match_sweep() {
        let mut pred_used = vec![false; pred_branches.len()];
        let mut gt_used = vec![false; gt_branches.len()];
        let mut tp = 0usize;
        for &(ov, pi, gi) in &candidates {
            if ov + 1e-12 < tau {
                break; // below threshold; sorted descending
            }
            if !pred_used[pi] && !gt_used[gi] {
                pred_used[pi] = true;
                gt_used[gi] = true;
                tp += 1;
            }
        }
        let precision = 100.0 * tp as f64 / pred_branches.len() as f64;
        let recall = 100.0 * tp as f64 / gt_branches.len() as f64;
        entries.push(BranchThresholdEntry {
            tau_match: tau,
            tp,
            precision,
            recall,
            f1: f1_of(precision, recall),
        });
    }

    let k = entries.len() as f64;
    let rbap = entries.iter().map(|e| e.precision).sum::<f64>() / k;
    let rbar = entries.iter().map(|e| e.recall).sum::<f64>() / k;
    let rbf1 = entries.iter().map(|e| e.f1).sum::<f64>() / k;
    Ok((rbap, rbar, rbf1, entries))
}

/// Full point- and branch-level report of `pred` against `gt`.
pub fn evaluate(pred: &CenterlineTree, gt: &CenterlineTree) -> Result<MetricsReport, MetricsError> {
    let (rap, rar, rf1, radius_mae, point_thresholds) = point_metrics(pred, gt)?;
    let (rbap, rbar, rbf1, branch_thresholds) = branch_metrics(pred, gt)?;
    Ok(MetricsReport {
        rap,
        rar,
        rf1,
        radius_mae,
        rbap,
        rbar,
        rbf1,
        point_thresholds,
        branch_thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::graph::NodeId;

    fn node(id: NodeId, x: f64, y: f64, r: f64) -> CenterlineNode {
        CenterlineNode::new(id, Point3::new(x, y, 0.0), r)
    }

    fn path_tree(n: usize, spacing: f64) -> CenterlineTree {
        let mut t = CenterlineTree::new(node(0, 0.0, 0.0, 2.0));
        for i in 1..n as NodeId {
            t.add_child(i - 1, node(i, spacing * i as f64, 0.0, 2.0)).unwrap();
        }
        t
    }

    #[test]
    fn threshold_formula() {
        assert_eq!(match_threshold(10.0, 0.5), 5.0);
        assert_eq!(match_threshold(1.0, 0.25), 1.5);
        assert_eq!(match_threshold(3.0, 0.5), 1.5);
    }

    #[test]
    fn sweeps_have_expected_shape() {
        let taus = tau_rad_sweep();
        assert_eq!(taus.len(), 11);
        assert_eq!(taus[0], 0.25);
        assert_eq!(taus[10], 0.75);
        let taus = tau_match_sweep();
        assert_eq!(taus.len(), 9);
        assert_eq!(taus[0], 0.5);
        assert_eq!(taus[8], 0.9);
    }

    #[test]
    fn identical_trees_score_perfectly() {
        let t = path_tree(20, 5.0);
        let report = evaluate(&t, &t).unwrap();
        assert_eq!(report.rap, 100.0);
        assert_eq!(report.rar, 100.0);
        assert_eq!(report.rf1, 100.0);
        assert_eq!(report.radius_mae, Some(0.0));
        assert_eq!(report.rbap, 100.0);
        assert_eq!(report.rbar, 100.0);
        assert_eq!(report.rbf1, 100.0);
    }

    #[test]
    fn one_pred_matches_at_most_one_gt() {
        // one prediction equidistant to two eligible gt nodes
        let pred = vec![node(0, 0.0, 0.0, 1.0)];
        let gt = vec![node(0, 1.0, 0.0, 1.0), node(1, -1.0, 0.0, 1.0)];
        let matches = match_points(&pred, &gt, 0.5);
        assert_eq!(matches.len(), 1);
        // tie broken toward the lower gt id
        assert_eq!(matches[0].1, 0);
    }

    #[test]
    fn spurious_predictions_cost_precision_not_recall() {
        let gt = path_tree(10, 5.0);
        let mut pred = gt.clone();
        // bolt on 5 far-away nodes
        let mut parent = 9;
        for i in 0..5 {
            pred.add_child(parent, node(100 + i, 1000.0 + 50.0 * i as f64, 500.0, 2.0)).unwrap();
            parent = 100 + i;
        }
        let (rap, rar, _, _, entries) = point_metrics(&pred, &gt).unwrap();
        assert_eq!(rar, 100.0);
        let expected_p = 100.0 * 10.0 / 15.0;
        for e in &entries {
            assert!((e.precision - expected_p).abs() < 1e-9);
            assert_eq!(e.recall, 100.0);
        }
        assert!((rap - expected_p).abs() < 1e-9);
    }

    #[test]
    fn inflated_radii_show_up_in_mae() {
        let gt = path_tree(10, 5.0);
        let mut nodes: Vec<CenterlineNode> = gt.nodes().copied().collect();
        for n in &mut nodes {
            n.radius += 0.3;
        }
        let parents: Vec<(NodeId, NodeId)> =
            nodes.iter().filter_map(|n| gt.parent(n.id).map(|p| (n.id, p))).collect();
        let pred = CenterlineTree::from_parts(gt.root(), nodes, &parents);
        let (_, _, _, mae, _) = point_metrics(&pred, &gt).unwrap();
        assert!((mae.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_is_an_error_and_tiny_pred_scores_zero() {
        let gt = path_tree(10, 5.0);
        // a 1-node pred far from everything scores 0 without erroring
        let pred = CenterlineTree::new(node(0, 9999.0, 9999.0, 1.0));
        let (rap, rar, rf1, mae, _) = point_metrics(&pred, &gt).unwrap();
        assert_eq!((rap, rar, rf1), (0.0, 0.0, 0.0));
        assert_eq!(mae, None);
    }

    #[test]
    fn partial_branch_coverage_matches_hand_count() {
        // pred covers 7 of 10 nodes of a single-branch gt:
        // TP at tau_match in {0.50..0.70}, 5 of 9 thresholds
        let gt = path_tree(10, 5.0);
        let pred = path_tree(7, 5.0);
        let (rbap, rbar, _, entries) = branch_metrics(&pred, &gt).unwrap();
        let hits = entries.iter().filter(|e| e.tp == 1).count();
        assert_eq!(hits, 5);
        let expected = 100.0 * 5.0 / 9.0;
        assert!((rbar - expected).abs() < 1e-9);
        assert!((rbap - expected).abs() < 1e-9);
    }

    #[test]
    fn two_half_branches_yield_one_tp_at_half_overlap() {
        let gt = path_tree(10, 5.0);
        // pred: first half as root branch ending in a bifurcation into the
        // second half and a far-away junk arm
        let mut pred = path_tree(5, 5.0);
        let mut parent = 4;
        for i in 5..10 as NodeId {
            pred.add_child(parent, node(i, 5.0 * i as f64, 0.0, 2.0)).unwrap();
            parent = i;
        }
        parent = 4;
        for i in 0..4 {
            pred.add_child(parent, node(50 + i, 20.0, 500.0 + 10.0 * i as f64, 2.0)).unwrap();
            parent = 50 + i;
        }
        let branches = pred.branch_decomposition().unwrap();
        assert_eq!(branches.len(), 3);

        let (_, _, _, entries) = branch_metrics(&pred, &gt).unwrap();
        let at_half = entries.iter().find(|e| e.tau_match == 0.5).unwrap();
        assert_eq!(at_half.tp, 1);
        // one TP over three predicted branches, one gt branch fully recalled
        assert!((at_half.precision - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(at_half.recall, 100.0);
    }

    #[test]
    fn branch_tp_never_increases_with_tau_match() {
        let gt = path_tree(30, 4.0);
        let pred = path_tree(21, 4.0);
        let (_, _, _, entries) = branch_metrics(&pred, &gt).unwrap();
        for pair in entries.windows(2) {
            assert!(pair[1].tp <= pair[0].tp);
        }
    }

    /// Kuhn's augmenting-path maximum bipartite matching, as an independent
    /// oracle for the greedy point matcher.
    fn optimal_tp(pred: &[CenterlineNode], gt: &[CenterlineNode], tau: f64) -> usize {
        let adj: Vec<Vec<usize>> = pred
            .iter()
            .map(|p| {
                gt.iter()
                    .enumerate()
                    .filter(|(_, g)| p.pos.dist(&g.pos) <= match_threshold(g.radius, tau))
                    .map(|(gi, _)| gi)
                    .collect()
            })
            .collect();
        let mut matched_gt: Vec<Option<usize>> = vec![None; gt.len()];
        fn try_augment(
            pi: usize,
            adj: &[Vec<usize>],
            matched_gt: &mut Vec<Option<usize>>,
            visited: &mut Vec<bool>,
        ) -> bool {
            for &gi in &adj[pi] {
                if visited[gi] {
                    continue;
                }
                visited[gi] = true;
                if matched_gt[gi].is_none()
                    || try_augment(matched_gt[gi].unwrap(), adj, matched_gt, visited)
                {
                    matched_gt[gi] = Some(pi);
                    return true;
                }
            }
            false
        }
        let mut count = 0;
        for pi in 0..pred.len() {
            let mut visited = vec![false; gt.len()];
            if try_augment(pi, &adj, &mut matched_gt, &mut visited) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn greedy_tp_is_near_optimal_on_random_clouds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..10 {
            let n = 200;
            let gt: Vec<CenterlineNode> = (0..n)
                .map(|i| {
                    node(
                        i as NodeId,
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(0.5..4.0),
                    )
                })
                .collect();
            let pred: Vec<CenterlineNode> = (0..n)
                .map(|i| {
                    node(
                        i as NodeId,
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(0.5..4.0),
                    )
                })
                .collect();
            let tau = 0.25 + 0.05 * (trial % 11) as f64;
            let greedy = match_points(&pred, &gt, tau).len();
            let optimal = optimal_tp(&pred, &gt, tau);
            assert!(greedy <= optimal);
            assert!(
                greedy as f64 >= 0.95 * optimal as f64,
                "greedy {greedy} vs optimal {optimal} at tau {tau}"
            );
        }
    }
}
