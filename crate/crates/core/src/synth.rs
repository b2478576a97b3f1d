//! Seeded synthetic vascular trees and controlled corruption.
//!
//! The generator grows segments of step-spaced nodes with angular jitter;
//! at each segment end it either bifurcates into two children (opening at a
//! random angle) or continues straight, up to a fixed number of segment
//! generations. All randomness flows from the explicit seed, so equal
//! parameters give byte-identical trees.

use crate::geom::Point3;
use crate::graph::{BranchEnd, CenterlineNode, CenterlineTree, GraphError, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;

/// Shape parameters for [`generate_tree`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Number of segment generations grown from the root.
    pub max_depth: usize,
    /// Probability that a segment end bifurcates (vs continuing straight).
    pub bifurcation_prob: f64,
    /// Inclusive range of nodes per segment.
    pub segment_len: (usize, usize),
    /// Spacing between consecutive nodes, voxels.
    pub step_len: f64,
    /// Radius at the root, voxels.
    pub radius_root: f64,
    /// Multiplicative radius decay per child segment, in (0, 1].
    pub radius_decay: f64,
    /// Std of per-node angular jitter, radians.
    pub tortuosity: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            max_depth: 4,
            bifurcation_prob: 0.6,
            segment_len: (5, 9),
            step_len: 4.0,
            radius_root: 4.0,
            radius_decay: 0.8,
            tortuosity: 0.1,
            seed: 0,
        }
    }
}

/// Noise and structural corruption for [`corrupt_tree`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionParams {
    /// Std of Gaussian position noise per axis, voxels.
    pub pos_noise_std: f64,
    /// Std of Gaussian radius noise, voxels.
    pub radius_noise_std: f64,
    /// Probability of appending a copy of each branch next to the original.
    pub duplicate_branch_prob: f64,
    /// Probability of dropping each leaf branch.
    pub drop_branch_prob: f64,
    pub seed: u64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams {
            pos_noise_std: 0.0,
            radius_noise_std: 0.0,
            duplicate_branch_prob: 0.0,
            drop_branch_prob: 0.0,
            seed: 0,
        }
    }
}

/// Rotates `dir` by an angle drawn from N(0, std) around a random axis in
/// the plane orthogonal to `dir`.
fn jitter_direction(rng: &mut ChaCha8Rng, dir: Point3, std: f64) -> Point3 {
    if std <= 0.0 {
        return dir;
    }
    let angle = sample_gaussian(rng) * std;
    let azimuth = rng.gen_range(0.0..2.0 * PI);
    rotate_away(dir, angle, azimuth)
}

/// Rotates `dir` by `angle` toward the tangent-plane direction picked by
/// `azimuth`.
fn rotate_away(dir: Point3, angle: f64, azimuth: f64) -> Point3 {
    let dir = dir.normalized();
    // any vector not parallel to dir
    let helper = if dir.x.abs() < 0.9 {
        Point3::new(1.0, 0.0, 0.0)
    } else {
        Point3::new(0.0, 1.0, 0.0)
    };
    let u = dir.cross(&helper).normalized();
    let v = dir.cross(&u).normalized();
    let tangent = u * azimuth.cos() + v * azimuth.sin();
    (dir * angle.cos() + tangent * angle.sin()).normalized()
}

/// Marsaglia polar method; two uniform draws per call keep the stream
/// deterministic without caching state.
fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        let s = a * a + b * b;
        if s > 0.0 && s < 1.0 {
            return a * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Grows a synthetic centerline tree; deterministic given `params.seed`.
pub fn generate_tree(params: &SynthParams) -> CenterlineTree {
    assert!(params.radius_root > 0.0, "radius_root must be positive");
    assert!(params.step_len > 0.0, "step_len must be positive");
    assert!(params.segment_len.0 >= 1 && params.segment_len.0 <= params.segment_len.1);
    assert!((0.0..=1.0).contains(&params.bifurcation_prob));
    assert!(params.radius_decay > 0.0 && params.radius_decay <= 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut next_id: NodeId = 0;
    let root = CenterlineNode::new(next_id, Point3::ZERO, params.radius_root);
    let mut tree = CenterlineTree::new(root);
    next_id += 1;

    struct Pending {
        parent: NodeId,
        pos: Point3,
        dir: Point3,
        radius: f64,
        generation: usize,
        /// Whether the segment's first node is a fresh child (bifurcation)
        /// or continues from the parent node directly.
        first_is_attach: bool,
    }

    let initial_dir = {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let az = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        Point3::new(r * az.cos(), r * az.sin(), z).normalized()
    };

    let mut queue = VecDeque::new();
    queue.push_back(Pending {
        parent: 0,
        pos: Point3::ZERO,
        dir: initial_dir,
        radius: params.radius_root,
        generation: 0,
        first_is_attach: false,
    });

    while let Some(seg) = queue.pop_front() {
        let len = rng.gen_range(params.segment_len.0..=params.segment_len.1);
        let mut parent = seg.parent;
        let mut pos = seg.pos;
        let mut dir = seg.dir;
        // the root node stands in for the first node of the root segment
        let new_nodes = if seg.generation == 0 && !seg.first_is_attach { len - 1 } else { len };
        for _ in 0..new_nodes {
            dir = jitter_direction(&mut rng, dir, params.tortuosity);
            pos = pos + dir * params.step_len;
            tree.add_child(parent, CenterlineNode::new(next_id, pos, seg.radius))
                .expect("generator ids are unique");
            parent = next_id;
            next_id += 1;
        }
        if seg.generation + 1 >= params.max_depth {
            continue;
        }
        if rng.gen_bool(params.bifurcation_prob) {
            // branches open at 20..60 degrees on opposite sides
            let opening = rng.gen_range(20.0f64.to_radians()..60.0f64.to_radians());
            let azimuth = rng.gen_range(0.0..2.0 * PI);
            let child_radius = (seg.radius * params.radius_decay).max(0.05);
            for side in [0.0, PI] {
                queue.push_back(Pending {
                    parent,
                    pos,
                    dir: rotate_away(dir, opening * 0.5, azimuth + side),
                    radius: child_radius,
                    generation: seg.generation + 1,
                    first_is_attach: true,
                });
            }
        } else {
            queue.push_back(Pending {
                parent,
                pos,
                dir,
                radius: seg.radius,
                generation: seg.generation + 1,
                first_is_attach: true,
            });
        }
    }

    debug_assert!(tree.validate().ok());
    tree
}

/// Applies duplication, branch dropping, and Gaussian noise, in that order.
///
/// Branch copies attach to the parent of the branch's first node (to the
/// root itself for the root branch) and carry no subtree. Output radii are
/// clamped to stay positive; the result is always a valid tree.
pub fn corrupt_tree(
    tree: &CenterlineTree,
    params: &CorruptionParams,
) -> Result<CenterlineTree, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let branches = tree.branch_decomposition()?;

    let mut out = tree.clone();
    let mut next_id: NodeId = tree.nodes().map(|n| n.id).max().unwrap_or(0) + 1;

    // 1. duplicate whole branches
    for branch in &branches {
        if params.duplicate_branch_prob <= 0.0 || !rng.gen_bool(params.duplicate_branch_prob) {
            continue;
        }
        let first = branch.first();
        let mut parent = match tree.parent(first) {
            Some(p) => p,
            None => first, // root branch: the copy hangs off the root
        };
        for &id in &branch.nodes {
            if id == first && tree.parent(first).is_none() && branch.len() > 1 {
                // copying the root node itself would stack two nodes at the
                // exact root position; start the copy at the next node
                continue;
            }
            let src = tree.node(id).unwrap();
            out.add_child(parent, CenterlineNode::new(next_id, src.pos, src.radius))?;
            parent = next_id;
            next_id += 1;
        }
    }

    // 2. drop leaf branches (never one holding the root)
    if params.drop_branch_prob > 0.0 {
        let current = out.branch_decomposition()?;
        let mut doomed: Vec<NodeId> = Vec::new();
        for branch in &current {
            if branch.end != BranchEnd::Leaf || branch.nodes.contains(&out.root()) {
                continue;
            }
            if rng.gen_bool(params.drop_branch_prob) {
                doomed.extend(&branch.nodes);
            }
        }
        if !doomed.is_empty() {
            let doomed: std::collections::BTreeSet<NodeId> = doomed.into_iter().collect();
            let keep: Vec<CenterlineNode> =
                out.nodes().filter(|n| !doomed.contains(&n.id)).copied().collect();
            let parents: Vec<(NodeId, NodeId)> = keep
                .iter()
                .filter_map(|n| out.parent(n.id).map(|p| (n.id, p)))
                .collect();
            out = CenterlineTree::from_parts(out.root(), keep, &parents);
        }
    }

    // 3. per-node Gaussian noise
    if params.pos_noise_std > 0.0 || params.radius_noise_std > 0.0 {
        let ids: Vec<NodeId> = out.nodes().map(|n| n.id).collect();
        let mut moved = Vec::with_capacity(ids.len());
        for id in ids {
            let n = *out.node(id).unwrap();
            let pos = if params.pos_noise_std > 0.0 {
                n.pos
                    + Point3::new(
                        sample_gaussian(&mut rng) * params.pos_noise_std,
                        sample_gaussian(&mut rng) * params.pos_noise_std,
                        sample_gaussian(&mut rng) * params.pos_noise_std,
                    )
            } else {
                n.pos
            };
            let radius = if params.radius_noise_std > 0.0 {
                (n.radius + sample_gaussian(&mut rng) * params.radius_noise_std).max(0.05)
            } else {
                n.radius
            };
            moved.push(CenterlineNode::new(id, pos, radius));
        }
        let parents: Vec<(NodeId, NodeId)> =
            moved.iter().filter_map(|n| out.parent(n.id).map(|p| (n.id, p))).collect();
        out = CenterlineTree::from_parts(out.root(), moved, &parents);
    }

    debug_assert!(out.validate().ok(), "corrupt output must stay valid: {}", out.validate());
    Ok(out)
}
