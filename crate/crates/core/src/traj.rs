//! Confluent-trajectory codec.
//!
//! A branching tree section is encoded as n fixed-length trajectories that
//! all start at a shared anchor node and run downward; trajectories through
//! a common prefix carry identical nodes until their divergence position,
//! and nodes past a trajectory's end position are padding (the last real
//! node repeated). End and divergence positions are normalized to [0, 1]
//! along the sequence.
//!
//! Encoding ([`encode_targets`]) walks every downward path of up to L nodes.
//! Decoding ([`decode_tree`]) rebuilds a tree level by level:
//!
//! 1. cluster trajectories whose divergence lies at or past either end
//!    position (they never separate) and merge each cluster into a
//!    representative by averaging,
//! 2. from the shared root, breadth-first per level, sub-cluster the
//!    surviving representatives by discretized divergence and emit one node
//!    per sub-cluster, attached to the sub-cluster's node from the previous
//!    level,
//! 3. drop each representative past its discretized end index.
//!
//! Groups only ever split as the level increases, so the output is a single
//! connected component without cycles by construction.

use crate::dsu::DisjointSet;
use crate::geom::Point3;
use crate::graph::{CenterlineNode, CenterlineTree, GraphError, NodeId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("normalized position {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("trajectory length {0} too short, need at least 2")]
    SequenceTooShort(usize),
    #[error("empty trajectory set")]
    EmptySet,
    #[error("cannot merge an empty cluster")]
    EmptyCluster,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-positive radius in trajectory {0}")]
    BadRadius(usize),
    #[error("trajectories do not share an identical first node")]
    UnanchoredFirstNode,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Maps a normalized position u in [0,1] to a node index in 0..len.
///
/// Unnormalizes by (len - 1) and rounds to nearest, half away from zero;
/// the result is clamped into range so u = 1.0 lands on the last index.
pub fn discretize(u: f64, len: usize) -> Result<usize, CodecError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(CodecError::OutOfRange(u));
    }
    let idx = (u * (len.saturating_sub(1)) as f64).round() as usize;
    Ok(idx.min(len.saturating_sub(1)))
}

/// n confluent trajectories of length L sharing a first node, with
/// per-trajectory end positions and pairwise divergence positions.
///
/// `divergence[i][k]` is the normalized index of the last node trajectories
/// i and k share; the diagonal carries no information. Matrices from
/// predictions may be asymmetric; consumers symmetrize by averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfluentTrajectorySet {
    pub origin: Point3,
    /// n x L node positions.
    pub positions: Vec<Vec<Point3>>,
    /// n x L node radii.
    pub radii: Vec<Vec<f64>>,
    /// n end positions in [0,1].
    pub end_pos: Vec<f64>,
    /// n x n divergence positions in [0,1].
    pub divergence: Vec<Vec<f64>>,
}

impl ConfluentTrajectorySet {
    /// Number of trajectories.
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Nodes per trajectory (L).
    pub fn traj_len(&self) -> usize {
        self.positions.first().map(Vec::len).unwrap_or(0)
    }

    /// Symmetrized divergence between trajectories i and k.
    pub fn sym_divergence(&self, i: usize, k: usize) -> f64 {
        0.5 * (self.divergence[i][k] + self.divergence[k][i])
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let n = self.n();
        if n == 0 {
            return Err(CodecError::EmptySet);
        }
        let l = self.traj_len();
        if l == 0 {
            return Err(CodecError::Shape("zero-length trajectories".into()));
        }
        if self.radii.len() != n || self.end_pos.len() != n || self.divergence.len() != n {
            return Err(CodecError::Shape(format!(
                "expected {n} trajectories in every field, got radii={}, end_pos={}, divergence={}",
                self.radii.len(),
                self.end_pos.len(),
                self.divergence.len()
            )));
        }
        for i in 0..n {
            if self.positions[i].len() != l || self.radii[i].len() != l {
                return Err(CodecError::Shape(format!("trajectory {i} is not length {l}")));
            }
            if self.divergence[i].len() != n {
                return Err(CodecError::Shape(format!("divergence row {i} is not length {n}")));
            }
            for p in &self.positions[i] {
                if !p.is_finite() {
                    return Err(CodecError::NonFinite("positions"));
                }
            }
            for &r in &self.radii[i] {
                if !r.is_finite() {
                    return Err(CodecError::NonFinite("radii"));
                }
                if r <= 0.0 {
                    return Err(CodecError::BadRadius(i));
                }
            }
            if !self.end_pos[i].is_finite() || !(0.0..=1.0).contains(&self.end_pos[i]) {
                return Err(CodecError::OutOfRange(self.end_pos[i]));
            }
            for k in 0..n {
                let d = self.divergence[i][k];
                if i != k && (!d.is_finite() || !(0.0..=1.0).contains(&d)) {
                    return Err(CodecError::OutOfRange(d));
                }
            }
            if self.positions[i][0] != self.positions[0][0] {
                return Err(CodecError::UnanchoredFirstNode);
            }
        }
        Ok(())
    }

    /// Serializes to the trajectory-set JSON format.
    pub fn to_json_string(&self) -> String {
        let file = TrajFile {
            origin: self.origin.coords(),
            l: self.traj_len(),
            trajectories: (0..self.n())
                .map(|i| TrajFileEntry {
                    pos: self.positions[i].iter().map(|p| p.coords()).collect(),
                    radius: self.radii[i].clone(),
                    end: self.end_pos[i],
                })
                .collect(),
            divergence: self.divergence.clone(),
        };
        serde_json::to_string_pretty(&file).expect("trajectory serialization cannot fail")
    }

    /// Parses and validates the trajectory-set JSON format.
    pub fn from_json_str(s: &str) -> Result<ConfluentTrajectorySet, CodecError> {
        let file: TrajFile = serde_json::from_str(s)?;
        let set = ConfluentTrajectorySet {
            origin: Point3::from(file.origin),
            positions: file
                .trajectories
                .iter()
                .map(|t| t.pos.iter().map(|&p| Point3::from(p)).collect())
                .collect(),
            radii: file.trajectories.iter().map(|t| t.radius.clone()).collect(),
            end_pos: file.trajectories.iter().map(|t| t.end).collect(),
            divergence: file.divergence,
        };
        if set.traj_len() != file.l {
            return Err(CodecError::Shape(format!(
                "declared L={} but trajectories have {} nodes",
                file.l,
                set.traj_len()
            )));
        }
        set.validate()?;
        Ok(set)
    }
}

/// On-disk schema: `{"origin", "L", "trajectories": [{"pos", "radius", "end"}], "divergence"}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajFile {
    origin: [f64; 3],
    #[serde(rename = "L")]
    l: usize,
    trajectories: Vec<TrajFileEntry>,
    divergence: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajFileEntry {
    pos: Vec<[f64; 3]>,
    radius: Vec<f64>,
    end: f64,
}

/// Ground-truth trajectories for one anchor: the target side of matching.
///
/// Unlike [`ConfluentTrajectorySet`], end positions are exact node indices
/// and the divergence matrix is symmetric by construction, with the diagonal
/// defined as the trajectory's own end position (two copies of one branch
/// "diverge" only where the branch ends).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTargets {
    pub origin: Point3,
    pub positions: Vec<Vec<Point3>>,
    pub radii: Vec<Vec<f64>>,
    /// Index of the last real (non-padding) node per trajectory.
    pub end_index: Vec<usize>,
    /// m x m normalized divergence, diagonal = own end position.
    pub divergence: Vec<Vec<f64>>,
}

impl TrajectoryTargets {
    pub fn m(&self) -> usize {
        self.positions.len()
    }

    pub fn traj_len(&self) -> usize {
        self.positions.first().map(Vec::len).unwrap_or(0)
    }

    /// Normalized end position of target j; 1.0 for degenerate length-1
    /// trajectories (they end at their only node).
    pub fn end_pos(&self, j: usize) -> f64 {
        let l = self.traj_len();
        if l <= 1 {
            1.0
        } else {
            self.end_index[j] as f64 / (l - 1) as f64
        }
    }

    /// Reads targets from a trajectory set: end positions are discretized
    /// to node indices, the divergence matrix is symmetrized, and the
    /// diagonal is set to each trajectory's own end position.
    pub fn from_trajectory_set(set: &ConfluentTrajectorySet) -> Result<Self, CodecError> {
        set.validate()?;
        let l = set.traj_len();
        let m = set.n();
        let end_index: Vec<usize> =
            set.end_pos.iter().map(|&u| discretize(u, l)).collect::<Result<_, _>>()?;
        let scale = if l <= 1 { 1.0 } else { (l - 1) as f64 };
        let mut divergence = vec![vec![0.0; m]; m];
        for j in 0..m {
            divergence[j][j] = end_index[j] as f64 / scale;
            for k in (j + 1)..m {
                let d = set.sym_divergence(j, k);
                divergence[j][k] = d;
                divergence[k][j] = d;
            }
        }
        Ok(TrajectoryTargets {
            origin: set.origin,
            positions: set.positions.clone(),
            radii: set.radii.clone(),
            end_index,
            divergence,
        })
    }

    /// Views the targets as a trajectory set (e.g. to feed the decoder).
    pub fn to_trajectory_set(&self) -> ConfluentTrajectorySet {
        ConfluentTrajectorySet {
            origin: self.origin,
            positions: self.positions.clone(),
            radii: self.radii.clone(),
            end_pos: (0..self.m()).map(|j| self.end_pos(j)).collect(),
            divergence: self.divergence.clone(),
        }
    }
}

/// Encodes the subtree below `anchor` as one target trajectory per distinct
/// downward path of up to `l` nodes.
///
/// Paths are enumerated depth-first; a path stops at a leaf or once it holds
/// `l` nodes, whichever comes first (so a bifurcation at the window edge
/// yields a single non-terminating target). Short paths are padded by
/// repeating their last node and keep their true end index.
pub fn encode_targets(
    tree: &CenterlineTree,
    anchor: NodeId,
    l: usize,
) -> Result<TrajectoryTargets, CodecError> {
    if l < 2 {
        return Err(CodecError::SequenceTooShort(l));
    }
    if !tree.contains(anchor) {
        return Err(CodecError::Graph(GraphError::UnknownNode(anchor)));
    }

    // depth-first path enumeration
    let mut paths: Vec<Vec<NodeId>> = Vec::new();
    let mut current = vec![anchor];
    fn walk(
        tree: &CenterlineTree,
        l: usize,
        current: &mut Vec<NodeId>,
        paths: &mut Vec<Vec<NodeId>>,
    ) {
        let tip = *current.last().unwrap();
        if current.len() == l || tree.is_leaf(tip) {
            paths.push(current.clone());
            return;
        }
        for &c in tree.children(tip) {
            current.push(c);
            walk(tree, l, current, paths);
            current.pop();
        }
    }
    walk(tree, l, &mut current, &mut paths);

    let m = paths.len();
    let mut positions = Vec::with_capacity(m);
    let mut radii = Vec::with_capacity(m);
    let mut end_index = Vec::with_capacity(m);
    for path in &paths {
        let mut pos: Vec<Point3> = path.iter().map(|&id| tree.node(id).unwrap().pos).collect();
        let mut rad: Vec<f64> = path.iter().map(|&id| tree.node(id).unwrap().radius).collect();
        end_index.push(path.len() - 1);
        while pos.len() < l {
            pos.push(*pos.last().unwrap());
            rad.push(*rad.last().unwrap());
        }
        positions.push(pos);
        radii.push(rad);
    }

    let scale = (l - 1) as f64;
    let mut divergence = vec![vec![0.0; m]; m];
    for j in 0..m {
        divergence[j][j] = end_index[j] as f64 / scale;
        for k in (j + 1)..m {
            let shared = paths[j]
                .iter()
                .zip(&paths[k])
                .take_while(|(a, b)| a == b)
                .count();
            debug_assert!(shared >= 1, "paths share at least the anchor");
            let d = (shared - 1) as f64 / scale;
            divergence[j][k] = d;
            divergence[k][j] = d;
        }
    }

    Ok(TrajectoryTargets {
        origin: tree.node(anchor).unwrap().pos,
        positions,
        radii,
        end_index,
        divergence,
    })
}

/// Discretized end index of trajectory i, clamped into range.
fn disc_end(set: &ConfluentTrajectorySet, i: usize) -> usize {
    let l = set.traj_len();
    let u = set.end_pos[i].clamp(0.0, 1.0);
    discretize(u, l).unwrap_or(0)
}

/// Discretized divergence of the pair (i, k), clipped to both end indices.
fn disc_divergence(set: &ConfluentTrajectorySet, i: usize, k: usize) -> usize {
    let l = set.traj_len();
    let u = set.sym_divergence(i, k).clamp(0.0, 1.0);
    let d = discretize(u, l).unwrap_or(0);
    d.min(disc_end(set, i)).min(disc_end(set, k))
}

/// Groups trajectories that never diverge before either of them ends.
///
/// Two trajectories fall into one group when their discretized divergence
/// reaches the earlier of their discretized end indices; grouping is the
/// transitive closure of that relation. Groups are ordered by their smallest
/// member, members ascending.
pub fn cluster_by_divergence(set: &ConfluentTrajectorySet) -> Vec<Vec<usize>> {
    let n = set.n();
    let mut dsu = DisjointSet::new(n);
    for i in 0..n {
        for k in (i + 1)..n {
            let cutoff = disc_end(set, i).min(disc_end(set, k));
            if disc_divergence(set, i, k) >= cutoff {
                dsu.union(i, k);
            }
        }
    }
    dsu.groups()
}

/// A cluster merged into a single trajectory by element-wise averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeTrajectory {
    pub positions: Vec<Point3>,
    pub radii: Vec<f64>,
    pub end_pos: f64,
}

/// Averages positions, radii, and end positions over `members`.
pub fn merge_cluster(
    members: &[usize],
    set: &ConfluentTrajectorySet,
) -> Result<RepresentativeTrajectory, CodecError> {
    if members.is_empty() {
        return Err(CodecError::EmptyCluster);
    }
    let l = set.traj_len();
    let scale = 1.0 / members.len() as f64;
    let mut positions = vec![Point3::ZERO; l];
    let mut radii = vec![0.0; l];
    let mut end_pos = 0.0;
    for &i in members {
        for idx in 0..l {
            positions[idx] = positions[idx] + set.positions[i][idx];
            radii[idx] += set.radii[i][idx];
        }
        end_pos += set.end_pos[i];
    }
    for idx in 0..l {
        positions[idx] = positions[idx] * scale;
        radii[idx] *= scale;
    }
    Ok(RepresentativeTrajectory { positions, radii, end_pos: end_pos * scale })
}

/// Rebuilds a centerline tree from a confluent trajectory set.
///
/// Node ids are assigned in BFS order starting at 0; the output always
/// satisfies every tree invariant.
pub fn decode_tree(set: &ConfluentTrajectorySet) -> Result<CenterlineTree, CodecError> {
    set.validate()?;
    let l = set.traj_len();

    let clusters = cluster_by_divergence(set);
    let reps: Vec<RepresentativeTrajectory> = clusters
        .iter()
        .map(|members| merge_cluster(members, set))
        .collect::<Result<_, _>>()?;
    let r = reps.len();

    // pairwise representative divergence: mean over member pairs of the
    // symmetrized input divergence, discretized and clipped to end indices
    let rep_end: Vec<usize> = reps
        .iter()
        .map(|rep| discretize(rep.end_pos.clamp(0.0, 1.0), l).unwrap_or(0))
        .collect();
    let mut rep_div = vec![vec![0usize; r]; r];
    for a in 0..r {
        for b in (a + 1)..r {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &i in &clusters[a] {
                for &k in &clusters[b] {
                    sum += set.sym_divergence(i, k);
                    count += 1;
                }
            }
            let mean = (sum / count as f64).clamp(0.0, 1.0);
            let d = discretize(mean, l).unwrap_or(0).min(rep_end[a]).min(rep_end[b]);
            rep_div[a][b] = d;
            rep_div[b][a] = d;
        }
    }

    // level 0: every representative contributes to the shared root
    let mean_at = |members: &[usize], level: usize| -> (Point3, f64) {
        let scale = 1.0 / members.len() as f64;
        let mut pos = Point3::ZERO;
        let mut rad = 0.0;
        for &a in members {
            pos = pos + reps[a].positions[level];
            rad += reps[a].radii[level];
        }
        (pos * scale, rad * scale)
    };

    let all: Vec<usize> = (0..r).collect();
    let (root_pos, root_rad) = mean_at(&all, 0);
    let mut next_id: NodeId = 0;
    let mut tree = CenterlineTree::new(CenterlineNode::new(next_id, root_pos, root_rad));

    // groups alive at the previous level, with the node they produced
    let mut groups: Vec<(Vec<usize>, NodeId)> = vec![(all, next_id)];
    next_id += 1;

    let max_level = rep_end.iter().copied().max().unwrap_or(0);
    for level in 1..=max_level {
        let mut next_groups = Vec::new();
        for (members, parent_node) in &groups {
            let alive: Vec<usize> =
                members.iter().copied().filter(|&a| rep_end[a] >= level).collect();
            if alive.is_empty() {
                continue;
            }
            // sub-cluster: pairs still sharing a node at this level
            let mut dsu = DisjointSet::new(alive.len());
            for x in 0..alive.len() {
                for y in (x + 1)..alive.len() {
                    if rep_div[alive[x]][alive[y]] >= level {
                        dsu.union(x, y);
                    }
                }
            }
            for local in dsu.groups() {
                let sub: Vec<usize> = local.into_iter().map(|x| alive[x]).collect();
                let (pos, rad) = mean_at(&sub, level);
                tree.add_child(*parent_node, CenterlineNode::new(next_id, pos, rad))?;
                next_groups.push((sub, next_id));
                next_id += 1;
            }
        }
        groups = next_groups;
    }

    debug_assert!(tree.validate().ok(), "decoded tree must be valid: {}", tree.validate());
    Ok(tree)
}
