//! Recursive patch-based whole-tree tracing over a pluggable proposer.
//!
//! Tracing keeps a breadth-first frontier of patch centers. Each patch asks
//! the proposer for a confluent trajectory set, decodes it into a subtree,
//! and grafts that subtree onto the global tree by identifying the decoded
//! root with the frontier node. Decoded branches that stop before the window
//! edge terminate; branches reaching index L-1 enqueue their last node as a
//! new patch center, so consecutive windows share one node (stride L-1).
//! Guards on node and patch counts turn runaway proposals into a truncated
//! but valid partial tree.
//!
//! [`OracleProposer`] stands in for a trained predictor: it snaps the patch
//! center to the nearest ground-truth node, encodes the cropped subtree
//! there, and fills the requested n proposals by cycling the targets,
//! optionally jittering positions and radii. End and divergence values stay
//! exact, so the decoder can merge the copies back together.

use crate::geom::{PatchRegion, Point3};
use crate::graph::{CenterlineNode, CenterlineTree, GraphError, NodeId};
use crate::spatial::KdTree;
use crate::tnms::{tnms, TnmsConfig, TnmsError};
use crate::traj::{decode_tree, encode_targets, CodecError, ConfluentTrajectorySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("proposal failed at patch centered {center}: {source}")]
    Proposer {
        center: Point3,
        #[source]
        source: Box<TraceError>,
    },
    #[error("no ground-truth node within {snap} voxels of {center}")]
    NoGroundTruthNearby { center: Point3, snap: f64 },
    #[error("patch holds {m} target branches but only {n} proposals were requested")]
    TooManyBranches { m: usize, n: usize },
    #[error("bad trace config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tnms(#[from] TnmsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Source of trajectory proposals for one patch.
///
/// Implementations must return exactly `n` trajectories of length `l`
/// anchored at (or snapped near) `center`, and must be deterministic given
/// their own configuration so traces are reproducible.
pub trait Proposer {
    fn propose(
        &self,
        center: Point3,
        n: usize,
        l: usize,
    ) -> Result<ConfluentTrajectorySet, TraceError>;
}

/// Knobs for [`trace`].
///
/// A trajectory window must fit inside its patch: keep the node spacing of
/// the traced structure times (l - 1) at or below `half_extent`, otherwise
/// branches get clipped at the patch wall and terminate early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// Proposals per patch.
    pub n: usize,
    /// Trajectory length per proposal.
    pub l: usize,
    /// Half-extent of the cubic patch, voxels.
    pub half_extent: f64,
    /// Stop expanding once the global tree holds this many nodes.
    pub max_nodes: usize,
    /// Stop after this many patches.
    pub max_patches: usize,
    /// Run a final TNMS pass over the traced tree.
    pub apply_tnms: bool,
    pub tnms: TnmsConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            n: 20,
            l: 10,
            half_extent: PatchRegion::DEFAULT_HALF_EXTENT,
            max_nodes: 100_000,
            max_patches: 10_000,
            apply_tnms: false,
            tnms: TnmsConfig::default(),
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.n < 1 {
            return Err(TraceError::BadConfig("n must be >= 1".into()));
        }
        if self.l < 2 {
            return Err(TraceError::BadConfig("l must be >= 2".into()));
        }
        if !(self.half_extent > 0.0) {
            return Err(TraceError::BadConfig("half_extent must be positive".into()));
        }
        if self.max_nodes == 0 || self.max_patches == 0 {
            return Err(TraceError::BadConfig("guards must be positive".into()));
        }
        if self.apply_tnms {
            self.tnms.validate()?;
        }
        Ok(())
    }
}

/// Output of [`trace`].
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub tree: CenterlineTree,
    /// True when a guard stopped the trace before the frontier emptied.
    pub truncated: bool,
    /// Patches actually proposed.
    pub patches: usize,
}

/// Traces a whole tree from `root_position` by recursive patch expansion.
pub fn trace(
    proposer: &dyn Proposer,
    root_position: Point3,
    cfg: &TraceConfig,
) -> Result<TraceResult, TraceError> {
    cfg.validate()?;

    let mut tree: Option<CenterlineTree> = None;
    let mut next_id: NodeId = 0;
    let mut frontier: VecDeque<(Option<NodeId>, Point3)> = VecDeque::new();
    frontier.push_back((None, root_position));
    let mut visited_frontier: std::collections::BTreeSet<NodeId> = Default::default();
    let mut patches = 0usize;
    let mut truncated = false;

    while let Some((graft_at, center)) = frontier.pop_front() {
        if patches >= cfg.max_patches {
            truncated = true;
            break;
        }
        if let Some(id) = graft_at {
            debug_assert!(visited_frontier.insert(id), "frontier node {id} visited twice");
        }
        patches += 1;

        let proposal = proposer.propose(center, cfg.n, cfg.l).map_err(|e| {
            TraceError::Proposer { center, source: Box::new(e) }
        })?;
        let decoded = decode_tree(&proposal)?;
        let decoded_depths = decoded.depths();

        // graft the decoded subtree, identifying its root with the frontier
        // node; positions stay in the global frame throughout
        let mut to_global: std::collections::BTreeMap<NodeId, NodeId> = Default::default();
        match (&mut tree, graft_at) {
            (None, _) => {
                let root = *decoded.node(decoded.root()).unwrap();
                let global_root = next_id;
                let mut t = CenterlineTree::new(CenterlineNode::new(global_root, root.pos, root.radius));
                next_id += 1;
                to_global.insert(decoded.root(), global_root);
                for id in decoded.preorder() {
                    if id == decoded.root() {
                        continue;
                    }
                    let src = decoded.node(id).unwrap();
                    let parent = to_global[&decoded.parent(id).unwrap()];
                    t.add_child(parent, CenterlineNode::new(next_id, src.pos, src.radius))?;
                    to_global.insert(id, next_id);
                    next_id += 1;
                }
                tree = Some(t);
            }
            (Some(t), Some(fid)) => {
                to_global.insert(decoded.root(), fid);
                for id in decoded.preorder() {
                    if id == decoded.root() {
                        continue;
                    }
                    let src = decoded.node(id).unwrap();
                    let parent = to_global[&decoded.parent(id).unwrap()];
                    t.add_child(parent, CenterlineNode::new(next_id, src.pos, src.radius))?;
                    to_global.insert(id, next_id);
                    next_id += 1;
                }
            }
            (Some(_), None) => unreachable!("only the first patch lacks a graft node"),
        }
        let t = tree.as_ref().unwrap();

        // branches that reach the window edge continue in a new patch
        for leaf in decoded.leaves() {
            if decoded_depths[&leaf] == cfg.l - 1 {
                let gid = to_global[&leaf];
                frontier.push_back((Some(gid), t.node(gid).unwrap().pos));
            }
        }

        if t.len() >= cfg.max_nodes {
            truncated = !frontier.is_empty();
            break;
        }
    }
    if !truncated && !frontier.is_empty() {
        truncated = true;
    }

    let mut tree = tree.expect("at least one patch was traced");
    if cfg.apply_tnms {
        tree = tnms(&tree, &cfg.tnms)?;
    }
    debug_assert!(tree.validate().ok());
    Ok(TraceResult { tree, truncated, patches })
}

/// Ground-truth-backed proposer configuration.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub gt: CenterlineTree,
    /// Gaussian position jitter per axis, voxels; the anchor node stays exact.
    pub pos_noise_std: f64,
    /// Gaussian radius jitter, voxels.
    pub radius_noise_std: f64,
    pub seed: u64,
}

/// Proposer that reads trajectories off a ground-truth tree.
///
/// Stateless across patches: the RNG is re-derived from the seed and the
/// patch center, so concurrent or repeated proposals agree.
pub struct OracleProposer {
    cfg: OracleConfig,
    snap_distance: f64,
    index: KdTree,
}

impl OracleProposer {
    /// `snap_distance` is normally the patch half-extent.
    pub fn new(cfg: OracleConfig, snap_distance: f64) -> Self {
        let index = KdTree::build(cfg.gt.nodes().map(|n| (n.pos, n.id)));
        OracleProposer { cfg, snap_distance, index }
    }

    fn patch_rng(&self, center: &Point3) -> ChaCha8Rng {
        fn splitmix64(mut x: u64) -> u64 {
            x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }
        let mut h = self.cfg.seed;
        for v in [center.x, center.y, center.z] {
            h = splitmix64(h ^ v.to_bits());
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        let s = a * a + b * b;
        if s > 0.0 && s < 1.0 {
            return a * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

impl Proposer for OracleProposer {
    fn propose(
        &self,
        center: Point3,
        n: usize,
        l: usize,
    ) -> Result<ConfluentTrajectorySet, TraceError> {
        let (anchor, _) = self
            .index
            .nearest_within(&center, self.snap_distance)
            .ok_or(TraceError::NoGroundTruthNearby { center, snap: self.snap_distance })?;
        let region = PatchRegion::new(center, self.snap_distance);
        let cropped = self.cfg.gt.crop_to_patch(&region, anchor)?;
        let targets = encode_targets(&cropped, anchor, l)?;
        let m = targets.m();
        if m > n {
            return Err(TraceError::TooManyBranches { m, n });
        }

        let mut rng = self.patch_rng(&center);
        let mut positions = Vec::with_capacity(n);
        let mut radii = Vec::with_capacity(n);
        let mut end_pos = Vec::with_capacity(n);
        for i in 0..n {
            let j = i % m;
            let mut pos = targets.positions[j].clone();
            let mut rad = targets.radii[j].clone();
            if self.cfg.pos_noise_std > 0.0 {
                for p in pos.iter_mut().skip(1) {
                    *p = *p
                        + Point3::new(
                            gaussian(&mut rng) * self.cfg.pos_noise_std,
                            gaussian(&mut rng) * self.cfg.pos_noise_std,
                            gaussian(&mut rng) * self.cfg.pos_noise_std,
                        );
                }
            }
            if self.cfg.radius_noise_std > 0.0 {
                for r in rad.iter_mut() {
                    *r = (*r + gaussian(&mut rng) * self.cfg.radius_noise_std).max(0.05);
                }
            }
            positions.push(pos);
            radii.push(rad);
            end_pos.push(targets.end_pos(j));
        }
        let mut divergence = vec![vec![0.0; n]; n];
        for (i, row) in divergence.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().enumerate() {
                // same-target pairs read the diagonal, i.e. the end position
                *cell = targets.divergence[i % m][k % m];
            }
        }

        let set = ConfluentTrajectorySet {
            origin: targets.origin,
            positions,
            radii,
            end_pos,
            divergence,
        };
        debug_assert!(set.validate().is_ok());
        Ok(set)
    }
}
