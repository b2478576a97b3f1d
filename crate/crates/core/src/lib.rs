//! Centerline tree graphs for tubular structures.
//!
//! The crate covers the non-neural core of a confluent-trajectory centerline
//! pipeline:
//!
//! - [`graph`]: the rooted spatial tree model, validation, branch
//!   decomposition, patch cropping, and the JSON tree format,
//! - [`traj`]: bidirectional conversion between trees and confluent
//!   trajectory sets,
//! - [`tnms`]: tree non-max suppression, merging spatially duplicate
//!   branches while preserving tree topology,
//! - [`matching`]: many-to-one Hungarian assignment of predicted to target
//!   trajectories and the associated loss terms,
//! - [`metrics`]: radius-aware point- and branch-level evaluation,
//! - [`synth`]: seeded synthetic vascular trees and corruption operators,
//! - [`tracer`]: recursive patch tracing over a pluggable trajectory
//!   proposer, with a ground-truth oracle proposer,
//! - [`experiment`]: reproducible multi-seed experiment runs.

pub mod dsu;
pub mod experiment;
pub mod geom;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod spatial;
pub mod synth;
pub mod tnms;
pub mod tracer;
pub mod traj;

pub use geom::{PatchRegion, Point3};
pub use graph::{
    isomorphic, Branch, BranchEnd, BranchStart, CenterlineNode, CenterlineTree, GraphError,
    NodeId, ValidationReport,
};
pub use traj::{
    cluster_by_divergence, decode_tree, discretize, encode_targets, merge_cluster, CodecError,
    ConfluentTrajectorySet, RepresentativeTrajectory, TrajectoryTargets,
};
