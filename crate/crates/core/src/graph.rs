//! Rooted centerline trees.
//!
//! A [`CenterlineTree`] is the canonical output of the whole pipeline: a
//! rooted spatial tree whose nodes carry a 3D position and a vessel radius,
//! with edges encoding parent-child relationships. Trees are immutable once
//! built (all operations return new trees), so they can be shared freely
//! across threads.

use crate::geom::{PatchRegion, Point3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

/// Node identifier. Ids are arbitrary unique integers; no contiguity or
/// ordering is assumed anywhere.
pub type NodeId = i64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("invalid tree: {0}")]
    InvalidTree(ValidationReport),
    #[error("anchor node {anchor} lies outside the patch region")]
    AnchorOutsideRegion { anchor: NodeId },
    #[error("node {id} has non-positive radius {radius}")]
    BadRadius { id: NodeId, radius: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single centerline point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterlineNode {
    pub id: NodeId,
    pub pos: Point3,
    pub radius: f64,
}

impl CenterlineNode {
    pub fn new(id: NodeId, pos: Point3, radius: f64) -> Self {
        CenterlineNode { id, pos, radius }
    }
}

/// Where a branch starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchStart {
    /// First node is the tree root.
    Root,
    /// First node is a child of a bifurcation.
    Bifurcation,
}

/// Where a branch ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchEnd {
    /// Last node has two or more children.
    Bifurcation,
    /// Last node has no children.
    Leaf,
}

/// A maximal path between root/bifurcation and bifurcation/leaf.
///
/// Every tree node belongs to exactly one branch: a bifurcation node is the
/// last node of its parent branch and is not repeated in the child branches,
/// which start at the bifurcation's children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub nodes: Vec<NodeId>,
    pub start: BranchStart,
    pub end: BranchEnd,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn first(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn last(&self) -> NodeId {
        *self.nodes.last().unwrap()
    }
}

/// One invariant failure found by [`CenterlineTree::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    RootMissing { root: NodeId },
    RootHasParent { root: NodeId },
    /// Non-root node with no parent entry (a second root).
    ExtraRoot { id: NodeId },
    ParentUnknown { id: NodeId, parent: NodeId },
    /// parent/children maps disagree.
    LinkInconsistent { parent: NodeId, child: NodeId },
    DuplicateChild { parent: NodeId, child: NodeId },
    Cycle { id: NodeId },
    Unreachable { id: NodeId },
    EdgeCountMismatch { nodes: usize, edges: usize },
    NonPositiveRadius { id: NodeId },
    NonFinitePosition { id: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RootMissing { root } => write!(f, "root id {root} is not a node"),
            Violation::RootHasParent { root } => write!(f, "root {root} has a parent"),
            Violation::ExtraRoot { id } => write!(f, "non-root node {id} has no parent"),
            Violation::ParentUnknown { id, parent } => {
                write!(f, "node {id} references unknown parent {parent}")
            }
            Violation::LinkInconsistent { parent, child } => {
                write!(f, "parent/children maps disagree on edge {parent}->{child}")
            }
            Violation::DuplicateChild { parent, child } => {
                write!(f, "child {child} listed twice under {parent}")
            }
            Violation::Cycle { id } => write!(f, "node {id} lies on a parent cycle"),
            Violation::Unreachable { id } => write!(f, "node {id} is not reachable from the root"),
            Violation::EdgeCountMismatch { nodes, edges } => {
                write!(f, "{nodes} nodes but {edges} edges (expected nodes-1)")
            }
            Violation::NonPositiveRadius { id } => write!(f, "node {id} has non-positive radius"),
            Violation::NonFinitePosition { id } => write!(f, "node {id} has non-finite position"),
        }
    }
}

/// Result of tree validation; `ok` iff `violations` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return write!(f, "ok");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Rooted spatial tree with per-node positions and radii.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterlineTree {
    root: NodeId,
    nodes: BTreeMap<NodeId, CenterlineNode>,
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
}

impl CenterlineTree {
    /// Creates a tree containing only `root`.
    pub fn new(root: CenterlineNode) -> Self {
        let id = root.id;
        let mut nodes = BTreeMap::new();
        nodes.insert(id, root);
        let mut children = BTreeMap::new();
        children.insert(id, Vec::new());
        CenterlineTree { root: id, nodes, parent: BTreeMap::new(), children }
    }

    /// Attaches `node` as the last child of `parent`.
    pub fn add_child(&mut self, parent: NodeId, node: CenterlineNode) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&parent) {
            return Err(GraphError::UnknownNode(parent));
        }
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateNode(node.id));
        }
        if !(node.radius > 0.0) {
            return Err(GraphError::BadRadius { id: node.id, radius: node.radius });
        }
        let id = node.id;
        self.nodes.insert(id, node);
        self.parent.insert(id, parent);
        self.children.entry(parent).or_default().push(id);
        self.children.insert(id, Vec::new());
        Ok(())
    }

    /// Assembles a tree from raw parts without checking any invariant.
    ///
    /// Child lists follow the order of `parents` pairs. Callers that accept
    /// untrusted input must run [`validate`](Self::validate) afterwards.
    pub fn from_parts(
        root: NodeId,
        nodes: impl IntoIterator<Item = CenterlineNode>,
        parents: &[(NodeId, NodeId)],
    ) -> Self {
        let nodes: BTreeMap<NodeId, CenterlineNode> =
            nodes.into_iter().map(|n| (n.id, n)).collect();
        let mut children: BTreeMap<NodeId, Vec<NodeId>> =
            nodes.keys().map(|&id| (id, Vec::new())).collect();
        let mut parent = BTreeMap::new();
        for &(child, par) in parents {
            parent.insert(child, par);
            children.entry(par).or_default().push(child);
        }
        CenterlineTree { root, nodes, parent, children }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&CenterlineNode> {
        self.nodes.get(&id)
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &CenterlineNode> {
        self.nodes.values()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    /// Children in insertion order. Sibling order carries no meaning.
    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children(id).is_empty()
    }

    pub fn is_bifurcation(&self, id: NodeId) -> bool {
        self.children(id).len() >= 2
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied().filter(|&id| self.is_leaf(id))
    }

    /// Edges as (parent, child) pairs, ascending by child id.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.parent.iter().map(|(&c, &p)| (p, c))
    }

    /// Pre-order traversal; children visited in insertion order.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if !self.nodes.contains_key(&id) {
                continue;
            }
            order.push(id);
            for &c in self.children(id).iter().rev() {
                stack.push(c);
            }
        }
        order
    }

    /// Depth (edge count from root) per node, by BFS over children.
    pub fn depths(&self) -> BTreeMap<NodeId, usize> {
        let mut depths = BTreeMap::new();
        let mut queue = VecDeque::new();
        if self.nodes.contains_key(&self.root) {
            depths.insert(self.root, 0usize);
            queue.push_back(self.root);
        }
        while let Some(id) = queue.pop_front() {
            let d = depths[&id];
            for &c in self.children(id) {
                if self.nodes.contains_key(&c) && !depths.contains_key(&c) {
                    depths.insert(c, d + 1);
                    queue.push_back(c);
                }
            }
        }
        depths
    }

    /// Checks every tree invariant and reports each failure.
    ///
    /// Never fails; callers inspect [`ValidationReport::ok`].
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();

        if !self.nodes.contains_key(&self.root) {
            v.push(Violation::RootMissing { root: self.root });
        }
        if self.parent.contains_key(&self.root) {
            v.push(Violation::RootHasParent { root: self.root });
        }

        for node in self.nodes.values() {
            if !(node.radius > 0.0) || !node.radius.is_finite() {
                v.push(Violation::NonPositiveRadius { id: node.id });
            }
            if !node.pos.is_finite() {
                v.push(Violation::NonFinitePosition { id: node.id });
            }
            if node.id != self.root && !self.parent.contains_key(&node.id) {
                v.push(Violation::ExtraRoot { id: node.id });
            }
        }

        // parent/children mutual consistency
        for (&child, &par) in &self.parent {
            if !self.nodes.contains_key(&par) {
                v.push(Violation::ParentUnknown { id: child, parent: par });
            } else if !self.children(par).contains(&child) {
                v.push(Violation::LinkInconsistent { parent: par, child });
            }
        }
        for (&par, kids) in &self.children {
            let mut seen = BTreeSet::new();
            for &child in kids {
                if !seen.insert(child) {
                    v.push(Violation::DuplicateChild { parent: par, child });
                }
                if self.parent.get(&child) != Some(&par) {
                    v.push(Violation::LinkInconsistent { parent: par, child });
                }
            }
        }

        // cycles: walk parent chains with tri-state coloring
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        let mut color: BTreeMap<NodeId, Color> =
            self.nodes.keys().map(|&id| (id, Color::White)).collect();
        let mut on_cycle = BTreeSet::new();
        for &start in self.nodes.keys() {
            if color[&start] != Color::White {
                continue;
            }
            let mut chain = Vec::new();
            let mut cur = start;
            loop {
                match color.get(&cur) {
                    None | Some(Color::Black) => break,
                    Some(Color::Gray) => {
                        // found a cycle: everything from `cur` onwards in the chain
                        if let Some(pos) = chain.iter().position(|&c| c == cur) {
                            for &c in &chain[pos..] {
                                on_cycle.insert(c);
                            }
                        }
                        break;
                    }
                    Some(Color::White) => {
                        color.insert(cur, Color::Gray);
                        chain.push(cur);
                        match self.parent.get(&cur) {
                            Some(&p) => cur = p,
                            None => break,
                        }
                    }
                }
            }
            for c in chain {
                color.insert(c, Color::Black);
            }
        }
        for id in &on_cycle {
            v.push(Violation::Cycle { id: *id });
        }

        // connectivity from root
        if self.nodes.contains_key(&self.root) {
            let reachable: BTreeSet<NodeId> = self.depths().keys().copied().collect();
            for &id in self.nodes.keys() {
                if !reachable.contains(&id) && !on_cycle.contains(&id) {
                    v.push(Violation::Unreachable { id });
                }
            }
        }

        if !self.nodes.is_empty() && self.parent.len() != self.nodes.len() - 1 {
            v.push(Violation::EdgeCountMismatch {
                nodes: self.nodes.len(),
                edges: self.parent.len(),
            });
        }

        ValidationReport { violations: v }
    }

    fn ensure_valid(&self) -> Result<(), GraphError> {
        let report = self.validate();
        if report.ok() {
            Ok(())
        } else {
            Err(GraphError::InvalidTree(report))
        }
    }

    /// Splits the tree into maximal branches, in pre-order.
    ///
    /// Branches partition both the nodes and the edges: a branch owns its
    /// nodes plus the incoming edge from its attachment parent (if any).
    pub fn branch_decomposition(&self) -> Result<Vec<Branch>, GraphError> {
        self.ensure_valid()?;
        let mut branches = Vec::new();
        // stack of branch heads, pre-order
        let mut stack = vec![(self.root, BranchStart::Root)];
        while let Some((head, start)) = stack.pop() {
            let mut nodes = vec![head];
            let mut cur = head;
            while self.children(cur).len() == 1 {
                cur = self.children(cur)[0];
                nodes.push(cur);
            }
            let end = if self.is_leaf(cur) { BranchEnd::Leaf } else { BranchEnd::Bifurcation };
            if end == BranchEnd::Bifurcation {
                for &c in self.children(cur).iter().rev() {
                    stack.push((c, BranchStart::Bifurcation));
                }
            }
            branches.push(Branch { nodes, start, end });
        }
        Ok(branches)
    }

    /// Returns the subtree rooted at `anchor` truncated to `region`.
    ///
    /// Descent stops at the first node outside the closed cube; everything
    /// below an excluded node is dropped, node ids are preserved.
    pub fn crop_to_patch(
        &self,
        region: &PatchRegion,
        anchor: NodeId,
    ) -> Result<CenterlineTree, GraphError> {
        let anchor_node = *self.nodes.get(&anchor).ok_or(GraphError::UnknownNode(anchor))?;
        if !region.contains(&anchor_node.pos) {
            return Err(GraphError::AnchorOutsideRegion { anchor });
        }
        let mut out = CenterlineTree::new(anchor_node);
        let mut queue = VecDeque::from([anchor]);
        while let Some(id) = queue.pop_front() {
            for &c in self.children(id) {
                let child = self.nodes[&c];
                if region.contains(&child.pos) {
                    out.add_child(id, child)?;
                    queue.push_back(c);
                }
            }
        }
        Ok(out)
    }

    /// Serializes to the canonical JSON tree format, nodes ascending by id.
    pub fn to_json_string(&self) -> String {
        let file = TreeFile {
            root: self.root,
            nodes: self
                .nodes
                .values()
                .map(|n| TreeFileNode {
                    id: n.id,
                    pos: n.pos.coords(),
                    radius: n.radius,
                    parent: self.parent(n.id),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("tree serialization cannot fail")
    }

    /// Parses the JSON tree format, rejecting files that violate any tree
    /// invariant.
    pub fn from_json_str(s: &str) -> Result<CenterlineTree, GraphError> {
        let file: TreeFile = serde_json::from_str(s)?;
        let mut parents = Vec::new();
        let mut seen = BTreeSet::new();
        for n in &file.nodes {
            if !seen.insert(n.id) {
                return Err(GraphError::DuplicateNode(n.id));
            }
            if let Some(p) = n.parent {
                parents.push((n.id, p));
            }
        }
        let tree = CenterlineTree::from_parts(
            file.root,
            file.nodes
                .iter()
                .map(|n| CenterlineNode::new(n.id, Point3::from(n.pos), n.radius)),
            &parents,
        );
        tree.ensure_valid()?;
        Ok(tree)
    }
}

/// On-disk tree schema: `{"root": id, "nodes": [{"id", "pos", "radius", "parent"}]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    root: NodeId,
    nodes: Vec<TreeFileNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFileNode {
    id: NodeId,
    pos: [f64; 3],
    radius: f64,
    parent: Option<NodeId>,
}

/// Structural equality up to sibling permutation.
///
/// Positions and radii must agree within `tol` (L-inf). Siblings are
/// canonicalized by sorting on (position, radius), so the comparison is only
/// meaningful when distinct siblings are separated by more than `tol`.
pub fn isomorphic(a: &CenterlineTree, b: &CenterlineTree, tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut stack = vec![(a.root(), b.root())];
    while let Some((na, nb)) = stack.pop() {
        let (va, vb) = match (a.node(na), b.node(nb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return false,
        };
        if va.pos.linf_dist(&vb.pos) > tol || (va.radius - vb.radius).abs() > tol {
            return false;
        }
        let mut ca: Vec<NodeId> = a.children(na).to_vec();
        let mut cb: Vec<NodeId> = b.children(nb).to_vec();
        if ca.len() != cb.len() {
            return false;
        }
        let key = |t: &CenterlineTree, id: NodeId| {
            let n = t.node(id).unwrap();
            (n.pos.x, n.pos.y, n.pos.z, n.radius)
        };
        let cmp = |x: &(f64, f64, f64, f64), y: &(f64, f64, f64, f64)| {
            x.0.total_cmp(&y.0)
                .then(x.1.total_cmp(&y.1))
                .then(x.2.total_cmp(&y.2))
                .then(x.3.total_cmp(&y.3))
        };
        ca.sort_by(|&p, &q| cmp(&key(a, p), &key(a, q)));
        cb.sort_by(|&p, &q| cmp(&key(b, p), &key(b, q)));
        stack.extend(ca.into_iter().zip(cb));
    }
    true
}
