//! Cross-module properties: codec round trips, decoder robustness, TNMS
//! invariants over corrupted trees, and noise-degradation behavior.

use proptest::prelude::*;
use vesselgraph::graph::{isomorphic, CenterlineTree, NodeId};
use vesselgraph::metrics::point_metrics;
use vesselgraph::synth::{corrupt_tree, generate_tree, CorruptionParams, SynthParams};
use vesselgraph::tnms::{tnms, TnmsConfig};
use vesselgraph::traj::{decode_tree, encode_targets, ConfluentTrajectorySet};
use vesselgraph::Point3;

/// Params whose trees keep distinct branches well beyond tau_min apart:
/// wide steps and low tortuosity so even 20-degree sibling openings separate
/// by more than 2 voxels at the first node.
fn separated_params(seed: u64) -> SynthParams {
    SynthParams {
        max_depth: 4,
        bifurcation_prob: 0.6,
        segment_len: (3, 5),
        step_len: 8.0,
        radius_root: 4.0,
        radius_decay: 0.8,
        tortuosity: 0.02,
        seed,
    }
}

/// Shallow trees whose every path fits inside a 10-node window.
fn shallow_params(seed: u64) -> SynthParams {
    SynthParams {
        max_depth: 3,
        bifurcation_prob: 0.6,
        segment_len: (2, 3),
        step_len: 6.0,
        radius_root: 4.0,
        radius_decay: 0.8,
        tortuosity: 0.05,
        seed,
    }
}

/// Independent validity check: parent consistency, edge count, connectivity
/// via union-find, acyclicity via DFS from the root.
fn independently_valid(tree: &CenterlineTree) -> bool {
    let ids: Vec<NodeId> = tree.nodes().map(|n| n.id).collect();
    let index: std::collections::HashMap<NodeId, usize> =
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = ids.len();

    // edge count
    let edges: Vec<(NodeId, NodeId)> = tree.edges().collect();
    if edges.len() != n - 1 {
        return false;
    }
    // union-find connectivity
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for &(p, c) in &edges {
        let (rp, rc) = (find(&mut parent, index[&p]), find(&mut parent, index[&c]));
        if rp == rc {
            return false; // a cycle
        }
        parent[rp] = rc;
    }
    let root = find(&mut parent, index[&tree.root()]);
    (0..n).all(|i| find(&mut parent, i) == root)
}

#[test]
fn synthetic_trees_pass_independent_validation() {
    for seed in 0..30 {
        let t = generate_tree(&SynthParams { max_depth: 6, seed, ..separated_params(seed) });
        assert!(t.validate().ok());
        assert!(independently_valid(&t), "seed {seed}");
        if t.len() >= 100 {
            return; // at least one roomy tree checked
        }
    }
}

#[test]
fn branches_partition_nodes_and_edges() {
    for seed in 0..25 {
        let t = generate_tree(&SynthParams { max_depth: 5, seed, ..separated_params(seed) });
        let branches = t.branch_decomposition().unwrap();

        // nodes: each exactly once
        let mut nodes: Vec<NodeId> = branches.iter().flat_map(|b| b.nodes.clone()).collect();
        nodes.sort_unstable();
        let mut expected: Vec<NodeId> = t.nodes().map(|n| n.id).collect();
        expected.sort_unstable();
        assert_eq!(nodes, expected);

        // edges: in-branch pairs plus attachment edges cover everything once
        let mut covered: Vec<(NodeId, NodeId)> = Vec::new();
        for b in &branches {
            if let Some(p) = t.parent(b.first()) {
                covered.push((p, b.first()));
            }
            for w in b.nodes.windows(2) {
                covered.push((w[0], w[1]));
            }
        }
        covered.sort_unstable();
        let mut edges: Vec<(NodeId, NodeId)> = t.edges().collect();
        edges.sort_unstable();
        assert_eq!(covered, edges);

        // binary bifurcations: branch count = 2b + 1
        let bifs = t.nodes().filter(|n| t.children(n.id).len() == 2).count();
        let multi = t.nodes().filter(|n| t.children(n.id).len() > 2).count();
        if multi == 0 {
            assert_eq!(branches.len(), 2 * bifs + 1, "seed {seed}");
        }
    }
}

#[test]
fn codec_round_trip_is_exact_on_window_deep_trees() {
    let l = 10;
    for seed in 0..100 {
        // depth from anchor stays within the window: 3 segments of <= 3
        let t = generate_tree(&shallow_params(seed));
        assert!(t.depths().values().max().unwrap() < &l);
        let targets = encode_targets(&t, t.root(), l).unwrap();
        let decoded = decode_tree(&targets.to_trajectory_set()).unwrap();
        assert!(isomorphic(&decoded, &t, 1e-9), "seed {seed}");
    }
}

#[test]
fn cropping_preserves_validity() {
    use vesselgraph::PatchRegion;
    for seed in 0..20 {
        let t = generate_tree(&SynthParams { max_depth: 5, seed, ..separated_params(seed) });
        let root_pos = t.node(t.root()).unwrap().pos;
        for half in [8.0, 16.0, 32.0] {
            let cropped = t.crop_to_patch(&PatchRegion::new(root_pos, half), t.root()).unwrap();
            assert!(cropped.validate().ok());
            assert!(cropped.len() <= t.len());
        }
    }
}

#[test]
fn tnms_is_idempotent_and_valid_on_corrupted_trees() {
    let cfg = TnmsConfig::default();
    for seed in 0..30 {
        let t = generate_tree(&separated_params(seed));
        let corrupted = corrupt_tree(
            &t,
            &CorruptionParams {
                pos_noise_std: 0.4,
                radius_noise_std: 0.2,
                duplicate_branch_prob: 0.7,
                drop_branch_prob: 0.1,
                seed,
            },
        )
        .unwrap();
        let once = tnms(&corrupted, &cfg).unwrap();
        assert!(once.validate().ok(), "seed {seed}: {}", once.validate());
        assert!(independently_valid(&once));
        let twice = tnms(&once, &cfg).unwrap();
        assert_eq!(once, twice, "seed {seed} not idempotent");
    }
}

#[test]
fn tnms_fully_merges_exact_duplicates() {
    for seed in 0..20 {
        let t = generate_tree(&separated_params(seed));
        // precondition: the clean tree itself is TNMS-stable
        assert_eq!(tnms(&t, &TnmsConfig::default()).unwrap(), t, "seed {seed} unstable");
        let injected = corrupt_tree(
            &t,
            &CorruptionParams { duplicate_branch_prob: 1.0, seed, ..CorruptionParams::default() },
        )
        .unwrap();
        let merged = tnms(&injected, &TnmsConfig::default()).unwrap();
        assert_eq!(merged.len(), t.len(), "seed {seed}");
        // merge completeness: no residual coincident pairs across the output
        let nodes: Vec<&vesselgraph::CenterlineNode> = merged.nodes().collect();
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                assert!(a.pos.dist(&b.pos) > 1e-9, "coincident nodes survive in seed {seed}");
            }
        }
    }
}

#[test]
fn heavier_position_noise_never_helps_recall() {
    let mut wins = 0;
    let seeds = 50;
    for seed in 0..seeds {
        let gt = generate_tree(&separated_params(seed));
        let recall_at = |std: f64| {
            let noisy = corrupt_tree(
                &gt,
                &CorruptionParams { pos_noise_std: std, seed, ..CorruptionParams::default() },
            )
            .unwrap();
            let (_, rar, _, _, _) = point_metrics(&noisy, &gt).unwrap();
            rar
        };
        if recall_at(0.5) >= recall_at(2.0) {
            wins += 1;
        }
    }
    // monotone degradation holds on virtually every seed
    assert!(wins >= seeds - 1, "only {wins}/{seeds} seeds degraded monotonically");
}

// --- decoder robustness over arbitrary valid inputs ---------------------

fn arb_trajectory_set() -> impl Strategy<Value = ConfluentTrajectorySet> {
    (2usize..6, 3usize..8).prop_flat_map(|(n, l)| {
        let positions = proptest::collection::vec(
            proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64), l..=l),
            n..=n,
        );
        let radii = proptest::collection::vec(
            proptest::collection::vec(0.1..5.0f64, l..=l),
            n..=n,
        );
        let ends = proptest::collection::vec(0.0..=1.0f64, n..=n);
        let divergence = proptest::collection::vec(
            proptest::collection::vec(0.0..=1.0f64, n..=n),
            n..=n,
        );
        (positions, radii, ends, divergence).prop_map(move |(pos, radii, end_pos, divergence)| {
            let shared = Point3::new(0.0, 0.0, 0.0);
            let mut positions: Vec<Vec<Point3>> = pos
                .into_iter()
                .map(|row| row.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
                .collect();
            for row in positions.iter_mut() {
                row[0] = shared;
            }
            ConfluentTrajectorySet { origin: shared, positions, radii, end_pos, divergence }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Whatever the (valid) input, the decoder emits a single connected
    /// acyclic tree.
    #[test]
    fn decode_always_produces_a_valid_tree(set in arb_trajectory_set()) {
        let tree = decode_tree(&set).unwrap();
        prop_assert!(tree.validate().ok());
        prop_assert!(independently_valid(&tree));
    }

    /// Trajectory order never changes the decoded structure.
    #[test]
    fn decode_is_permutation_invariant(set in arb_trajectory_set(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = set.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));

        let permuted = ConfluentTrajectorySet {
            origin: set.origin,
            positions: perm.iter().map(|&i| set.positions[i].clone()).collect(),
            radii: perm.iter().map(|&i| set.radii[i].clone()).collect(),
            end_pos: perm.iter().map(|&i| set.end_pos[i]).collect(),
            divergence: perm
                .iter()
                .map(|&i| perm.iter().map(|&k| set.divergence[i][k]).collect())
                .collect(),
        };
        let a = decode_tree(&set).unwrap();
        let b = decode_tree(&permuted).unwrap();
        prop_assert!(isomorphic(&a, &b, 1e-9));
    }
}
