//! Spatial nearest-neighbor index over 3D points with integer payloads.
//!
//! [`KdTree`] is a static median-split kd-tree. [`SpatialIndex`] wraps a
//! small forest of static trees so that batch appends stay cheap: a new
//! batch becomes its own tree, and trees of comparable size are merged
//! (rebuilt) on the way in. Each point takes part in O(log n) rebuilds, so
//! n appended points cost O(n log^2 n) total while queries stay
//! logarithmic per tree.

use crate::geom::Point3;

#[derive(Debug, Clone, Copy)]
struct Entry {
    pos: Point3,
    /// Caller-supplied payload, typically a node id.
    payload: i64,
}

/// Static 3D kd-tree built once from a point set.
#[derive(Debug, Clone, Default)]
pub struct KdTree {
    /// Implicit binary tree: entries reordered in place, node i splits on
    /// axis (depth mod 3) with children in [lo, mid) and (mid, hi).
    entries: Vec<Entry>,
}

impl KdTree {
    pub fn build(points: impl IntoIterator<Item = (Point3, i64)>) -> Self {
        let mut entries: Vec<Entry> =
            points.into_iter().map(|(pos, payload)| Entry { pos, payload }).collect();
        if !entries.is_empty() {
            build_recursive(&mut entries, 0);
        }
        KdTree { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn points(&self) -> impl Iterator<Item = (Point3, i64)> + '_ {
        self.entries.iter().map(|e| (e.pos, e.payload))
    }

    /// Nearest entry within `radius` (inclusive), or None.
    pub fn nearest_within(&self, query: &Point3, radius: f64) -> Option<(i64, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        let mut best: Option<(i64, f64)> = None;
        let mut best_sq = radius * radius;
        self.search(0, self.entries.len(), 0, query, &mut best_sq, &mut best);
        best
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        query: &Point3,
        best_sq: &mut f64,
        best: &mut Option<(i64, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let e = &self.entries[mid];
        let d_sq = e.pos.dist_sq(query);
        if d_sq <= *best_sq {
            // strict improvement or first hit at the boundary; ties keep the
            // earlier find, which is deterministic given the build order
            if best.is_none() || d_sq < *best_sq {
                *best_sq = d_sq;
                *best = Some((e.payload, d_sq.sqrt()));
            }
        }
        let axis = depth % 3;
        let delta = axis_coord(query, axis) - axis_coord(&e.pos, axis);
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, query, best_sq, best);
        if delta * delta <= *best_sq {
            self.search(far.0, far.1, depth + 1, query, best_sq, best);
        }
    }

    /// All entries within `radius` (inclusive) of `query`.
    pub fn within(&self, query: &Point3, radius: f64) -> Vec<(i64, f64)> {
        let mut out = Vec::new();
        if !self.entries.is_empty() {
            self.collect_within(0, self.entries.len(), 0, query, radius * radius, &mut out);
        }
        out
    }

    fn collect_within(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        query: &Point3,
        radius_sq: f64,
        out: &mut Vec<(i64, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let e = &self.entries[mid];
        let d_sq = e.pos.dist_sq(query);
        if d_sq <= radius_sq {
            out.push((e.payload, d_sq.sqrt()));
        }
        let axis = depth % 3;
        let delta = axis_coord(query, axis) - axis_coord(&e.pos, axis);
        if delta < 0.0 || delta * delta <= radius_sq {
            self.collect_within(lo, mid, depth + 1, query, radius_sq, out);
        }
        if delta > 0.0 || delta * delta <= radius_sq {
            self.collect_within(mid + 1, hi, depth + 1, query, radius_sq, out);
        }
    }
}

fn axis_coord(p: &Point3, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

fn build_recursive(entries: &mut [Entry], depth: usize) {
    if entries.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = entries.len() / 2;
    entries.select_nth_unstable_by(mid, |a, b| {
        axis_coord(&a.pos, axis).total_cmp(&axis_coord(&b.pos, axis))
    });
    let (left, rest) = entries.split_at_mut(mid);
    build_recursive(left, depth + 1);
    build_recursive(&mut rest[1..], depth + 1);
}

/// Append-friendly nearest-neighbor index.
#[derive(Debug, Clone, Default)]
pub struct SpatialIndex {
    trees: Vec<KdTree>,
    len: usize,
}

impl SpatialIndex {
    pub fn new() -> Self {
        SpatialIndex::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Inserts a batch of points, merging trees of comparable size so the
    /// forest stays logarithmic in depth.
    pub fn extend(&mut self, batch: impl IntoIterator<Item = (Point3, i64)>) {
        let mut points: Vec<(Point3, i64)> = batch.into_iter().collect();
        if points.is_empty() {
            return;
        }
        self.len += points.len();
        while let Some(last) = self.trees.last() {
            if last.len() <= 2 * points.len() {
                points.extend(self.trees.pop().unwrap().points());
            } else {
                break;
            }
        }
        self.trees.push(KdTree::build(points));
    }

    pub fn nearest_within(&self, query: &Point3, radius: f64) -> Option<(i64, f64)> {
        let mut best: Option<(i64, f64)> = None;
        for tree in &self.trees {
            if let Some((payload, dist)) = tree.nearest_within(query, radius) {
                match best {
                    Some((_, bd)) if bd <= dist => {}
                    _ => best = Some((payload, dist)),
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_nearest_within(
        pts: &[(Point3, i64)],
        q: &Point3,
        radius: f64,
    ) -> Option<(i64, f64)> {
        pts.iter()
            .map(|(p, id)| (*id, p.dist(q)))
            .filter(|(_, d)| *d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Point3, i64)> {
        (0..n)
            .map(|i| {
                (
                    Point3::new(
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                    ),
                    i as i64,
                )
            })
            .collect()
    }

    #[test]
    fn kdtree_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let pts = random_points(&mut rng, 1 + (trial * 25) % 500);
            let tree = KdTree::build(pts.iter().copied());
            for _ in 0..50 {
                let q = Point3::new(
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                );
                let radius = rng.gen_range(0.1..40.0);
                let got = tree.nearest_within(&q, radius);
                let want = linear_nearest_within(&pts, &q, radius);
                match (got, want) {
                    (None, None) => {}
                    (Some((_, gd)), Some((_, wd))) => {
                        assert!((gd - wd).abs() < 1e-12, "dist mismatch {gd} vs {wd}")
                    }
                    other => panic!("mismatch: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn within_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 300);
        let tree = KdTree::build(pts.iter().copied());
        for _ in 0..50 {
            let q = Point3::new(
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
            );
            let radius = rng.gen_range(0.5..30.0);
            let mut got: Vec<i64> = tree.within(&q, radius).into_iter().map(|(id, _)| id).collect();
            let mut want: Vec<i64> = pts
                .iter()
                .filter(|(p, _)| p.dist(&q) <= radius)
                .map(|(_, id)| *id)
                .collect();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn forest_matches_linear_scan_across_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut index = SpatialIndex::new();
        let mut all: Vec<(Point3, i64)> = Vec::new();
        for batch in 0..40 {
            let pts = random_points(&mut rng, 1 + batch % 17);
            let pts: Vec<(Point3, i64)> =
                pts.into_iter().map(|(p, i)| (p, i + 1000 * batch as i64)).collect();
            index.extend(pts.iter().copied());
            all.extend(pts);
            for _ in 0..10 {
                let q = Point3::new(
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(-60.0..60.0),
                );
                let radius = rng.gen_range(0.1..45.0);
                let got = index.nearest_within(&q, radius);
                let want = linear_nearest_within(&all, &q, radius);
                match (got, want) {
                    (None, None) => {}
                    (Some((_, gd)), Some((_, wd))) => assert!((gd - wd).abs() < 1e-12),
                    other => panic!("mismatch: {other:?}"),
                }
            }
        }
        assert_eq!(index.len(), all.len());
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = SpatialIndex::new();
        assert_eq!(index.nearest_within(&Point3::ZERO, 10.0), None);
    }
}
