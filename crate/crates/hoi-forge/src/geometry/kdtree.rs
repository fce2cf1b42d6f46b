//! Static 3-D kd-tree for nearest-neighbor queries.
//!
//! Median splits over the longest-extent axis; the distance tie rule
//! (lowest index wins) matches the exhaustive scan exactly so the two can
//! be compared bit-for-bit in tests.

use super::Vec3;

struct Node {
    /// Index into the original point array.
    point: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

pub struct KdTree {
    points: Vec<Vec3>,
    root: Option<Box<Node>>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut order);
        KdTree { points: points.to_vec(), root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(points: &[Vec3], order: &mut [usize]) -> Option<Box<Node>> {
        if order.is_empty() {
            return None;
        }
        // Split along the widest axis of this subset.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = order[mid];
        let (left, rest) = order.split_at_mut(mid);
        let right = &mut rest[1..];
        Some(Box::new(Node {
            point,
            axis,
            left: Self::build_node(points, left),
            right: Self::build_node(points, right),
        }))
    }

    /// Closest point to `query`: `(index, distance)`, ties to lowest index.
    pub fn nearest(&self, query: Vec3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest on an empty kd-tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root.as_deref(), query, &mut best);
        (best.0, best.1.sqrt())
    }

    fn consider(&self, idx: usize, query: Vec3, best: &mut (usize, f64)) {
        let p = self.points[idx];
        let d2 = (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
    }

    fn search(&self, node: Option<&Node>, query: Vec3, best: &mut (usize, f64)) {
        let Some(node) = node else { return };
        self.consider(node.point, query, best);
        let delta = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search(near, query, best);
        // The far side can still hold an equal-distance lower index, so
        // descend on <= rather than <.
        if delta * delta <= best.1 {
            self.search(far, query, best);
        }
    }

    /// The `k` nearest points as `(index, distance)`, ascending by
    /// distance with index tie-breaking.
    pub fn k_nearest(&self, query: Vec3, k: usize) -> Vec<(usize, f64)> {
        assert!(k <= self.points.len(), "k exceeds point count");
        // Bounded max-heap emulated with a sorted vec: k is small (~8)
        // everywhere this is used.
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search_k(self.root.as_deref(), query, k, &mut heap);
        heap.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn search_k(&self, node: Option<&Node>, query: Vec3, k: usize, heap: &mut Vec<(f64, usize)>) {
        let Some(node) = node else { return };
        let p = self.points[node.point];
        let d2 = (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2);
        let entry = (d2, node.point);
        let pos = heap.partition_point(|e| *e < entry);
        heap.insert(pos, entry);
        if heap.len() > k {
            heap.pop();
        }
        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search_k(near, query, k, heap);
        let worst = if heap.len() < k { f64::INFINITY } else { heap[heap.len() - 1].0 };
        if delta * delta <= worst {
            self.search_k(far, query, k, heap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::nearest_point_brute;
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect()
    }

    #[test]
    fn agrees_with_brute_force_across_sizes() {
        for (seed, n) in [(1u64, 1usize), (2, 2), (3, 17), (4, 256), (5, 999)] {
            let pts = cloud(seed, n);
            let tree = KdTree::build(&pts);
            let mut rng = rng_from_seed(seed + 100);
            for _ in 0..50 {
                let q = [
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                ];
                let (bi, bd) = nearest_point_brute(&pts, q).unwrap();
                let (ti, td) = tree.nearest(q);
                assert_eq!(bi, ti, "index mismatch on n={n}");
                assert!((bd - td).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let pts = cloud(9, 300);
        let tree = KdTree::build(&pts);
        let mut rng = rng_from_seed(10);
        for _ in 0..30 {
            let q = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let got = tree.k_nearest(q, 8);
            let mut all: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    (d2, i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, w) in got.iter().zip(all.iter().take(8)) {
                assert_eq!(g.0, w.1);
            }
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![[1.0, 1.0, 1.0]; 5];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest([1.0, 1.0, 1.2]).0, 0);
    }
}
