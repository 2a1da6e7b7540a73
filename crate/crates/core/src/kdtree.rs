//! Static kd-tree for nearest-neighbor and radius queries in scaled input
//! space. Ties on distance always resolve to the lower point index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct KdTree {
    dim: usize,
    coords: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    i: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.total_cmp(&o.d2).then(self.i.cmp(&o.i))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl KdTree {
    /// Builds over `coords`, a row-major array of points with `dim` columns.
    pub fn new(dim: usize, coords: Vec<f64>) -> Self {
        let n = coords.len().checked_div(dim).unwrap_or(0);
        let mut t = KdTree {
            dim,
            coords,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            t.build(0, n);
        }
        t
    }

    /// Point indices in leaf order: spatially close points sit close together.
    pub fn leaf_order(&self) -> &[usize] {
        &self.order
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn dist2(&self, i: usize, q: &[f64]) -> f64 {
        self.point(i)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // Split on the widest dimension.
        let mut best = (0, f64::NEG_INFINITY);
        for d in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &i| {
                    let v = self.coords[i * self.dim + d];
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let dim = best.0;
        if best.1 <= 0.0 {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let coords = &self.coords;
        let stride = self.dim;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coords[a * stride + dim]
                .total_cmp(&coords[b * stride + dim])
                .then(a.cmp(&b))
        });
        let value = self.coords[self.order[mid] * self.dim + dim];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points accepted by `keep`, sorted by (distance, index).
    /// Returns `(index, squared distance)` pairs.
    pub fn knn<F: Fn(usize) -> bool>(&self, q: &[f64], k: usize, keep: F) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_rec(0, q, k, &keep, &mut heap);
        }
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.i, c.d2)).collect()
    }

    fn knn_rec<F: Fn(usize) -> bool>(
        &self,
        node: usize,
        q: &[f64],
        k: usize,
        keep: &F,
        heap: &mut BinaryHeap<Cand>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if !keep(i) {
                        continue;
                    }
                    let c = Cand {
                        d2: self.dist2(i, q),
                        i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, keep, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_rec(far, q, k, keep, heap);
                }
            }
        }
    }

    /// Calls `visit(index, squared distance)` for every point within `r2`.
    pub fn within<F: FnMut(usize, f64)>(&self, q: &[f64], r2: f64, mut visit: F) {
        if !self.nodes.is_empty() {
            self.within_rec(0, q, r2, &mut visit);
        }
    }

    fn within_rec<F: FnMut(usize, f64)>(&self, node: usize, q: &[f64], r2: f64, visit: &mut F) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = self.dist2(i, q);
                    if d2 <= r2 {
                        visit(i, d2);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.within_rec(near, q, r2, visit);
                if diff * diff <= r2 {
                    self.within_rec(far, q, r2, visit);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(
        coords: &[f64],
        dim: usize,
        q: &[f64],
        k: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<(usize, f64)> {
        let n = coords.len() / dim;
        let mut all: Vec<(usize, f64)> = (0..n)
            .filter(|&i| keep(i))
            .map(|i| {
                let d2 = (0..dim).map(|d| (coords[i * dim + d] - q[d]).powi(2)).sum();
                (i, d2)
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force_with_ties_and_filters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for dim in 1..=4 {
            // Integer grid coordinates produce many exact ties.
            let n = 500;
            let coords: Vec<f64> = (0..n * dim)
                .map(|_| rng.random_range(0..6) as f64)
                .collect();
            let tree = KdTree::new(dim, coords.clone());
            for _ in 0..50 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..7.0)).collect();
                let k = rng.random_range(1..40);
                let cut = rng.random_range(0..n);
                assert_eq!(
                    tree.knn(&q, k, |i| i < cut),
                    brute(&coords, dim, &q, k, |i| i < cut)
                );
            }
        }
    }

    #[test]
    fn within_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let coords: Vec<f64> = (0..600).map(|_| rng.random::<f64>()).collect();
        let tree = KdTree::new(3, coords.clone());
        let q = [0.5, 0.5, 0.5];
        let mut got = Vec::new();
        tree.within(&q, 0.04, |i, _| got.push(i));
        got.sort();
        let want: Vec<usize> = brute(&coords, 3, &q, 200, |_| true)
            .into_iter()
            .filter(|(_, d2)| *d2 <= 0.04)
            .map(|(i, _)| i)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        assert_eq!(got, want);
    }
}
