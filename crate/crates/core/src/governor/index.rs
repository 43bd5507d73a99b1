//! Exact nearest-neighbour search over stored points under a per-dimension
//! weighted Euclidean metric. Ties resolve to the lowest stored index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::registry::Registry;

use super::{Point, DIM};

pub trait NeighborIndex: Send + Sync {
    fn name(&self) -> &'static str;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// `(index, squared weighted distance)` of the closest point.
    fn nearest(&self, q: &Point, weights: &Point) -> Option<(usize, f64)>;
    /// Up to `k` closest points ordered by distance, then index.
    fn k_nearest(&self, q: &Point, weights: &Point, k: usize) -> Vec<(usize, f64)>;
}

#[inline]
pub fn weighted_dist2(a: &Point, b: &Point, w: &Point) -> f64 {
    let mut s = 0.0;
    for d in 0..DIM {
        let e = a[d] - b[d];
        s += w[d] * e * e;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` best candidates.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Whether a region at squared distance `d2` may still hold a better point.
    fn admits(&self, d2: f64) -> bool {
        self.heap.len() < self.k || d2 <= self.heap.peek().map_or(f64::INFINITY, |w| w.d2)
    }

    fn into_sorted(self) -> Vec<(usize, f64)> {
        self.heap.into_sorted_vec().into_iter().map(|c| (c.idx, c.d2)).collect()
    }
}

pub struct LinearScan {
    points: Vec<Point>,
}

impl LinearScan {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }
}

impl NeighborIndex for LinearScan {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn nearest(&self, q: &Point, w: &Point) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d2 = weighted_dist2(q, p, w);
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best
    }

    fn k_nearest(&self, q: &Point, w: &Point, k: usize) -> Vec<(usize, f64)> {
        let mut best = Best::new(k);
        for (i, p) in self.points.iter().enumerate() {
            best.offer(Candidate { d2: weighted_dist2(q, p, w), idx: i });
        }
        best.into_sorted()
    }
}

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

pub struct KdTree {
    points: Vec<Point>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: Vec<Point>) -> Self {
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][dim].total_cmp(&pts[b][dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Split { dim, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let mut best = (0, -1.0);
        for d in 0..DIM {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                lo = lo.min(self.points[i][d]);
                hi = hi.max(self.points[i][d]);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        best.0
    }

    fn search(&self, node: usize, q: &Point, w: &Point, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    best.offer(Candidate { d2: weighted_dist2(q, &self.points[i], w), idx: i });
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, w, best);
                if best.admits(w[dim] * diff * diff) {
                    self.search(far, q, w, best);
                }
            }
        }
    }
}

impl NeighborIndex for KdTree {
    fn name(&self) -> &'static str {
        "kdtree"
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn nearest(&self, q: &Point, w: &Point) -> Option<(usize, f64)> {
        self.k_nearest(q, w, 1).into_iter().next()
    }

    fn k_nearest(&self, q: &Point, w: &Point, k: usize) -> Vec<(usize, f64)> {
        if self.points.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut best = Best::new(k);
        self.search(0, q, w, &mut best);
        best.into_sorted()
    }
}

/// `kdtree` and `linear` backends over normalized points.
pub fn index_registry() -> Registry<dyn NeighborIndex, Vec<Point>> {
    let mut r: Registry<dyn NeighborIndex, Vec<Point>> = Registry::new("neighbour index");
    r.register("kdtree", |pts| Ok(Box::new(KdTree::new(pts.clone()))));
    r.register("linear", |pts| Ok(Box::new(LinearScan::new(pts.clone()))));
    r
}
