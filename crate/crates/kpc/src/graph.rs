//! Geometric graph functionals: K-NN graphs and minimum spanning trees.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{embed, Dataset, Embedding, MetricSpec};
use crate::error::{KpcError, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum GraphKind {
    Knn { k: usize, directed: bool },
    Mst,
}

/// Graph recipe. `stream` separates tie-breaking randomness of graphs sharing one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl GraphSpec {
    pub fn knn(k: usize, seed: u64) -> Self {
        GraphSpec { kind: GraphKind::Knn { k, directed: true }, seed, stream: 0 }
    }

    pub fn knn_undirected(k: usize, seed: u64) -> Self {
        GraphSpec { kind: GraphKind::Knn { k, directed: false }, seed, stream: 0 }
    }

    pub fn mst() -> Self {
        GraphSpec { kind: GraphKind::Mst, seed: 0, stream: 0 }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    /// Fewest points the graph can be built on.
    pub fn min_points(&self) -> usize {
        match self.kind {
            GraphKind::Knn { k, .. } => k + 1,
            GraphKind::Mst => 2,
        }
    }
}

/// Out-neighbor lists; undirected graphs store each edge in both lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeometricGraph {
    neighbors: Vec<Vec<usize>>,
    ties_broken: usize,
}

impl GeometricGraph {
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        for (i, nb) in neighbors.iter().enumerate() {
            if nb.is_empty() {
                return Err(KpcError::InvalidConfig(format!("node {i} has no neighbors")));
            }
            if nb.iter().any(|&j| j == i || j >= neighbors.len()) {
                return Err(KpcError::InvalidConfig(format!("node {i} has an invalid neighbor")));
            }
        }
        Ok(GeometricGraph { neighbors, ties_broken: 0 })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Number of nodes whose neighbor set needed a random choice among equidistant points.
    pub fn ties_broken(&self) -> usize {
        self.ties_broken
    }

    pub fn edge_count_undirected(&self) -> usize {
        self.neighbors.iter().map(|v| v.len()).sum::<usize>() / 2
    }

    /// One line per node: `index degree neighbor...`.
    pub fn to_adjacency_text(&self) -> String {
        let mut s = String::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            s.push_str(&format!("{i} {}", nb.len()));
            for j in nb {
                s.push_str(&format!(" {j}"));
            }
            s.push('\n');
        }
        s
    }

    fn symmetrized(self) -> Self {
        let n = self.neighbors.len();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                out[i].push(j);
                out[j].push(i);
            }
        }
        for v in &mut out {
            v.sort_unstable();
            v.dedup();
        }
        GeometricGraph { neighbors: out, ties_broken: self.ties_broken }
    }
}

/// Build the graph described by `spec` on `cols` of `ds`.
pub fn build_graph(spec: &GraphSpec, ds: &Dataset, cols: &[usize], metric: &MetricSpec) -> Result<GeometricGraph> {
    match spec.kind {
        GraphKind::Knn { .. } => build_knn(spec, ds, cols, metric),
        GraphKind::Mst => build_mst(ds, cols, metric, spec.seed),
    }
}

pub fn build_knn(spec: &GraphSpec, ds: &Dataset, cols: &[usize], metric: &MetricSpec) -> Result<GeometricGraph> {
    let emb = embed(metric, ds, cols)?;
    knn_embedded(spec, &emb)
}

/// Dimension above which the k-d tree is skipped in favor of a linear scan.
const KD_MAX_DIM: usize = 16;
const KD_MIN_N: usize = 64;

/// K-NN graph on embedded points, using a k-d tree when it pays off.
pub fn knn_embedded(spec: &GraphSpec, emb: &Embedding) -> Result<GeometricGraph> {
    let (k, directed) = match spec.kind {
        GraphKind::Knn { k, directed } => (k, directed),
        GraphKind::Mst => return Err(KpcError::InvalidConfig("knn_embedded called with an MST spec".into())),
    };
    let n = emb.n();
    check_k(k, n)?;
    let groups = duplicate_groups(emb);
    let tree = (n >= KD_MIN_N && emb.dim <= KD_MAX_DIM).then(|| KdTree::build(emb));
    let mut neighbors = Vec::with_capacity(n);
    let mut ties = 0;
    for i in 0..n {
        let g = &groups.members[groups.of[i]];
        let (nb, tied) = if g.len() > k {
            // at least k exact duplicates: all k neighbors come from the group
            let others: Vec<(f64, usize)> = g.iter().filter(|&&j| j != i).map(|&j| (0.0, j)).collect();
            choose_k(others, k, spec, i)
        } else if let Some(t) = &tree {
            let dk = t.kth_sq_dist(i, k);
            choose_k(t.within(i, dk), k, spec, i)
        } else {
            let cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (emb.sq_dist(i, j), j)).collect();
            choose_k(cand, k, spec, i)
        };
        ties += tied as usize;
        neighbors.push(nb);
    }
    let g = GeometricGraph { neighbors, ties_broken: ties };
    Ok(if directed { g } else { g.symmetrized() })
}

/// K-NN graph from an arbitrary distance function, by exhaustive scan.
pub fn knn_from_fn<F>(spec: &GraphSpec, n: usize, dist: F) -> Result<GeometricGraph>
where
    F: Fn(usize, usize) -> f64,
{
    let (k, directed) = match spec.kind {
        GraphKind::Knn { k, directed } => (k, directed),
        GraphKind::Mst => return Err(KpcError::InvalidConfig("knn_from_fn called with an MST spec".into())),
    };
    check_k(k, n)?;
    let mut neighbors = Vec::with_capacity(n);
    let mut ties = 0;
    for i in 0..n {
        let cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
        let (nb, tied) = choose_k(cand, k, spec, i);
        ties += tied as usize;
        neighbors.push(nb);
    }
    let g = GeometricGraph { neighbors, ties_broken: ties };
    Ok(if directed { g } else { g.symmetrized() })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(KpcError::InvalidConfig("K must be at least 1".into()));
    }
    if n < k + 1 {
        return Err(KpcError::TooFewPoints { need: k + 1, have: n });
    }
    Ok(())
}

/// Keep every candidate strictly closer than the K-th distance and fill the
/// remaining slots uniformly from those exactly at it.
/// `cand` must contain every point within the K-th distance.
fn choose_k(mut cand: Vec<(f64, usize)>, k: usize, spec: &GraphSpec, node: usize) -> (Vec<usize>, bool) {
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let dk = cand[k - 1].0;
    let strict = cand.partition_point(|c| c.0 < dk);
    let end = cand.partition_point(|c| c.0 <= dk);
    let need = k - strict;
    let pool = end - strict;
    let mut out: Vec<usize> = cand[..strict].iter().map(|c| c.1).collect();
    let tied = pool > need;
    if tied {
        let mut rng = stream(spec.seed, &[tag::GRAPH, spec.stream, node as u64]);
        for p in sample(&mut rng, pool, need).into_iter() {
            out.push(cand[strict + p].1);
        }
    } else {
        out.extend(cand[strict..end].iter().map(|c| c.1));
    }
    out.sort_unstable();
    (out, tied)
}

struct Groups {
    of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

fn duplicate_groups(emb: &Embedding) -> Groups {
    let n = emb.n();
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        for (x, y) in emb.row(*a).iter().zip(emb.row(*b)) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    };
    order.sort_by(cmp);
    let mut of = vec![0; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if pos == 0 || cmp(&order[pos - 1], &i) != Ordering::Equal {
            members.push(Vec::new());
        }
        of[i] = members.len() - 1;
        members.last_mut().unwrap().push(i);
    }
    for m in &mut members {
        m.sort_unstable();
    }
    Groups { of, members }
}

const LEAF: usize = 12;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

struct KdTree<'a> {
    emb: &'a Embedding,
    idx: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> KdTree<'a> {
    fn build(emb: &'a Embedding) -> Self {
        let mut t = KdTree { emb, idx: (0..emb.n()).collect(), nodes: Vec::new() };
        let n = t.idx.len();
        t.build_rec(0, n);
        t
    }

    fn build_rec(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        if dim.is_none() {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let dim = dim.unwrap();
        let mid = (start + end) / 2;
        let emb = self.emb;
        self.idx[start..end]
            .select_nth_unstable_by(mid - start, |a, b| emb.row(*a)[dim].total_cmp(&emb.row(*b)[dim]));
        let value = emb.row(self.idx[mid])[dim];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_rec(start, mid);
        let right = self.build_rec(mid, end);
        self.nodes[id] = KdNode::Split { dim, value, left, right };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> Option<usize> {
        let mut best = None;
        let mut best_spread = 0.0;
        for d in 0..self.emb.dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in &self.idx[start..end] {
                let v = self.emb.row(i)[d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best = Some(d);
            }
        }
        best
    }

    /// Squared distance from `q` to its k-th nearest other point.
    fn kth_sq_dist(&self, q: usize, k: usize) -> f64 {
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, q, k, &mut heap);
        heap.peek().map(|h| h.0).unwrap_or(f64::INFINITY)
    }

    fn knn_rec(&self, node: usize, q: usize, k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &j in &self.idx[start..end] {
                    if j == q {
                        continue;
                    }
                    let d = self.emb.sq_dist(q, j);
                    if heap.len() < k {
                        heap.push(HeapItem(d, j));
                    } else if d < heap.peek().unwrap().0 {
                        heap.pop();
                        heap.push(HeapItem(d, j));
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = self.emb.row(q)[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// Every other point within squared radius `r2`, with its squared distance.
    fn within(&self, q: usize, r2: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        self.within_rec(0, q, r2, &mut out);
        out
    }

    fn within_rec(&self, node: usize, q: usize, r2: f64, out: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &j in &self.idx[start..end] {
                    if j != q {
                        let d = self.emb.sq_dist(q, j);
                        if d <= r2 {
                            out.push((d, j));
                        }
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = self.emb.row(q)[dim] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.within_rec(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.within_rec(right, q, r2, out);
                }
            }
        }
    }
}

/// Minimum spanning tree on the complete distance graph.
///
/// Edges are compared by (weight, lower index, higher index), which makes the
/// tree unique. `seed` is accepted for interface symmetry; no randomness is used.
/// Ties are broken by the (weight, lower index, higher index) order, so `seed` has no effect.
pub fn build_mst(ds: &Dataset, cols: &[usize], metric: &MetricSpec, _seed: u64) -> Result<GeometricGraph> {
    let emb = embed(metric, ds, cols)?;
    mst_from_fn(emb.n(), |i, j| emb.sq_dist(i, j))
}

/// Prim's algorithm with an O(n) key array; `dist` only needs to be monotone in the metric.
pub fn mst_from_fn<F>(n: usize, dist: F) -> Result<GeometricGraph>
where
    F: Fn(usize, usize) -> f64,
{
    if n < 2 {
        return Err(KpcError::TooFewPoints { need: 2, have: n });
    }
    let key_lt = |a: (f64, usize, usize), b: (f64, usize, usize)| -> bool {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)) == Ordering::Less
    };
    let mut in_tree = vec![false; n];
    let mut best: Vec<(f64, usize, usize)> = vec![(f64::INFINITY, usize::MAX, usize::MAX); n];
    let mut parent = vec![usize::MAX; n];
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for v in 0..n {
            if !in_tree[v] {
                let cand = (dist(cur, v), cur.min(v), cur.max(v));
                if key_lt(cand, best[v]) {
                    best[v] = cand;
                    parent[v] = cur;
                }
            }
        }
        let mut next = usize::MAX;
        for v in 0..n {
            if !in_tree[v] && (next == usize::MAX || key_lt(best[v], best[next])) {
                next = v;
            }
        }
        in_tree[next] = true;
        let p = parent[next];
        neighbors[p].push(next);
        neighbors[next].push(p);
        cur = next;
    }
    for v in &mut neighbors {
        v.sort_unstable();
    }
    Ok(GeometricGraph { neighbors, ties_broken: 0 })
}
