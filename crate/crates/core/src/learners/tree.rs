//! Depth-capped regression trees (squared-error splits), the building block
//! of the forest and of stump boosting. 0/1 targets make leaf means class
//! frequencies.

use alloc::vec::Vec;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    /// Candidate features per node; `None` means all.
    pub features_per_node: Option<usize>,
}

struct Split {
    feature: usize,
    threshold: f64,
    /// Number of slots going left.
    left: usize,
    gain: f64,
}

/// Growth state: `sorted[f * n..(f + 1) * n]` lists sample slots ordered by
/// feature `f`; every node owns the same `start..end` range in each list.
struct Grow<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [f64],
    rows: &'a [usize],
    n: usize,
    sorted: Vec<u32>,
    goes_left: Vec<bool>,
    buf: Vec<u32>,
    params: &'a TreeParams,
}

impl Grow<'_> {
    fn x(&self, slot: u32, f: usize) -> f64 {
        self.xs[self.rows[slot as usize]][f]
    }

    fn y(&self, slot: u32) -> f64 {
        self.ys[self.rows[slot as usize]]
    }

    fn slice(&self, f: usize, start: usize, end: usize) -> &[u32] {
        &self.sorted[f * self.n + start..f * self.n + end]
    }
}

impl Tree {
    /// Fits on `rows` (indices into `xs`/`ys`, repeats allowed).
    pub(crate) fn fit(xs: &[&[f64]], ys: &[f64], rows: &[usize], params: &TreeParams, rng: &mut ChaCha8Rng) -> Self {
        let n = rows.len();
        let d = xs[rows[0]].len();
        let mut sorted = Vec::with_capacity(d * n);
        for f in 0..d {
            let from = sorted.len();
            sorted.extend(0..n as u32);
            sorted[from..].sort_unstable_by(|&a: &u32, &b: &u32| {
                xs[rows[a as usize]][f].total_cmp(&xs[rows[b as usize]][f]).then(a.cmp(&b))
            });
        }
        let mut g = Grow { xs, ys, rows, n, sorted, goes_left: alloc::vec![false; n], buf: alloc::vec![0; n], params };
        let mut tree = Tree { nodes: Vec::new() };
        tree.grow(&mut g, 0, n, 0, d, rng);
        tree
    }

    fn grow(&mut self, g: &mut Grow<'_>, start: usize, end: usize, depth: usize, d: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let count = end - start;
        let mean = g.slice(0, start, end).iter().map(|&s| g.y(s)).sum::<f64>() / count as f64;
        self.nodes.push(Node::Leaf(mean));
        if depth >= g.params.max_depth || count < 2 {
            return id;
        }
        let Some(split) = best_split(g, start, end, d, rng) else {
            return id;
        };
        let fs = split.feature * g.n;
        for i in start..end {
            let slot = g.sorted[fs + i];
            g.goes_left[slot as usize] = i < start + split.left;
        }
        for f in 0..d {
            let base = f * g.n;
            let (mut l, mut r) = (start, start + split.left);
            for i in start..end {
                let slot = g.sorted[base + i];
                if g.goes_left[slot as usize] {
                    g.buf[l] = slot;
                    l += 1;
                } else {
                    g.buf[r] = slot;
                    r += 1;
                }
            }
            g.sorted[base + start..base + end].copy_from_slice(&g.buf[start..end]);
        }
        let mid = start + split.left;
        let left = self.grow(g, start, mid, depth + 1, d, rng);
        let right = self.grow(g, mid, end, depth + 1, d, rng);
        self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }

    pub(crate) fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    /// Rewrites leaf values, e.g. with Newton steps after the structure is fixed.
    pub(crate) fn map_leaves(&mut self, mut f: impl FnMut(usize) -> f64) {
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if let Node::Leaf(v) = n {
                *v = f(i);
            }
        }
    }

    /// Id of the leaf reached by `x`.
    pub(crate) fn leaf_of(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(_) => return at,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub(crate) fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn best_split(g: &Grow<'_>, start: usize, end: usize, d: usize, rng: &mut ChaCha8Rng) -> Option<Split> {
    let features: Vec<usize> = match g.params.features_per_node {
        Some(f) if f < d => index::sample(rng, d, f.max(1)).into_vec(),
        _ => (0..d).collect(),
    };
    let n = (end - start) as f64;
    let total: f64 = g.slice(0, start, end).iter().map(|&s| g.y(s)).sum();
    let base = total * total / n;
    let mut best: Option<Split> = None;
    for f in features {
        let order = g.slice(f, start, end);
        let mut left_sum = 0.0;
        for i in 1..order.len() {
            left_sum += g.y(order[i - 1]);
            let (lo, hi) = (g.x(order[i - 1], f), g.x(order[i], f));
            if lo >= hi {
                continue;
            }
            let nl = i as f64;
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl + right_sum * right_sum / (n - nl) - base;
            if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Split { feature: f, threshold: 0.5 * (lo + hi), left: i, gain });
            }
        }
    }
    best
}
