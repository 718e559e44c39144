//! Axis-aligned binary trees shared by the forest and the boosted model.
//!
//! Each training row carries a pair `(a, b)` of additive statistics. For
//! classification `a = 1` and `b = label`; for boosting `a = gradient` and
//! `b = hessian`. A criterion turns summed pairs into a node score, a split
//! is worth `score(left) + score(right) - score(parent)`.

use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Criterion {
    /// Gini impurity; leaves hold the positive fraction. Any split of a
    /// mixed node is accepted.
    Gini,
    /// Second-order boosting objective with L2 leaf penalty. Splits need a
    /// strictly positive gain.
    Newton { lambda: f64 },
}

impl Criterion {
    fn score(self, a: f64, b: f64) -> f64 {
        match self {
            // Negated count-weighted Gini: (p^2 + q^2) / n - n with n = a, p = b.
            Criterion::Gini => (b * b + (a - b) * (a - b)) / a - a,
            Criterion::Newton { lambda } => a * a / (b + lambda),
        }
    }

    fn leaf(self, a: f64, b: f64) -> f64 {
        match self {
            Criterion::Gini => b / a,
            Criterion::Newton { lambda } => -a / (b + lambda),
        }
    }

    fn is_terminal(self, a: f64, b: f64) -> bool {
        match self {
            Criterion::Gini => b == 0.0 || b == a,
            Criterion::Newton { .. } => false,
        }
    }

    fn accepts(self, gain: f64) -> bool {
        match self {
            Criterion::Gini => true,
            Criterion::Newton { .. } => gain > 0.0,
        }
    }
}

pub(crate) struct Builder<'a> {
    pub x: &'a FeatureMatrix,
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub criterion: Criterion,
    pub max_depth: usize,
    /// Features tried per node; `None` tries all of them.
    pub max_features: Option<usize>,
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    pub fn build(&self, rows: Vec<usize>, rng: &mut Rng) -> Tree {
        let mut nodes = Vec::new();
        self.grow(rows, 0, rng, &mut nodes);
        Tree { nodes }
    }

    fn sums(&self, rows: &[usize]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(sa, sb), &i| (sa + self.a[i], sb + self.b[i]))
    }

    fn candidate_features(&self, rng: &mut Rng) -> Vec<usize> {
        let d = self.x.cols();
        match self.max_features {
            Some(m) if m < d => {
                let mut all: Vec<usize> = (0..d).collect();
                for i in 0..m {
                    let j = i + rng.below(d - i);
                    all.swap(i, j);
                }
                let mut picked = all[..m].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..d).collect(),
        }
    }

    fn best_split(&self, rows: &[usize], total: (f64, f64), features: &[usize]) -> Option<Best> {
        let parent = self.criterion.score(total.0, total.1);
        let mut best: Option<Best> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &f in features {
            order.clear();
            order.extend(rows.iter().map(|&i| (self.x.get(i, f), i)));
            order.sort_unstable_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
            let (mut la, mut lb) = (0.0, 0.0);
            for w in 0..order.len() - 1 {
                let i = order[w].1;
                la += self.a[i];
                lb += self.b[i];
                let (lo, hi) = (order[w].0, order[w + 1].0);
                if lo == hi {
                    continue;
                }
                let gain = self.criterion.score(la, lb)
                    + self.criterion.score(total.0 - la, total.1 - lb)
                    - parent;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(Best { gain, feature: f, threshold });
                }
            }
        }
        best.filter(|b| self.criterion.accepts(b.gain))
    }

    fn grow(&self, rows: Vec<usize>, depth: usize, rng: &mut Rng, nodes: &mut Vec<Node>) -> usize {
        let at = nodes.len();
        let (sa, sb) = self.sums(&rows);
        nodes.push(Node::Leaf { value: self.criterion.leaf(sa, sb) });
        if depth >= self.max_depth || rows.len() < 2 || self.criterion.is_terminal(sa, sb) {
            return at;
        }
        let features = self.candidate_features(rng);
        let Some(best) = self.best_split(&rows, (sa, sb), &features) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| self.x.get(i, best.feature) <= best.threshold);
        let left = self.grow(l, depth + 1, rng, nodes);
        let right = self.grow(r, depth + 1, rng, nodes);
        nodes[at] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        at
    }
}
