//! CART classification trees grown on bootstrap resamples.
//!
//! Splits are axis-aligned thresholds chosen by Gini impurity reduction;
//! leaves keep their raw class counts so imputations can be drawn from
//! the leaf distribution.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("empty training data")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("class code {0} is outside the declared classes")]
    InvalidOutcome(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub max_depth: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            n_trees: 10,
            min_leaf: 5,
            max_depth: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        counts: Vec<u32>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Tree stored as a node arena, root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTree {
    pub nodes: Vec<Node>,
}

fn gini_sum(counts: &[u32], total: u32) -> f64 {
    // total * Gini impurity
    if total == 0 {
        return 0.0;
    }
    let t = f64::from(total);
    t - counts.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>() / t
}

fn class_counts(y: &[usize], rows: &[usize], n_classes: usize) -> Vec<u32> {
    let mut counts = vec![0u32; n_classes];
    for &r in rows {
        counts[y[r]] += 1;
    }
    counts
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [usize],
    n_classes: usize,
    params: TreeParams,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn best_split(&self, rows: &[usize], counts: &[u32]) -> Option<(usize, f64, f64)> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf;
        if n < 2 * min_leaf {
            return None;
        }
        let parent = gini_sum(counts, n as u32);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in 0..self.x.ncols() {
            sorted.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]));
            let mut left = vec![0u32; self.n_classes];
            for i in 0..n - 1 {
                left[self.y[sorted[i]]] += 1;
                let nl = i + 1;
                let nr = n - nl;
                let here = self.x[(sorted[i], f)];
                let next = self.x[(sorted[i + 1], f)];
                if here == next || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right: Vec<u32> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
                let gain = parent - gini_sum(&left, nl as u32) - gini_sum(&right, nr as u32);
                if gain > 1e-12 && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((f, 0.5 * (here + next), gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let counts = class_counts(self.y, &rows, self.n_classes);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: counts.clone() });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth {
            return id;
        }
        let Some((feature, threshold, _)) = self.best_split(&rows, &counts) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl ClassificationTree {
    /// Grows one tree on the given training rows (duplicates allowed).
    pub fn fit(
        x: &DMatrix<f64>,
        y: &[usize],
        n_classes: usize,
        rows: &[usize],
        params: TreeParams,
    ) -> Result<Self, TreeError> {
        if rows.is_empty() {
            return Err(TreeError::Empty);
        }
        let mut g = Grower {
            x,
            y,
            n_classes,
            params,
            nodes: Vec::new(),
        };
        g.grow(rows.to_vec(), 0);
        Ok(ClassificationTree { nodes: g.nodes })
    }

    /// Class counts of the leaf reached by `row`.
    pub fn leaf_counts(&self, row: &[f64]) -> &[u32] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub trees: Vec<ClassificationTree>,
    /// Bootstrap seed of each tree.
    pub seeds: Vec<u64>,
    pub params: TreeParams,
    pub n_classes: usize,
}

/// Bagged CART: each tree sees a bootstrap resample of the rows.
pub fn fit_trees<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    params: TreeParams,
    rng: &mut R,
) -> Result<TreeEnsemble, TreeError> {
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(TreeError::InvalidParams("n_trees and min_leaf must be >= 1".into()));
    }
    if x.nrows() != y.len() {
        return Err(TreeError::DimensionMismatch(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    if y.is_empty() {
        return Err(TreeError::Empty);
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(TreeError::InvalidOutcome(bad));
    }
    let n = y.len();
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut tree_seeds = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let seed: u64 = rng.random();
        let mut boot: ChaCha8Rng = seeds::rng(seed);
        let rows: Vec<usize> = (0..n).map(|_| boot.random_range(0..n)).collect();
        trees.push(ClassificationTree::fit(x, y, n_classes, &rows, params)?);
        tree_seeds.push(seed);
    }
    Ok(TreeEnsemble {
        trees,
        seeds: tree_seeds,
        params,
        n_classes,
    })
}

/// Picks a tree uniformly, routes `row` to its leaf and draws a class
/// with probability proportional to the leaf counts.
pub fn draw_class<R: Rng + ?Sized>(ensemble: &TreeEnsemble, row: &[f64], rng: &mut R) -> usize {
    let tree = &ensemble.trees[rng.random_range(0..ensemble.trees.len())];
    let counts = tree.leaf_counts(row);
    let total: u32 = counts.iter().sum();
    let mut u = rng.random_range(0..total);
    for (k, &c) in counts.iter().enumerate() {
        if u < c {
            return k;
        }
        u -= c;
    }
    unreachable!("leaf counts sum to total")
}
