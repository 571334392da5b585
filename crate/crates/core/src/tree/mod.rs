//! Gradient trees: relabel each node with pseudo-outcomes, run a CART split
//! on them, recurse. Structure is grown on one half of the tree's subsample
//! and leaves are populated with the other half.

mod split;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GrfError, Result};
use crate::moments::MomentModel;

pub use split::{find_best_split, min_child_size, select_split_variables, Split, TIE_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub min_node_size: usize,
    /// ω: each child keeps at least this fraction of its parent.
    pub balance_fraction: f64,
    /// Poisson mean for the number of candidate features per node.
    /// `None` resolves to `min(⌈√p⌉ + 1, p)`.
    pub mtry_rate: Option<f64>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            min_node_size: 5,
            balance_fraction: 0.05,
            mtry_rate: None,
        }
    }
}

impl SplitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_node_size < 1 {
            return Err(GrfError::InvalidOptions(
                "min_node_size must be at least 1".into(),
            ));
        }
        if !(self.balance_fraction > 0.0 && self.balance_fraction <= 0.5) {
            return Err(GrfError::InvalidOptions(
                "balance_fraction must lie in (0, 0.5]".into(),
            ));
        }
        if let Some(m) = self.mtry_rate {
            if !(m > 0.0 && m.is_finite()) {
                return Err(GrfError::InvalidOptions(
                    "mtry_rate must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn resolved_mtry_rate(&self, p: usize) -> f64 {
        self.mtry_rate
            .unwrap_or_else(|| ((p as f64).sqrt().ceil() + 1.0).min(p as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Honest leaf; holds only estimation-half (J2) sample indices, possibly none.
    Leaf { samples: Vec<usize> },
}

/// A grown tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Index of the leaf that `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        self.descend(|j| x[j])
    }

    /// Index of the leaf that training sample `i` falls into.
    pub fn leaf_index_of_sample(&self, data: &Dataset, i: usize) -> usize {
        self.descend(|j| data.feature(i, j))
    }

    #[inline]
    fn descend(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if value(*feature) <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
                TreeNode::Leaf { .. } => return idx,
            }
        }
    }

    /// Samples stored in leaf `idx`; empty for split nodes.
    pub fn leaf_samples(&self, idx: usize) -> &[usize] {
        match &self.nodes[idx] {
            TreeNode::Leaf { samples } => samples,
            TreeNode::Split { .. } => &[],
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    /// For every split node, the number of `samples` routed to it and to
    /// each of its children: `(parent, left, right)`.
    pub fn split_counts(&self, data: &Dataset, samples: &[usize]) -> Vec<(usize, usize, usize)> {
        let mut visits = vec![0usize; self.nodes.len()];
        for &i in samples {
            let mut idx = 0;
            loop {
                visits[idx] += 1;
                match &self.nodes[idx] {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        idx = if data.feature(i, *feature) <= *threshold {
                            *left
                        } else {
                            *right
                        };
                    }
                    TreeNode::Leaf { .. } => break,
                }
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(idx, node)| match node {
                TreeNode::Split { left, right, .. } => {
                    Some((visits[idx], visits[*left], visits[*right]))
                }
                TreeNode::Leaf { .. } => None,
            })
            .collect()
    }

    pub(crate) fn validate(&self, n: usize, p: usize) -> Result<()> {
        let bad = |msg: &str| Err(GrfError::InvalidData(format!("corrupt tree: {msg}")));
        if self.nodes.is_empty() {
            return bad("no nodes");
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            match node {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= p || !threshold.is_finite() {
                        return bad("invalid split");
                    }
                    if *left <= idx
                        || *right <= idx
                        || *left >= self.nodes.len()
                        || *right >= self.nodes.len()
                    {
                        return bad("child index out of order");
                    }
                }
                TreeNode::Leaf { samples } => {
                    if samples.iter().any(|&i| i >= n) {
                        return bad("leaf sample out of range");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Grow one honest gradient tree.
///
/// Structure is chosen on `j1` alone (relabel, then CART on the
/// pseudo-outcomes of the candidate features drawn for each node); `j2` is
/// then routed down the finished tree to fill the leaves. Nodes whose
/// estimating equation is degenerate, or that are too small to split,
/// become leaves.
pub fn grow_tree<R: Rng + ?Sized>(
    data: &Dataset,
    j1: &[usize],
    j2: &[usize],
    model: &MomentModel,
    opts: &SplitOptions,
    rng: &mut R,
) -> Result<Tree> {
    opts.validate()?;
    let p = data.p();
    let mtry = opts.resolved_mtry_rate(p);
    let mut nodes = vec![TreeNode::Leaf {
        samples: Vec::new(),
    }];
    let mut queue = VecDeque::from([(0usize, j1.to_vec())]);

    while let Some((idx, members)) = queue.pop_front() {
        if members.len() < 2 * opts.min_node_size {
            continue;
        }
        let rho = match model.pseudo_outcomes(data, &members) {
            Ok(rho) => rho,
            Err(GrfError::DegenerateIdentification { .. }) => continue,
            Err(e) => return Err(e),
        };
        let features = select_split_variables(p, mtry, rng);
        let Some(split) = find_best_split(&rho, data, &features, &members, opts) else {
            continue;
        };
        let (left_members, right_members): (Vec<usize>, Vec<usize>) = members
            .iter()
            .partition(|&&i| data.feature(i, split.feature) <= split.threshold);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(TreeNode::Leaf {
            samples: Vec::new(),
        });
        nodes.push(TreeNode::Leaf {
            samples: Vec::new(),
        });
        nodes[idx] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        queue.push_back((left, left_members));
        queue.push_back((right, right_members));
    }

    let mut tree = Tree { nodes };
    let mut sorted_j2 = j2.to_vec();
    sorted_j2.sort_unstable();
    for i in sorted_j2 {
        let leaf = tree.leaf_index_of_sample(data, i);
        if let TreeNode::Leaf { samples } = &mut tree.nodes[leaf] {
            samples.push(i);
        }
    }
    Ok(tree)
}
