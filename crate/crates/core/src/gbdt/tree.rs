//! Flat-array decision trees and leaf-wise growth.

use super::binning::BinMapper;
use super::split::{find_best_split, Histogram, SplitConstraints, SplitInfo};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf { value: f64 },
}

/// A regression tree stored as a flat node array rooted at index 0.
///
/// Children always sit at higher indices than their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn constant(value: f64) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Validates structure: in-range children placed after their parent,
    /// every non-root node referenced exactly once, features below `n_features`.
    pub fn from_nodes(nodes: Vec<Node>, n_features: usize) -> Result<Self, String> {
        if nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let mut referenced = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if let Node::Split {
                feature,
                left,
                right,
                threshold,
            } = *node
            {
                if feature as usize >= n_features {
                    return Err(format!("node {i}: feature {feature} out of range"));
                }
                if !threshold.is_finite() {
                    return Err(format!("node {i}: non-finite threshold"));
                }
                for child in [left as usize, right as usize] {
                    if child <= i || child >= nodes.len() {
                        return Err(format!("node {i}: bad child index {child}"));
                    }
                    if std::mem::replace(&mut referenced[child], true) {
                        return Err(format!("node {child} has two parents"));
                    }
                }
            }
        }
        if let Some(orphan) = referenced.iter().skip(1).position(|r| !r) {
            return Err(format!("node {} unreachable", orphan + 1));
        }
        Ok(DecisionTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    #[inline]
    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub(crate) fn scale_leaves(&mut self, factor: f64) {
        for node in &mut self.nodes {
            if let Node::Leaf { value } = node {
                *value *= factor;
            }
        }
    }

    pub(crate) fn leaf_value(&self, node: u32) -> f64 {
        match self.nodes[node as usize] {
            Node::Leaf { value } => value,
            Node::Split { .. } => panic!("node {node} is not a leaf"),
        }
    }
}

/// Training-time view of the binned data shared by every tree of a model.
pub(crate) struct GrowContext<'a> {
    pub binned: &'a [u8],
    pub n_samples: usize,
    pub mapper: &'a BinMapper,
    pub constraints: SplitConstraints,
    pub max_leaves: usize,
    pub learning_rate: f64,
}

struct OpenLeaf {
    node: u32,
    indices: Vec<u32>,
    grad: f64,
    hess: f64,
    best: Option<SplitInfo>,
}

impl GrowContext<'_> {
    fn open_leaf(&self, node: u32, indices: Vec<u32>, grad: &[f64], hess: &[f64]) -> OpenLeaf {
        let (g, h) = indices.iter().fold((0.0, 0.0), |(g, h), &i| {
            (g + grad[i as usize], h + hess[i as usize])
        });
        let best = if indices.len() >= 2 * self.constraints.min_samples_per_leaf as usize {
            let hist = Histogram::build(self.binned, self.n_samples, self.mapper, grad, hess, &indices);
            find_best_split(&hist, (g, h, indices.len() as u32), self.mapper, &self.constraints)
        } else {
            None
        };
        OpenLeaf {
            node,
            indices,
            grad: g,
            hess: h,
            best,
        }
    }

    /// Grows one tree best-first until `max_leaves` or no split has positive
    /// gain. Leaf values are `-lr·G/(H+λ)`. Returns the tree and, for every
    /// training sample, the index of the leaf node it landed in.
    pub fn grow(&self, grad: &[f64], hess: &[f64]) -> (DecisionTree, Vec<u32>) {
        let all: Vec<u32> = (0..self.n_samples as u32).collect();
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut open = vec![self.open_leaf(0, all, grad, hess)];
        let mut done: Vec<OpenLeaf> = Vec::new();

        while open.len() + done.len() < self.max_leaves {
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.best.map(|b| (i, b.gain)))
                .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                    Some((_, bg)) if bg >= g => acc,
                    _ => Some((i, g)),
                });
            let Some((pos, _)) = pick else { break };
            let leaf = open.remove(pos);
            let split = leaf.best.expect("picked leaf has a split");
            let column =
                &self.binned[split.feature * self.n_samples..(split.feature + 1) * self.n_samples];
            let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = leaf
                .indices
                .iter()
                .partition(|&&i| column[i as usize] <= split.bin);
            let left = nodes.len() as u32;
            let right = left + 1;
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[leaf.node as usize] = Node::Split {
                feature: split.feature as u16,
                threshold: split.threshold,
                left,
                right,
            };
            for child in [
                self.open_leaf(left, left_idx, grad, hess),
                self.open_leaf(right, right_idx, grad, hess),
            ] {
                if child.best.is_some() {
                    open.push(child);
                } else {
                    done.push(child);
                }
            }
        }

        let mut leaf_of = vec![0u32; self.n_samples];
        for leaf in open.iter().chain(&done) {
            let value = -self.learning_rate * leaf.grad / (leaf.hess + self.constraints.l2_lambda);
            nodes[leaf.node as usize] = Node::Leaf { value };
            for &i in &leaf.indices {
                leaf_of[i as usize] = leaf.node;
            }
        }
        (DecisionTree { nodes }, leaf_of)
    }
}
