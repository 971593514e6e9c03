//! The trained ensemble, inference, and the `EMGB` container.
//!
//! Container layout, all little-endian:
//!
//! ```text
//! "EMGB" | version u16
//! params:  n_iterations u32 | learning_rate f64 | max_leaves u32
//!          | min_samples_per_leaf u32 | n_histogram_bins u16 | n_classes u8
//!          | l2_lambda f64 | rng_seed u64
//! feature_count u32 | feature_mode u8 (0 mel, 1 mfcc)
//! class table: n u8, then per class: id u8 | name (u32 len + utf-8)
//! base scores: n_classes × f64
//! bin cuts: per feature: n u16 | n × f32
//! trees: count u32, iteration-major (tree for iteration i, class k at i·n_classes + k)
//!        per tree: n_nodes u32, then per node
//!          tag 0 (split): feature u16 | threshold f32 | left u32 | right u32
//!          tag 1 (leaf):  value f64
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use super::binning::BinMapper;
use super::tree::{DecisionTree, Node};
use super::{GbtError, GbtParams, N_CLASSES};
use crate::container::{Reader, Writer};
use crate::distill::ClassLabel;
use crate::features::{FeatureMode, N_FEATURES};

pub const MODEL_MAGIC: &[u8; 4] = b"EMGB";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub(crate) params: GbtParams,
    pub(crate) feature_mode: FeatureMode,
    pub(crate) base_scores: [f64; N_CLASSES],
    pub(crate) trees: Vec<DecisionTree>,
    pub(crate) bins: BinMapper,
}

impl GbtModel {
    pub fn params(&self) -> &GbtParams {
        &self.params
    }

    pub fn feature_mode(&self) -> FeatureMode {
        self.feature_mode
    }

    pub fn feature_count(&self) -> usize {
        N_FEATURES
    }

    pub fn base_scores(&self) -> &[f64; N_CLASSES] {
        &self.base_scores
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn bin_mapper(&self) -> &BinMapper {
        &self.bins
    }

    fn check_input(&self, features: &[f32]) -> Result<(), GbtError> {
        if features.len() != N_FEATURES {
            return Err(GbtError::WrongFeatureCount {
                expected: N_FEATURES,
                found: features.len(),
            });
        }
        if let Some(column) = features.iter().position(|v| !v.is_finite()) {
            return Err(GbtError::NonFiniteFeature { row: 0, column });
        }
        Ok(())
    }

    /// Accumulated per-class scores before the softmax.
    pub fn predict_raw(&self, features: &[f32]) -> Result<[f64; N_CLASSES], GbtError> {
        self.check_input(features)?;
        Ok(self.raw_unchecked(features))
    }

    pub(crate) fn raw_unchecked(&self, features: &[f32]) -> [f64; N_CLASSES] {
        let mut scores = self.base_scores;
        for round in self.trees.chunks_exact(N_CLASSES) {
            for (s, tree) in scores.iter_mut().zip(round) {
                *s += tree.predict(features);
            }
        }
        scores
    }

    pub fn predict_proba(&self, features: &[f32]) -> Result<[f64; N_CLASSES], GbtError> {
        Ok(softmax(&self.predict_raw(features)?))
    }

    pub fn predict_class(&self, features: &[f32]) -> Result<ClassLabel, GbtError> {
        Ok(argmax_class(&self.predict_proba(features)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = Writer::with_header(MODEL_MAGIC, MODEL_VERSION);
        w.u32(p.n_iterations);
        w.f64(p.learning_rate);
        w.u32(p.max_leaves);
        w.u32(p.min_samples_per_leaf);
        w.u16(p.n_histogram_bins);
        w.u8(N_CLASSES as u8);
        w.f64(p.l2_lambda);
        w.u64(p.rng_seed);
        w.u32(N_FEATURES as u32);
        w.u8(self.feature_mode.as_u8());
        w.u8(N_CLASSES as u8);
        for class in ClassLabel::ALL {
            w.u8(class as u8);
            w.str(class.name());
        }
        for &b in &self.base_scores {
            w.f64(b);
        }
        for cuts in self.bins.all_cuts() {
            w.u16(cuts.len() as u16);
            for &c in cuts {
                w.f32(c);
            }
        }
        w.u32(self.trees.len() as u32);
        for tree in &self.trees {
            w.u32(tree.nodes().len() as u32);
            for node in tree.nodes() {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u8(0);
                        w.u16(feature);
                        w.f32(threshold);
                        w.u32(left);
                        w.u32(right);
                    }
                    Node::Leaf { value } => {
                        w.u8(1);
                        w.f64(value);
                    }
                }
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GbtError> {
        let mut r = Reader::open_checked(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let malformed = |m: String| GbtError::Malformed(m);
        let params = GbtParams {
            n_iterations: r.u32()?,
            learning_rate: r.f64()?,
            max_leaves: r.u32()?,
            min_samples_per_leaf: r.u32()?,
            n_histogram_bins: r.u16()?,
            l2_lambda: {
                let n_classes = r.u8()?;
                if n_classes as usize != N_CLASSES {
                    return Err(malformed(format!("{n_classes} classes, expected 4")));
                }
                r.f64()?
            },
            rng_seed: r.u64()?,
        };
        params.validate()?;
        let feature_count = r.u32()? as usize;
        if feature_count != N_FEATURES {
            return Err(malformed(format!("feature count {feature_count}, expected 696")));
        }
        let feature_mode = FeatureMode::from_u8(r.u8()?)
            .ok_or_else(|| malformed("unknown feature mode".into()))?;
        let n_table = r.u8()? as usize;
        if n_table != N_CLASSES {
            return Err(malformed(format!("class table has {n_table} entries")));
        }
        for class in ClassLabel::ALL {
            let id = r.u8()?;
            let name = r.str()?;
            if id != class as u8 || name != class.name() {
                return Err(malformed(format!(
                    "class table entry {id} {name:?} does not match {} {}",
                    class as u8,
                    class.name()
                )));
            }
        }
        let mut base_scores = [0.0; N_CLASSES];
        for b in &mut base_scores {
            *b = r.f64()?;
        }
        let mut cuts = Vec::with_capacity(N_FEATURES);
        for _ in 0..N_FEATURES {
            let n = r.u16()? as usize;
            let mut c = Vec::with_capacity(n);
            for _ in 0..n {
                c.push(r.f32()?);
            }
            cuts.push(c);
        }
        let n_trees = r.u32()? as usize;
        if n_trees != params.n_iterations as usize * N_CLASSES {
            return Err(malformed(format!(
                "{n_trees} trees for {} iterations",
                params.n_iterations
            )));
        }
        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            if n_nodes > r.remaining() {
                return Err(malformed(format!("tree {t}: node count {n_nodes} too large")));
            }
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(match r.u8()? {
                    0 => Node::Split {
                        feature: r.u16()?,
                        threshold: r.f32()?,
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    1 => Node::Leaf { value: r.f64()? },
                    tag => return Err(malformed(format!("tree {t}: node tag {tag}"))),
                });
            }
            trees.push(
                DecisionTree::from_nodes(nodes, N_FEATURES)
                    .map_err(|e| malformed(format!("tree {t}: {e}")))?,
            );
        }
        r.expect_end()?;
        Ok(GbtModel {
            params,
            feature_mode,
            base_scores,
            trees,
            bins: BinMapper::from_cuts(cuts),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GbtError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| GbtError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, GbtError> {
        let bytes =
            std::fs::read(path).map_err(|e| GbtError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn softmax(scores: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Index of the largest value; ties resolve to the lowest class id.
pub fn argmax_class(values: &[f64; N_CLASSES]) -> ClassLabel {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if values[c] > values[best] {
            best = c;
        }
    }
    ClassLabel::ALL[best]
}
