//! Quantile feature binning.
//!
//! Each feature gets up to `max_bins` bins described by ascending cut values.
//! A raw value `v` falls in bin `b`, the first index with `v <= cuts[b]`, or
//! in the last bin when it exceeds every cut. A split after bin `b` is
//! therefore the raw test `v <= cuts[b]`, which is what the trees store.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct BinMapper {
    cuts: Vec<Vec<f32>>,
}

/// A cut strictly between two adjacent distinct values, preferring the midpoint.
fn cut_between(lo: f32, hi: f32) -> f32 {
    let mid = ((lo as f64 + hi as f64) / 2.0) as f32;
    if mid >= lo && mid < hi {
        mid
    } else {
        lo
    }
}

fn feature_cuts(mut values: Vec<f32>, max_bins: usize) -> Vec<f32> {
    values.sort_by(|a, b| a.total_cmp(b));
    let mut distinct: Vec<(f32, usize)> = Vec::new();
    for v in values.iter().copied() {
        match distinct.last_mut() {
            Some((last, count)) if *last == v => *count += 1,
            _ => distinct.push((v, 1)),
        }
    }
    if distinct.len() <= 1 {
        return Vec::new();
    }
    if distinct.len() <= max_bins {
        return distinct
            .windows(2)
            .map(|w| cut_between(w[0].0, w[1].0))
            .collect();
    }
    // Greedy equal-frequency bins over the distinct values.
    let n = values.len();
    let mut cuts = Vec::with_capacity(max_bins - 1);
    let mut in_bin = 0usize;
    let mut consumed = 0usize;
    for (i, &(v, count)) in distinct.iter().enumerate() {
        in_bin += count;
        consumed += count;
        let bins_left = max_bins - 1 - cuts.len();
        if bins_left == 0 || i + 1 == distinct.len() {
            continue;
        }
        let target = (n - consumed + in_bin) as f64 / (bins_left + 1) as f64;
        if in_bin as f64 >= target {
            cuts.push(cut_between(v, distinct[i + 1].0));
            in_bin = 0;
        }
    }
    cuts
}

impl BinMapper {
    /// Learns cuts from row-major `features` with `n_features` columns.
    pub fn fit(features: &[f32], n_features: usize, max_bins: usize) -> Self {
        assert!((2..=256).contains(&max_bins));
        let n = features.len() / n_features;
        let cuts = (0..n_features)
            .into_par_iter()
            .map(|f| {
                let column: Vec<f32> = (0..n).map(|i| features[i * n_features + f]).collect();
                feature_cuts(column, max_bins)
            })
            .collect();
        BinMapper { cuts }
    }

    pub fn from_cuts(cuts: Vec<Vec<f32>>) -> Self {
        BinMapper { cuts }
    }

    pub fn n_features(&self) -> usize {
        self.cuts.len()
    }

    pub fn cuts(&self, feature: usize) -> &[f32] {
        &self.cuts[feature]
    }

    pub fn all_cuts(&self) -> &[Vec<f32>] {
        &self.cuts
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.cuts[feature].len() + 1
    }

    pub fn bin(&self, feature: usize, value: f32) -> u8 {
        self.cuts[feature].partition_point(|&c| c < value) as u8
    }

    /// Column-major bin matrix: entry `(f, i)` at `f * n + i`.
    pub fn transform(&self, features: &[f32]) -> Vec<u8> {
        let n_features = self.cuts.len();
        let n = features.len() / n_features;
        let mut out = vec![0u8; n * n_features];
        out.par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(f, column)| {
                for (i, slot) in column.iter_mut().enumerate() {
                    *slot = self.bin(f, features[i * n_features + f]);
                }
            });
        out
    }
}
