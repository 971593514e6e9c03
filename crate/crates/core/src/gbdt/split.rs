//! Gradient histograms and best-split search.

use rayon::prelude::*;

use super::binning::BinMapper;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HistBin {
    pub grad: f64,
    pub hess: f64,
    pub count: u32,
}

/// Per-feature gradient/hessian histograms for one set of samples.
pub struct Histogram {
    bins: Vec<HistBin>,
    offsets: Vec<usize>,
}

impl Histogram {
    /// Accumulates `indices` into per-feature bins; features are filled in
    /// parallel, each in index order, so the result is deterministic.
    pub fn build(
        binned: &[u8],
        n_samples: usize,
        mapper: &BinMapper,
        grad: &[f64],
        hess: &[f64],
        indices: &[u32],
    ) -> Self {
        let mut offsets = Vec::with_capacity(mapper.n_features() + 1);
        let mut total = 0;
        for f in 0..mapper.n_features() {
            offsets.push(total);
            total += mapper.n_bins(f);
        }
        offsets.push(total);
        let mut bins = vec![HistBin::default(); total];
        let mut slices = Vec::with_capacity(mapper.n_features());
        let mut rest = bins.as_mut_slice();
        for f in 0..mapper.n_features() {
            let (head, tail) = rest.split_at_mut(offsets[f + 1] - offsets[f]);
            slices.push(head);
            rest = tail;
        }
        slices.into_par_iter().enumerate().for_each(|(f, hist)| {
            if hist.len() < 2 {
                return;
            }
            let column = &binned[f * n_samples..(f + 1) * n_samples];
            for &i in indices {
                let i = i as usize;
                let slot = &mut hist[column[i] as usize];
                slot.grad += grad[i];
                slot.hess += hess[i];
                slot.count += 1;
            }
        });
        Histogram { bins, offsets }
    }

    pub fn feature(&self, f: usize) -> &[HistBin] {
        &self.bins[self.offsets[f]..self.offsets[f + 1]]
    }

    pub fn n_features(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConstraints {
    pub min_samples_per_leaf: u32,
    pub l2_lambda: f64,
    pub min_gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitInfo {
    pub feature: usize,
    /// Samples with bin <= `bin` go left.
    pub bin: u8,
    pub threshold: f32,
    pub gain: f64,
    pub left_count: u32,
    pub right_count: u32,
}

/// Second-order gain of splitting `(g, h)` into left and right parts.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)
}

fn best_for_feature(
    feature: usize,
    hist: &[HistBin],
    totals: (f64, f64, u32),
    mapper: &BinMapper,
    c: &SplitConstraints,
) -> Option<SplitInfo> {
    let (g, h, n) = totals;
    let mut best: Option<SplitInfo> = None;
    let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
    for (b, bin) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        gl += bin.grad;
        hl += bin.hess;
        nl += bin.count;
        let nr = n - nl;
        if nl < c.min_samples_per_leaf {
            continue;
        }
        if nr < c.min_samples_per_leaf {
            break;
        }
        let gain = split_gain(gl, hl, g - gl, h - hl, c.l2_lambda);
        if gain > c.min_gain && best.is_none_or(|s| gain > s.gain) {
            best = Some(SplitInfo {
                feature,
                bin: b as u8,
                threshold: mapper.cuts(feature)[b],
                gain,
                left_count: nl,
                right_count: nr,
            });
        }
    }
    best
}

/// Highest-gain split over all features. Ties keep the lowest feature and
/// then the lowest bin.
pub fn find_best_split(
    hist: &Histogram,
    totals: (f64, f64, u32),
    mapper: &BinMapper,
    constraints: &SplitConstraints,
) -> Option<SplitInfo> {
    let per_feature: Vec<Option<SplitInfo>> = (0..hist.n_features())
        .into_par_iter()
        .map(|f| best_for_feature(f, hist.feature(f), totals, mapper, constraints))
        .collect();
    let mut best: Option<SplitInfo> = None;
    for s in per_feature.into_iter().flatten() {
        if best.is_none_or(|b| s.gain > b.gain) {
            best = Some(s);
        }
    }
    best
}
