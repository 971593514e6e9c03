//! Softmax boosting loop.

use serde::{Deserialize, Serialize};

use super::binning::BinMapper;
use super::model::GbtModel;
use super::split::SplitConstraints;
use super::tree::{DecisionTree, GrowContext};
use super::{GbtError, GbtParams, N_CLASSES};
use crate::distill::Dataset;
use crate::features::N_FEATURES;

/// Smallest class prior used for the initial scores.
const PRIOR_FLOOR: f64 = 1e-6;
const MIN_GAIN: f64 = 1e-12;
const MAX_STEP_HALVINGS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training log-loss; entry 0 is the initial model, entry `i` the
    /// model after iteration `i`.
    pub loss_per_iteration: Vec<f64>,
    /// Multiplier applied to each iteration's trees (1 unless the step had to
    /// be shortened to keep the loss from rising).
    pub step_scales: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn train(dataset: &Dataset, params: &GbtParams) -> Result<GbtModel, GbtError> {
    train_with_report(dataset, params).map(|(m, _)| m)
}

fn log_loss(scores: &[[f64; N_CLASSES]], labels: &[usize]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - s[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Trains the ensemble and reports the per-iteration training loss.
///
/// Each iteration fits one tree per class to the softmax gradients
/// `p_k - y_k` with hessians `p_k(1 - p_k)`. If applying the iteration's trees
/// would raise the training loss, their leaves are halved until it does not
/// (or zeroed), so the recorded loss never increases.
pub fn train_with_report(
    dataset: &Dataset,
    params: &GbtParams,
) -> Result<(GbtModel, TrainReport), GbtError> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(GbtError::EmptyDataset);
    }
    if let Some(pos) = dataset.features().iter().position(|v| !v.is_finite()) {
        return Err(GbtError::NonFiniteFeature {
            row: pos / N_FEATURES,
            column: pos % N_FEATURES,
        });
    }
    let n = dataset.len();
    let labels: Vec<usize> = dataset.labels().iter().map(|l| l.index()).collect();
    let counts = dataset.class_counts();
    let mut warnings = Vec::new();

    let base_scores = counts.map(|c| (c as f64 / n as f64).max(PRIOR_FLOOR).ln());
    let mapper = BinMapper::fit(dataset.features(), N_FEATURES, params.n_histogram_bins as usize);
    let mut scores = vec![base_scores; n];
    let mut report = TrainReport {
        loss_per_iteration: vec![log_loss(&scores, &labels)],
        step_scales: Vec::with_capacity(params.n_iterations as usize),
        warnings: Vec::new(),
    };

    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 1 {
        let msg = format!("training set holds a single class ({n} rows); model is constant");
        log::warn!("{msg}");
        warnings.push(msg);
        let trees = (0..params.n_iterations as usize * N_CLASSES)
            .map(|_| DecisionTree::constant(0.0))
            .collect();
        let loss = report.loss_per_iteration[0];
        report.loss_per_iteration.extend(std::iter::repeat_n(loss, params.n_iterations as usize));
        report.step_scales = vec![0.0; params.n_iterations as usize];
        report.warnings = warnings;
        return Ok((
            GbtModel {
                params: *params,
                feature_mode: dataset.mode(),
                base_scores,
                trees,
                bins: mapper,
            },
            report,
        ));
    }

    let binned = mapper.transform(dataset.features());
    let ctx = GrowContext {
        binned: &binned,
        n_samples: n,
        mapper: &mapper,
        constraints: SplitConstraints {
            min_samples_per_leaf: params.min_samples_per_leaf,
            l2_lambda: params.l2_lambda,
            min_gain: MIN_GAIN,
        },
        max_leaves: params.max_leaves as usize,
        learning_rate: params.learning_rate,
    };

    let mut trees = Vec::with_capacity(params.n_iterations as usize * N_CLASSES);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut probs = vec![[0.0; N_CLASSES]; n];
    for _ in 0..params.n_iterations {
        for (p, s) in probs.iter_mut().zip(&scores) {
            *p = super::model::softmax(s);
        }
        let mut round = Vec::with_capacity(N_CLASSES);
        for k in 0..N_CLASSES {
            for i in 0..n {
                let p = probs[i][k];
                let y = if labels[i] == k { 1.0 } else { 0.0 };
                grad[i] = p - y;
                hess[i] = (p * (1.0 - p)).max(1e-16);
            }
            round.push(ctx.grow(&grad, &hess));
        }

        let previous = *report.loss_per_iteration.last().expect("initial loss");
        let mut scale = 1.0;
        let mut candidate = vec![[0.0; N_CLASSES]; n];
        let mut halvings = 0;
        loop {
            for (i, c) in candidate.iter_mut().enumerate() {
                *c = scores[i];
                for (k, (tree, leaf_of)) in round.iter().enumerate() {
                    c[k] += tree.leaf_value(leaf_of[i]) * scale;
                }
            }
            if log_loss(&candidate, &labels) <= previous {
                break;
            }
            halvings += 1;
            if halvings > MAX_STEP_HALVINGS {
                scale = 0.0;
                break;
            }
            scale *= 0.5;
        }
        if scale != 1.0 {
            for (tree, _) in round.iter_mut() {
                tree.scale_leaves(scale);
            }
        }
        // Recompute from the stored leaves so training scores match
        // inference bit for bit.
        for (i, s) in scores.iter_mut().enumerate() {
            for (k, (tree, leaf_of)) in round.iter().enumerate() {
                s[k] += tree.leaf_value(leaf_of[i]);
            }
        }
        report.step_scales.push(scale);
        report.loss_per_iteration.push(log_loss(&scores, &labels));
        trees.extend(round.into_iter().map(|(t, _)| t));
    }
    report.warnings = warnings;
    Ok((
        GbtModel {
            params: *params,
            feature_mode: dataset.mode(),
            base_scores,
            trees,
            bins: mapper,
        },
        report,
    ))
}
