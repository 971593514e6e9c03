//! Confusion matrix and agreement statistics.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{argmax_class, softmax, GbtModel};
use super::{GbtError, N_CLASSES};
use crate::distill::{ClassLabel, Dataset};

/// Evaluation of a model against reference labels.
///
/// `matrix[p][r]` counts rows the model predicted as class `p` whose
/// reference label is class `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matrix: [[u64; N_CLASSES]; N_CLASSES],
    pub total: u64,
    pub agreement: f64,
    /// Per class, `None` when the model never predicted that class.
    pub precision: [Option<f64>; N_CLASSES],
    /// Per class, `None` when the reference never contains that class.
    pub recall: [Option<f64>; N_CLASSES],
}

impl EvalReport {
    pub fn from_matrix(matrix: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        let total: u64 = matrix.iter().flatten().sum();
        let trace: u64 = (0..N_CLASSES).map(|k| matrix[k][k]).sum();
        let agreement = if total == 0 {
            0.0
        } else {
            trace as f64 / total as f64
        };
        let mut precision = [None; N_CLASSES];
        let mut recall = [None; N_CLASSES];
        for k in 0..N_CLASSES {
            let predicted: u64 = matrix[k].iter().sum();
            let reference: u64 = (0..N_CLASSES).map(|p| matrix[p][k]).sum();
            if predicted > 0 {
                precision[k] = Some(matrix[k][k] as f64 / predicted as f64);
            }
            if reference > 0 {
                recall[k] = Some(matrix[k][k] as f64 / reference as f64);
            }
        }
        EvalReport {
            matrix,
            total,
            agreement,
            precision,
            recall,
        }
    }

    pub fn count(&self, predicted: ClassLabel, reference: ClassLabel) -> u64 {
        self.matrix[predicted.index()][reference.index()]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: prediction, columns: reference")?;
        write!(f, "{:>14}", "")?;
        for c in ClassLabel::ALL {
            write!(f, "{:>14}", c.name())?;
        }
        writeln!(f, "{:>11}", "precision")?;
        for p in ClassLabel::ALL {
            write!(f, "{:>14}", p.name())?;
            for r in ClassLabel::ALL {
                write!(f, "{:>14}", self.count(p, r))?;
            }
            writeln!(f, "{:>11}", fmt_opt(self.precision[p.index()]))?;
        }
        write!(f, "{:>14}", "recall")?;
        for r in ClassLabel::ALL {
            write!(f, "{:>14}", fmt_opt(self.recall[r.index()]))?;
        }
        writeln!(f)?;
        write!(
            f,
            "agreement: {:.2}% over {} segments",
            100.0 * self.agreement,
            self.total
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

/// Predicts every row of `dataset` and tallies it against the stored labels.
pub fn confusion_matrix(model: &GbtModel, dataset: &Dataset) -> Result<EvalReport, GbtError> {
    if dataset.mode() != model.feature_mode() {
        return Err(GbtError::InvalidParams(format!(
            "dataset holds {} features but the model was trained on {}",
            dataset.mode().name(),
            model.feature_mode().name()
        )));
    }
    let predictions: Vec<ClassLabel> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            model
                .predict_raw(dataset.row(i))
                .map(|raw| argmax_class(&softmax(&raw)))
                .map_err(|e| match e {
                    GbtError::NonFiniteFeature { column, .. } => {
                        GbtError::NonFiniteFeature { row: i, column }
                    }
                    other => other,
                })
        })
        .collect::<Result<_, _>>()?;
    let mut matrix = [[0u64; N_CLASSES]; N_CLASSES];
    for (p, r) in predictions.iter().zip(dataset.labels()) {
        matrix[p.index()][r.index()] += 1;
    }
    Ok(EvalReport::from_matrix(matrix))
}
