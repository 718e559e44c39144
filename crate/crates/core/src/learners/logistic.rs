use serde::{Deserialize, Serialize};

use super::{bce_logit, sigmoid, Adam, FeatureMatrix, TrainingMeta};
use crate::cohort::ClassWeights;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the loss changes by less than this between epochs.
    pub tolerance: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            learning_rate: 0.05,
            max_epochs: 500,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    fn logit(&self, row: &[f64]) -> f64 {
        self.bias + row.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.rows()).map(|i| sigmoid(self.logit(x.row(i)))).collect()
    }
}

/// Full-batch Adam on the class-weighted mean cross-entropy, from zeros.
pub(super) fn fit(
    x: &FeatureMatrix,
    y: &[bool],
    cw: &ClassWeights,
    p: &LogisticParams,
) -> Result<(LogisticModel, TrainingMeta)> {
    let d = x.cols();
    let n = x.rows() as f64;
    let mut theta = vec![0.0; d + 1];
    let mut adam = Adam::new(d + 1);
    let mut history = Vec::new();
    let mut grad = vec![0.0; d + 1];
    for _ in 0..p.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let row = x.row(i);
            let z = theta[d] + row.iter().zip(&theta[..d]).map(|(a, w)| a * w).sum::<f64>();
            let c = cw.weight(yi);
            loss += c * bce_logit(z, yi);
            let dz = c * (sigmoid(z) - f64::from(u8::from(yi))) / n;
            for (g, a) in grad[..d].iter_mut().zip(row) {
                *g += dz * a;
            }
            grad[d] += dz;
        }
        loss /= n;
        let done = history.last().is_some_and(|prev: &f64| (prev - loss).abs() < p.tolerance);
        history.push(loss);
        if done {
            break;
        }
        adam.step(&mut theta, &grad, p.learning_rate);
    }
    let bias = theta.pop().unwrap_or(0.0);
    Ok((
        LogisticModel { weights: theta, bias },
        TrainingMeta {
            epochs_run: history.len(),
            final_validation_loss: None,
            loss_history: history,
        },
    ))
}
