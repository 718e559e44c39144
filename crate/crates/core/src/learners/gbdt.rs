use serde::{Deserialize, Serialize};

use super::tree::{Builder, Criterion, Tree};
use super::{bce_logit, sigmoid, FeatureMatrix, TrainingMeta};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub lambda: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_rounds: 100,
            max_depth: 3,
            shrinkage: 0.1,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub base_score: f64,
    pub shrinkage: f64,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    fn margin(&self, row: &[f64]) -> f64 {
        self.base_score + self.shrinkage * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.rows()).map(|i| sigmoid(self.margin(x.row(i)))).collect()
    }
}

fn mean_loss(margin: &[f64], y: &[bool]) -> f64 {
    margin.iter().zip(y).map(|(&z, &t)| bce_logit(z, t)).sum::<f64>() / y.len() as f64
}

/// Newton boosting on the logistic loss, starting from the log-odds of the
/// training prevalence.
pub(super) fn fit(x: &FeatureMatrix, y: &[bool], p: &GbdtParams) -> Result<(GbdtModel, TrainingMeta)> {
    if !(p.shrinkage > 0.0 && p.lambda >= 0.0) {
        return Err(Error::argument("gbdt needs positive shrinkage and non-negative lambda"));
    }
    let n = y.len();
    let prevalence = y.iter().filter(|v| **v).count() as f64 / n as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();
    let mut margin = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut history = vec![mean_loss(&margin, y)];
    let mut trees = Vec::with_capacity(p.n_rounds);
    // The builder never samples features here, the stream is unused.
    let mut rng = Rng::new(0);
    for _ in 0..p.n_rounds {
        for i in 0..n {
            let q = sigmoid(margin[i]);
            g[i] = q - f64::from(u8::from(y[i]));
            h[i] = q * (1.0 - q);
        }
        let builder = Builder {
            x,
            a: &g,
            b: &h,
            criterion: Criterion::Newton { lambda: p.lambda },
            max_depth: p.max_depth,
            max_features: None,
        };
        let tree = builder.build((0..n).collect(), &mut rng);
        for (i, m) in margin.iter_mut().enumerate() {
            *m += p.shrinkage * tree.predict_row(x.row(i));
        }
        trees.push(tree);
        history.push(mean_loss(&margin, y));
    }
    Ok((
        GbdtModel {
            base_score,
            shrinkage: p.shrinkage,
            trees,
        },
        TrainingMeta {
            epochs_run: p.n_rounds,
            final_validation_loss: None,
            loss_history: history,
        },
    ))
}
