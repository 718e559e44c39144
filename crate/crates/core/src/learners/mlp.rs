use serde::{Deserialize, Serialize};

use super::{bce_logit, sigmoid, Adam, FeatureMatrix, TrainConfig, TrainingMeta};
use crate::cohort::ClassWeights;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams { hidden: 32 }
    }
}

/// `input -> hidden (ReLU) -> 1 (sigmoid)`.
///
/// Parameters live in one flat vector laid out as hidden weights (row-major,
/// one row per hidden unit), hidden biases, output weights, output bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub inputs: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        MlpModel {
            inputs,
            hidden,
            params: vec![0.0; hidden * inputs + 2 * hidden + 1],
        }
    }

    /// Weights uniform on `±1/sqrt(fan_in)`, biases zero.
    pub fn init(inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(inputs, hidden);
        let b1 = 1.0 / (inputs.max(1) as f64).sqrt();
        for w in &mut m.params[..hidden * inputs] {
            *w = rng.uniform(-b1, b1);
        }
        let b2 = 1.0 / (hidden.max(1) as f64).sqrt();
        let off = hidden * inputs + hidden;
        for w in &mut m.params[off..off + hidden] {
            *w = rng.uniform(-b2, b2);
        }
        m
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.inputs;
        (w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    /// Output logit, filling `act` with the hidden pre-activations.
    fn forward(&self, row: &[f64], act: &mut [f64]) -> f64 {
        let (b1, w2, b2) = self.offsets();
        let mut z = self.params[b2];
        for j in 0..self.hidden {
            let w = &self.params[j * self.inputs..(j + 1) * self.inputs];
            let a = self.params[b1 + j] + w.iter().zip(row).map(|(p, x)| p * x).sum::<f64>();
            act[j] = a;
            z += self.params[w2 + j] * a.max(0.0);
        }
        z
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let mut act = vec![0.0; self.hidden];
        (0..x.rows()).map(|i| sigmoid(self.forward(x.row(i), &mut act))).collect()
    }

    /// Class-weighted mean cross-entropy over `rows` and its gradient.
    pub fn loss_and_gradient(
        &self,
        x: &FeatureMatrix,
        y: &[bool],
        rows: &[usize],
        cw: &ClassWeights,
    ) -> (f64, Vec<f64>) {
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut act = vec![0.0; self.hidden];
        let n = rows.len() as f64;
        let mut loss = 0.0;
        for &i in rows {
            let row = x.row(i);
            let z = self.forward(row, &mut act);
            let c = cw.weight(y[i]);
            loss += c * bce_logit(z, y[i]);
            let dz = c * (sigmoid(z) - f64::from(u8::from(y[i]))) / n;
            grad[b2] += dz;
            for j in 0..self.hidden {
                if act[j] <= 0.0 {
                    continue;
                }
                grad[w2 + j] += dz * act[j];
                let da = dz * self.params[w2 + j];
                grad[b1 + j] += da;
                for (g, xv) in grad[j * self.inputs..(j + 1) * self.inputs].iter_mut().zip(row) {
                    *g += da * xv;
                }
            }
        }
        (loss / n, grad)
    }

    fn loss(&self, x: &FeatureMatrix, y: &[bool], rows: &[usize], cw: &ClassWeights) -> f64 {
        let mut act = vec![0.0; self.hidden];
        let n = rows.len() as f64;
        rows.iter()
            .map(|&i| cw.weight(y[i]) * bce_logit(self.forward(x.row(i), &mut act), y[i]))
            .sum::<f64>()
            / n
    }

    pub(super) fn gradient_check(&self, x: &FeatureMatrix, y: &[bool], cw: &ClassWeights, step: f64) -> f64 {
        let rows: Vec<usize> = (0..y.len()).collect();
        let (_, analytic) = self.loss_and_gradient(x, y, &rows, cw);
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for k in 0..self.params.len() {
            let orig = probe.params[k];
            probe.params[k] = orig + step;
            let up = probe.loss(x, y, &rows, cw);
            probe.params[k] = orig - step;
            let down = probe.loss(x, y, &rows, cw);
            probe.params[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let scale = analytic[k].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((analytic[k] - numeric).abs() / scale);
        }
        worst
    }
}

/// Mini-batch Adam with per-epoch decayed learning rate and early stopping
/// on unweighted validation cross-entropy. Returns the best-validation
/// parameters.
pub(super) fn fit(
    x: &FeatureMatrix,
    y: &[bool],
    vx: &FeatureMatrix,
    vy: &[bool],
    cw: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainingMeta)> {
    let mut model = MlpModel::init(x.cols(), cfg.mlp.hidden, &mut Rng::derived(cfg.seed, 0));
    let mut order_rng = Rng::derived(cfg.seed, 1);
    let mut adam = Adam::new(model.params.len());
    let uniform = ClassWeights::uniform();
    let vrows: Vec<usize> = (0..vy.len()).collect();
    let val_loss = |m: &MlpModel| if vrows.is_empty() { 0.0 } else { m.loss(vx, vy, &vrows, &uniform) };

    let mut best = model.clone();
    let mut best_loss = val_loss(&model);
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate_at(epoch);
        order_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = model.loss_and_gradient(x, y, batch, cw);
            adam.step(&mut model.params, &grad, lr);
        }
        epochs = epoch + 1;
        history.push(model.loss(x, y, &order, cw));
        let v = val_loss(&model);
        if v < best_loss {
            best_loss = v;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((
        best,
        TrainingMeta {
            epochs_run: epochs,
            final_validation_loss: Some(best_loss),
            loss_history: history,
        },
    ))
}
