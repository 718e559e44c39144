//! From-scratch trainable scorers: the stacking meta-models (logistic
//! regression, k-nearest neighbours, random forest, gradient boosted trees)
//! and the multi-modal fusion head (one hidden layer MLP).
//!
//! Every learner is deterministic given its seed and data. Scores are
//! probabilities of the positive class.

mod adam;
mod forest;
mod gbdt;
mod knn;
mod logistic;
mod mlp;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::ClassWeights;
use crate::data::PredictionSet;
use crate::error::{Error, Result};

pub use adam::Adam;
pub use forest::{ForestModel, ForestParams};
pub use gbdt::{GbdtModel, GbdtParams};
pub use knn::{KnnModel, KnnParams};
pub use logistic::{LogisticModel, LogisticParams};
pub use mlp::{MlpModel, MlpParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Dense row-major matrix of finite features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::argument(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite feature at row {}, column {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("rows differ in length"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Columns are aligned prediction sets, one per base model.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::argument("columns differ in length"));
        }
        let cols = columns.len();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Knn,
    RandomForest,
    Gbdt,
    MlpHead,
}

impl ModelKind {
    pub const META_MODELS: [ModelKind; 4] = [
        ModelKind::Logistic,
        ModelKind::Knn,
        ModelKind::RandomForest,
        ModelKind::Gbdt,
    ];

    /// Short name used in strategy keys (`stack:forest`).
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Knn => "knn",
            ModelKind::RandomForest => "forest",
            ModelKind::Gbdt => "gbdt",
            ModelKind::MlpHead => "mlp",
        }
    }

    pub fn is_gradient_trained(self) -> bool {
        matches!(self, ModelKind::MlpHead)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "knn" => Ok(ModelKind::Knn),
            "forest" | "random_forest" => Ok(ModelKind::RandomForest),
            "gbdt" | "xgboost" => Ok(ModelKind::Gbdt),
            "mlp" | "mlp_head" => Ok(ModelKind::MlpHead),
            _ => Err(Error::argument(format!("unknown model kind '{s}'"))),
        }
    }
}

/// Shared training schedule plus per-kind hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub per_epoch_decay: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// `None` derives weights from the training labels.
    pub class_weights: Option<ClassWeights>,
    pub seed: u64,
    pub logistic: LogisticParams,
    pub knn: KnnParams,
    pub forest: ForestParams,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            per_epoch_decay: 0.05,
            batch_size: 32,
            early_stop_patience: 3,
            max_epochs: 100,
            class_weights: None,
            seed: 0,
            logistic: LogisticParams::default(),
            knn: KnnParams::default(),
            forest: ForestParams::default(),
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.per_epoch_decay) {
            return Err(Error::argument("per_epoch_decay must lie in [0, 1)"));
        }
        if self.early_stop_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::argument(
                "patience, batch size and epoch cap must be at least 1",
            ));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`: `lr * (1 - decay)^epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.per_epoch_decay).powi(epoch as i32)
    }

    fn weights_for(&self, y: &[bool]) -> Result<ClassWeights> {
        match self.class_weights {
            Some(w) => Ok(w),
            None => ClassWeights::from_labels(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic(LogisticModel),
    Knn(KnnModel),
    RandomForest(ForestModel),
    Gbdt(GbdtModel),
    MlpHead(MlpModel),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_validation_loss: Option<f64>,
    /// Training loss after each epoch or boosting round (round 0 is the
    /// initial model for gbdt).
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub kind: ModelKind,
    pub n_features: usize,
    pub params: ModelParams,
    pub meta: TrainingMeta,
}

impl Model {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let m: Model = serde_json::from_str(text)?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of the logit `z` against `y`, stable for any `z`.
pub(crate) fn bce_logit(z: f64, y: bool) -> f64 {
    z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
}

fn check_training_data(x: &FeatureMatrix, y: &[bool]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::argument(format!("{} feature rows but {} labels", x.rows(), y.len())));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Training("training labels contain a single class".into()));
    }
    Ok(())
}

/// Fit a model of `kind`. `valid` is required for gradient-trained kinds
/// and drives their early stopping.
pub fn train(
    kind: ModelKind,
    x: &FeatureMatrix,
    y: &[bool],
    valid: Option<(&FeatureMatrix, &[bool])>,
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    check_training_data(x, y)?;
    if let Some((vx, vy)) = valid {
        if vx.cols() != x.cols() || vx.rows() != vy.len() {
            return Err(Error::argument("validation set shape does not match training set"));
        }
    }
    let (params, meta) = match kind {
        ModelKind::Logistic => {
            let (m, meta) = logistic::fit(x, y, &cfg.weights_for(y)?, &cfg.logistic)?;
            (ModelParams::Logistic(m), meta)
        }
        ModelKind::Knn => (ModelParams::Knn(knn::fit(x, y, &cfg.knn)?), TrainingMeta::default()),
        ModelKind::RandomForest => (
            ModelParams::RandomForest(forest::fit(x, y, &cfg.forest, cfg.seed)?),
            TrainingMeta::default(),
        ),
        ModelKind::Gbdt => {
            let (m, meta) = gbdt::fit(x, y, &cfg.gbdt)?;
            (ModelParams::Gbdt(m), meta)
        }
        ModelKind::MlpHead => {
            let (vx, vy) = valid.ok_or_else(|| {
                Error::argument("mlp_head training requires a validation set")
            })?;
            let (m, meta) = mlp::fit(x, y, vx, vy, &cfg.weights_for(y)?, cfg)?;
            (ModelParams::MlpHead(m), meta)
        }
    };
    Ok(Model {
        version: MODEL_FORMAT_VERSION,
        kind,
        n_features: x.cols(),
        params,
        meta,
    })
}

pub fn predict(model: &Model, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if x.cols() != model.n_features {
        return Err(Error::argument(format!(
            "model expects {} features, got {}",
            model.n_features,
            x.cols()
        )));
    }
    let scores = match &model.params {
        ModelParams::Logistic(m) => m.predict(x),
        ModelParams::Knn(m) => m.predict(x),
        ModelParams::RandomForest(m) => m.predict(x),
        ModelParams::Gbdt(m) => m.predict(x),
        ModelParams::MlpHead(m) => m.predict(x),
    };
    Ok(scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect())
}

/// Scores wrapped as a prediction set over `image_ids`.
pub fn predict_set(
    model: &Model,
    x: &FeatureMatrix,
    model_id: &str,
    image_ids: Vec<String>,
) -> Result<PredictionSet> {
    PredictionSet::new(model_id, image_ids, predict(model, x)?)
}

/// Largest relative difference between backpropagated gradients and
/// central finite differences (step 1e-5) over every parameter.
pub fn gradient_check(model: &Model, x: &FeatureMatrix, y: &[bool], weights: &ClassWeights) -> Result<f64> {
    match &model.params {
        ModelParams::MlpHead(m) => {
            if x.cols() != model.n_features || x.rows() != y.len() {
                return Err(Error::argument("batch shape does not match the model"));
            }
            Ok(m.gradient_check(x, y, weights, 1e-5))
        }
        _ => Err(Error::argument(format!(
            "gradient check needs a differentiable model, got {}",
            model.kind
        ))),
    }
}
