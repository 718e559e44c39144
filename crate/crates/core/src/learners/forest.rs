use serde::{Deserialize, Serialize};

use super::tree::{Builder, Criterion, Tree};
use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 8,
            bootstrap: true,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

/// Tree `t` draws its bootstrap sample and feature subsets from its own
/// stream derived from `(seed, t)`, so trees are independent of each other.
pub(super) fn fit(x: &FeatureMatrix, y: &[bool], p: &ForestParams, seed: u64) -> Result<ForestModel> {
    if p.n_trees == 0 {
        return Err(Error::argument("forest needs at least one tree"));
    }
    let n = x.rows();
    let d = x.cols();
    let mtry = p
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let a = vec![1.0; n];
    let b: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v))).collect();
    let builder = Builder {
        x,
        a: &a,
        b: &b,
        criterion: Criterion::Gini,
        max_depth: p.max_depth,
        max_features: Some(mtry),
    };
    let trees = (0..p.n_trees)
        .map(|t| {
            let mut rng = Rng::derived(seed, t as u64);
            let rows = if p.bootstrap {
                (0..n).map(|_| rng.below(n)).collect()
            } else {
                (0..n).collect()
            };
            builder.build(rows, &mut rng)
        })
        .collect();
    Ok(ForestModel { trees })
}

impl ForestModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let k = self.trees.len() as f64;
        (0..x.rows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x.row(i))).sum::<f64>() / k)
            .collect()
    }
}
