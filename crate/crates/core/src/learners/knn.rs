use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { k: 5 }
    }
}

/// Stores the training set; the score is the positive fraction among the
/// `k` nearest points by Euclidean distance. Equal distances resolve to the
/// earlier training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub train: FeatureMatrix,
    pub labels: Vec<bool>,
}

pub(super) fn fit(x: &FeatureMatrix, y: &[bool], p: &KnnParams) -> Result<KnnModel> {
    if p.k == 0 {
        return Err(Error::argument("k must be at least 1"));
    }
    Ok(KnnModel {
        k: p.k.min(x.rows()),
        train: x.clone(),
        labels: y.to_vec(),
    })
}

impl KnnModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let n = self.train.rows();
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        (0..x.rows())
            .map(|q| {
                let query = x.row(q);
                dist.clear();
                dist.extend((0..n).map(|i| {
                    let d2 = self.train.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    (d2, i)
                }));
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if self.k < n {
                    dist.select_nth_unstable_by(self.k - 1, cmp);
                }
                let hits = dist[..self.k].iter().filter(|(_, i)| self.labels[*i]).count();
                hits as f64 / self.k as f64
            })
            .collect()
    }
}
