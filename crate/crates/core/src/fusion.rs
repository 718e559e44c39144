//! Model-level fusion (bagging, dendrogram-weighted bagging, stacking) and
//! data-level fusion (multi-site merge, image features joined with
//! demographics).

use std::collections::{BTreeMap, HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{
    ensure_aligned, CohortRow, DemographicRecord, FeatureVector, LabeledCohort, PredictionSet, RaceEthnicity, Sex,
    FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::io::RawDemographic;
use crate::learners::{self, FeatureMatrix, ModelKind, TrainConfig};
use crate::metrics::TrainingProcedure;

pub const DEMOGRAPHIC_DIM: usize = 10;
pub const MULTIMODAL_DIM: usize = FEATURE_DIM + DEMOGRAPHIC_DIM;

fn ensure_nonempty(models: &[PredictionSet]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::argument("at least one prediction set is required"));
    }
    ensure_aligned(models)
}

/// Per-image mean. Scores are summed in sorted order so the result does not
/// depend on the order of `models`.
pub fn unweighted_average(models: &[PredictionSet]) -> Result<PredictionSet> {
    ensure_nonempty(models)?;
    let k = models.len() as f64;
    let mut col = Vec::with_capacity(models.len());
    let scores = (0..models[0].len())
        .map(|i| {
            col.clear();
            col.extend(models.iter().map(|m| m.scores()[i]));
            col.sort_by(f64::total_cmp);
            (col.iter().sum::<f64>() / k).clamp(0.0, 1.0)
        })
        .collect();
    PredictionSet::new("bag:unweighted", models[0].image_ids().to_vec(), scores)
}

/// Symmetric pairwise distances between labelled items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::argument("distance matrix must be square and match its ids"));
        }
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::argument("distance matrix ids must be unique"));
        }
        for i in 0..n {
            if values[i][i] != 0.0 {
                return Err(Error::argument("distance matrix diagonal must be zero"));
            }
            for j in 0..n {
                let v = values[i][j];
                if !(0.0..=2.0).contains(&v) || v != values[j][i] {
                    return Err(Error::argument(format!(
                        "distance ({i}, {j}) must be symmetric and lie in [0, 2]"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { ids, values })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

/// `1 - cos(s_i, s_j)` between the score vectors of each pair of models.
pub fn cosine_distance_matrix(models: &[PredictionSet]) -> Result<DistanceMatrix> {
    if models.len() < 2 {
        return Err(Error::argument("cosine distances need at least two prediction sets"));
    }
    ensure_aligned(models)?;
    let norms: Vec<f64> = models
        .iter()
        .map(|m| m.scores().iter().map(|s| s * s).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::Computation(format!(
            "predictions of '{}' have zero norm",
            models[i].model_id()
        )));
    }
    let n = models.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = models[i].scores().iter().zip(models[j].scores()).map(|(a, b)| a * b).sum();
            let d = (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0);
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    DistanceMatrix::new(models.iter().map(|m| m.model_id().to_string()).collect(), values)
}

/// Node references: `0..n` are leaves, `n + k` is the `k`-th merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Checks that `merges` form one binary tree over `leaves` with
    /// non-decreasing heights; `size` is recomputed.
    pub fn from_merges(leaves: Vec<String>, merges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = leaves.len();
        if n == 0 {
            return Err(Error::argument("dendrogram needs at least one leaf"));
        }
        if merges.len() != n - 1 {
            return Err(Error::argument(format!("{n} leaves need {} merges, got {}", n - 1, merges.len())));
        }
        let mut used = vec![false; 2 * n - 1];
        let mut sizes: Vec<usize> = vec![1; n];
        let mut out = Vec::with_capacity(n - 1);
        let mut last = f64::NEG_INFINITY;
        for (k, (l, r, h)) in merges.into_iter().enumerate() {
            let limit = n + k;
            if l >= limit || r >= limit || l == r || used[l] || used[r] {
                return Err(Error::argument(format!("merge {k} references an invalid or reused node")));
            }
            if !h.is_finite() || h < last {
                return Err(Error::argument(format!("merge {k} height is not non-decreasing")));
            }
            last = h;
            used[l] = true;
            used[r] = true;
            let size = sizes[l] + sizes[r];
            sizes.push(size);
            out.push(Merge { left: l, right: r, height: h, size });
        }
        Ok(Dendrogram { leaves, merges: out })
    }

    pub fn root(&self) -> usize {
        2 * self.leaves.len() - 2
    }

    /// Children of an internal node, `None` for a leaf.
    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        let n = self.leaves.len();
        (node >= n).then(|| {
            let m = &self.merges[node - n];
            (m.left, m.right)
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dendrogram serializes")
    }
}

/// Standard average linkage: the distance between clusters is the mean of
/// all cross-cluster leaf distances. Among equal distances the pair whose
/// sorted member-id lists compare lexicographically smallest merges first,
/// and the smaller list becomes the left child.
pub fn upgma_linkage(d: &DistanceMatrix) -> Result<Dendrogram> {
    let n = d.len();
    if n == 0 {
        return Err(Error::argument("linkage needs at least one item"));
    }
    struct Cluster {
        node: usize,
        key: Vec<String>,
        size: usize,
    }
    let mut active: Vec<Cluster> = (0..n)
        .map(|i| Cluster {
            node: i,
            key: vec![d.ids()[i].clone()],
            size: 1,
        })
        .collect();
    // Cross sums of leaf distances between active clusters.
    let mut sums: Vec<Vec<f64>> = d.values.clone();
    let mut merges = Vec::with_capacity(n - 1);
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let (i, j) = if active[a].key <= active[b].key { (a, b) } else { (b, a) };
                let dist = sums[i][j] / (active[i].size * active[j].size) as f64;
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => {
                        dist < bd
                            || (dist == bd
                                && (&active[i].key, &active[j].key) < (&active[bi].key, &active[bj].key))
                    }
                };
                if better {
                    best = Some((dist, i, j));
                }
            }
        }
        let (height, i, j) = best.expect("two active clusters");
        merges.push((active[i].node, active[j].node, height));
        let row: Vec<f64> = (0..active.len()).map(|x| sums[i][x] + sums[j][x]).collect();
        let mut key = [active[i].key.clone(), active[j].key.clone()].concat();
        key.sort();
        let merged = Cluster {
            node: n + merges.len() - 1,
            key,
            size: active[i].size + active[j].size,
        };
        // Replace i with the merged cluster and drop j.
        for x in 0..active.len() {
            sums[i][x] = row[x];
            sums[x][i] = row[x];
        }
        sums[i][i] = 0.0;
        active[i] = merged;
        active.remove(j);
        sums.remove(j);
        for r in &mut sums {
            r.remove(j);
        }
    }
    Dendrogram::from_merges(d.ids().to_vec(), merges)
}

/// Non-negative weights keyed by model id, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: BTreeMap<String, f64>,
}

impl WeightVector {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::argument("weights must be finite and non-negative"));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::argument(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector { weights })
    }

    pub fn get(&self, model_id: &str) -> Option<f64> {
        self.weights.get(model_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }
}

/// Root mass 1, each internal node passes half its mass to each child.
pub fn dendrogram_weights(t: &Dendrogram) -> WeightVector {
    let mut weights = BTreeMap::new();
    let mut stack = vec![(t.root(), 1.0)];
    while let Some((node, mass)) = stack.pop() {
        match t.children(node) {
            Some((l, r)) => {
                stack.push((l, mass / 2.0));
                stack.push((r, mass / 2.0));
            }
            None => {
                weights.insert(t.leaves[node].clone(), mass);
            }
        }
    }
    WeightVector { weights }
}

/// Per-image `sum_m w_m * s_m`, clamped to [0, 1].
pub fn weighted_average(models: &[PredictionSet], w: &WeightVector) -> Result<PredictionSet> {
    ensure_nonempty(models)?;
    let ids: HashSet<&str> = models.iter().map(PredictionSet::model_id).collect();
    if ids.len() != models.len() || ids.len() != w.weights.len() || !ids.iter().all(|id| w.weights.contains_key(*id)) {
        return Err(Error::argument("weight keys must match the model ids exactly"));
    }
    let scores = (0..models[0].len())
        .map(|i| {
            models
                .iter()
                .map(|m| w.weights[m.model_id()] * m.scores()[i])
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect();
    PredictionSet::new("bag:weighted", models[0].image_ids().to_vec(), scores)
}

/// Cosine distances on validation predictions, UPGMA, then halving weights.
pub fn dendrogram_from_validation(valid: &[PredictionSet]) -> Result<(Dendrogram, WeightVector)> {
    let tree = upgma_linkage(&cosine_distance_matrix(valid)?)?;
    let w = dendrogram_weights(&tree);
    Ok((tree, w))
}

fn same_models(a: &[PredictionSet], b: &[PredictionSet]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.model_id() == y.model_id())
}

/// Meta-feature matrix: one column per base model.
pub fn meta_features(preds: &[PredictionSet]) -> Result<FeatureMatrix> {
    ensure_nonempty(preds)?;
    let cols: Vec<&[f64]> = preds.iter().map(PredictionSet::scores).collect();
    FeatureMatrix::from_columns(&cols)
}

/// Base-model predictions for one split, with the split's labels.
#[derive(Debug, Clone, Copy)]
pub struct SplitPredictions<'a> {
    pub preds: &'a [PredictionSet],
    pub labels: &'a [bool],
}

/// Meta-model training over fixed train/valid/test meta-features.
pub struct StackProcedure {
    pub kind: ModelKind,
    pub cfg: TrainConfig,
    train_x: FeatureMatrix,
    train_y: Vec<bool>,
    valid: Option<(FeatureMatrix, Vec<bool>)>,
    test_x: FeatureMatrix,
    test_y: Vec<bool>,
    test_ids: Vec<String>,
}

impl StackProcedure {
    pub fn new(
        kind: ModelKind,
        train: SplitPredictions<'_>,
        valid: Option<SplitPredictions<'_>>,
        test: SplitPredictions<'_>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if !same_models(train.preds, test.preds) || valid.is_some_and(|v| !same_models(train.preds, v.preds)) {
            return Err(Error::argument("train, validation and test must use the same base models in the same order"));
        }
        let matrix = |s: SplitPredictions<'_>| -> Result<(FeatureMatrix, Vec<bool>)> {
            let x = meta_features(s.preds)?;
            if x.rows() != s.labels.len() {
                return Err(Error::argument("labels do not match the prediction rows"));
            }
            Ok((x, s.labels.to_vec()))
        };
        let (train_x, train_y) = matrix(train)?;
        let (test_x, test_y) = matrix(test)?;
        Ok(StackProcedure {
            kind,
            cfg: cfg.clone(),
            train_x,
            train_y,
            valid: valid.map(matrix).transpose()?,
            test_x,
            test_y,
            test_ids: test.preds[0].image_ids().to_vec(),
        })
    }

    pub fn meta_width(&self) -> usize {
        self.train_x.cols()
    }

    fn fit_with(&self, labels: &[bool]) -> Result<Vec<f64>> {
        let valid = self.valid.as_ref().map(|(x, y)| (x, y.as_slice()));
        let model = learners::train(self.kind, &self.train_x, labels, valid, &self.cfg)?;
        learners::predict(&model, &self.test_x)
    }

    pub fn run(&self) -> Result<PredictionSet> {
        let scores = self.fit_with(&self.train_y)?;
        PredictionSet::new(format!("stack:{}", self.kind), self.test_ids.clone(), scores)
    }
}

impl TrainingProcedure for StackProcedure {
    fn train_labels(&self) -> &[bool] {
        &self.train_y
    }

    fn test_labels(&self) -> &[bool] {
        &self.test_y
    }

    fn fit_score(&self, train_labels: &[bool]) -> Result<Vec<f64>> {
        self.fit_with(train_labels)
    }
}

/// Train a meta-model on training-split base predictions and score the
/// test split.
pub fn stack(
    kind: ModelKind,
    train: SplitPredictions<'_>,
    valid: Option<SplitPredictions<'_>>,
    test_preds: &[PredictionSet],
    cfg: &TrainConfig,
) -> Result<PredictionSet> {
    // Test labels are not used for fitting.
    let blank = vec![false; test_preds.first().map_or(0, PredictionSet::len)];
    let test = SplitPredictions { preds: test_preds, labels: &blank };
    StackProcedure::new(kind, train, valid, test, cfg)?.run()
}

/// Harmonizes site-specific demographic category names.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMap {
    race: HashMap<String, RaceEthnicity>,
    sex: HashMap<String, Sex>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        let mut race: HashMap<String, RaceEthnicity> =
            RaceEthnicity::ALL.iter().map(|r| (r.label().to_string(), *r)).collect();
        race.insert("Hispanic".into(), RaceEthnicity::Latino);
        race.insert("Other".into(), RaceEthnicity::Others);
        let mut sex: HashMap<String, Sex> = Sex::ALL.iter().map(|s| (s.label().to_string(), *s)).collect();
        sex.insert("F".into(), Sex::Female);
        sex.insert("M".into(), Sex::Male);
        CategoryMap { race, sex }
    }
}

impl CategoryMap {
    pub fn insert_race(&mut self, name: &str, value: RaceEthnicity) {
        self.race.insert(name.to_string(), value);
    }

    /// Unmapped race names fall back to `Others` with a warning; an unmapped
    /// sex is a data error.
    pub fn harmonize(&self, r: &RawDemographic) -> Result<DemographicRecord> {
        let race_ethnicity = match self.race.get(&r.race_ethnicity) {
            Some(v) => *v,
            None => {
                warn!(
                    "unmapped race_ethnicity '{}' for patient '{}' treated as Others",
                    r.race_ethnicity, r.patient_id
                );
                RaceEthnicity::Others
            }
        };
        let sex = *self
            .sex
            .get(&r.sex)
            .ok_or_else(|| Error::data(format!("unknown sex '{}' for patient '{}'", r.sex, r.patient_id)))?;
        Ok(DemographicRecord {
            patient_id: r.patient_id.clone(),
            race_ethnicity,
            sex,
            age_years: r.age_years,
        })
    }
}

/// One site's cohort with its per-patient demographics and per-image
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    pub site: String,
    pub cohort: LabeledCohort,
    pub demographics: Vec<RawDemographic>,
    pub features: Vec<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedSites {
    pub cohort: LabeledCohort,
    pub demographics: Vec<DemographicRecord>,
    pub features: Vec<FeatureVector>,
}

/// `{site}-{id}` unless the id already carries that prefix.
pub fn site_prefixed(site: &str, id: &str) -> String {
    let prefix = format!("{site}-");
    if id.starts_with(&prefix) {
        id.to_string()
    } else {
        prefix + id
    }
}

/// Concatenate two sites. Patient and image ids are site-prefixed so the
/// namespaces stay disjoint; row `site` tags are kept as given.
pub fn merge_sites(a: &SiteData, b: &SiteData, map: &CategoryMap) -> Result<MergedSites> {
    let mut rows: Vec<CohortRow> = Vec::with_capacity(a.cohort.len() + b.cohort.len());
    let mut demographics = Vec::new();
    let mut features = Vec::new();
    let mut images = HashSet::new();
    let mut patients = HashSet::new();
    for s in [a, b] {
        for r in s.cohort.rows() {
            let image_id = site_prefixed(&s.site, &r.image_id);
            if !images.insert(image_id.clone()) {
                return Err(Error::data(format!("image id collision after prefixing: '{image_id}'")));
            }
            rows.push(CohortRow {
                patient_id: site_prefixed(&s.site, &r.patient_id),
                image_id,
                label: r.label,
                site: r.site.clone(),
            });
        }
        for d in &s.demographics {
            let mut rec = map.harmonize(d)?;
            rec.patient_id = site_prefixed(&s.site, &d.patient_id);
            if !patients.insert(rec.patient_id.clone()) {
                return Err(Error::data(format!("patient id collision after prefixing: '{}'", rec.patient_id)));
            }
            demographics.push(rec);
        }
        for f in &s.features {
            features.push(FeatureVector::new(site_prefixed(&s.site, &f.image_id), f.values.clone())?);
        }
    }
    Ok(MergedSites {
        cohort: LabeledCohort::new(rows)?,
        demographics,
        features,
    })
}

/// Race one-hot (Asian, Black, Latino, Others, White), age-band one-hot,
/// then sex (Male = 1).
pub fn encode_demographics(r: &DemographicRecord) -> [f64; DEMOGRAPHIC_DIM] {
    let mut v = [0.0; DEMOGRAPHIC_DIM];
    v[r.race_ethnicity as usize] = 1.0;
    v[5 + r.age_band() as usize] = 1.0;
    v[9] = if r.sex == Sex::Male { 1.0 } else { 0.0 };
    v
}

fn feature_index(features: &[FeatureVector]) -> Result<HashMap<&str, &FeatureVector>> {
    let mut idx = HashMap::with_capacity(features.len());
    for f in features {
        if idx.insert(f.image_id.as_str(), f).is_some() {
            return Err(Error::data(format!("duplicate feature row for image '{}'", f.image_id)));
        }
    }
    Ok(idx)
}

/// Image features in cohort row order (`n x 64`).
pub fn feature_matrix(features: &[FeatureVector], cohort: &LabeledCohort) -> Result<FeatureMatrix> {
    let idx = feature_index(features)?;
    let mut data = Vec::with_capacity(cohort.len() * FEATURE_DIM);
    for r in cohort.rows() {
        let f = idx
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::data(format!("no feature row for image '{}'", r.image_id)))?;
        data.extend_from_slice(&f.values);
    }
    FeatureMatrix::new(cohort.len(), FEATURE_DIM, data)
}

/// Image features followed by the patient's encoded demographics
/// (`n x 74`), in cohort row order.
pub fn multimodal_join(
    features: &[FeatureVector],
    demo: &[DemographicRecord],
    cohort: &LabeledCohort,
) -> Result<FeatureMatrix> {
    let idx = feature_index(features)?;
    let by_patient: HashMap<&str, &DemographicRecord> = demo.iter().map(|d| (d.patient_id.as_str(), d)).collect();
    let mut data = Vec::with_capacity(cohort.len() * MULTIMODAL_DIM);
    for r in cohort.rows() {
        let f = idx
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::data(format!("no feature row for image '{}'", r.image_id)))?;
        let d = by_patient
            .get(r.patient_id.as_str())
            .ok_or_else(|| Error::data(format!("no demographics for patient '{}'", r.patient_id)))?;
        data.extend_from_slice(&f.values);
        data.extend_from_slice(&encode_demographics(d));
    }
    FeatureMatrix::new(cohort.len(), MULTIMODAL_DIM, data)
}
