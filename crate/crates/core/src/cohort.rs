//! Cohort construction: ICD-based labelling, ventilation exclusion,
//! leakage-free patient-level splits, class weights and the chi-square
//! independence test.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{CohortRow, DiagnosisRecord, LabeledCohort, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default split proportions (train, valid, test).
pub const DEFAULT_RATIOS: [f64; 3] = [0.64, 0.16, 0.20];

/// COPD code prefixes per ICD version. Prefixes are stored without dots
/// and upper-cased.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    icd9: BTreeSet<String>,
    icd10: BTreeSet<String>,
}

fn normalize_code(code: &str) -> String {
    code.chars()
        .filter(|c| *c != '.')
        .flat_map(char::to_uppercase)
        .collect()
}

impl Default for LabelMap {
    /// Stand-in list: ICD-10 J41-J44, ICD-9 491, 492, 496. Operators are
    /// expected to override it with their site's code list.
    fn default() -> Self {
        let mut map = LabelMap {
            icd9: BTreeSet::new(),
            icd10: BTreeSet::new(),
        };
        for p in ["J41", "J42", "J43", "J44"] {
            map.icd10.insert(p.to_string());
        }
        for p in ["491", "492", "496"] {
            map.icd9.insert(p.to_string());
        }
        map
    }
}

impl LabelMap {
    pub fn empty() -> Self {
        LabelMap {
            icd9: BTreeSet::new(),
            icd10: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, version: u8, prefix: &str) -> Result<()> {
        let p = normalize_code(prefix);
        if p.is_empty() {
            return Err(Error::Config("empty code prefix".into()));
        }
        let set = match version {
            9 => &mut self.icd9,
            10 => &mut self.icd10,
            v => return Err(Error::Config(format!("unknown ICD version {v}"))),
        };
        if !set.insert(p) {
            return Err(Error::Config(format!("duplicate prefix '{prefix}' for icd{version}")));
        }
        Ok(())
    }

    /// Parse `icd10 J44` style lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = LabelMap::empty();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(kind), Some(prefix), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("line {}: expected `icdN PREFIX`", i + 1)));
            };
            let version = match kind {
                "icd9" => 9,
                "icd10" => 10,
                _ => return Err(Error::Config(format!("line {}: unknown entry '{kind}'", i + 1))),
            };
            map.add(version, prefix)?;
        }
        Ok(map)
    }

    pub fn to_config(&self) -> String {
        let mut out = String::new();
        for p in &self.icd10 {
            out.push_str(&format!("icd10 {p}\n"));
        }
        for p in &self.icd9 {
            out.push_str(&format!("icd9 {p}\n"));
        }
        out
    }

    fn prefixes(&self, version: u8) -> Result<&BTreeSet<String>> {
        match version {
            9 => Ok(&self.icd9),
            10 => Ok(&self.icd10),
            v => Err(Error::data(format!("unknown ICD version {v}"))),
        }
    }

    pub fn matches(&self, version: u8, code: &str) -> Result<bool> {
        let code = normalize_code(code);
        Ok(self.prefixes(version)?.iter().any(|p| code.starts_with(p.as_str())))
    }
}

/// Label is 1 iff any code on the image matches a prefix of its ICD version.
pub fn assign_labels(diagnoses: &[DiagnosisRecord], map: &LabelMap) -> Result<LabeledCohort> {
    let rows = diagnoses
        .iter()
        .map(|d| {
            let mut label = false;
            for c in &d.icd_codes {
                label |= map.matches(c.version, &c.code).map_err(|e| match e {
                    Error::Data(m) => Error::data(format!("{m} for image '{}'", d.image_id)),
                    other => other,
                })?;
            }
            Ok(CohortRow {
                patient_id: d.patient_id.clone(),
                image_id: d.image_id.clone(),
                label,
                site: d.site.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledCohort::new(rows)
}

#[derive(Debug, Clone)]
pub struct VentilationFilter {
    pub cohort: LabeledCohort,
    pub excluded: usize,
    pub warning: Option<String>,
}

/// Drop images taken while the patient was mechanically ventilated.
pub fn exclude_ventilated(
    cohort: &LabeledCohort,
    diagnoses: &[DiagnosisRecord],
) -> Result<VentilationFilter> {
    let flags: HashMap<&str, bool> = diagnoses
        .iter()
        .map(|d| (d.image_id.as_str(), d.on_mechanical_ventilation))
        .collect();
    let mut missing = None;
    let kept = cohort.filter(|r| match flags.get(r.image_id.as_str()) {
        Some(v) => !v,
        None => {
            missing.get_or_insert_with(|| r.image_id.clone());
            false
        }
    });
    if let Some(id) = missing {
        return Err(Error::data(format!("no ventilation flag for image '{id}'")));
    }
    let excluded = cohort.len() - kept.len();
    let warning = kept.is_empty().then(|| {
        let msg = "ventilation exclusion removed every image".to_string();
        log::warn!("{msg}");
        msg
    });
    Ok(VentilationFilter {
        cohort: kept,
        excluded,
        warning,
    })
}

/// Patient to split mapping, sorted by patient id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    assignment: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn from_pairs(mut pairs: Vec<(String, Split)>, seed: u64, ratios: [f64; 3]) -> Result<Self> {
        pairs.sort();
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::data("patient assigned to more than one split"));
        }
        Ok(SplitAssignment {
            seed,
            ratios,
            assignment: pairs,
        })
    }

    pub fn pairs(&self) -> &[(String, Split)] {
        &self.assignment
    }

    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.assignment
            .binary_search_by(|(p, _)| p.as_str().cmp(patient_id))
            .ok()
            .map(|i| self.assignment[i].1)
    }

    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for (_, s) in &self.assignment {
            sizes[*s as usize] += 1;
        }
        sizes
    }

    /// Images of `cohort` whose patient falls in `split`, order preserved.
    pub fn select(&self, cohort: &LabeledCohort, split: Split) -> Result<LabeledCohort> {
        let mut unknown = None;
        let out = cohort.filter(|r| match self.split_of(&r.patient_id) {
            Some(s) => s == split,
            None => {
                unknown.get_or_insert_with(|| r.patient_id.clone());
                false
            }
        });
        match unknown {
            Some(p) => Err(Error::data(format!("patient '{p}' has no split assignment"))),
            None => Ok(out),
        }
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::argument("split ratios must be positive"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::argument("split ratios must sum to 1"));
    }
    Ok(())
}

/// Cut points for `n` shuffled patients: `floor(r_train n)` and
/// `floor((r_train + r_valid) n)`, each with 1e-9 slack against
/// representation error; the remainder goes to test.
pub fn cut_points(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    let a = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let b = ((ratios[0] + ratios[1]) * n as f64 + 1e-9).floor() as usize;
    (a.min(n), b.min(n))
}

/// Leakage-free split: patients are sorted, shuffled with the seeded stream
/// and cut; every image follows its patient.
pub fn split_by_patient(cohort: &LabeledCohort, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    check_ratios(ratios)?;
    let mut patients = cohort.patients();
    if patients.len() < 3 {
        return Err(Error::argument(format!(
            "need at least 3 patients to split, got {}",
            patients.len()
        )));
    }
    patients.sort();
    Rng::new(seed).shuffle(&mut patients);
    let (a, b) = cut_points(patients.len(), ratios);
    let pairs = patients
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = if i < a {
                Split::Train
            } else if i < b {
                Split::Valid
            } else {
                Split::Test
            };
            (p, s)
        })
        .collect();
    SplitAssignment::from_pairs(pairs, seed, ratios)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub fn from_counts(n_pos: usize, n_neg: usize) -> Result<Self> {
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::Computation("undefined class weight".into()));
        }
        let n = (n_pos + n_neg) as f64;
        Ok(ClassWeights {
            w_pos: n / (2.0 * n_pos as f64),
            w_neg: n / (2.0 * n_neg as f64),
        })
    }

    pub fn from_labels(labels: &[bool]) -> Result<Self> {
        let pos = labels.iter().filter(|l| **l).count();
        Self::from_counts(pos, labels.len() - pos)
    }

    pub fn uniform() -> Self {
        ClassWeights { w_pos: 1.0, w_neg: 1.0 }
    }

    pub fn weight(&self, label: bool) -> f64 {
        if label {
            self.w_pos
        } else {
            self.w_neg
        }
    }
}

/// `w = N / (2 N_class)` for each class.
pub fn class_weights(cohort: &LabeledCohort) -> Result<ClassWeights> {
    ClassWeights::from_labels(&cohort.labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(dof as f64 / 2.0, statistic / 2.0).clamp(0.0, 1.0)
}

/// Pearson chi-square test of independence on an r x c contingency table.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<TestResult> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 {
        return Err(Error::argument("contingency table needs at least 2 rows and 2 columns"));
    }
    if table.iter().any(|row| row.len() != c) {
        return Err(Error::argument("contingency table rows differ in length"));
    }
    let row_tot: Vec<f64> = table.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..c)
        .map(|j| table.iter().map(|row| row[j]).sum::<u64>() as f64)
        .collect();
    if row_tot.contains(&0.0) || col_tot.contains(&0.0) {
        return Err(Error::argument("contingency table has an all-zero row or column"));
    }
    let total: f64 = row_tot.iter().sum();
    let mut statistic = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_tot[i] * col_tot[j] / total;
            statistic += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let dof = (r - 1) * (c - 1);
    Ok(TestResult {
        statistic,
        dof,
        p_value: chi_square_sf(statistic, dof),
    })
}

/// Patient-level disjointness check used by tests and the pipeline.
pub fn image_sets_disjoint(parts: &[&LabeledCohort]) -> bool {
    let mut seen = HashSet::new();
    parts
        .iter()
        .flat_map(|c| c.rows())
        .all(|r| seen.insert(r.image_id.as_str()))
}
