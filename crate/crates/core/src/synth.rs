//! Seeded synthetic cohorts: demographics, diagnoses consistent with the
//! default label map, correlated base-model scores with a controllable skill
//! per model, and 64-d feature tables.
//!
//! Every patient and image draws from its own derived stream, so output is
//! identical whether generated serially or in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    AgeBand, CohortRow, DemographicRecord, DiagnosisRecord, FeatureVector, IcdCode, LabeledCohort, PredictionSet,
    RaceEthnicity, Sex, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::fairness::Axis;
use crate::rng::{derive_seed, Rng};

const STREAM_PATIENTS: u64 = 1;
const STREAM_PREDICTIONS: u64 = 2;
const STREAM_FEATURES: u64 = 3;

const COPD_ICD10: [&str; 5] = ["J44.9", "J44.1", "J43.9", "J41.0", "J42"];
const COPD_ICD9: [&str; 3] = ["491.21", "492.8", "496"];
const OTHER_ICD10: [&str; 5] = ["I10", "E11.9", "J18.9", "N18.3", "I50.9"];
const OTHER_ICD9: [&str; 5] = ["401.9", "250.00", "486", "428.0", "585.3"];

/// Youngest generated age; CXR cohorts are adult.
const MIN_AGE: u32 = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub skill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOffset {
    pub axis: Axis,
    pub group: String,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    /// Asian, Black, Latino, Others, White.
    pub race: [f64; 5],
    /// Female, Male.
    pub sex: [f64; 2],
    /// 0-40, 40-60, 60-80, 80+.
    pub age: [f64; 4],
}

impl Proportions {
    /// MIMIC-CXR cohort shares.
    pub fn mimic() -> Self {
        Proportions {
            race: [0.037, 0.169, 0.063, 0.089, 0.642],
            sex: [0.52, 0.48],
            age: [0.156, 0.311, 0.369, 0.164],
        }
    }

    /// Emory-CXR cohort shares.
    pub fn emory() -> Self {
        Proportions {
            race: [0.035, 0.462, 0.017, 0.055, 0.431],
            sex: [0.522, 0.478],
            age: [0.202, 0.292, 0.386, 0.12],
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("race", &self.race[..]), ("sex", &self.sex[..]), ("age", &self.age[..])] {
            if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} proportions must be non-negative and sum to 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub site: String,
    pub n_patients: usize,
    /// Inclusive range; equal bounds give a fixed count.
    pub images_per_patient: (usize, usize),
    pub prevalence: f64,
    pub models: Vec<ModelSpec>,
    /// Weight of the noise shared by all models, in [0, 1].
    pub shared_noise: f64,
    pub proportions: Proportions,
    pub group_offsets: Vec<GroupOffset>,
    /// Label signal carried by feature component 0.
    pub feature_skill: f64,
    pub ventilation_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            site: "mimic".into(),
            n_patients: 2000,
            images_per_patient: (1, 6),
            prevalence: 0.2618,
            models: [("DenseNet121", 0.45), ("ResNet50V2", 0.42), ("MobileNetV2", 0.47), ("Xception", 0.5)]
                .iter()
                .map(|(id, skill)| ModelSpec { id: id.to_string(), skill: *skill })
                .collect(),
            shared_noise: 0.5,
            proportions: Proportions::mimic(),
            group_offsets: Vec::new(),
            feature_skill: 1.0,
            ventilation_rate: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Second-site defaults with Emory proportions.
    pub fn emory(seed: u64) -> Self {
        SynthConfig {
            site: "emory".into(),
            proportions: Proportions::emory(),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.images_per_patient;
        if self.n_patients == 0 || lo == 0 || lo > hi {
            return Err(Error::Config("need at least one patient and 1 <= images_min <= images_max".into()));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config("prevalence must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_noise) || !(0.0..=1.0).contains(&self.ventilation_rate) {
            return Err(Error::Config("shared_noise and ventilation_rate must lie in [0, 1]".into()));
        }
        if self.models.iter().any(|m| !(m.skill.is_finite() && m.skill >= 0.0)) {
            return Err(Error::Config("model skills must be finite and non-negative".into()));
        }
        if !self.feature_skill.is_finite() {
            return Err(Error::Config("feature_skill must be finite".into()));
        }
        for o in &self.group_offsets {
            if !o.axis.groups().contains(&o.group.as_str()) || !o.offset.is_finite() {
                return Err(Error::Config(format!("invalid offset for {} group '{}'", o.axis, o.group)));
            }
        }
        crate::data::check_id("site", &self.site).map_err(|e| Error::Config(e.to_string()))?;
        self.proportions.validate()
    }

    fn skill_offset(&self, d: &DemographicRecord) -> f64 {
        self.group_offsets
            .iter()
            .filter(|o| o.axis.group_of(d) == o.group)
            .map(|o| o.offset)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub cohort: LabeledCohort,
    pub demographics: Vec<DemographicRecord>,
    pub diagnoses: Vec<DiagnosisRecord>,
}

struct Patient {
    demo: DemographicRecord,
    diagnoses: Vec<DiagnosisRecord>,
    label: bool,
}

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn patient(cfg: &SynthConfig, index: usize) -> Patient {
    let mut rng = Rng::derived(derive_seed(cfg.seed, STREAM_PATIENTS), index as u64);
    let p = &cfg.proportions;
    let race = RaceEthnicity::ALL[rng.categorical(&p.race)];
    let sex = Sex::ALL[rng.categorical(&p.sex)];
    let (lo, hi) = AgeBand::ALL[rng.categorical(&p.age)].range();
    let lo = lo.max(MIN_AGE);
    let age_years = lo + rng.below((hi - lo) as usize) as u32;
    let label = rng.bernoulli(cfg.prevalence);
    let (imin, imax) = cfg.images_per_patient;
    let n_images = imin + rng.below(imax - imin + 1);
    let patient_id = format!("{}-p{index:06}", cfg.site);
    let diagnoses = (0..n_images)
        .map(|k| {
            let icd10 = rng.bernoulli(0.6);
            let version = if icd10 { 10 } else { 9 };
            let (copd, other): (&[&str], &[&str]) =
                if icd10 { (&COPD_ICD10, &OTHER_ICD10) } else { (&COPD_ICD9, &OTHER_ICD9) };
            let mut codes = Vec::new();
            if label {
                codes.push(pick(&mut rng, copd));
            }
            for _ in 0..rng.below(3) {
                let c = pick(&mut rng, other);
                if !codes.contains(&c) {
                    codes.push(c);
                }
            }
            DiagnosisRecord {
                patient_id: patient_id.clone(),
                image_id: format!("{patient_id}-{k}"),
                icd_codes: codes.into_iter().map(|c| IcdCode { version, code: c.to_string() }).collect(),
                on_mechanical_ventilation: rng.bernoulli(cfg.ventilation_rate),
                site: cfg.site.clone(),
            }
        })
        .collect();
    Patient {
        demo: DemographicRecord {
            patient_id,
            race_ethnicity: race,
            sex,
            age_years,
        },
        diagnoses,
        label,
    }
}

/// Patients with demographics drawn from the configured shares, a
/// patient-level Bernoulli label and 1..n images whose diagnosis codes
/// carry a COPD code exactly when the label is positive.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let patients: Vec<Patient> = (0..cfg.n_patients).into_par_iter().map(|i| patient(cfg, i)).collect();
    let mut rows = Vec::new();
    let mut demographics = Vec::with_capacity(patients.len());
    let mut diagnoses = Vec::new();
    for p in patients {
        for d in &p.diagnoses {
            rows.push(CohortRow {
                patient_id: d.patient_id.clone(),
                image_id: d.image_id.clone(),
                label: p.label,
                site: d.site.clone(),
            });
        }
        diagnoses.extend(p.diagnoses);
        demographics.push(p.demo);
    }
    Ok(SynthData {
        cohort: LabeledCohort::new(rows)?,
        demographics,
        diagnoses,
    })
}

fn logistic(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(1e-15, 1.0 - 1e-15)
}

fn image_stream(cfg: &SynthConfig, stream: u64, index: usize) -> Rng {
    Rng::derived(derive_seed(cfg.seed, stream), index as u64)
}

/// One prediction set per configured model over `cohort`, in row order.
///
/// For image `i` with label `y`, model `m` scores
/// `logistic(a (2y - 1) + sqrt(rho) e_i + sqrt(1 - rho) e_im)`, where `a` is
/// the model skill plus any group offsets of the patient, `e_i` is shared
/// by all models and `e_im` is model-specific, all standard normal. The
/// expected AUC is `Phi(sqrt(2) a)`.
pub fn generate_base_predictions(
    cohort: &LabeledCohort,
    demographics: &[DemographicRecord],
    cfg: &SynthConfig,
) -> Result<Vec<PredictionSet>> {
    cfg.validate()?;
    let by_patient: std::collections::HashMap<&str, &DemographicRecord> =
        demographics.iter().map(|d| (d.patient_id.as_str(), d)).collect();
    let offsets = cohort
        .rows()
        .iter()
        .map(|r| {
            if cfg.group_offsets.is_empty() {
                return Ok(0.0);
            }
            by_patient
                .get(r.patient_id.as_str())
                .map(|d| cfg.skill_offset(d))
                .ok_or_else(|| Error::data(format!("no demographics for patient '{}'", r.patient_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ws = cfg.shared_noise.sqrt();
    let wm = (1.0 - cfg.shared_noise).sqrt();
    let per_image: Vec<Vec<f64>> = cohort
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = image_stream(cfg, STREAM_PREDICTIONS, i);
            let shared = rng.gaussian();
            let sign = if r.label { 1.0 } else { -1.0 };
            cfg.models
                .iter()
                .map(|m| logistic((m.skill + offsets[i]) * sign + ws * shared + wm * rng.gaussian()))
                .collect()
        })
        .collect();
    let ids = cohort.image_ids();
    cfg.models
        .iter()
        .enumerate()
        .map(|(k, m)| PredictionSet::new(m.id.clone(), ids.clone(), per_image.iter().map(|s| s[k]).collect()))
        .collect()
}

/// Component 0 is `feature_skill (2y - 1) + noise`; the other 63 are noise.
pub fn generate_features(cohort: &LabeledCohort, cfg: &SynthConfig) -> Result<Vec<FeatureVector>> {
    cfg.validate()?;
    cohort
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = image_stream(cfg, STREAM_FEATURES, i);
            let mut values: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gaussian()).collect();
            values[0] += cfg.feature_skill * if r.label { 1.0 } else { -1.0 };
            FeatureVector::new(r.image_id.clone(), values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{assign_labels, LabelMap};
    use crate::metrics::roc_auc;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { n_patients: 300, seed, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_cohort(&small(5)).unwrap();
        let b = generate_cohort(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_cohort(&small(6)).unwrap());
        let pa = generate_base_predictions(&a.cohort, &a.demographics, &small(5)).unwrap();
        let pb = generate_base_predictions(&b.cohort, &b.demographics, &small(5)).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn labels_round_trip_through_diagnoses() {
        let d = generate_cohort(&small(7)).unwrap();
        let relabeled = assign_labels(&d.diagnoses, &LabelMap::default()).unwrap();
        assert_eq!(relabeled.labels(), d.cohort.labels());
    }

    #[test]
    fn prevalence_concentrates() {
        let cfg = SynthConfig { n_patients: 10_000, images_per_patient: (1, 1), prevalence: 0.5, seed: 3, ..Default::default() };
        let d = generate_cohort(&cfg).unwrap();
        let prev = d.cohort.positives() as f64 / 10_000.0;
        assert!((prev - 0.5).abs() < 0.02, "{prev}");
    }

    fn auc_for(skill: f64, shared: f64, n: usize, seed: u64) -> f64 {
        let cfg = SynthConfig {
            n_patients: n,
            images_per_patient: (1, 1),
            prevalence: 0.5,
            shared_noise: shared,
            models: vec![ModelSpec { id: "m".into(), skill }],
            seed,
            ..Default::default()
        };
        let d = generate_cohort(&cfg).unwrap();
        let p = generate_base_predictions(&d.cohort, &d.demographics, &cfg).unwrap();
        roc_auc(p[0].scores(), &d.cohort.labels()).unwrap()
    }

    #[test]
    fn skill_controls_auc() {
        let null = auc_for(0.0, 0.5, 2000, 1);
        assert!((0.45..=0.55).contains(&null), "{null}");
        assert!(auc_for(5.0, 0.0, 2000, 2) > 0.95);
        // Phi(sqrt(2) * 0.5) = 0.760.
        let mid = auc_for(0.5, 0.5, 5000, 3);
        assert!((mid - 0.760).abs() < 0.02, "{mid}");
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let cfg = SynthConfig {
            n_patients: 200,
            models: vec![ModelSpec { id: "m".into(), skill: 40.0 }],
            ..Default::default()
        };
        let d = generate_cohort(&cfg).unwrap();
        let p = generate_base_predictions(&d.cohort, &d.demographics, &cfg).unwrap();
        assert!(p[0].scores().iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn features_shape() {
        let cfg = small(9);
        let d = generate_cohort(&cfg).unwrap();
        let f = generate_features(&d.cohort, &cfg).unwrap();
        assert_eq!(f.len(), d.cohort.len());
        assert!(f.iter().all(|v| v.values.len() == 64 && v.values.iter().all(|x| x.is_finite())));
        let col0: Vec<f64> = f.iter().map(|v| v.values[0]).collect();
        assert!(roc_auc(&col0, &d.cohort.labels()).unwrap() > 0.8);
    }

    #[test]
    fn demographic_shares_follow_config() {
        let cfg = SynthConfig { n_patients: 20_000, images_per_patient: (1, 1), ..Default::default() };
        let d = generate_cohort(&cfg).unwrap();
        let white = d.demographics.iter().filter(|r| r.race_ethnicity == RaceEthnicity::White).count();
        assert!((white as f64 / 20_000.0 - 0.642).abs() < 0.015);
        assert!(d.demographics.iter().all(|r| r.age_years >= MIN_AGE && r.age_years < 100));
    }

    #[test]
    fn invalid_configs() {
        let bad = SynthConfig { prevalence: 1.0, ..Default::default() };
        assert!(matches!(generate_cohort(&bad), Err(Error::Config(_))));
        let mut bad = SynthConfig::default();
        bad.proportions.sex = [0.5, 0.6];
        assert!(generate_cohort(&bad).is_err());
        let bad = SynthConfig {
            group_offsets: vec![GroupOffset { axis: Axis::Sex, group: "Other".into(), offset: 0.1 }],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
