//! Domain types shared by every stage of the pipeline.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of an image-derived feature vector.
pub const FEATURE_DIM: usize = 64;

/// Identifiers are restricted so CSV files never need quoting.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

pub(crate) fn check_id(kind: &str, id: &str) -> Result<()> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(Error::data(format!("invalid {kind} '{id}'")))
    }
}

/// One model's scores over a cohort, in row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    model_id: String,
    image_ids: Vec<String>,
    scores: Vec<f64>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, image_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if image_ids.len() != scores.len() {
            return Err(Error::argument(format!(
                "{} image ids but {} scores",
                image_ids.len(),
                scores.len()
            )));
        }
        let mut seen = HashSet::with_capacity(image_ids.len());
        for (i, (id, s)) in image_ids.iter().zip(&scores).enumerate() {
            check_id("image_id", id)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::data(format!("duplicate image_id '{id}', row {}", i + 1)));
            }
            if !s.is_finite() || !(0.0..=1.0).contains(s) {
                return Err(Error::data(format!("score out of range, row {}", i + 1)));
            }
        }
        Ok(PredictionSet {
            model_id: model_id.into(),
            image_ids,
            scores,
        })
    }

    pub fn from_rows(model_id: impl Into<String>, rows: Vec<(String, f64)>) -> Result<Self> {
        let (ids, scores) = rows.into_iter().unzip();
        Self::new(model_id, ids, scores)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.image_ids.iter().map(String::as_str).zip(self.scores.iter().copied())
    }

    pub fn renamed(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    /// Aligned sets share the exact same image id sequence.
    pub fn is_aligned(&self, other: &PredictionSet) -> bool {
        self.image_ids == other.image_ids
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<PredictionSet> {
        let index: HashMap<&str, usize> = self
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut scores = Vec::with_capacity(ids.len());
        for id in ids {
            let i = index.get(id.as_str()).ok_or_else(|| {
                Error::Alignment(format!("image '{id}' missing from predictions of '{}'", self.model_id))
            })?;
            scores.push(self.scores[*i]);
        }
        PredictionSet::new(self.model_id.clone(), ids.to_vec(), scores)
    }
}

pub(crate) fn ensure_aligned(sets: &[PredictionSet]) -> Result<()> {
    if let Some(first) = sets.first() {
        for s in &sets[1..] {
            if !first.is_aligned(s) {
                return Err(Error::Alignment(format!(
                    "predictions of '{}' and '{}' cover different image sequences",
                    first.model_id(),
                    s.model_id()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: String,
    pub image_id: String,
    pub label: bool,
    pub site: String,
}

/// Per-image rows carrying the binary COPD label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCohort {
    rows: Vec<CohortRow>,
}

impl LabeledCohort {
    pub fn new(rows: Vec<CohortRow>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            check_id("patient_id", &r.patient_id)?;
            check_id("image_id", &r.image_id)?;
            check_id("site", &r.site)?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate image_id '{}', row {}",
                    r.image_id,
                    i + 1
                )));
            }
        }
        Ok(LabeledCohort { rows })
    }

    pub fn rows(&self) -> &[CohortRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<CohortRow> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.image_id.clone()).collect()
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|r| r.label).count()
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.patient_id.as_str()))
            .map(|r| r.patient_id.clone())
            .collect()
    }

    pub fn filter(&self, mut keep: impl FnMut(&CohortRow) -> bool) -> LabeledCohort {
        LabeledCohort {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Labels for an aligned prediction set (identical image sequence).
    pub fn labels_for(&self, preds: &PredictionSet) -> Result<Vec<bool>> {
        let same = self.rows.len() == preds.len()
            && self.rows.iter().zip(preds.image_ids()).all(|(r, id)| &r.image_id == id);
        if !same {
            return Err(Error::Alignment(format!(
                "predictions of '{}' are not aligned with the cohort",
                preds.model_id()
            )));
        }
        Ok(self.labels())
    }

    /// The cohort reordered to follow `image_ids`.
    pub fn select(&self, image_ids: &[String]) -> Result<LabeledCohort> {
        let index: HashMap<&str, &CohortRow> =
            self.rows.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let rows = image_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Alignment(format!("image '{id}' has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledCohort { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcdCode {
    pub version: u8,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub patient_id: String,
    pub image_id: String,
    pub icd_codes: Vec<IcdCode>,
    pub on_mechanical_ventilation: bool,
    pub site: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceEthnicity {
    Asian,
    Black,
    Latino,
    Others,
    White,
}

impl RaceEthnicity {
    pub const ALL: [RaceEthnicity; 5] = [
        RaceEthnicity::Asian,
        RaceEthnicity::Black,
        RaceEthnicity::Latino,
        RaceEthnicity::Others,
        RaceEthnicity::White,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RaceEthnicity::Asian => "Asian",
            RaceEthnicity::Black => "Black",
            RaceEthnicity::Latino => "Latino",
            RaceEthnicity::Others => "Others",
            RaceEthnicity::White => "White",
        }
    }
}

impl FromStr for RaceEthnicity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RaceEthnicity::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| Error::data(format!("unknown race_ethnicity '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn label(self) -> &'static str {
        match self {
            Sex::Female => "Female",
            Sex::Male => "Male",
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Female" => Ok(Sex::Female),
            "Male" => Ok(Sex::Male),
            _ => Err(Error::data(format!("unknown sex '{s}'"))),
        }
    }
}

/// Age bins `[0,40)`, `[40,60)`, `[60,80)`, `[80,inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    Under40,
    From40To60,
    From60To80,
    Over80,
}

impl AgeBand {
    pub const ALL: [AgeBand; 4] = [
        AgeBand::Under40,
        AgeBand::From40To60,
        AgeBand::From60To80,
        AgeBand::Over80,
    ];

    pub fn of(age_years: u32) -> AgeBand {
        match age_years {
            0..=39 => AgeBand::Under40,
            40..=59 => AgeBand::From40To60,
            60..=79 => AgeBand::From60To80,
            _ => AgeBand::Over80,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBand::Under40 => "0-40",
            AgeBand::From40To60 => "40-60",
            AgeBand::From60To80 => "60-80",
            AgeBand::Over80 => "80+",
        }
    }

    /// Inclusive lower and exclusive upper bound; the last band is capped at 100.
    pub fn range(self) -> (u32, u32) {
        match self {
            AgeBand::Under40 => (0, 40),
            AgeBand::From40To60 => (40, 60),
            AgeBand::From60To80 => (60, 80),
            AgeBand::Over80 => (80, 100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicRecord {
    pub patient_id: String,
    pub race_ethnicity: RaceEthnicity,
    pub sex: Sex,
    pub age_years: u32,
}

impl DemographicRecord {
    pub const MAX_AGE: u32 = 150;

    pub fn age_band(&self) -> AgeBand {
        AgeBand::of(self.age_years)
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument("image dimensions must be positive"));
        }
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::argument(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width.saturating_mul(height),
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(image_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if values.len() != FEATURE_DIM {
            return Err(Error::data(format!(
                "feature vector for '{image_id}' has {} components, expected {FEATURE_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite feature for '{image_id}'")));
        }
        Ok(FeatureVector { image_id, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::data(format!("unknown split '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_charset() {
        assert!(is_valid_id("p0001_i2.dcm-x"));
        assert!(!is_valid_id(""));
        assert!(!is_valid_id("a,b"));
        assert!(!is_valid_id("a b"));
    }

    #[test]
    fn prediction_set_rejects_bad_rows() {
        let ids = vec!["a".to_string(), "b".to_string()];
        assert!(PredictionSet::new("m", ids.clone(), vec![0.5, 1.0]).is_ok());
        assert!(PredictionSet::new("m", ids.clone(), vec![0.5, 1.5]).is_err());
        assert!(PredictionSet::new("m", ids, vec![0.5, f64::NAN]).is_err());
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(PredictionSet::new("m", dup, vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn select_reorders_and_reports_missing() {
        let p = PredictionSet::new("m", vec!["a".into(), "b".into()], vec![0.1, 0.9]).unwrap();
        let s = p.select(&["b".into(), "a".into()]).unwrap();
        assert_eq!(s.scores(), &[0.9, 0.1]);
        assert!(matches!(p.select(&["c".into()]), Err(Error::Alignment(_))));
    }

    #[test]
    fn age_bands_boundaries() {
        assert_eq!(AgeBand::of(39), AgeBand::Under40);
        assert_eq!(AgeBand::of(40), AgeBand::From40To60);
        assert_eq!(AgeBand::of(79), AgeBand::From60To80);
        assert_eq!(AgeBand::of(80), AgeBand::Over80);
    }

    #[test]
    fn gray_image_pixel_count() {
        assert!(GrayImage::new(2, 2, vec![0; 4]).is_ok());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn feature_vector_width() {
        assert!(FeatureVector::new("a", vec![0.0; 64]).is_ok());
        assert!(FeatureVector::new("a", vec![0.0; 63]).is_err());
    }
}
