//! Bit-exact readers and writers for the CSV schemas and binary PGM.
//!
//! CSV dialect: comma separated, `\n` line endings, no quoting. Data rows
//! are numbered from 1 (the header is row 0) in error messages.

use std::fmt::Write as _;

use crate::data::{
    check_id, CohortRow, DemographicRecord, DiagnosisRecord, FeatureVector, GrayImage, IcdCode,
    LabeledCohort, PredictionSet, Split, FEATURE_DIM,
};
use crate::error::{Error, Result};

pub const PREDICTIONS_HEADER: &[&str] = &["image_id", "score"];
pub const COHORT_HEADER: &[&str] = &["patient_id", "image_id", "label", "site"];
pub const DEMOGRAPHICS_HEADER: &[&str] = &["patient_id", "race_ethnicity", "sex", "age_years"];
pub const DIAGNOSES_HEADER: &[&str] = &[
    "patient_id",
    "image_id",
    "icd_version",
    "icd_codes",
    "ventilated",
    "site",
];
pub const SPLITS_HEADER: &[&str] = &["patient_id", "split"];

fn features_header() -> Vec<String> {
    std::iter::once("image_id".to_string())
        .chain((0..FEATURE_DIM).map(|i| format!("f{i}")))
        .collect()
}

/// Header-checked rows of a CSV table, with their 1-based row numbers.
fn read_table<S: AsRef<str>>(bytes: &[u8], expected: &[S]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.byte_records();
    let header = match records.next() {
        None => return Err(Error::Schema("missing header".into())),
        Some(r) => r.map_err(|e| Error::Schema(e.to_string()))?,
    };
    let matches = header.len() == expected.len()
        && header.iter().zip(expected).all(|(h, e)| h == e.as_ref().as_bytes());
    if !matches {
        let want: Vec<&str> = expected.iter().map(AsRef::as_ref).collect();
        return Err(Error::Schema(format!("expected header `{}`", want.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(format!("{e}, row {row}")))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != expected.len() {
            return Err(Error::data(format!(
                "expected {} fields, got {}, row {row}",
                expected.len(),
                rec.len()
            )));
        }
        let fields = rec
            .iter()
            .map(|f| {
                std::str::from_utf8(f)
                    .map(str::to_owned)
                    .map_err(|_| Error::data(format!("invalid utf-8, row {row}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((row, fields));
    }
    Ok(rows)
}

fn with_row<T>(row: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Data(m) if !m.contains(", row ") => Error::Data(format!("{m}, row {row}")),
        other => other,
    })
}

fn header_line<S: AsRef<str>>(cols: &[S]) -> String {
    let mut s = cols.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

pub fn parse_predictions_csv(bytes: &[u8], model_id: &str) -> Result<PredictionSet> {
    let rows = read_table(bytes, PREDICTIONS_HEADER)?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut scores = Vec::with_capacity(rows.len());
    for (row, f) in rows {
        let score: f64 = f[1]
            .parse()
            .ok()
            .filter(|s: &f64| !s.is_nan())
            .ok_or_else(|| Error::data(format!("non-numeric score, row {row}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::data(format!("score out of range, row {row}")));
        }
        with_row(row, check_id("image_id", &f[0]))?;
        ids.push(f[0].clone());
        scores.push(score);
    }
    PredictionSet::new(model_id, ids, scores)
}

pub fn write_predictions_csv(p: &PredictionSet) -> Vec<u8> {
    let mut out = header_line(PREDICTIONS_HEADER);
    for (id, s) in p.iter() {
        let _ = writeln!(out, "{id},{s}");
    }
    out.into_bytes()
}

fn parse_flag(s: &str, what: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::data(format!("{what} must be 0 or 1, got '{s}'"))),
    }
}

pub fn parse_cohort_csv(bytes: &[u8]) -> Result<LabeledCohort> {
    let rows = read_table(bytes, COHORT_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            with_row(
                row,
                parse_flag(&f[2], "label").map(|label| CohortRow {
                    patient_id: f[0].clone(),
                    image_id: f[1].clone(),
                    label,
                    site: f[3].clone(),
                }),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledCohort::new(rows)
}

pub fn write_cohort_csv(c: &LabeledCohort) -> Vec<u8> {
    let mut out = header_line(COHORT_HEADER);
    for r in c.rows() {
        let _ = writeln!(out, "{},{},{},{}", r.patient_id, r.image_id, u8::from(r.label), r.site);
    }
    out.into_bytes()
}

/// Demographic row before category harmonization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDemographic {
    pub patient_id: String,
    pub race_ethnicity: String,
    pub sex: String,
    pub age_years: u32,
}

pub fn parse_raw_demographics_csv(bytes: &[u8]) -> Result<Vec<RawDemographic>> {
    let mut seen = std::collections::HashSet::new();
    read_table(bytes, DEMOGRAPHICS_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            with_row(row, check_id("patient_id", &f[0]))?;
            if !seen.insert(f[0].clone()) {
                return Err(Error::data(format!("duplicate patient_id '{}', row {row}", f[0])));
            }
            let age_years: u32 = f[3]
                .parse()
                .map_err(|_| Error::data(format!("invalid age_years '{}', row {row}", f[3])))?;
            if age_years >= DemographicRecord::MAX_AGE {
                return Err(Error::data(format!("age_years {age_years} out of range, row {row}")));
            }
            Ok(RawDemographic {
                patient_id: f[0].clone(),
                race_ethnicity: f[1].clone(),
                sex: f[2].clone(),
                age_years,
            })
        })
        .collect()
}

/// Strict parse: categories must be exactly the canonical labels.
pub fn parse_demographics_csv(bytes: &[u8]) -> Result<Vec<DemographicRecord>> {
    parse_raw_demographics_csv(bytes)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            with_row(
                i + 1,
                (|| {
                    Ok(DemographicRecord {
                        race_ethnicity: r.race_ethnicity.parse()?,
                        sex: r.sex.parse()?,
                        age_years: r.age_years,
                        patient_id: r.patient_id,
                    })
                })(),
            )
        })
        .collect()
}

pub fn write_demographics_csv(records: &[DemographicRecord]) -> Vec<u8> {
    let mut out = header_line(DEMOGRAPHICS_HEADER);
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.patient_id,
            r.race_ethnicity.label(),
            r.sex.label(),
            r.age_years
        );
    }
    out.into_bytes()
}

/// Diagnosis rows. `icd_version` applies to every code on the row and may be
/// empty when the row has no codes; it is validated at labelling time.
pub fn parse_diagnoses_csv(bytes: &[u8]) -> Result<Vec<DiagnosisRecord>> {
    read_table(bytes, DIAGNOSES_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            with_row(row, (|| {
                check_id("patient_id", &f[0])?;
                check_id("image_id", &f[1])?;
                check_id("site", &f[5])?;
                let codes: Vec<&str> = f[3].split(';').filter(|c| !c.is_empty()).collect();
                let version = if codes.is_empty() && f[2].is_empty() {
                    0
                } else {
                    f[2].parse::<u8>()
                        .map_err(|_| Error::data(format!("invalid icd_version '{}'", f[2])))?
                };
                Ok(DiagnosisRecord {
                    patient_id: f[0].clone(),
                    image_id: f[1].clone(),
                    icd_codes: codes
                        .into_iter()
                        .map(|c| IcdCode {
                            version,
                            code: c.to_string(),
                        })
                        .collect(),
                    on_mechanical_ventilation: parse_flag(&f[4], "ventilated")?,
                    site: f[5].clone(),
                })
            })())
        })
        .collect()
}

pub fn write_diagnoses_csv(records: &[DiagnosisRecord]) -> Result<Vec<u8>> {
    let mut out = header_line(DIAGNOSES_HEADER);
    for r in records {
        let version = match r.icd_codes.first() {
            None => String::new(),
            Some(first) => {
                if r.icd_codes.iter().any(|c| c.version != first.version) {
                    return Err(Error::argument(format!(
                        "image '{}' mixes ICD versions on one row",
                        r.image_id
                    )));
                }
                first.version.to_string()
            }
        };
        let codes: Vec<&str> = r.icd_codes.iter().map(|c| c.code.as_str()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.patient_id,
            r.image_id,
            version,
            codes.join(";"),
            u8::from(r.on_mechanical_ventilation),
            r.site
        );
    }
    Ok(out.into_bytes())
}

pub fn parse_features_csv(bytes: &[u8]) -> Result<Vec<FeatureVector>> {
    let header = features_header();
    let mut seen = std::collections::HashSet::new();
    read_table(bytes, &header)?
        .into_iter()
        .map(|(row, f)| {
            with_row(row, (|| {
                check_id("image_id", &f[0])?;
                if !seen.insert(f[0].clone()) {
                    return Err(Error::data(format!("duplicate image_id '{}'", f[0])));
                }
                let values = f[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| Error::data(format!("non-numeric feature '{v}'"))))
                    .collect::<Result<Vec<_>>>()?;
                FeatureVector::new(f[0].clone(), values)
            })())
        })
        .collect()
}

pub fn write_features_csv(features: &[FeatureVector]) -> Vec<u8> {
    let mut out = header_line(&features_header());
    for fv in features {
        out.push_str(&fv.image_id);
        for v in &fv.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_splits_csv(bytes: &[u8]) -> Result<Vec<(String, Split)>> {
    let mut seen = std::collections::HashSet::new();
    read_table(bytes, SPLITS_HEADER)?
        .into_iter()
        .map(|(row, f)| {
            with_row(row, (|| {
                check_id("patient_id", &f[0])?;
                if !seen.insert(f[0].clone()) {
                    return Err(Error::data(format!("duplicate patient_id '{}'", f[0])));
                }
                Ok((f[0].clone(), f[1].parse()?))
            })())
        })
        .collect()
}

pub fn write_splits_csv(assignment: &[(String, Split)]) -> Vec<u8> {
    let mut out = header_line(SPLITS_HEADER);
    for (p, s) in assignment {
        let _ = writeln!(out, "{p},{s}");
    }
    out.into_bytes()
}

/// Contingency table: one row per line, non-negative integer counts, no header.
pub fn parse_contingency_csv(bytes: &[u8]) -> Result<Vec<Vec<u64>>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::data("invalid utf-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::data(format!("invalid count '{c}', row {}", i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Binary PGM (`P5`) with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("unsupported magic".into()));
    }
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        // Whitespace and comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::Format("malformed header".into()));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed header".into()))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("malformed header".into())),
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("image too large".into()))?;
    let payload = bytes
        .get(pos..)
        .filter(|p| p.len() >= count)
        .ok_or_else(|| Error::Format("truncated payload".into()))?;
    GrayImage::new(width, height, payload[..count].to_vec())
}

pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}
