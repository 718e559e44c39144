//! Subgroup AUC auditing along race-ethnicity, sex and age, with per-axis
//! mean/SD summaries and stars on the most disparate strategy.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{AgeBand, DemographicRecord, LabeledCohort, PredictionSet, RaceEthnicity, Sex};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, stable_mean};

pub const DEFAULT_MIN_GROUP_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    RaceEthnicity,
    Sex,
    Age,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::RaceEthnicity, Axis::Sex, Axis::Age];

    pub fn key(self) -> &'static str {
        match self {
            Axis::RaceEthnicity => "race_ethnicity",
            Axis::Sex => "sex",
            Axis::Age => "age",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Axis::RaceEthnicity => "Race-ethnicity",
            Axis::Sex => "Sex",
            Axis::Age => "Age",
        }
    }

    /// Group labels in reporting order.
    pub fn groups(self) -> Vec<&'static str> {
        match self {
            Axis::RaceEthnicity => RaceEthnicity::ALL.iter().map(|r| r.label()).collect(),
            Axis::Sex => Sex::ALL.iter().map(|s| s.label()).collect(),
            Axis::Age => AgeBand::ALL.iter().map(|a| a.label()).collect(),
        }
    }

    pub fn group_of(self, d: &DemographicRecord) -> &'static str {
        match self {
            Axis::RaceEthnicity => d.race_ethnicity.label(),
            Axis::Sex => d.sex.label(),
            Axis::Age => d.age_band().label(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| Error::argument(format!("unknown fairness axis '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub auc: f64,
    pub n_rows: usize,
    pub small_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub group: String,
    pub n_rows: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub axis: Axis,
    pub groups: Vec<GroupResult>,
    pub excluded: Vec<ExcludedGroup>,
    pub total_rows: usize,
}

/// Per-group AUC along `axis`. Groups holding one class only are excluded
/// with reason "single-class"; groups below `min_group_size` rows are kept
/// and flagged.
pub fn subgroup_metrics(
    preds: &PredictionSet,
    cohort: &LabeledCohort,
    demo: &[DemographicRecord],
    axis: Axis,
    min_group_size: usize,
) -> Result<SubgroupReport> {
    let labels = cohort.labels_for(preds)?;
    let by_patient: HashMap<&str, &DemographicRecord> = demo.iter().map(|d| (d.patient_id.as_str(), d)).collect();
    let mut buckets: HashMap<&'static str, (Vec<f64>, Vec<bool>)> = HashMap::new();
    for ((row, &score), &label) in cohort.rows().iter().zip(preds.scores()).zip(&labels) {
        let d = by_patient
            .get(row.patient_id.as_str())
            .ok_or_else(|| Error::data(format!("no demographics for patient '{}'", row.patient_id)))?;
        let b = buckets.entry(axis.group_of(d)).or_default();
        b.0.push(score);
        b.1.push(label);
    }
    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    for name in axis.groups() {
        let Some((scores, labels)) = buckets.get(name) else {
            continue;
        };
        let pos = labels.iter().filter(|l| **l).count();
        if pos == 0 || pos == labels.len() {
            excluded.push(ExcludedGroup {
                group: name.to_string(),
                n_rows: labels.len(),
                reason: "single-class".into(),
            });
            continue;
        }
        let small_sample = labels.len() < min_group_size;
        if small_sample {
            warn!("{} group '{name}' has only {} rows", axis.key(), labels.len());
        }
        groups.push(GroupResult {
            group: name.to_string(),
            auc: roc_auc(scores, labels)?,
            n_rows: labels.len(),
            small_sample,
        });
    }
    Ok(SubgroupReport {
        axis,
        groups,
        excluded,
        total_rows: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub mean: f64,
    pub sd: f64,
}

/// Unweighted mean and population SD of the included group AUCs.
pub fn axis_summary(r: &SubgroupReport) -> Result<AxisSummary> {
    if r.groups.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no {} group has both classes",
            r.axis.key()
        )));
    }
    let aucs: Vec<f64> = r.groups.iter().map(|g| g.auc).collect();
    let mean = stable_mean(&aucs);
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / aucs.len() as f64;
    Ok(AxisSummary { mean, sd: var.sqrt() })
}

/// SD as printed, in thousandths.
fn reported(sd: f64) -> i64 {
    format!("{sd:.3}").parse::<f64>().map_or(i64::MIN, |v| (v * 1000.0).round() as i64)
}

/// Star every entry whose SD equals the column maximum at three decimals.
pub fn star_flag(column: &[(String, f64)]) -> Vec<bool> {
    let Some(max) = column.iter().map(|(_, sd)| reported(*sd)).max() else {
        return Vec::new();
    };
    column.iter().map(|(_, sd)| reported(*sd) == max).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessCell {
    pub mean: f64,
    pub sd: f64,
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub strategy: String,
    /// One entry per table axis; `None` when no group had both classes.
    pub cells: Vec<Option<FairnessCell>>,
    pub reports: Vec<SubgroupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessTable {
    pub axes: Vec<Axis>,
    pub rows: Vec<FairnessRow>,
}

impl FairnessTable {
    /// `reports[i]` holds one report per axis, in `axes` order.
    pub fn build(axes: Vec<Axis>, reports: Vec<(String, Vec<SubgroupReport>)>) -> Result<Self> {
        let mut rows = Vec::with_capacity(reports.len());
        for (strategy, reps) in reports {
            if reps.len() != axes.len() || reps.iter().zip(&axes).any(|(r, a)| r.axis != *a) {
                return Err(Error::argument(format!("reports for '{strategy}' do not match the axes")));
            }
            let cells = reps
                .iter()
                .map(|r| {
                    axis_summary(r).ok().map(|s| FairnessCell {
                        mean: s.mean,
                        sd: s.sd,
                        star: false,
                    })
                })
                .collect();
            rows.push(FairnessRow { strategy, cells, reports: reps });
        }
        for a in 0..axes.len() {
            let present: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].cells[a].is_some()).collect();
            let column: Vec<(String, f64)> = present
                .iter()
                .map(|&r| (rows[r].strategy.clone(), rows[r].cells[a].as_ref().map_or(0.0, |c| c.sd)))
                .collect();
            for (&r, star) in present.iter().zip(star_flag(&column)) {
                if let Some(c) = rows[r].cells[a].as_mut() {
                    c.star = star;
                }
            }
        }
        Ok(FairnessTable { axes, rows })
    }

    /// Cells read `mean [sd]`, with a trailing star on the column maximum.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Strategy |");
        for a in &self.axes {
            out.push_str(&format!(" {} |", a.title()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.axes.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |", r.strategy));
            for c in &r.cells {
                match c {
                    Some(c) => {
                        out.push_str(&format!(" {:.3} [{:.3}]", c.mean, c.sd));
                        if c.star {
                            out.push_str(" ★");
                        }
                        out.push_str(" |");
                    }
                    None => out.push_str(" n/a |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,axis,mean,sd,star,groups,excluded\n");
        for r in &self.rows {
            for ((a, c), rep) in self.axes.iter().zip(&r.cells).zip(&r.reports) {
                let (mean, sd, star) = match c {
                    Some(c) => (c.mean.to_string(), c.sd.to_string(), c.star.to_string()),
                    None => (String::new(), String::new(), "false".into()),
                };
                out.push_str(&format!(
                    "{},{},{mean},{sd},{star},{},{}\n",
                    r.strategy,
                    a.key(),
                    rep.groups.len(),
                    rep.excluded.len()
                ));
            }
        }
        out
    }
}

/// Subgroup reports for each axis, in order.
pub fn audit(
    preds: &PredictionSet,
    cohort: &LabeledCohort,
    demo: &[DemographicRecord],
    axes: &[Axis],
    min_group_size: usize,
) -> Result<Vec<SubgroupReport>> {
    axes.iter()
        .map(|&a| subgroup_metrics(preds, cohort, demo, a, min_group_size))
        .collect()
}
