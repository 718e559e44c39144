//! Strategy-by-metric tables rendered as CSV, JSON or markdown.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Metric, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Json, Format::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Markdown => "md",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Markdown => "markdown",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            _ => Err(Error::argument(format!("unknown format '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn push(&mut self, strategy: impl Into<String>, report: MetricReport) {
        self.rows.push(MetricRow {
            strategy: strategy.into(),
            report,
        });
    }

    pub fn get(&self, strategy: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.strategy == strategy).map(|r| &r.report)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One line per strategy and metric, full precision.
fn to_csv(t: &MetricTable) -> String {
    let mut out = String::from("strategy,metric,point,lo,hi,full_sample,n_resamples\n");
    for r in &t.rows {
        for m in Metric::ALL {
            let e = r.report.get(m);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.strategy,
                m.key(),
                e.point,
                e.lo,
                e.hi,
                e.full_sample,
                e.n_resamples
            ));
        }
    }
    out
}

/// Cells read `point [lo-hi]` at two decimals.
fn to_markdown(t: &MetricTable) -> String {
    let mut out = String::from("| Strategy |");
    for m in Metric::ALL {
        out.push_str(&format!(" {} |", m.title()));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(Metric::ALL.len()));
    out.push('\n');
    for r in &t.rows {
        out.push_str(&format!("| {} |", r.strategy));
        for m in Metric::ALL {
            let e = r.report.get(m);
            out.push_str(&format!(" {:.2} [{:.2}-{:.2}] |", e.point, e.lo, e.hi));
        }
        out.push('\n');
    }
    out
}

pub fn write_tables(t: &MetricTable, format: Format) -> String {
    match format {
        Format::Csv => to_csv(t),
        Format::Json => serde_json::to_string_pretty(t).expect("table serializes") + "\n",
        Format::Markdown => to_markdown(t),
    }
}
