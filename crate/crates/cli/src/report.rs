use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        }
    }
}

/// What the observed value is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "relation", content = "value", rename_all = "snake_case")]
pub enum Expected {
    Equal(f64),
    AtMost(f64),
    AtLeast(f64),
}

impl Expected {
    pub fn holds(self, observed: f64, tolerance: f64) -> bool {
        match self {
            Expected::Equal(v) => (observed - v).abs() <= tolerance,
            Expected::AtMost(v) => observed <= v + tolerance,
            Expected::AtLeast(v) => observed >= v - tolerance,
        }
    }

    fn text(self) -> String {
        match self {
            Expected::Equal(v) => format!("= {}", num(v)),
            Expected::AtMost(v) => format!("<= {}", num(v)),
            Expected::AtLeast(v) => format!(">= {}", num(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    pub scenario: String,
    pub check: String,
    pub status: Status,
    pub observed: Option<f64>,
    pub expected: Option<Expected>,
    pub tolerance: Option<f64>,
    pub std_error: Option<f64>,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    #[value(name = "tabular_text")]
    TabularText,
    #[value(name = "structured_records")]
    StructuredRecords,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::TabularText => "tsv",
            Format::StructuredRecords => "jsonl",
        }
    }
}

const COLUMNS: [&str; 8] = ["scenario", "check", "status", "observed", "expected", "tolerance", "std_error", "message"];

fn num(x: f64) -> String {
    format!("{x:.6e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "-".into())
}

/// Renders records; byte-identical for identical records.
pub fn render(records: &[ReportRecord], format: Format, timings: bool) -> String {
    let mut out = String::new();
    match format {
        Format::TabularText => {
            out.push_str(&COLUMNS.join("\t"));
            if timings {
                out.push_str("\twall_time");
            }
            out.push('\n');
            for r in records {
                let cells = [
                    r.scenario.clone(),
                    r.check.clone(),
                    r.status.as_str().into(),
                    opt(r.observed),
                    r.expected.map(Expected::text).unwrap_or_else(|| "-".into()),
                    opt(r.tolerance),
                    opt(r.std_error),
                    r.message.replace(['\t', '\n'], " "),
                ];
                out.push_str(&cells.join("\t"));
                if timings {
                    let _ = write!(out, "\t{}", opt(r.wall_time));
                }
                out.push('\n');
            }
        }
        Format::StructuredRecords => {
            let mut fields: Vec<&str> = COLUMNS.to_vec();
            if timings {
                fields.push("wall_time");
            }
            let header = serde_json::json!({ "format": "ampere-report", "version": 1, "fields": fields });
            out.push_str(&header.to_string());
            out.push('\n');
            for r in records {
                let mut r = r.clone();
                if !timings {
                    r.wall_time = None;
                }
                out.push_str(&serde_json::to_string(&r).expect("records serialize"));
                out.push('\n');
            }
        }
    }
    out
}

/// Writes one report file per scenario into `dir`.
pub fn emit_report(dir: &Path, scenario: &str, records: &[ReportRecord], format: Format, timings: bool) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{scenario}.{}", format.extension()));
    std::fs::write(path, render(records, format, timings))
}
