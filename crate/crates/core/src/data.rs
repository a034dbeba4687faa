//! Aggregate arm-level data: types, validation and CSV/JSON I/O.
//!
//! Each arm is summarised by `(n, y, z, m, tau)`:
//! patients, patients with at least one event of interest, early
//! discontinuations, fatal events and follow-up duration.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column header of the CSV format, in order.
pub const CSV_COLUMNS: [&str; 9] = [
    "trial_id",
    "indication",
    "arm_role",
    "historical",
    "n",
    "y",
    "z",
    "m",
    "tau",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmRole {
    Control,
    Treatment,
}

impl ArmRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ArmRole::Control => "control",
            ArmRole::Treatment => "treatment",
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            ArmRole::Control => ArmRole::Treatment,
            ArmRole::Treatment => ArmRole::Control,
        }
    }
}

impl fmt::Display for ArmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm_role: ArmRole,
    pub n: u64,
    pub y: u64,
    pub z: u64,
    pub m: u64,
    pub tau: f64,
}

impl ArmRecord {
    pub fn new(arm_role: ArmRole, n: u64, y: u64, z: u64, m: u64, tau: f64) -> Self {
        Self {
            arm_role,
            n,
            y,
            z,
            m,
            tau,
        }
    }

    /// Rule violations of this arm in isolation, as short rule strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n < 1 {
            out.push("n < 1".to_string());
        }
        if self.y > self.n {
            out.push("y > n".to_string());
        }
        if self.z > self.n {
            out.push("z > n".to_string());
        }
        if self.m > self.y.min(self.z) {
            out.push("m > min(y,z)".to_string());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            out.push("tau not a positive finite number".to_string());
        }
        // Bound on the unobserved category-3 count; implied by the rules above.
        if self.m <= self.y.min(self.z) {
            let lower = (self.y + self.z).saturating_sub(self.m + self.n);
            let upper = (self.y - self.m).min(self.z - self.m);
            if lower > upper {
                out.push("infeasible: max(0, y+z-m-n) > min(y-m, z-m)".to_string());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indication: Option<String>,
    pub arms: Vec<ArmRecord>,
    #[serde(default)]
    pub historical: bool,
}

impl TrialRecord {
    pub fn arm(&self, role: ArmRole) -> Option<&ArmRecord> {
        self.arms.iter().find(|a| a.arm_role == role)
    }

    pub fn control(&self) -> Option<&ArmRecord> {
        self.arm(ArmRole::Control)
    }

    pub fn treatment(&self) -> Option<&ArmRecord> {
        self.arm(ArmRole::Treatment)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trials: Vec<TrialRecord>,
    pub time_unit: String,
    #[serde(default)]
    pub provenance: String,
}

/// One failed rule, located by trial and (optionally) arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub trial_id: Option<String>,
    pub arm: Option<ArmRole>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.trial_id, self.arm) {
            (Some(t), Some(a)) => write!(f, "trial {t}, {a} arm: {}", self.rule),
            (Some(t), None) => write!(f, "trial {t}: {}", self.rule),
            _ => write!(f, "dataset: {}", self.rule),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guess the format from a file name; anything not ending in `.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("no header")]
    NoHeader,
    #[error("malformed header at line {line}: expected `{expected}`, found `{found}`")]
    MalformedHeader {
        line: u64,
        expected: String,
        found: String,
    },
    #[error("line {line}, column `{column}`: {message}")]
    Field {
        line: u64,
        column: &'static str,
        message: String,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Dataset {
    /// Check every arm, trial and dataset rule. Never fails; an empty list
    /// means the dataset is consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for trial in &self.trials {
            let tid = Some(trial.trial_id.clone());
            if !seen.insert(trial.trial_id.as_str()) {
                out.push(Violation {
                    trial_id: tid.clone(),
                    arm: None,
                    rule: "duplicate trial_id".into(),
                });
            }
            for arm in &trial.arms {
                for rule in arm.violations() {
                    out.push(Violation {
                        trial_id: tid.clone(),
                        arm: Some(arm.arm_role),
                        rule,
                    });
                }
            }
            let controls = trial
                .arms
                .iter()
                .filter(|a| a.arm_role == ArmRole::Control)
                .count();
            let treatments = trial.arms.len() - controls;
            if trial.historical {
                if controls != 1 || treatments != 0 {
                    out.push(Violation {
                        trial_id: tid.clone(),
                        arm: None,
                        rule: format!(
                            "historical trial must have exactly one control arm and no treatment arm (found {controls} control, {treatments} treatment)"
                        ),
                    });
                }
            } else if controls != 1 || treatments != 1 {
                out.push(Violation {
                    trial_id: tid.clone(),
                    arm: None,
                    rule: format!(
                        "trial must have exactly one control and one treatment arm (found {controls} control, {treatments} treatment)"
                    ),
                });
            }
        }
        if !self.trials.iter().any(|t| !t.historical) {
            out.push(Violation {
                trial_id: None,
                arm: None,
                rule: "no non-historical trial".into(),
            });
        }
        out
    }

    pub fn main_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| !t.historical)
    }

    pub fn historical_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.historical)
    }

    pub fn n_arms(&self) -> usize {
        self.trials.iter().map(|t| t.arms.len()).sum()
    }

    /// Copy keeping only the main (non-historical) trials.
    pub fn without_historical(&self) -> Dataset {
        Dataset {
            trials: self.main_trials().cloned().collect(),
            time_unit: self.time_unit.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Copy keeping only the historical trials. The result does not satisfy
    /// the dataset invariant and is only meant for historical-data fits.
    pub fn historical_only(&self) -> Dataset {
        Dataset {
            trials: self.historical_trials().cloned().collect(),
            time_unit: self.time_unit.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn parse(text: &str, format: DataFormat) -> Result<Dataset, ParseError> {
        match format {
            DataFormat::Csv => parse_csv(text),
            DataFormat::Json => Ok(serde_json::from_str(text)?),
        }
    }

    pub fn serialize(&self, format: DataFormat) -> String {
        match format {
            DataFormat::Csv => to_csv(self),
            DataFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
                s.push('\n');
                s
            }
        }
    }
}

fn escape_meta(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape_meta(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn to_csv(d: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("# time_unit={}\n", escape_meta(&d.time_unit)));
    if !d.provenance.is_empty() {
        out.push_str(&format!("# provenance={}\n", escape_meta(&d.provenance)));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for t in &d.trials {
        for a in &t.arms {
            w.write_record([
                t.trial_id.as_str(),
                t.indication.as_deref().unwrap_or(""),
                a.arm_role.as_str(),
                if t.historical { "true" } else { "false" },
                &a.n.to_string(),
                &a.y.to_string(),
                &a.z.to_string(),
                &a.m.to_string(),
                &format!("{}", a.tau),
            ])
            .expect("in-memory write");
        }
    }
    let body = w.into_inner().expect("in-memory flush");
    out.push_str(std::str::from_utf8(&body).expect("utf8 csv"));
    out
}

fn parse_count(field: &str, line: u64, column: &'static str) -> Result<u64, ParseError> {
    field.trim().parse::<u64>().map_err(|_| ParseError::Field {
        line,
        column,
        message: format!("`{field}` is not a non-negative integer count"),
    })
}

fn parse_csv(text: &str) -> Result<Dataset, ParseError> {
    let mut time_unit = String::from("unspecified");
    let mut provenance = String::new();
    let mut meta_lines = 0u64;
    let mut body_start = 0usize;
    for line in text.split_inclusive('\n') {
        let raw = line.trim_end_matches(['\n', '\r']);
        if let Some(meta) = raw.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                match k.trim() {
                    "time_unit" => time_unit = unescape_meta(v),
                    "provenance" => provenance = unescape_meta(v),
                    _ => {}
                }
            }
        } else if !raw.trim().is_empty() {
            break;
        }
        meta_lines += 1;
        body_start += line.len();
    }
    let body = &text[body_start..];
    if body.trim().is_empty() {
        return Err(ParseError::NoHeader);
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(ParseError::Row {
                line: meta_lines + 1,
                message: e.to_string(),
            })
        }
        None => return Err(ParseError::NoHeader),
    };
    let found: Vec<&str> = header.iter().collect();
    if found != CSV_COLUMNS {
        return Err(ParseError::MalformedHeader {
            line: meta_lines + 1,
            expected: CSV_COLUMNS.join(","),
            found: found.join(","),
        });
    }

    let mut trials: Vec<TrialRecord> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| ParseError::Row {
            line: meta_lines + e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = meta_lines + rec.position().map_or(0, |p| p.line());
        if rec.len() != CSV_COLUMNS.len() {
            return Err(ParseError::Row {
                line,
                message: format!("expected {} fields, found {}", CSV_COLUMNS.len(), rec.len()),
            });
        }
        let trial_id = rec[0].to_string();
        if trial_id.is_empty() {
            return Err(ParseError::Field {
                line,
                column: "trial_id",
                message: "empty trial id".into(),
            });
        }
        let indication = if rec[1].is_empty() {
            None
        } else {
            Some(rec[1].to_string())
        };
        let arm_role = match rec[2].to_ascii_lowercase().as_str() {
            "control" => ArmRole::Control,
            "treatment" => ArmRole::Treatment,
            other => {
                return Err(ParseError::Field {
                    line,
                    column: "arm_role",
                    message: format!("`{other}` is neither `control` nor `treatment`"),
                })
            }
        };
        let historical = match rec[3].to_ascii_lowercase().as_str() {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(ParseError::Field {
                    line,
                    column: "historical",
                    message: format!("`{other}` is not a boolean"),
                })
            }
        };
        let n = parse_count(&rec[4], line, "n")?;
        let y = parse_count(&rec[5], line, "y")?;
        let z = parse_count(&rec[6], line, "z")?;
        let m = parse_count(&rec[7], line, "m")?;
        let tau: f64 = rec[8].parse().map_err(|_| ParseError::Field {
            line,
            column: "tau",
            message: format!("`{}` is not a number", &rec[8]),
        })?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ParseError::Field {
                line,
                column: "tau",
                message: format!("duration must be positive and finite, got {tau}"),
            });
        }
        let arm = ArmRecord::new(arm_role, n, y, z, m, tau);
        match trials.iter_mut().find(|t| t.trial_id == trial_id) {
            Some(t) => {
                if t.historical != historical {
                    return Err(ParseError::Row {
                        line,
                        message: format!("inconsistent `historical` flag for trial {trial_id}"),
                    });
                }
                if t.indication != indication {
                    return Err(ParseError::Row {
                        line,
                        message: format!("inconsistent `indication` for trial {trial_id}"),
                    });
                }
                t.arms.push(arm);
            }
            None => trials.push(TrialRecord {
                trial_id,
                indication,
                arms: vec![arm],
                historical,
            }),
        }
    }
    Ok(Dataset {
        trials,
        time_unit,
        provenance,
    })
}

/// The nine-trial oncology example shipped with the crate (durations in months).
pub const ONCOLOGY_CSV: &str = include_str!("../data/oncology.csv");

pub fn oncology_dataset() -> Dataset {
    Dataset::parse(ONCOLOGY_CSV, DataFormat::Csv).expect("bundled oncology data parses")
}
