//! Panel dataset representation and delimited-text ingestion.
//!
//! Input is long format, one row per subject-time, with a header line. The
//! required columns are `id`, `time` and `y`; every other column is a
//! covariate that the [`ModelConfig`] splits into the fixed-effect design
//! `x1` and the state-varying design `x2`. Time indices must be contiguous
//! from 1 — a subject observed at times 1..S and never again, so the
//! missingness pattern is monotone dropout.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// One subject's observed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPanel {
    pub subject_id: String,
    /// Binary outcomes y_1..y_S.
    pub responses: Vec<u8>,
    /// Per-time fixed-effect covariates, each of length p1.
    pub x1: Vec<Vec<f64>>,
    /// Per-time state-varying covariates, each of length p2.
    pub x2: Vec<Vec<f64>>,
    /// Dropout time S: the number of observed occasions.
    pub dropout_time: usize,
}

impl SubjectPanel {
    pub fn len(&self) -> usize {
        self.dropout_time
    }

    pub fn is_empty(&self) -> bool {
        self.dropout_time == 0
    }
}

/// An immutable collection of subject panels sharing one design layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub panels: Vec<SubjectPanel>,
    /// Panel horizon T (maximum scheduled time).
    pub horizon: usize,
    pub p1: usize,
    pub p2: usize,
    /// Covariate column names backing x1, in order.
    pub fixed_names: Vec<String>,
    /// Covariate column names backing x2 (excluding the intercept), in order.
    pub state_names: Vec<String>,
    /// Whether x2 carries a leading constant-1 column.
    pub random_intercept: bool,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.panels.len()
    }

    /// Total number of observed subject-times, Σ_i S_i.
    pub fn n_obs(&self) -> usize {
        self.panels.iter().map(|p| p.dropout_time).sum()
    }

    /// Number of subjects with each dropout time 1..=T.
    pub fn dropout_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.horizon];
        for p in &self.panels {
            counts[p.dropout_time - 1] += 1;
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        if self.panels.is_empty() {
            return Err(Error::InvalidConfig("dataset has no subjects".into()));
        }
        for p in &self.panels {
            if p.dropout_time == 0 || p.dropout_time > self.horizon {
                return Err(Error::InvalidConfig(format!(
                    "subject `{}`: dropout time {} outside 1..={}",
                    p.subject_id, p.dropout_time, self.horizon
                )));
            }
            if p.responses.len() != p.dropout_time
                || p.x1.len() != p.dropout_time
                || p.x2.len() != p.dropout_time
            {
                return Err(Error::InvalidConfig(format!(
                    "subject `{}`: ragged panel",
                    p.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Dropout time from a monotone missingness-indicator sequence:
/// `S = T - Σ_t R_t`.
pub fn derive_dropout(indicators: &[u8]) -> Result<usize> {
    let mut seen_missing = false;
    for &r in indicators {
        match r {
            0 if seen_missing => return Err(Error::NonMonotoneIndicators),
            0 => {}
            1 => seen_missing = true,
            _ => return Err(Error::NonMonotoneIndicators),
        }
    }
    let missing: usize = indicators.iter().map(|&r| r as usize).sum();
    Ok(indicators.len() - missing)
}

/// Split one row's covariates into `(x1, x2)` according to the config.
///
/// `x2` gets the intercept column first when `random_intercept` is set.
pub fn split_design(
    covariates: &HashMap<String, f64>,
    config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x1 = Vec::with_capacity(config.p1());
    for name in &config.fixed_columns {
        let v = covariates
            .get(name)
            .ok_or_else(|| Error::UnknownColumn(name.clone()))?;
        x1.push(*v);
    }
    let mut x2 = Vec::with_capacity(config.p2());
    if config.random_intercept {
        x2.push(1.0);
    }
    for name in &config.state_columns {
        let v = covariates
            .get(name)
            .ok_or_else(|| Error::UnknownColumn(name.clone()))?;
        x2.push(*v);
    }
    Ok((x1, x2))
}

/// Load a long-format delimited file (comma or tab, auto-detected from the
/// header) into a [`Dataset`]. Panels come back sorted by subject id.
pub fn load_dataset(path: &Path, config: &ModelConfig) -> Result<Dataset> {
    config.validate()?;
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string(), config)
}

/// [`load_dataset`] on in-memory text; `source` only labels error messages.
pub fn parse_dataset(text: &str, source: &str, config: &ModelConfig) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(source, 1, "empty file"))?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let columns: Vec<&str> = header.split(delim).map(str::trim).collect();

    let col_index = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col_index("id")?;
    let time_col = col_index("time")?;
    let y_col = col_index("y")?;
    for name in config.fixed_columns.iter().chain(&config.state_columns) {
        col_index(name).map_err(|_| Error::MissingColumn(name.clone()))?;
    }

    // Rows per subject, in first-appearance order.
    struct Row {
        time: usize,
        y: u8,
        covariates: HashMap<String, f64>,
    }
    let mut subjects: Vec<(String, Vec<Row>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (lineno, raw) in lines {
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                source,
                lineno + 1,
                &format!("expected {} fields, got {}", columns.len(), fields.len()),
            ));
        }
        let id = fields[id_col].to_string();
        let time: usize = fields[time_col]
            .parse()
            .map_err(|_| parse_err(source, lineno + 1, "`time` must be a positive integer"))?;
        if time == 0 {
            return Err(parse_err(source, lineno + 1, "`time` must start at 1"));
        }
        let y = match fields[y_col] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::NonBinaryResponse {
                    subject: id,
                    time,
                    value: other.to_string(),
                })
            }
        };
        let mut covariates = HashMap::new();
        for (c, field) in columns.iter().zip(&fields) {
            if *c == "id" || *c == "time" || *c == "y" {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                parse_err(
                    source,
                    lineno + 1,
                    &format!("column `{c}`: cannot parse `{field}` as a number"),
                )
            })?;
            covariates.insert((*c).to_string(), v);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            subjects.push((id.clone(), Vec::new()));
            subjects.len() - 1
        });
        subjects[slot].1.push(Row {
            time,
            y,
            covariates,
        });
    }

    let mut panels = Vec::with_capacity(subjects.len());
    let mut max_time = 0usize;
    for (id, mut rows) in subjects {
        rows.sort_by_key(|r| r.time);
        for (k, row) in rows.iter().enumerate() {
            if row.time == k {
                return Err(Error::DuplicateTime {
                    subject: id,
                    time: row.time,
                });
            }
            if row.time != k + 1 {
                return Err(Error::GappedTimes { subject: id });
            }
        }
        let dropout_time = rows.len();
        max_time = max_time.max(dropout_time);
        let mut responses = Vec::with_capacity(dropout_time);
        let mut x1 = Vec::with_capacity(dropout_time);
        let mut x2 = Vec::with_capacity(dropout_time);
        for row in &rows {
            let (a, b) = split_design(&row.covariates, config)?;
            responses.push(row.y);
            x1.push(a);
            x2.push(b);
        }
        panels.push(SubjectPanel {
            subject_id: id,
            responses,
            x1,
            x2,
            dropout_time,
        });
    }
    panels.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let horizon = match config.horizon {
        Some(t) => {
            if max_time > t {
                return Err(Error::InvalidConfig(format!(
                    "observed time {max_time} exceeds declared horizon {t}"
                )));
            }
            t
        }
        None => max_time,
    };
    let dataset = Dataset {
        panels,
        horizon,
        p1: config.p1(),
        p2: config.p2(),
        fixed_names: config.fixed_columns.clone(),
        state_names: config.state_columns.clone(),
        random_intercept: config.random_intercept,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Render a dataset back to delimited text (the same layout `load_dataset`
/// reads). Covariate columns are reconstructed from the stored design split;
/// the synthetic intercept column is skipped.
pub fn render_dataset(data: &Dataset, delim: char) -> String {
    let mut out = String::new();
    let _ = write!(out, "id{delim}time{delim}y");
    for name in data.fixed_names.iter().chain(&data.state_names) {
        let _ = write!(out, "{delim}{name}");
    }
    out.push('\n');
    let skip = usize::from(data.random_intercept);
    for p in &data.panels {
        for t in 0..p.dropout_time {
            let _ = write!(out, "{}{delim}{}{delim}{}", p.subject_id, t + 1, p.responses[t]);
            for v in &p.x1[t] {
                let _ = write!(out, "{delim}{v}");
            }
            for v in &p.x2[t][skip..] {
                let _ = write!(out, "{delim}{v}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, render_dataset(data, ','))?;
    Ok(())
}

fn parse_err(path: &str, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.to_string(),
    }
}
