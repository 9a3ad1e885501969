//! Observed-data model for a target sample composed of randomized and
//! observational units, with CSV ingestion and structural validation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{CcdsError, Result};

/// One observed unit O = (Y, A, X, S) plus an optional sampling weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub y: f64,
    /// Dense treatment index into `TargetSample::treatment_levels`.
    pub arm: usize,
    /// Study indicator: true for the randomized group (S = 1).
    pub randomized: bool,
    pub x: Vec<f64>,
    pub weight: f64,
}

/// Immutable target sample. Units keep file order; treatment labels are
/// opaque strings re-indexed densely in first-appearance order.
#[derive(Debug, Clone)]
pub struct TargetSample {
    units: Vec<Unit>,
    treatment_levels: Vec<String>,
    covariate_names: Vec<String>,
    n_rct: usize,
    n_obs: usize,
}

/// Column mapping for CSV ingestion. With `covariates: None`, every column
/// other than y/a/s/w is treated as a numeric covariate.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub y: String,
    pub a: String,
    pub s: String,
    pub weight: Option<String>,
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            y: "y".into(),
            a: "a".into(),
            s: "s".into(),
            weight: Some("w".into()),
            covariates: None,
        }
    }
}

/// Severity of a validation finding. Warnings do not fail estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub code: &'static str,
    pub severity: Severity,
    pub message: String,
    pub rows: Vec<usize>,
}

/// Structural findings for a sample; empty iff the sample passes all checks.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations.iter().any(|v| v.severity == Severity::Error)
    }

    pub fn render(&self) -> String {
        self.violations
            .iter()
            .map(|v| {
                let rows = if v.rows.is_empty() {
                    String::new()
                } else if v.rows.len() <= 8 {
                    format!(" (rows {:?})", v.rows)
                } else {
                    format!(" ({} rows)", v.rows.len())
                };
                format!("[{}] {}{}", v.code, v.message, rows)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Index view of one study group with original indices retained.
#[derive(Debug, Clone)]
pub struct StudyGroup {
    pub indices: Vec<usize>,
}

impl TargetSample {
    /// Builds a sample from rows of (y, treatment label, s, x, weight).
    pub fn from_rows(
        rows: Vec<(f64, String, u8, Vec<f64>, f64)>,
        covariate_names: Vec<String>,
    ) -> Result<TargetSample> {
        if rows.is_empty() {
            return Err(CcdsError::EmptyInput("no data rows".into()));
        }
        let d = covariate_names.len();
        let mut levels: Vec<String> = Vec::new();
        let mut units = Vec::with_capacity(rows.len());
        let (mut n_rct, mut n_obs) = (0, 0);
        for (row, (y, label, s, x, weight)) in rows.into_iter().enumerate() {
            if s > 1 {
                return Err(CcdsError::Schema(format!(
                    "s value {s} outside {{0,1}} at data row {}",
                    row + 1
                )));
            }
            if x.len() != d {
                return Err(CcdsError::Parse {
                    row: row + 1,
                    message: format!("expected {d} covariates, found {}", x.len()),
                });
            }
            if weight < 0.0 {
                return Err(CcdsError::Parse {
                    row: row + 1,
                    message: format!("negative weight {weight}"),
                });
            }
            let arm = match levels.iter().position(|l| *l == label) {
                Some(i) => i,
                None => {
                    levels.push(label);
                    levels.len() - 1
                }
            };
            if s == 1 {
                n_rct += 1;
            } else {
                n_obs += 1;
            }
            units.push(Unit {
                y,
                arm,
                randomized: s == 1,
                x,
                weight,
            });
        }
        Ok(TargetSample {
            units,
            treatment_levels: levels,
            covariate_names,
            n_rct,
            n_obs,
        })
    }

    /// Reads a sample from a CSV file with a header row.
    pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TargetSample> {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| CcdsError::Schema(format!("{path:?}: {e}")))?;
        let headers: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CcdsError::Schema(format!("missing required column `{name}`")))
        };
        let iy = find(&schema.y)?;
        let ia = find(&schema.a)?;
        let is = find(&schema.s)?;
        let iw = match &schema.weight {
            Some(w) => headers.iter().position(|h| h == w),
            None => None,
        };
        let cov_idx: Vec<usize> = match &schema.covariates {
            Some(names) => names
                .iter()
                .map(|n| find(n))
                .collect::<Result<Vec<_>>>()?,
            None => (0..headers.len())
                .filter(|&i| i != iy && i != ia && i != is && Some(i) != iw)
                .collect(),
        };
        if cov_idx.is_empty() {
            return Err(CcdsError::Schema("no covariate columns".into()));
        }
        let covariate_names: Vec<String> = cov_idx.iter().map(|&i| headers[i].clone()).collect();

        let mut rows = Vec::new();
        for (ri, record) in reader.records().enumerate() {
            let row = ri + 1;
            let record = record?;
            let field = |i: usize| -> Result<&str> {
                record.get(i).map(str::trim).ok_or(CcdsError::Parse {
                    row,
                    message: format!("missing field {i}"),
                })
            };
            let parse_f64 = |i: usize, what: &str| -> Result<f64> {
                let raw = field(i)?;
                if raw.is_empty() {
                    return Err(CcdsError::Parse {
                        row,
                        message: format!("empty {what} cell"),
                    });
                }
                raw.parse::<f64>().map_err(|_| CcdsError::Parse {
                    row,
                    message: format!("cannot parse {what} value {raw:?}"),
                })
            };
            let y = parse_f64(iy, "outcome")?;
            let a = field(ia)?.to_string();
            let s_raw = field(is)?;
            let s = match s_raw {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(CcdsError::Schema(format!(
                        "s value {other:?} outside {{0,1}} at data row {row}"
                    )))
                }
            };
            let weight = match iw {
                Some(i) => parse_f64(i, "weight")?,
                None => 1.0,
            };
            let x = cov_idx
                .iter()
                .map(|&i| parse_f64(i, "covariate"))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((y, a, s, x, weight));
        }
        TargetSample::from_rows(rows, covariate_names)
    }

    /// Writes the sample back out as CSV (columns y, a, s, w, covariates),
    /// '.' decimal separator and '\n' line endings, full f64 precision.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "y,a,s,w")?;
        for name in &self.covariate_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for u in &self.units {
            write!(
                out,
                "{},{},{},{}",
                u.y,
                self.treatment_levels[u.arm],
                u.randomized as u8,
                u.weight
            )?;
            for x in &u.x {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Structural checks; all findings go in the report, none abort.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.n_rct == 0 {
            report.violations.push(Violation {
                code: "EMPTY_RCT",
                severity: Severity::Error,
                message: "empty randomized group".into(),
                rows: vec![],
            });
        }
        if self.n_obs == 0 {
            report.violations.push(Violation {
                code: "EMPTY_OBS",
                severity: Severity::Error,
                message: "empty observational group".into(),
                rows: vec![],
            });
        }
        // treatment level presence per study group
        for (k, level) in self.treatment_levels.iter().enumerate() {
            for s in [true, false] {
                if (s && self.n_rct == 0) || (!s && self.n_obs == 0) {
                    continue;
                }
                let present = self.units.iter().any(|u| u.arm == k && u.randomized == s);
                if !present {
                    let group = if s { "randomized" } else { "observational" };
                    report.violations.push(Violation {
                        code: "LEVEL_MISSING",
                        severity: Severity::Error,
                        message: format!("treatment {level} absent from {group} group"),
                        rows: vec![],
                    });
                }
            }
        }
        // non-finite values
        let mut bad_rows = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            if !u.y.is_finite() || !u.weight.is_finite() || u.x.iter().any(|v| !v.is_finite()) {
                bad_rows.push(i);
            }
        }
        if !bad_rows.is_empty() {
            report.violations.push(Violation {
                code: "NON_FINITE",
                severity: Severity::Error,
                message: "non-finite value".into(),
                rows: bad_rows,
            });
        }
        // constant covariate columns (warning)
        for j in 0..self.covariate_names.len() {
            let first = self.units[0].x[j];
            if self.units.iter().all(|u| u.x[j] == first) {
                report.violations.push(Violation {
                    code: "CONSTANT_COVARIATE",
                    severity: Severity::Warning,
                    message: format!("covariate {} is constant", self.covariate_names[j]),
                    rows: vec![],
                });
            }
        }
        report
    }

    /// Partition by study indicator; original indices retained, order preserved.
    pub fn split_by_study(&self) -> (StudyGroup, StudyGroup) {
        let mut rct = Vec::with_capacity(self.n_rct);
        let mut obs = Vec::with_capacity(self.n_obs);
        for (i, u) in self.units.iter().enumerate() {
            if u.randomized {
                rct.push(i);
            } else {
                obs.push(i);
            }
        }
        (StudyGroup { indices: rct }, StudyGroup { indices: obs })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &Unit {
        &self.units[i]
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n_rct(&self) -> usize {
        self.n_rct
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn treatment_levels(&self) -> &[String] {
        &self.treatment_levels
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.treatment_levels.iter().position(|l| l == label)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn total_weight(&self) -> f64 {
        self.units.iter().map(|u| u.weight).sum()
    }

    /// Weight totals (randomized, observational).
    pub fn study_weights(&self) -> (f64, f64) {
        let mut w1 = 0.0;
        let mut w0 = 0.0;
        for u in &self.units {
            if u.randomized {
                w1 += u.weight;
            } else {
                w0 += u.weight;
            }
        }
        (w1, w0)
    }

    /// All unit indices, in order.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.units.len()).collect()
    }

    /// Treatment levels present among `indices`, as a sorted set of arm ids.
    pub fn levels_present(&self, indices: &[usize]) -> BTreeSet<usize> {
        indices.iter().map(|&i| self.units[i].arm).collect()
    }

    /// Builds a resampled/transformed copy with the same levels and names.
    /// `pick` maps new position -> source index; `map_y` transforms outcomes.
    pub fn remap(&self, pick: &[usize], map_y: impl Fn(f64) -> f64) -> TargetSample {
        let mut n_rct = 0;
        let units: Vec<Unit> = pick
            .iter()
            .map(|&i| {
                let mut u = self.units[i].clone();
                u.y = map_y(u.y);
                if u.randomized {
                    n_rct += 1;
                }
                u
            })
            .collect();
        TargetSample {
            n_rct,
            n_obs: units.len() - n_rct,
            units,
            treatment_levels: self.treatment_levels.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn tiny_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_row_csv() {
        let f = tiny_csv("y,a,s,x1\n1.0,A,1,0.5\n2.0,B,1,-0.25\n3.0,A,0,1e-3\n4.5,B,0,2.0\n");
        let sample = TargetSample::load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(sample.n(), 4);
        assert_eq!(sample.dim(), 1);
        assert_eq!(sample.n_rct(), 2);
        assert_eq!(sample.treatment_levels(), &["A".to_string(), "B".to_string()]);
        assert_eq!(sample.unit(2).x[0], 1e-3);
    }

    #[test]
    fn rejects_s_outside_01() {
        let f = tiny_csv("y,a,s,x1\n1.0,A,1,0.5\n2.0,A,2,0.1\n");
        let err = TargetSample::load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(matches!(err, CcdsError::Schema(_)));
    }

    #[test]
    fn rejects_empty_file_and_missing_cells() {
        let f = tiny_csv("y,a,s,x1\n");
        assert!(matches!(
            TargetSample::load_csv(f.path(), &CsvSchema::default()),
            Err(CcdsError::EmptyInput(_))
        ));
        let f = tiny_csv("y,a,s,x1\n1.0,A,1,\n");
        assert!(matches!(
            TargetSample::load_csv(f.path(), &CsvSchema::default()),
            Err(CcdsError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn validate_flags_structure() {
        let rows = vec![
            (1.0, "A".to_string(), 1u8, vec![0.0], 1.0),
            (2.0, "B".to_string(), 1u8, vec![0.0], 1.0),
        ];
        let sample = TargetSample::from_rows(rows, vec!["x1".into()]).unwrap();
        let report = sample.validate();
        assert!(report.has_errors());
        let codes: Vec<_> = report.violations.iter().map(|v| v.code).collect();
        assert!(codes.contains(&"EMPTY_OBS"));
        assert!(codes.contains(&"CONSTANT_COVARIATE"));
    }

    #[test]
    fn validate_flags_level_missing_from_group() {
        let rows = vec![
            (1.0, "A".to_string(), 1u8, vec![0.1], 1.0),
            (2.0, "A".to_string(), 0u8, vec![0.2], 1.0),
            (3.0, "B".to_string(), 0u8, vec![0.3], 1.0),
        ];
        let sample = TargetSample::from_rows(rows, vec!["x1".into()]).unwrap();
        let report = sample.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| v.code == "LEVEL_MISSING" && v.message.contains("B")
                && v.message.contains("randomized")));
    }

    #[test]
    fn split_preserves_indices() {
        let rows = [1, 1, 0, 0, 1, 0]
            .iter()
            .map(|&s| (0.0, "A".to_string(), s as u8, vec![0.0], 1.0))
            .collect();
        let sample = TargetSample::from_rows(rows, vec!["x1".into()]).unwrap();
        let (rct, obs) = sample.split_by_study();
        assert_eq!(rct.indices, vec![0, 1, 4]);
        assert_eq!(obs.indices, vec![2, 3, 5]);
    }
}
