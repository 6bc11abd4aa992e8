//! Longitudinal exposure panel: one record per subject carrying baseline
//! covariates, per-chemical exposure concentrations, and repeated outcome
//! visits.
//!
//! On disk a panel is a long-format CSV with columns
//! `subject_id, age, y, x_*, <exposure columns>`: one row per visit, with the
//! subject-level covariate and exposure values repeated on every row. Columns
//! whose header starts with `x_` are covariates; every column after `y` that
//! is not a covariate is an exposure concentration named by its header. An
//! empty exposure cell marks a measurement below the detection limit; the
//! limits themselves live in a companion CSV with columns `chemical, lod`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// One subject: baseline covariates, exposure concentrations, and visits.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Baseline covariates, constant across visits.
    pub covariates: Vec<f64>,
    /// Raw concentrations, one per chemical; `NaN` where below detection.
    pub exposures: Vec<f64>,
    /// Visit ages in months, strictly increasing.
    pub ages: Vec<f64>,
    /// Outcome at each visit.
    pub y: Vec<f64>,
}

/// A full panel of subjects plus chemical metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposurePanel {
    pub subjects: Vec<SubjectRecord>,
    pub chemical_names: Vec<String>,
    /// `flags[chem][subject]` is true when the measurement was at or above
    /// the detection limit. `None` when detectability was never recorded.
    pub detect_flags: Option<Vec<Vec<bool>>>,
    /// Detection limit per chemical, where known.
    pub lod: Option<Vec<Option<f64>>>,
}

impl ExposurePanel {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_chemicals(&self) -> usize {
        self.chemical_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.y.len()).sum()
    }

    /// Structural checks: consistent lengths, at least one visit per subject,
    /// strictly increasing ages, finite observed values.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_chemicals();
        let p = self.n_covariates();
        if self.subjects.is_empty() {
            return Err(Error::Data("panel has no subjects".into()));
        }
        if m == 0 {
            return Err(Error::Data("panel has no exposure columns".into()));
        }
        for s in &self.subjects {
            if s.exposures.len() != m {
                return Err(Error::Data(format!(
                    "subject {}: {} exposures, panel has {} chemicals",
                    s.id,
                    s.exposures.len(),
                    m
                )));
            }
            if s.covariates.len() != p {
                return Err(Error::Data(format!(
                    "subject {}: {} covariates, expected {}",
                    s.id,
                    s.covariates.len(),
                    p
                )));
            }
            if s.ages.len() != s.y.len() || s.ages.is_empty() {
                return Err(Error::Data(format!(
                    "subject {}: needs matching, non-empty age and outcome lists",
                    s.id
                )));
            }
            for w in s.ages.windows(2) {
                let increasing = w[1] > w[0]; // false for NaN as well
                if !increasing {
                    return Err(Error::Data(format!(
                        "subject {}: visit ages must be strictly increasing ({} then {})",
                        s.id, w[0], w[1]
                    )));
                }
            }
            if s.ages.iter().any(|v| !v.is_finite()) || s.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("subject {}: non-finite age or outcome", s.id)));
            }
            if s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("subject {}: non-finite covariate", s.id)));
            }
        }
        if let Some(flags) = &self.detect_flags {
            if flags.len() != m || flags.iter().any(|f| f.len() != self.n_subjects()) {
                return Err(Error::Data("detect_flags shape does not match panel".into()));
            }
            for (c, per_chem) in flags.iter().enumerate() {
                for (i, (&detected, s)) in per_chem.iter().zip(&self.subjects).enumerate() {
                    let val = s.exposures[c];
                    if detected && !val.is_finite() {
                        return Err(Error::Data(format!(
                            "subject {} chemical {}: detected flag but missing value (index {i})",
                            s.id, self.chemical_names[c]
                        )));
                    }
                }
            }
        } else {
            // Without flags every exposure must be an observed number.
            for s in &self.subjects {
                if s.exposures.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "subject {}: missing exposure value but no detectability flags",
                        s.id
                    )));
                }
            }
        }
        if let Some(lod) = &self.lod {
            if lod.len() != m {
                return Err(Error::Data("lod vector length does not match chemicals".into()));
            }
        }
        Ok(())
    }

    /// Reads a long-format panel CSV, plus an optional detection-limit CSV.
    pub fn from_csv(panel_path: &Path, lod_path: Option<&Path>) -> Result<ExposurePanel> {
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(panel_path)?;
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 4 || cols[0] != "subject_id" || cols[1] != "age" || cols[2] != "y" {
            return Err(Error::Data(format!(
                "panel header must start with subject_id,age,y (found {:?})",
                &cols[..cols.len().min(3)]
            )));
        }
        let mut covariate_cols = Vec::new();
        let mut exposure_cols = Vec::new();
        for (idx, name) in cols.iter().enumerate().skip(3) {
            if name.starts_with("x_") {
                covariate_cols.push((idx, name.to_string()));
            } else {
                exposure_cols.push((idx, name.to_string()));
            }
        }
        if exposure_cols.is_empty() {
            return Err(Error::Data("panel has no exposure columns after y".into()));
        }
        let chemical_names: Vec<String> = exposure_cols.iter().map(|(_, n)| n.clone()).collect();

        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, SubjectRecord> = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2; // 1-based, after header
            let id = rec.get(0).unwrap_or("").to_string();
            if id.is_empty() {
                return Err(Error::Data(format!("row {row}: empty subject_id")));
            }
            let age = parse_cell(rec.get(1), "age", row)?;
            let y = parse_cell(rec.get(2), "y", row)?;
            let mut covariates = Vec::with_capacity(covariate_cols.len());
            for (idx, name) in &covariate_cols {
                covariates.push(parse_cell(rec.get(*idx), name, row)?);
            }
            let mut exposures = Vec::with_capacity(exposure_cols.len());
            for (idx, name) in &exposure_cols {
                let cell = rec.get(*idx).unwrap_or("").trim();
                if cell.is_empty() {
                    exposures.push(f64::NAN);
                } else {
                    exposures.push(parse_cell(Some(cell), name, row)?);
                }
            }
            match by_id.get_mut(&id) {
                None => {
                    order.push(id.clone());
                    by_id.insert(
                        id.clone(),
                        SubjectRecord { id, covariates, exposures, ages: vec![age], y: vec![y] },
                    );
                }
                Some(s) => {
                    if s.covariates != covariates {
                        return Err(Error::Data(format!(
                            "row {row}: covariates for subject {id} differ between visits"
                        )));
                    }
                    if !same_exposures(&s.exposures, &exposures) {
                        return Err(Error::Data(format!(
                            "row {row}: exposures for subject {id} differ between visits"
                        )));
                    }
                    s.ages.push(age);
                    s.y.push(y);
                }
            }
        }
        let subjects: Vec<SubjectRecord> =
            order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();

        let n = subjects.len();
        let m = chemical_names.len();
        let mut flags = vec![vec![true; n]; m];
        for (i, s) in subjects.iter().enumerate() {
            for (f, x) in flags.iter_mut().zip(&s.exposures) {
                f[i] = x.is_finite();
            }
        }

        // Without a limit file the below-LOD gaps are still flagged; imputation
        // will demand limits only for chemicals that actually have gaps.
        let lod = match lod_path {
            None => None,
            Some(path) => Some(read_lod_csv(path, &chemical_names)?),
        };

        let panel = ExposurePanel {
            subjects,
            chemical_names,
            detect_flags: Some(flags),
            lod,
        };
        panel.validate()?;
        Ok(panel)
    }

    /// Writes the panel in the long CSV format read by [`Self::from_csv`].
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject_id".to_string(), "age".into(), "y".into()];
        for i in 0..self.n_covariates() {
            header.push(format!("x_{}", i + 1));
        }
        header.extend(self.chemical_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            for (age, y) in s.ages.iter().zip(&s.y) {
                let mut row = vec![s.id.clone(), format!("{age}"), format!("{y}")];
                for c in &s.covariates {
                    row.push(format!("{c}"));
                }
                for &z in &s.exposures {
                    row.push(if z.is_finite() { format!("{z}") } else { String::new() });
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn same_exposures(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| (x.is_nan() && y.is_nan()) || x == y)
}

fn parse_cell(cell: Option<&str>, name: &str, row: usize) -> Result<f64> {
    let raw = cell.map(str::trim).unwrap_or("");
    if raw.is_empty() {
        return Err(Error::Data(format!("row {row}: empty {name} cell")));
    }
    raw.parse::<f64>()
        .map_err(|_| Error::Data(format!("row {row}: cannot parse {name} value {raw:?}")))
}

fn read_lod_csv(path: &Path, chemicals: &[String]) -> Result<Vec<Option<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[0] != "chemical" || cols[1] != "lod" {
        return Err(Error::Data("lod file header must be chemical,lod".into()));
    }
    let mut by_name: HashMap<String, f64> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let name = rec.get(0).unwrap_or("").trim().to_string();
        let value = parse_cell(rec.get(1), "lod", line + 2)?;
        if value <= 0.0 {
            return Err(Error::Data(format!("lod for {name} must be positive, got {value}")));
        }
        by_name.insert(name, value);
    }
    Ok(chemicals.iter().map(|c| by_name.get(c).copied()).collect())
}
