//! Fit outputs on disk: draws, manifests, effect tables, and audit dumps.
//!
//! Numbers are written with the shortest decimal representation that parses
//! back to the identical bit pattern, so every writer here round-trips
//! exactly and reruns with the same seed produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::design::QuantizedDesign;
use crate::error::{Error, Result};
use crate::posterior::{EffectLevel, EffectRow, EffectSummary, SummaryStats};
use crate::sampler::{PosteriorDraws, SamplerConfig};

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Companion to the draws CSV: fixed columns, then the constrained
/// parameters in packing order. `iter` numbers retained draws from 1 within
/// each chain; warmup draws are never written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsManifest {
    /// Every CSV column, in file order.
    pub columns: Vec<String>,
    /// The parameter block of `columns`: the packing order.
    pub param_names: Vec<String>,
    pub chemical_names: Vec<String>,
    pub config: SamplerConfig,
    pub seed: u64,
}

pub fn draws_manifest(draws: &PosteriorDraws) -> DrawsManifest {
    let mut columns: Vec<String> =
        ["chain", "iter", "energy", "divergent"].map(String::from).to_vec();
    columns.extend(draws.param_names.iter().cloned());
    DrawsManifest {
        columns,
        param_names: draws.param_names.clone(),
        chemical_names: draws.chemical_names.clone(),
        config: draws.config,
        seed: draws.config.seed,
    }
}

/// One row per retained draw: `chain, iter, energy, divergent`, then the
/// constrained parameters in packing order. Chain-major, 1-based indices.
pub fn write_draws_csv(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&draws_manifest(draws).columns)?;
    let mut record: Vec<String> = Vec::with_capacity(4 + draws.dim());
    for chain in 0..draws.n_chains() {
        for iter in 0..draws.n_kept() {
            record.clear();
            record.push((chain + 1).to_string());
            record.push((iter + 1).to_string());
            record.push(format!("{}", draws.energy[(chain, iter)]));
            record.push(format!("{}", draws.divergent[(chain, iter)]));
            for k in 0..draws.dim() {
                record.push(format!("{}", draws.draws[(chain, iter, k)]));
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The draws CSV read back into columns; rows keep file order.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawsTable {
    pub chain: Vec<u32>,
    pub iter: Vec<u32>,
    pub energy: Vec<f64>,
    pub divergent: Vec<bool>,
    pub param_names: Vec<String>,
    /// `[rows, params]` in file order.
    pub values: Array2<f64>,
}

pub fn read_draws_csv(path: &Path) -> Result<DrawsTable> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 5 || cols[..4] != ["chain", "iter", "energy", "divergent"] {
        return Err(Error::Data(format!(
            "draws header must start with chain,iter,energy,divergent (found {:?})",
            &cols[..cols.len().min(4)]
        )));
    }
    let param_names: Vec<String> = cols[4..].iter().map(|s| s.to_string()).collect();
    let dim = param_names.len();
    let (mut chain, mut iter, mut energy, mut divergent) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != 4 + dim {
            return Err(Error::Data(format!(
                "draws row {row}: {} fields, expected {}",
                rec.len(),
                4 + dim
            )));
        }
        let field = |i: usize| rec.get(i).unwrap().trim();
        let bad = |name: &str, raw: &str| {
            Error::Data(format!("draws row {row}: cannot parse {name} value {raw:?}"))
        };
        chain.push(field(0).parse::<u32>().map_err(|_| bad("chain", field(0)))?);
        iter.push(field(1).parse::<u32>().map_err(|_| bad("iter", field(1)))?);
        energy.push(field(2).parse::<f64>().map_err(|_| bad("energy", field(2)))?);
        divergent.push(field(3).parse::<bool>().map_err(|_| bad("divergent", field(3)))?);
        for (k, name) in param_names.iter().enumerate() {
            let raw = field(4 + k);
            values.push(raw.parse::<f64>().map_err(|_| bad(name, raw))?);
        }
    }
    let rows = chain.len();
    let values = Array2::from_shape_vec((rows, dim), values)
        .map_err(|e| Error::Data(format!("draws table shape: {e}")))?;
    Ok(DrawsTable { chain, iter, energy, divergent, param_names, values })
}

const EFFECTS_HEADER: [&str; 9] = [
    "chemical",
    "level",
    "mean",
    "sd",
    "q2.5",
    "q50",
    "q97.5",
    "significant",
    "shrinkage_ratio",
];

/// One row per chemical and level, plottable as dot-and-interval charts.
/// The trailing shrinkage column is empty unless a wide-prior refit was
/// attached.
pub fn write_effects_csv(summary: &EffectSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EFFECTS_HEADER)?;
    for row in &summary.rows {
        let s = &row.stats;
        w.write_record([
            row.chemical.clone(),
            row.level.to_string(),
            format!("{}", s.mean),
            format!("{}", s.sd),
            format!("{}", s.q2_5),
            format!("{}", s.q50),
            format!("{}", s.q97_5),
            format!("{}", s.significant),
            row.shrinkage_ratio.map(|r| format!("{r}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_effects_csv(path: &Path) -> Result<EffectSummary> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != EFFECTS_HEADER {
        return Err(Error::Data(format!("unexpected effects header {cols:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Data(format!("effects row {row}: cannot parse {name} {:?}", field(i)))
            })
        };
        let level = match field(1).as_str() {
            "baseline" => EffectLevel::Baseline,
            "trajectory" => EffectLevel::Trajectory,
            other => {
                return Err(Error::Data(format!("effects row {row}: unknown level {other:?}")))
            }
        };
        let shrinkage = field(8);
        rows.push(EffectRow {
            chemical: field(0),
            level,
            stats: SummaryStats {
                mean: num(2, "mean")?,
                sd: num(3, "sd")?,
                q2_5: num(4, "q2.5")?,
                q50: num(5, "q50")?,
                q97_5: num(6, "q97.5")?,
                significant: field(7).parse::<bool>().map_err(|_| {
                    Error::Data(format!("effects row {row}: bad significant flag"))
                })?,
            },
            shrinkage_ratio: if shrinkage.is_empty() {
                None
            } else {
                Some(shrinkage.parse::<f64>().map_err(|_| {
                    Error::Data(format!("effects row {row}: bad shrinkage ratio"))
                })?)
            },
        });
    }
    Ok(EffectSummary { rows })
}

/// Every matrix the fit consumes, flattened to `matrix, row, col, value`
/// triplets: `x` and `q` densely, `w` and `u` as their nonzeros.
pub fn write_design_audit_csv(design: &QuantizedDesign, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["matrix", "row", "col", "value"])?;
    let mut emit = |name: &str, row: usize, col: usize, value: f64| -> Result<()> {
        w.write_record([
            name.to_string(),
            row.to_string(),
            col.to_string(),
            format!("{value}"),
        ])?;
        Ok(())
    };
    for ((r, c), &v) in design.x.indexed_iter() {
        emit("x", r, c, v)?;
    }
    for ((r, c), &v) in design.q.indexed_iter() {
        emit("q", r, c, v)?;
    }
    for (r, c, v) in design.w_triplets() {
        emit("w", r, c, v)?;
    }
    for (r, c, v) in design.u_triplets() {
        emit("u", r, c, v)?;
    }
    w.flush()?;
    Ok(())
}
