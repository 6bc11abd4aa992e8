//! `eval`: score a finished fit against the ground truth of the panel it was
//! fitted to. The truth file carries the SHA-256 of the panel it was written
//! next to, and the fit manifest carries the hash of the panel it consumed;
//! the two must agree, otherwise the comparison is between unrelated data.

use std::time::Instant;

use bvcqr::model::ModelDims;
use bvcqr::posterior::evaluate_h;
use bvcqr::report::{read_draws_csv, read_json, write_json, DrawsTable};
use bvcqr::sampler::{PosteriorDraws, SamplerConfig};
use bvcqr::simulate::GroundTruth;
use bvcqr::{Error, Result};
use ndarray::{Array2, Array3};

use crate::fit::panel_hash_of;
use crate::manifest::{hash_outputs, read_manifest, sha256_file, write_manifest, FileHash, RunManifest};
use crate::EvalArgs;

fn field<T: serde::de::DeserializeOwned>(config: &serde_json::Value, name: &str) -> Result<T> {
    let value = config
        .get(name)
        .ok_or_else(|| Error::Data(format!("fit manifest config lacks {name:?}")))?;
    serde_json::from_value(value.clone())
        .map_err(|e| Error::Data(format!("fit manifest config field {name:?}: {e}")))
}

/// Rebuilds the in-memory posterior from draws.csv plus the manifest echo.
/// Per-draw sampler statistics that the CSV does not carry (accept prob,
/// tree depth, step size) are zero-filled; nothing downstream of eval reads
/// them.
fn rebuild_posterior(
    table: DrawsTable,
    dims: ModelDims,
    chemical_names: Vec<String>,
    config: SamplerConfig,
) -> Result<PosteriorDraws> {
    let param_names = dims.param_names();
    if table.param_names != param_names {
        return Err(Error::Data(
            "draws columns do not match the manifest dimensions; files are from different runs"
                .into(),
        ));
    }
    let rows = table.chain.len();
    let chains = table.chain.iter().copied().max().unwrap_or(0) as usize;
    if chains == 0 || !rows.is_multiple_of(chains) {
        return Err(Error::Data(format!(
            "draws table has {rows} rows over {chains} chains; expected equal-length chains"
        )));
    }
    let kept = rows / chains;
    let dim = param_names.len();
    let mut draws = Array3::zeros((chains, kept, dim));
    let mut energy = Array2::zeros((chains, kept));
    let mut divergent = Array2::from_elem((chains, kept), false);
    for row in 0..rows {
        let c = table.chain[row] as usize - 1;
        let i = table.iter[row] as usize - 1;
        if c >= chains || i >= kept {
            return Err(Error::Data(format!("draws row {}: chain/iter out of range", row + 2)));
        }
        draws.slice_mut(ndarray::s![c, i, ..]).assign(&table.values.row(row));
        energy[(c, i)] = table.energy[row];
        divergent[(c, i)] = table.divergent[row];
    }
    Ok(PosteriorDraws {
        dims,
        param_names,
        chemical_names,
        draws,
        energy,
        accept_prob: Array2::zeros((chains, kept)),
        tree_depth: Array2::zeros((chains, kept)),
        divergent,
        step_size: Array2::zeros((chains, kept)),
        warmup_divergences: vec![0; chains],
        config,
    })
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let fit_manifest = read_manifest(&args.fit)?;
    if fit_manifest.command != "fit" {
        return Err(Error::Data(format!(
            "{} holds a {:?} manifest, not a fit",
            args.fit.display(),
            fit_manifest.command
        )));
    }
    let dims: ModelDims = field(&fit_manifest.config, "dims")?;
    let chemical_names: Vec<String> = field(&fit_manifest.config, "chemical_names")?;
    let sampler: SamplerConfig = field(&fit_manifest.config, "sampler")?;

    let truth: GroundTruth = read_json(&args.truth)?;
    if let (Some(truth_hash), Some(fit_hash)) = (&truth.panel_sha256, panel_hash_of(&fit_manifest.config))
    {
        if truth_hash != fit_hash {
            return Err(Error::Data(
                "truth file does not belong to the fitted panel (panel SHA-256 mismatch)".into(),
            ));
        }
    }
    if truth.h1.len() != dims.n_subjects {
        return Err(Error::Data(format!(
            "truth has {} subjects, fit has {}",
            truth.h1.len(),
            dims.n_subjects
        )));
    }

    let draws_path = args.fit.join("draws.csv");
    let table = read_draws_csv(&draws_path)?;
    let draws = rebuild_posterior(table, dims, chemical_names, sampler)?;
    let report = evaluate_h(&draws, &truth)?;

    std::fs::create_dir_all(&args.out_dir)?;
    write_json(&report, &args.out_dir.join("heval.json"))?;
    let manifest = RunManifest {
        command: "eval".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: sampler.seed,
        config: serde_json::json!({
            "fit": args.fit.display().to_string(),
            "truth": args.truth.display().to_string(),
            "dims": dims,
        }),
        inputs: vec![
            FileHash { path: draws_path.display().to_string(), sha256: sha256_file(&draws_path)? },
            FileHash { path: args.truth.display().to_string(), sha256: sha256_file(&args.truth)? },
        ],
        outputs: hash_outputs(&args.out_dir, &["heval.json"])?,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &args.out_dir)?;

    for (name, level) in [("h1", &report.level1), ("h2", &report.level2)] {
        println!(
            "{name}: intercept {} slope {} r2 {} rmse {:.3}",
            fmt_opt(level.intercept),
            fmt_opt(level.slope),
            fmt_opt(level.r_squared),
            level.rmse
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.3}"))
}
