//! `fit`: panel CSV in; draws, effect summaries, diagnostics, preprocessing
//! report, and manifest out. An unreliable fit still writes every artifact —
//! the draws are needed to diagnose it — and then exits nonzero.

use std::time::Instant;

use bvcqr::design::{build_design, DesignConfig};
use bvcqr::model::{log_joint_terms, Hyperparameters, LogJointTerms, ParameterState, ThetaPrior};
use bvcqr::panel::ExposurePanel;
use bvcqr::posterior::summarize_effects;
use bvcqr::preprocess::{run_pipeline, PreprocessOptions};
use bvcqr::report::{write_design_audit_csv, write_draws_csv, write_effects_csv, write_json};
use bvcqr::sampler::{diagnostics, sample, PosteriorDraws, SamplerConfig};
use bvcqr::{Error, Result};
use ndarray::s;

use crate::manifest::{hash_outputs, sha256_file, write_manifest, FileHash, RunManifest};
use crate::FitArgs;

/// On-disk fit configuration. Every section is optional and partial; section
/// fields default to the library defaults. Unknown sections or keys are
/// config errors, not silence.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitFileConfig {
    sampler: Option<SamplerConfig>,
    hyper: Option<Hyperparameters>,
    preprocess: Option<PreprocessOptions>,
    design: Option<DesignConfig>,
}

/// The fully resolved configuration a fit runs with; echoed in the manifest.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub sampler: SamplerConfig,
    pub hyper: Hyperparameters,
    pub preprocess: PreprocessOptions,
    pub design: DesignConfig,
}

fn resolve_config(args: &FitArgs) -> Result<ResolvedConfig> {
    let file: FitFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
        None => FitFileConfig::default(),
    };
    let mut cfg = ResolvedConfig {
        sampler: file.sampler.unwrap_or_default(),
        hyper: file.hyper.unwrap_or_default(),
        preprocess: file.preprocess.unwrap_or_default(),
        design: file.design.unwrap_or_default(),
    };
    if let Some(seed) = args.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        cfg.sampler.iterations = iterations;
    }
    if let Some(warmup) = args.warmup {
        cfg.sampler.warmup = warmup;
    }
    if let Some(chains) = args.chains {
        cfg.sampler.chains = chains;
    }
    if let Some(target_accept) = args.target_accept {
        cfg.sampler.target_accept = target_accept;
    }
    if args.no_detect_filter {
        cfg.preprocess.detect_filter = false;
    }
    if args.no_lod_impute {
        cfg.preprocess.lod_impute = false;
    }
    if args.no_scale {
        cfg.preprocess.scale = false;
    }
    if args.no_horseshoe {
        cfg.hyper.theta_prior = ThetaPrior::Fixed { variance: 100.0 };
    }
    cfg.sampler.validate()?;
    cfg.hyper.validate()?;
    Ok(cfg)
}

/// Log-joint decomposition at each chain's final retained draw.
fn final_draw_terms(
    draws: &PosteriorDraws,
    design: &bvcqr::design::QuantizedDesign,
    hyper: &Hyperparameters,
) -> Result<Vec<LogJointTerms>> {
    let last = draws.n_kept() - 1;
    (0..draws.n_chains())
        .map(|c| {
            let row = draws.draws.slice(s![c, last, ..]);
            let state = ParameterState::from_constrained_vec(
                row.as_slice().expect("contiguous draw"),
                &draws.dims,
            )?;
            log_joint_terms(&state, design, hyper)
        })
        .collect()
}

pub fn run(args: &FitArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = resolve_config(args)?;

    let panel = ExposurePanel::from_csv(&args.panel, args.lod.as_deref())?;
    let (clean, quantized, pre_report) = run_pipeline(&panel, &cfg.preprocess)?;
    let design = build_design(&clean, &quantized, cfg.design)?;
    let draws = sample(&design, &cfg.hyper, &cfg.sampler)?;
    let report = diagnostics(&draws);
    let effects = summarize_effects(&draws)?;

    std::fs::create_dir_all(&args.out_dir)?;
    write_draws_csv(&draws, &args.out_dir.join("draws.csv"))?;
    write_effects_csv(&effects, &args.out_dir.join("effects.csv"))?;
    write_json(&report, &args.out_dir.join("diagnostics.json"))?;
    write_json(&pre_report, &args.out_dir.join("preprocess.json"))?;
    let mut output_names = vec!["draws.csv", "effects.csv", "diagnostics.json", "preprocess.json"];
    if args.design_audit {
        write_design_audit_csv(&design, &args.out_dir.join("design_audit.csv"))?;
        output_names.push("design_audit.csv");
    }
    if args.debug_terms {
        write_json(&final_draw_terms(&draws, &design, &cfg.hyper)?, &args.out_dir.join("debug_terms.json"))?;
        output_names.push("debug_terms.json");
    }

    write_fit_manifest(args, &cfg, &draws, &output_names, start)?;

    println!(
        "fit: {} chains x {} kept | divergent {:.1}% | max core R-hat {} | {} significant effects -> {}",
        draws.n_chains(),
        draws.n_kept(),
        100.0 * report.divergence_fraction,
        report.max_rhat_core.map_or("n/a".to_string(), |r| format!("{r:.3}")),
        effects.significant_count(),
        args.out_dir.display()
    );

    if !report.reliable {
        return Err(Error::Numerical(format!(
            "fit is unreliable ({:.1}% divergent, max core R-hat {}); outputs kept in {}",
            100.0 * report.divergence_fraction,
            report.max_rhat_core.map_or("n/a".to_string(), |r| format!("{r:.3}")),
            args.out_dir.display()
        )));
    }
    Ok(())
}

fn write_fit_manifest(
    args: &FitArgs,
    cfg: &ResolvedConfig,
    draws: &PosteriorDraws,
    output_names: &[&str],
    start: Instant,
) -> Result<()> {
    let panel_hash = sha256_file(&args.panel)?;
    let mut inputs = vec![FileHash {
        path: args.panel.display().to_string(),
        sha256: panel_hash.clone(),
    }];
    for extra in [&args.lod, &args.config].into_iter().flatten() {
        inputs.push(FileHash { path: extra.display().to_string(), sha256: sha256_file(extra)? });
    }
    let manifest = RunManifest {
        command: "fit".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.sampler.seed,
        config: fit_config_echo(cfg, draws, &panel_hash)?,
        inputs,
        outputs: hash_outputs(&args.out_dir, output_names)?,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &args.out_dir)
}

/// The echo carries everything `eval` needs to rebuild the posterior from
/// draws.csv: dimensions, chemical names, and the fitted panel's hash.
pub fn fit_config_echo(
    cfg: &ResolvedConfig,
    draws: &PosteriorDraws,
    panel_sha256: &str,
) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "sampler": cfg.sampler,
        "hyper": cfg.hyper,
        "preprocess": cfg.preprocess,
        "design": cfg.design,
        "dims": draws.dims,
        "chemical_names": draws.chemical_names,
        "panel_sha256": panel_sha256,
    }))
}

/// Shared by `eval` to locate the bytes a fit consumed.
pub fn panel_hash_of(config: &serde_json::Value) -> Option<&str> {
    config.get("panel_sha256").and_then(|v| v.as_str())
}
