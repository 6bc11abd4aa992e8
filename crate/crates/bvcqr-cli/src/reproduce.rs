//! `reproduce`: both built-in scenarios under the shrinkage and wide priors,
//! scored against the recovery bands, with the ablation orderings checked.
//!
//! Each of the four sub-runs gets its own directory and manifest. Sub-run
//! failures (including unreliable diagnostics) are noted in the report and
//! the remaining runs still execute; any failure or band violation makes the
//! command exit nonzero after the partial report is written.
//!
//! The recovery bands are calibrated against the canonical scenario datasets,
//! so the panels are fixed: every sub-run simulates its scenario at the
//! canonical scenario seed. `--seed` drives only the sampler streams, which
//! keeps the table and report deterministic given `--seed` while the scored
//! datasets stay the ones the bands describe. Wall-clock times appear only in
//! manifests.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bvcqr::design::{build_design, DesignConfig};
use bvcqr::model::{Hyperparameters, ModelDims, ThetaPrior};
use bvcqr::posterior::{
    attach_shrinkage, evaluate_h, summarize_effects, EffectSummary, HEvalLevel, HEvalReport,
};
use bvcqr::preprocess::{run_pipeline, PreprocessOptions};
use bvcqr::report::{write_effects_csv, write_json};
use bvcqr::sampler::{diagnostics, sample, SamplerConfig};
use bvcqr::simulate::{builtin_scenario, generate, GroundTruth, Scenario};
use bvcqr::{Error, Result};
use serde::Serialize;

use crate::manifest::{hash_outputs, sha256_file, write_manifest, RunManifest};
use crate::ReproduceArgs;

/// Recovery bands; `widened(1.0)` is the reference acceptance band set,
/// `--quick` widens every tolerance by 1.5.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Bands {
    pub intercept_max: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    pub r2_min: f64,
    pub rmse_max: f64,
}

impl Bands {
    pub fn widened(factor: f64) -> Bands {
        Bands {
            intercept_max: 0.35 * factor,
            slope_lo: 1.0 - 0.10 * factor,
            slope_hi: 1.0 + 0.10 * factor,
            r2_min: 1.0 - 0.05 * factor,
            rmse_max: 0.50 * factor,
        }
    }

    pub fn check(&self, level: &HEvalLevel) -> bool {
        let (Some(intercept), Some(slope), Some(r2)) =
            (level.intercept, level.slope, level.r_squared)
        else {
            return false;
        };
        intercept.abs() <= self.intercept_max
            && (self.slope_lo..=self.slope_hi).contains(&slope)
            && r2 >= self.r2_min
            && level.rmse <= self.rmse_max
    }
}

/// The scenario seed that defines the canonical datasets the recovery bands
/// were calibrated on.
const CANONICAL_SCENARIO_SEED: u64 = 1;

/// Sampler settings for the full-size runs. The elevated acceptance target
/// and long adaptation are what the shrinkage geometry needs to keep
/// divergences and split R-hat inside the reliability gates across sampler
/// seeds; the 3000 kept draws per chain are ample for the summaries.
fn full_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        iterations: 7000,
        warmup: 4000,
        chains: 4,
        target_accept: 0.97,
        seed,
        ..SamplerConfig::default()
    }
}

fn quick_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        iterations: 800,
        warmup: 400,
        chains: 4,
        target_accept: 0.97,
        seed,
        ..SamplerConfig::default()
    }
}

struct SubOutcome {
    name: String,
    dir: PathBuf,
    scenario_id: u32,
    horseshoe: bool,
    scenario: Scenario,
    truth: GroundTruth,
    effects: EffectSummary,
    heval: HEvalReport,
    dims: ModelDims,
    chemical_names: Vec<String>,
    sampler: SamplerConfig,
    hyper: Hyperparameters,
    divergence_fraction: f64,
    max_rhat_core: Option<f64>,
    reliable: bool,
    started: Instant,
}

/// Generates, fits, and scores one scenario x prior cell. Writes everything
/// except effects.csv and the manifest, which wait until the scenario's other
/// arm is available for the shrinkage comparison.
fn run_one(
    dir: &Path,
    name: &str,
    scenario_id: u32,
    horseshoe: bool,
    base_seed: u64,
    quick: bool,
) -> Result<SubOutcome> {
    let started = Instant::now();
    let mut scenario = builtin_scenario(scenario_id)?;
    if quick {
        scenario.n_subjects = 50;
    }
    // The bands describe recovery on the canonical scenario datasets, so the
    // panel seed is pinned; `--seed` only reseeds the sampler below.
    scenario.seed = CANONICAL_SCENARIO_SEED;
    let (panel, mut truth) = generate(&scenario)?;

    std::fs::create_dir_all(dir)?;
    let panel_path = dir.join("panel.csv");
    panel.to_csv(&panel_path)?;
    truth.panel_sha256 = Some(sha256_file(&panel_path)?);
    write_json(&truth, &dir.join("truth.json"))?;

    let arm = if horseshoe { 1 } else { 2 };
    let sampler_seed = base_seed + u64::from(10 * scenario_id + arm);
    let sampler = if quick { quick_sampler(sampler_seed) } else { full_sampler(sampler_seed) };
    let mut hyper = Hyperparameters::default();
    if !horseshoe {
        hyper.theta_prior = ThetaPrior::Fixed { variance: 100.0 };
    }

    let (clean, quantized, pre_report) = run_pipeline(&panel, &PreprocessOptions::default())?;
    let design = build_design(&clean, &quantized, DesignConfig::default())?;
    let draws = sample(&design, &hyper, &sampler)?;
    let diag = diagnostics(&draws);
    let effects = summarize_effects(&draws)?;
    let heval = evaluate_h(&draws, &truth)?;

    write_json(&diag, &dir.join("diagnostics.json"))?;
    write_json(&pre_report, &dir.join("preprocess.json"))?;
    write_json(&heval, &dir.join("heval.json"))?;

    Ok(SubOutcome {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        scenario_id,
        horseshoe,
        scenario,
        truth,
        effects,
        heval,
        dims: draws.dims,
        chemical_names: draws.chemical_names.clone(),
        sampler,
        hyper,
        divergence_fraction: diag.divergence_fraction,
        max_rhat_core: diag.max_rhat_core,
        reliable: diag.reliable,
        started,
    })
}

/// Writes the deferred artifacts of a finished sub-run: effects.csv (with the
/// shrinkage column already attached where applicable) and the manifest.
fn finalize(outcome: &SubOutcome) -> Result<()> {
    write_effects_csv(&outcome.effects, &outcome.dir.join("effects.csv"))?;
    let panel_sha = outcome.truth.panel_sha256.clone().unwrap_or_default();
    let manifest = RunManifest {
        command: format!("reproduce/{}", outcome.name),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: outcome.sampler.seed,
        config: serde_json::json!({
            "scenario": outcome.scenario,
            "sampler": outcome.sampler,
            "hyper": outcome.hyper,
            "preprocess": PreprocessOptions::default(),
            "design": DesignConfig::default(),
            "dims": outcome.dims,
            "chemical_names": outcome.chemical_names,
            "panel_sha256": panel_sha,
        }),
        inputs: Vec::new(),
        outputs: hash_outputs(
            &outcome.dir,
            &["panel.csv", "truth.json", "effects.csv", "diagnostics.json", "preprocess.json", "heval.json"],
        )?,
        wall_clock_seconds: outcome.started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &outcome.dir)
}

#[derive(Debug, Clone, Serialize)]
struct TableRow {
    scenario: u32,
    prior: &'static str,
    level: &'static str,
    intercept: Option<f64>,
    slope: Option<f64>,
    r_squared: Option<f64>,
    rmse: f64,
    /// Band verdict; only shrinkage-prior rows carry bands.
    pass: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct RunLine {
    name: String,
    divergence_fraction: f64,
    max_rhat_core: Option<f64>,
    reliable: bool,
}

#[derive(Debug, Clone, Serialize)]
struct AblationCheck {
    scenario: u32,
    level: &'static str,
    horseshoe_rmse: f64,
    wide_rmse: f64,
    pass: bool,
}

#[derive(Debug, Clone, Serialize)]
struct WidthCheck {
    scenario: u32,
    horseshoe_mean_width: f64,
    wide_mean_width: f64,
    pass: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SelectionCheck {
    scenario: u32,
    planted: usize,
    flagged_planted: usize,
    false_positives: usize,
    allowed_false_positives: usize,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct ReproduceReport {
    quick: bool,
    bands: Bands,
    table: Vec<TableRow>,
    runs: Vec<RunLine>,
    ablation: Vec<AblationCheck>,
    interval_width: Vec<WidthCheck>,
    selection: Vec<SelectionCheck>,
    failures: Vec<String>,
    pass: bool,
}

/// True theta values in effects-row order (baseline block then trajectory).
fn truth_by_row(truth: &GroundTruth) -> Vec<f64> {
    let mut v = truth.scenario.theta1_true.clone();
    v.extend_from_slice(&truth.scenario.theta2_true);
    v
}

fn selection_check(outcome: &SubOutcome) -> Result<SelectionCheck> {
    let truth_values = truth_by_row(&outcome.truth);
    if truth_values.len() != outcome.effects.rows.len() {
        return Err(Error::Data(format!(
            "{}: {} effect rows for {} planted coefficients",
            outcome.name,
            outcome.effects.rows.len(),
            truth_values.len()
        )));
    }
    let mut planted = 0;
    let mut flagged_planted = 0;
    let mut false_positives = 0;
    for (row, truth_value) in outcome.effects.rows.iter().zip(&truth_values) {
        if *truth_value != 0.0 {
            planted += 1;
            if row.stats.significant {
                flagged_planted += 1;
            }
        } else if row.stats.significant {
            false_positives += 1;
        }
    }
    let allowed_false_positives = usize::from(outcome.scenario_id == 2);
    Ok(SelectionCheck {
        scenario: outcome.scenario_id,
        planted,
        flagged_planted,
        false_positives,
        allowed_false_positives,
        pass: flagged_planted == planted && false_positives <= allowed_false_positives,
    })
}

/// Mean 95% interval width over the null coefficients.
fn mean_null_width(outcome: &SubOutcome) -> f64 {
    let truth_values = truth_by_row(&outcome.truth);
    let widths: Vec<f64> = outcome
        .effects
        .rows
        .iter()
        .zip(&truth_values)
        .filter(|(_, t)| **t == 0.0)
        .map(|(row, _)| row.stats.q97_5 - row.stats.q2_5)
        .collect();
    widths.iter().sum::<f64>() / widths.len() as f64
}

fn write_table_csv(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut out = String::from("scenario,prior,level,intercept,slope,r_squared,rmse,pass\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pass = r.pass.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.prior,
            r.level,
            opt(r.intercept),
            opt(r.slope),
            opt(r.r_squared),
            r.rmse,
            pass
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn print_table(rows: &[TableRow]) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{:<9}{:<11}{:<7}{:>10}{:>8}{:>6}{:>7}  pass",
        "scenario", "prior", "level", "intercept", "slope", "r2", "rmse"
    );
    for r in rows {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            stdout,
            "{:<9}{:<11}{:<7}{:>10}{:>8}{:>6}{:>7.3}  {}",
            r.scenario,
            r.prior,
            r.level,
            opt(r.intercept),
            opt(r.slope),
            opt(r.r_squared),
            r.rmse,
            r.pass.map(|p| if p { "yes" } else { "NO" }).unwrap_or("-")
        );
    }
}

pub fn run(args: &ReproduceArgs) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&args.out_dir)?;
    let bands = Bands::widened(if args.quick { 1.5 } else { 1.0 });

    let mut outcomes: Vec<SubOutcome> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for scenario_id in [1u32, 2] {
        let mut pair: Vec<SubOutcome> = Vec::new();
        for horseshoe in [true, false] {
            let name = format!("s{scenario_id}_{}", if horseshoe { "hs" } else { "wide" });
            eprintln!("running {name} ...");
            match run_one(&args.out_dir.join(&name), &name, scenario_id, horseshoe, args.seed, args.quick)
            {
                Ok(outcome) => {
                    if !outcome.reliable {
                        failures.push(format!(
                            "{name}: diagnostics unreliable ({:.1}% divergent, max core R-hat {})",
                            100.0 * outcome.divergence_fraction,
                            outcome
                                .max_rhat_core
                                .map_or("n/a".to_string(), |r| format!("{r:.3}"))
                        ));
                    }
                    pair.push(outcome);
                }
                Err(err) => failures.push(format!("{name}: {err}")),
            }
        }
        // The shrinkage column of the horseshoe arm's effects.csv compares
        // against the wide arm; only possible when both arms finished.
        if let [hs, wide] = &mut pair[..] {
            attach_shrinkage(&mut hs.effects, &wide.effects)?;
        }
        for outcome in pair {
            finalize(&outcome)?;
            outcomes.push(outcome);
        }
    }

    let find = |id: u32, hs: bool| outcomes.iter().find(|o| o.scenario_id == id && o.horseshoe == hs);
    let mut table: Vec<TableRow> = Vec::new();
    let mut ablation: Vec<AblationCheck> = Vec::new();
    let mut interval_width: Vec<WidthCheck> = Vec::new();
    let mut selection: Vec<SelectionCheck> = Vec::new();
    for scenario_id in [1u32, 2] {
        for (prior, hs) in [("horseshoe", true), ("wide", false)] {
            let Some(outcome) = find(scenario_id, hs) else { continue };
            for (level, he) in [("h1", &outcome.heval.level1), ("h2", &outcome.heval.level2)] {
                table.push(TableRow {
                    scenario: scenario_id,
                    prior,
                    level,
                    intercept: he.intercept,
                    slope: he.slope,
                    r_squared: he.r_squared,
                    rmse: he.rmse,
                    pass: hs.then(|| bands.check(he)),
                });
            }
        }
        if let (Some(hs), Some(wide)) = (find(scenario_id, true), find(scenario_id, false)) {
            // Level 1 must strictly improve; level 2 must not regress.
            ablation.push(AblationCheck {
                scenario: scenario_id,
                level: "h1",
                horseshoe_rmse: hs.heval.level1.rmse,
                wide_rmse: wide.heval.level1.rmse,
                pass: hs.heval.level1.rmse < wide.heval.level1.rmse,
            });
            ablation.push(AblationCheck {
                scenario: scenario_id,
                level: "h2",
                horseshoe_rmse: hs.heval.level2.rmse,
                wide_rmse: wide.heval.level2.rmse,
                pass: hs.heval.level2.rmse <= wide.heval.level2.rmse,
            });
            let hs_width = mean_null_width(hs);
            let wide_width = mean_null_width(wide);
            interval_width.push(WidthCheck {
                scenario: scenario_id,
                horseshoe_mean_width: hs_width,
                wide_mean_width: wide_width,
                pass: hs_width < wide_width,
            });
        }
        if let Some(hs) = find(scenario_id, true) {
            selection.push(selection_check(hs)?);
        }
    }

    let bands_pass = table.iter().all(|r| r.pass.unwrap_or(true));
    let checks_pass = ablation.iter().all(|c| c.pass)
        && interval_width.iter().all(|c| c.pass)
        && selection.iter().all(|c| c.pass);
    let complete = outcomes.len() == 4;
    let pass = failures.is_empty() && complete && bands_pass && checks_pass;

    let runs = outcomes
        .iter()
        .map(|o| RunLine {
            name: o.name.clone(),
            divergence_fraction: o.divergence_fraction,
            max_rhat_core: o.max_rhat_core,
            reliable: o.reliable,
        })
        .collect();
    let report = ReproduceReport {
        quick: args.quick,
        bands,
        table: table.clone(),
        runs,
        ablation,
        interval_width,
        selection,
        failures: failures.clone(),
        pass,
    };
    write_table_csv(&table, &args.out_dir.join("table.csv"))?;
    write_json(&report, &args.out_dir.join("report.json"))?;

    let sub_plan: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "name": o.name,
                "scenario_seed": o.scenario.seed,
                "sampler": o.sampler,
            })
        })
        .collect();
    let manifest = RunManifest {
        command: "reproduce".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        config: serde_json::json!({ "quick": args.quick, "bands": bands, "sub_runs": sub_plan }),
        inputs: Vec::new(),
        outputs: hash_outputs(&args.out_dir, &["table.csv", "report.json"])?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &args.out_dir)?;

    print_table(&table);
    for f in &failures {
        println!("failure: {f}");
    }
    println!("overall: {}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "reproduction checks failed ({} sub-run failures; see {})",
            failures.len(),
            args.out_dir.join("report.json").display()
        )))
    }
}
