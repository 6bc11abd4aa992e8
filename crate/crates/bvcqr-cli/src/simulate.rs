//! `simulate`: write a synthetic panel, its ground truth, and a manifest.

use std::time::Instant;

use bvcqr::report::write_json;
use bvcqr::simulate::{builtin_scenario, generate, Scenario};
use bvcqr::{Error, Result};

use crate::manifest::{hash_outputs, sha256_file, write_manifest, RunManifest};
use crate::SimulateArgs;

pub fn run(args: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let mut scenario: Scenario = match (&args.scenario, &args.scenario_config) {
        (Some(id), None) => builtin_scenario(*id)?,
        (None, Some(path)) => bvcqr::report::read_json(path)?,
        (None, None) => {
            return Err(Error::Config("pass --scenario <id> or --scenario-config <file>".into()))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    scenario.seed = args.seed;
    scenario.validate()?;

    let (panel, mut truth) = generate(&scenario)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let panel_path = args.out_dir.join("panel.csv");
    panel.to_csv(&panel_path)?;
    // The truth records which exact panel bytes it belongs to; eval checks it.
    truth.panel_sha256 = Some(sha256_file(&panel_path)?);
    write_json(&truth, &args.out_dir.join("truth.json"))?;

    let manifest = RunManifest {
        command: "simulate".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        config: serde_json::to_value(&scenario)?,
        inputs: Vec::new(),
        outputs: hash_outputs(&args.out_dir, &["panel.csv", "truth.json"])?,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &args.out_dir)?;
    println!(
        "simulated {} subjects x {} chemicals -> {}",
        scenario.n_subjects,
        scenario.n_chemicals,
        args.out_dir.display()
    );
    Ok(())
}
