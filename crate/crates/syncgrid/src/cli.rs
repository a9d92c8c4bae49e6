//! Command-line front end: `run`, `list`, `sweep`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::scenarios::{
    list_scenarios, load, output_root, parse_range, run, summary, sweep_points, write_artifacts, Scenario, ScenarioError,
    SCHEMA_VERSION,
};

#[derive(Debug, Parser)]
#[command(name = "syncgrid", version, about = "Oscillator-network scenarios for microgrids, TCL fleets and power grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a built-in scenario or a scenario file.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (default: $SYNCGRID_OUT, then ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in scenarios.
    List,
    /// Run a scenario over a parameter range.
    Sweep {
        scenario: String,
        /// `r1`/`r2` for bifurcation scenarios, `seed`, or a config path such as `control.delta`.
        #[arg(long)]
        param: String,
        /// lo:hi:step, inclusive.
        #[arg(long)]
        range: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report(e: &ScenarioError) -> i32 {
    match e.divergence_time() {
        Some(t) => eprintln!("error: simulation diverged at t = {t}"),
        None => eprintln!("error: {e}"),
    }
    match e {
        ScenarioError::Schema { .. } | ScenarioError::Unknown(_) | ScenarioError::ModelMismatch { .. } => 2,
        ScenarioError::Override(_) => 2,
        _ => 1,
    }
}

fn prepare(name: &str, seed: Option<u64>) -> Result<Scenario, ScenarioError> {
    let s = load(name)?;
    Ok(match seed {
        Some(v) => s.with_seed(v),
        None => s,
    })
}

/// Runs one scenario into `<root>/<name>`; returns the output directory.
pub fn run_into(s: &Scenario, root: &Path) -> Result<PathBuf, ScenarioError> {
    let a = run(s)?;
    let dir = root.join(&s.name);
    write_artifacts(&dir, s, &a)?;
    Ok(dir)
}

fn label(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m")
}

pub fn sweep_into(base: &Scenario, param: &str, values: &[f64], root: &Path) -> Result<PathBuf, ScenarioError> {
    let points = sweep_points(base, param, values)?;
    let dir = root.join(format!("{}-sweep-{}", base.name, param.trim_start_matches('/').replace(['/', '.'], "_")));
    if points.len() == 1 && points[0].value.is_nan() {
        let s = &points[0].scenario;
        let a = run(s)?;
        write_artifacts(&dir, s, &a)?;
        return Ok(dir);
    }
    let results = points
        .par_iter()
        .map(|p| {
            let a = run(&p.scenario)?;
            write_artifacts(&dir.join(format!("point-{}", label(p.value))), &p.scenario, &a)?;
            Ok((p.value, summary(&p.scenario, &a)))
        })
        .collect::<Result<Vec<(f64, Value)>, ScenarioError>>()?;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "scenario": base.name,
        "param": param,
        "points": results.iter().map(|(v, s)| json!({ "value": v, "summary": s })).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("sweep_summary.json"), serde_json::to_string_pretty(&doc).expect("json") + "\n")
        .map_err(|source| ScenarioError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::List => {
            let items = list_scenarios();
            let width = items.iter().map(|i| i.0.len()).max().unwrap_or(0);
            for (n, d) in items {
                println!("{n:width$}  {d}");
            }
            0
        }
        Command::Run { scenario, seed, out } => {
            let res = prepare(&scenario, seed).and_then(|s| run_into(&s, &output_root(out.as_deref())));
            match res {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    0
                }
                Err(e) => report(&e),
            }
        }
        Command::Sweep { scenario, param, range, seed, out } => {
            let res = prepare(&scenario, seed).and_then(|s| {
                let values = parse_range(&range)?;
                sweep_into(&s, &param, &values, &output_root(out.as_deref()))
            });
            match res {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    0
                }
                Err(e) => report(&e),
            }
        }
    }
}
