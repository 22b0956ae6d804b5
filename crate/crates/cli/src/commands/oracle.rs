use std::path::PathBuf;

use dstc_core::{case_grid, compare_with_oracle, OracleComparison};
use serde::Serialize;

use crate::manifest::{to_json, Run};
use crate::{CliError, Status};

const HEAD_SCALE: f64 = 0.5;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted absolute difference.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Settings {
    cases: usize,
    seed: u64,
    tol: f64,
    head_scale: f64,
}

#[derive(Serialize)]
struct Report {
    #[serde(flatten)]
    settings: Settings,
    max_abs_diff: f64,
    pass: bool,
    results: Vec<OracleComparison>,
}

pub fn run(a: Args) -> Result<Status, CliError> {
    if a.cases == 0 {
        return Err(CliError::new("--cases must be at least 1"));
    }
    if !(a.tol.is_finite() && a.tol >= 0.0) {
        return Err(CliError::new("--tol must be non-negative"));
    }
    let settings = Settings {
        cases: a.cases,
        seed: a.seed,
        tol: a.tol,
        head_scale: HEAD_SCALE,
    };
    let mut run = Run::start(a.out.as_deref())?;
    let results = case_grid(a.cases, a.seed, HEAD_SCALE)?
        .iter()
        .map(compare_with_oracle)
        .collect::<Result<Vec<_>, _>>()?;
    let max = results.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let pass = results.iter().all(|r| r.max_abs_diff < a.tol);
    println!("{} cases, max abs diff {max:e}", results.len());
    let report = Report {
        settings,
        max_abs_diff: max,
        pass,
        results,
    };
    let json = to_json(&report)?;
    run.write("oracle.json", &json)?;
    run.finish("oracle-compare", &report.settings, &[("seed", a.seed)])?;
    Ok(if pass { Status::Pass } else { Status::Fail })
}
