use std::path::PathBuf;

use dstc_core::{gradcheck, ParamGroup, ParamSelector};

use crate::config::RunConfig;
use crate::manifest::{to_json, Run};
use crate::{CliError, Status};

#[derive(clap::Args)]
pub struct Args {
    /// Layer configuration file.
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One tolerance for every group, replacing the per-group defaults.
    #[arg(long)]
    tol: Option<f64>,
    /// Run directory for the report and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: doubles the largest analytic entry of a group (`x`, `w`, ...).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn selector(name: &str) -> Result<ParamSelector, CliError> {
    if name == "x" {
        return Ok(ParamSelector::Input);
    }
    name.parse::<ParamGroup>()
        .map(ParamSelector::Group)
        .map_err(|e| CliError::new(e.to_string()))
}

pub fn run(a: Args) -> Result<Status, CliError> {
    let mut rc = RunConfig::load(&a.config)?;
    if let Some(t) = a.tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::new("--tol must be positive"));
        }
        rc.gradcheck.tol_linear = t;
        rc.gradcheck.tol_nonlinear = t;
    }
    let mut opts = rc.gradcheck.clone();
    opts.corrupt = a.corrupt.as_deref().map(selector).transpose()?;
    let mut run = Run::start(a.out.as_deref())?;
    let report = gradcheck(&rc.layer, a.seed, &opts)?;
    let json = to_json(&report)?;
    print!("{json}");
    run.write("gradcheck.json", &json)?;
    run.finish("gradcheck", &rc, &[("seed", a.seed)])?;
    Ok(if report.pass { Status::Pass } else { Status::Fail })
}
