use std::path::PathBuf;

use clap::ValueEnum;
use dstc_core::{gen_task, train, DstcConfig, ScoreSetting};

use super::train::{options, prepare};
use crate::config::RunConfig;
use crate::manifest::Run;
use crate::{CliError, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "K_sigma")]
    KSigma,
    #[value(name = "variances")]
    Variances,
}

#[derive(clap::Args)]
pub struct Args {
    /// Layer configuration file; must use Gaussian interpolation.
    config: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    /// K_sigma values, or one comma-separated variance set per value.
    #[arg(long, num_args = 1.., required = true)]
    values: Vec<String>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn numbers(token: &str) -> Result<Vec<f64>, CliError> {
    let inner = token.trim().trim_start_matches('{').trim_end_matches('}');
    let parsed: Result<Vec<f64>, _> = inner.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match parsed {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::new(format!("bad sweep value `{token}`"))),
    }
}

/// One labelled config per requested setting, everything else held fixed.
pub fn settings(base: &DstcConfig, axis: Axis, values: &[String]) -> Result<Vec<(String, DstcConfig)>, CliError> {
    if base.score_mode == ScoreSetting::None {
        return Err(CliError::new(format!(
            "sweeping {axis:?} needs Gaussian interpolation, but {} has none",
            base.variant.name()
        )));
    }
    let mut out = Vec::new();
    match axis {
        Axis::KSigma => {
            for token in values {
                for part in token.split(',') {
                    let k: usize = part
                        .trim()
                        .parse()
                        .map_err(|_| CliError::new(format!("bad K_sigma value `{part}`")))?;
                    let mut cfg = base.clone();
                    cfg.k_sigma = k;
                    out.push((k.to_string(), cfg));
                }
            }
        }
        Axis::Variances => {
            for token in values {
                let set = numbers(token)?;
                let label: Vec<String> = set.iter().map(f64::to_string).collect();
                let mut cfg = base.clone();
                cfg.gaussian_variances = set;
                out.push((label.join(";"), cfg));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::new("empty value list"));
    }
    for (label, cfg) in &out {
        cfg.validate()
            .map_err(|e| CliError::new(format!("setting `{label}`: {e}")))?;
    }
    Ok(out)
}

pub fn run(a: Args) -> Result<Status, CliError> {
    let mut rc = RunConfig::load(&a.config)?;
    let grid = settings(&rc.layer, a.axis, &a.values)?;
    let task = prepare(&mut rc, a.task.as_deref(), a.steps, a.seed)?;
    let data = gen_task(&task)?;
    let opts = options(&rc, false);

    let mut csv = String::from("setting,final_train_loss,final_eval_loss\n");
    for (label, cfg) in &grid {
        let r = train(cfg, &data, &opts)?;
        csv.push_str(&format!("{label},{:?},{:?}\n", r.final_train_loss, r.final_eval_loss));
    }
    print!("{csv}");
    let mut run = Run::start(a.out.as_deref())?;
    run.write("sweep.csv", &csv)?;
    let axis = match a.axis {
        Axis::KSigma => "K_sigma",
        Axis::Variances => "variances",
    };
    let resolved = serde_json::json!({
        "base": rc,
        "axis": axis,
        "settings": grid.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
    });
    run.finish(
        "sweep",
        &resolved,
        &[("task_seed", task.seed), ("init_seed", opts.init_seed)],
    )?;
    Ok(Status::Pass)
}
