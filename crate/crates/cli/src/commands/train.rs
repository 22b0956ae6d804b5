use std::path::PathBuf;

use dstc_core::harness::history_csv;
use dstc_core::{gen_task, train, ToyTask, TrainOptions, Variant};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{to_json, Run};
use crate::{CliError, Status};

#[derive(clap::Args)]
pub struct Args {
    /// Layer configuration file.
    config: PathBuf,
    /// Task file; overrides the config's `task` block.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Seeds both the task data and the learner initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record elapsed milliseconds in the histories instead of 0.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Serialize)]
struct RunSummary {
    variant: Variant,
    history_file: String,
    final_train_loss: f64,
    final_eval_loss: f64,
}

#[derive(Serialize)]
struct Summary {
    task: ToyTask,
    steps: usize,
    init_seed: u64,
    runs: Vec<RunSummary>,
    /// Final eval loss of the configured variant over the baseline's.
    eval_loss_ratio: f64,
    train_loss_ratio: f64,
}

/// Applies `--seed` and `--steps` and resolves the task.
pub fn prepare(
    rc: &mut RunConfig,
    task_file: Option<&std::path::Path>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<ToyTask, CliError> {
    let mut task = rc.resolve_task(task_file)?;
    if let Some(s) = seed {
        task.seed = s;
        rc.train.init_seed = s;
    }
    if let Some(n) = steps {
        rc.train.steps = n;
    }
    rc.task = Some(task.clone());
    Ok(task)
}

pub fn options(rc: &RunConfig, wall_clock: bool) -> TrainOptions {
    TrainOptions {
        steps: rc.train.steps,
        optimizer: rc.optimizer.clone(),
        init_seed: rc.train.init_seed,
        log_every: rc.train.log_every,
        wall_clock,
    }
}

pub fn run(a: Args) -> Result<Status, CliError> {
    let mut rc = RunConfig::load(&a.config)?;
    let task = prepare(&mut rc, a.task.as_deref(), a.steps, a.seed)?;
    let data = gen_task(&task)?;
    let opts = options(&rc, a.wall_clock);
    let mut configs = vec![rc.layer.as_variant(Variant::Tc)];
    if rc.layer.variant != Variant::Tc {
        configs.push(rc.layer.clone());
    }

    let mut run = Run::start(a.out.as_deref())?;
    let mut runs = Vec::new();
    for cfg in &configs {
        let result = train(cfg, &data, &opts)?;
        let file = format!("history_{}.csv", cfg.variant.name());
        run.write(&file, &history_csv(&result.history))?;
        eprintln!(
            "{}: train {:.6e} eval {:.6e}",
            cfg.variant.name(),
            result.final_train_loss,
            result.final_eval_loss
        );
        runs.push(RunSummary {
            variant: cfg.variant,
            history_file: file,
            final_train_loss: result.final_train_loss,
            final_eval_loss: result.final_eval_loss,
        });
    }
    let (base, last) = (&runs[0], &runs[runs.len() - 1]);
    let summary = Summary {
        eval_loss_ratio: last.final_eval_loss / base.final_eval_loss,
        train_loss_ratio: last.final_train_loss / base.final_train_loss,
        task: task.clone(),
        steps: opts.steps,
        init_seed: opts.init_seed,
        runs,
    };
    let json = to_json(&summary)?;
    print!("{json}");
    run.write("summary.json", &json)?;
    run.finish("train", &rc, &[("task_seed", task.seed), ("init_seed", opts.init_seed)])?;
    Ok(Status::Pass)
}
