use std::path::PathBuf;

use dstc_core::{parameter_count, zero_params, ParamBreakdown, Variant};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{to_json, Run};
use crate::{CliError, Status};

#[derive(clap::Args)]
pub struct Args {
    /// Layer configuration file; its geometry is reused for every variant.
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Row {
    variant: Variant,
    #[serde(flatten)]
    counts: ParamBreakdown,
    census: usize,
    census_matches: bool,
}

#[derive(Serialize)]
struct Report {
    rows: Vec<Row>,
    pass: bool,
}

pub fn run(a: Args) -> Result<Status, CliError> {
    let rc = RunConfig::load(&a.config)?;
    let mut run = Run::start(a.out.as_deref())?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = if v == rc.layer.variant {
            rc.layer.clone()
        } else {
            rc.layer.as_variant(v)
        };
        cfg.validate()?;
        let counts = parameter_count(&cfg);
        let census = zero_params(&cfg)?.census();
        rows.push(Row {
            variant: v,
            census_matches: census == counts.total,
            counts,
            census,
        });
    }
    let report = Report {
        pass: rows.iter().all(|r| r.census_matches),
        rows,
    };

    println!(
        "{:<22}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}",
        "variant", "w", "offsets", "scores", "plumbing", "total", "census"
    );
    for r in &report.rows {
        let c = &r.counts;
        println!(
            "{:<22}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}",
            r.variant.name(),
            c.w,
            c.offsets,
            c.scores,
            c.plumbing,
            c.total,
            r.census
        );
    }
    run.write("params.json", &to_json(&report)?)?;
    run.finish("params", &rc, &[])?;
    Ok(if report.pass { Status::Pass } else { Status::Fail })
}
