// SPDX-License-Identifier: MIT OR Apache-2.0

//! `attrlens` command-line front end.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use attrlens_core::{Error, ErrorCategory, Result};
use clap::{Parser, Subcommand};

use crate::commands::Output;
use crate::config::{resolve, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "attrlens",
    version,
    about = "Layer-wise attribute information analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a planted model from a plant specification.
    GenModel(RunConfig),
    /// Generate a labeled corpus for a planted model.
    GenCorpus(RunConfig),
    /// Layer-wise information scores.
    Rq1(RunConfig),
    /// Scores split by prediction correctness.
    Rq2(RunConfig),
    /// Critical layer against accuracy over several runs.
    Rq3(RunConfig),
    /// Last-token audio masking.
    Rq4(RunConfig),
    /// Enrichment sweep with a random-layer baseline.
    Rq5(RunConfig),
    /// Combine report tables into one wide table.
    ReportMerge(RunConfig),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenModel(_) => "gen-model",
            Command::GenCorpus(_) => "gen-corpus",
            Command::Rq1(_) => "rq1",
            Command::Rq2(_) => "rq2",
            Command::Rq3(_) => "rq3",
            Command::Rq4(_) => "rq4",
            Command::Rq5(_) => "rq5",
            Command::ReportMerge(_) => "report-merge",
        }
    }

    fn into_config(self) -> RunConfig {
        match self {
            Command::GenModel(c)
            | Command::GenCorpus(c)
            | Command::Rq1(c)
            | Command::Rq2(c)
            | Command::Rq3(c)
            | Command::Rq4(c)
            | Command::Rq5(c)
            | Command::ReportMerge(c) => c,
        }
    }
}

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

/// Run one subcommand without touching the filesystem beyond its inputs.
pub fn execute(name: &str, flags: RunConfig) -> Result<Output> {
    let mut cfg = resolve(name, flags)?;
    match name {
        "gen-model" => commands::gen_model(&mut cfg),
        "gen-corpus" => commands::gen_corpus(&mut cfg),
        "rq1" => commands::rq1(&mut cfg),
        "rq2" => commands::rq2(&mut cfg),
        "rq3" => commands::rq3(&mut cfg),
        "rq4" => commands::rq4(&mut cfg),
        "rq5" => commands::rq5(&mut cfg),
        "report-merge" => commands::report_merge(&mut cfg),
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Run the command and write `<command>.json`, `.csv`, `.svg` and any
/// artifacts to the output directory. Returns the written paths.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let name = cli.command.name();
    let out = execute(name, cli.command.into_config())?;
    let dir = resolve_out_dir(&out)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (file, bytes) in &out.artifacts {
        let p = dir.join(file);
        write(&p, bytes)?;
        written.push(p);
    }
    let json = dir.join(format!("{name}.json"));
    write(&json, out.report.to_json()?.as_bytes())?;
    let csv = dir.join(format!("{name}.csv"));
    write(&csv, out.report.table.to_csv().as_bytes())?;
    written.extend([json, csv]);
    if let Some(chart) = &out.chart {
        let svg = dir.join(format!("{name}.svg"));
        write(&svg, chart.to_svg().as_bytes())?;
        written.push(svg);
    }
    Ok(written)
}

fn resolve_out_dir(out: &Output) -> Result<PathBuf> {
    let dir = out
        .report
        .config
        .get("out_dir")
        .and_then(|v| v.as_str())
        .unwrap_or(".");
    Ok(PathBuf::from(dir))
}
