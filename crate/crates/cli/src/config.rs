// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration shared by every subcommand. A JSON file (or the
//! `config` field of an emitted report) may supply any field; command-line
//! flags win.

use std::path::{Path, PathBuf};

use attrlens_core::corpus::{PromptFormat, StandardScheme};
use attrlens_core::corpus::{DEFAULT_AUDIO_LEN, DEFAULT_CORPUS_SIZE, DEFAULT_PROBE_SIZE};
use attrlens_core::interventions::{DEFAULT_LAMBDAS, DEFAULT_RANDOM_SEEDS};
use attrlens_core::lens::{ScoreSubset, DEFAULT_ALPHA};
use attrlens_core::model::DEFAULT_ENRICH_GAP;
use attrlens_core::planted::PlantSpec;
use attrlens_core::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One model/corpus pair of a multi-run analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPair {
    pub model: PathBuf,
    pub corpus: PathBuf,
}

fn parse_run(s: &str) -> std::result::Result<RunPair, String> {
    let (model, corpus) = s
        .split_once(',')
        .ok_or_else(|| format!("expected MODEL,CORPUS, got {s:?}"))?;
    Ok(RunPair {
        model: model.into(),
        corpus: corpus.into(),
    })
}

fn parse_subset(s: &str) -> std::result::Result<ScoreSubset, String> {
    match s {
        "all" => Ok(ScoreSubset::All),
        "correct" => Ok(ScoreSubset::Correct),
        "incorrect" => Ok(ScoreSubset::Incorrect),
        other => Err(format!(
            "unknown subset {other:?} (all, correct, incorrect)"
        )),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON run config, or a report whose embedded config is reused.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Weights container.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,

    /// Corpus JSONL file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,

    /// Directory receiving reports and artifacts.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    /// Plant specification (gen-model).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant: Option<PathBuf>,

    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant_spec: Option<PlantSpec>,

    /// Attribute scheme: gender, language, emotion or animal.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<StandardScheme>,

    /// Prompt format: P1, P2 or P3.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<PromptFormat>,

    /// Number of samples (gen-corpus).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,

    /// Corpus generation seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Audio prefix length (gen-corpus).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_len: Option<usize>,

    /// Positions to analyse, negative values count from the end.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<i64>>,

    /// Contribution margin above chance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,

    /// Enrichment scales.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,

    /// Layer distance between enrichment source and target.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,

    /// Seeds for the random-layer baseline.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,

    /// Probe split size (rq5).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_size: Option<usize>,

    /// Probe/test split seed (rq5).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,

    /// Sample subset for rq1: all, correct or incorrect.
    #[arg(long, value_parser = parse_subset)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<ScoreSubset>,

    /// MODEL,CORPUS pair (rq3, repeatable).
    #[arg(long = "run", value_parser = parse_run)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<RunPair>>,

    /// Report to merge, as PATH or LABEL=PATH (report-merge, repeatable).
    #[arg(long = "input")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($f:ident),*) => {
        RunConfig { config: None, $($f: $top.$f.or($base.$f),)* }
    };
}

impl RunConfig {
    /// Fields set in `self` win over `base`.
    pub fn overlay(self, base: RunConfig) -> RunConfig {
        overlay!(
            self, base, model, corpus, out_dir, plant, plant_spec, scheme, format, n, seed,
            audio_len, positions, alpha, lambdas, gap, seeds, probe_size, split_seed, subset, runs,
            inputs
        )
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("."))
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parse a config file. A report file contributes its `config` field and
/// must come from the same command.
pub fn load_config_file(path: &Path, command: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let inner = match (&value.get("command"), value.get("config")) {
        (Some(cmd), Some(cfg)) => {
            if cmd.as_str() != Some(command) {
                return Err(Error::Config(format!(
                    "{} was produced by {cmd}, not {command}",
                    path.display()
                )));
            }
            cfg.clone()
        }
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_plant_spec(path: &Path) -> Result<PlantSpec> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Merge flags with the optional config file and fill command defaults.
pub fn resolve(command: &str, flags: RunConfig) -> Result<RunConfig> {
    let file = match &flags.config {
        Some(p) => load_config_file(p, command)?,
        None => RunConfig::default(),
    };
    let plant_flag = flags.plant.clone();
    let mut cfg = flags.overlay(file);
    if let Some(p) = plant_flag {
        cfg.plant_spec = Some(load_plant_spec(&p)?);
    } else if cfg.plant_spec.is_none() {
        if let Some(p) = &cfg.plant {
            cfg.plant_spec = Some(load_plant_spec(p)?);
        }
    }
    cfg.out_dir.get_or_insert_with(|| PathBuf::from("."));
    let analysis = command.starts_with("rq");
    if analysis {
        cfg.alpha.get_or_insert(DEFAULT_ALPHA);
    }
    match command {
        "gen-corpus" => {
            cfg.n.get_or_insert(DEFAULT_CORPUS_SIZE);
            cfg.seed.get_or_insert(0);
            cfg.format.get_or_insert(PromptFormat::P1);
            cfg.audio_len.get_or_insert(DEFAULT_AUDIO_LEN);
        }
        "rq1" => {
            cfg.positions.get_or_insert_with(|| vec![-1]);
            cfg.subset.get_or_insert(ScoreSubset::All);
        }
        "rq5" => {
            cfg.gap.get_or_insert(DEFAULT_ENRICH_GAP);
            cfg.lambdas.get_or_insert_with(|| DEFAULT_LAMBDAS.to_vec());
            cfg.seeds
                .get_or_insert_with(|| DEFAULT_RANDOM_SEEDS.to_vec());
            cfg.probe_size.get_or_insert(DEFAULT_PROBE_SIZE);
            cfg.split_seed.get_or_insert(0);
        }
        _ => {}
    }
    if let Some(a) = cfg.alpha {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {a}")));
        }
    }
    Ok(cfg)
}
