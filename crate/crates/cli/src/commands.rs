// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Each returns a [`Report`], an optional chart
//! and any extra artifacts; writing them is left to [`crate::run`].

use std::io::BufReader;
use std::path::{Path, PathBuf};

use attrlens_core::corpus::{
    generate_corpus, split_probe_test, Corpus, CorpusSpec, StandardScheme, Tokenizer, CUE_ID,
    STANDARD_VOCAB_SIZE,
};
use attrlens_core::interventions::{
    run_lambda_sweep, run_masking_experiment, run_random_baseline, select_enrichment_layer,
    EnrichmentPlan, SelectionRule,
};
use attrlens_core::lens::{
    correlation_study, lens_predictions, CorrectnessSplit, LabelSet, LensPredictions,
    PredictionDomain, ScoreSubset, ScoreTable,
};
use attrlens_core::planted::{build_planted, LensOutcome, PlantCertificate};
use attrlens_core::report::{merge_tables, num, opt_num, LineChart, Report, Series, Table};
use attrlens_core::weights_io::{deserialize_weights, serialize_weights};
use attrlens_core::{Error, Model, Position, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{require, RunConfig};

pub const WEIGHTS_FILE: &str = "model.lensw";
pub const CORPUS_FILE: &str = "corpus.jsonl";

pub struct Output {
    pub report: Report,
    pub chart: Option<LineChart>,
    /// File name and contents, written next to the report.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<(Model, Option<PlantCertificate>)> {
    let file = deserialize_weights(&read_bytes(path)?)?;
    let cert = file
        .plant
        .as_deref()
        .map(|s| serde_json::from_str(s).map_err(|e| Error::Format(format!("plant section: {e}"))))
        .transpose()?;
    Ok((Model::new(file.spec, file.weights)?, cert))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Corpus::read_jsonl(BufReader::new(f))
}

fn load_pair(model: &Path, corpus: &Path) -> Result<(Model, Corpus, LabelSet)> {
    let (model, _) = load_model(model)?;
    let corpus = load_corpus(corpus)?;
    corpus.validate(model.spec(), None)?;
    let labels = LabelSet::new(corpus.label_ids.clone())?;
    Ok((model, corpus, labels))
}

fn report(command: &str, cfg: &RunConfig, payload: Value, table: Table) -> Result<Report> {
    Ok(Report {
        command: command.into(),
        config: serde_json::to_value(cfg)?,
        payload,
        table,
    })
}

fn outcome_label(o: &LensOutcome) -> String {
    match o {
        LensOutcome::Chance => "chance".into(),
        LensOutcome::Correct => "correct".into(),
        LensOutcome::Wrong => "wrong".into(),
        LensOutcome::Mixed { correct_fraction } => format!("mixed({correct_fraction})"),
        LensOutcome::Undetermined => "undetermined".into(),
    }
}

pub fn gen_model(cfg: &mut RunConfig) -> Result<Output> {
    let mut plant = require(&cfg.plant_spec, "plant")?.clone();
    if let Some(scheme) = cfg.scheme {
        plant.label_alphabet = scheme.scheme().label_ids(&Tokenizer::standard())?;
        plant.cue_token = CUE_ID;
        plant.base.vocab_size = STANDARD_VOCAB_SIZE;
        cfg.plant_spec = Some(plant.clone());
    }
    let pm = build_planted(&plant).map_err(|e| Error::Config(format!("plant spec: {e}")))?;
    let cert_json = serde_json::to_string(&pm.certificate)?;
    let (spec, weights) = pm.model.into_parts();
    let bytes = serialize_weights(&spec, &weights, Some(&cert_json))?;

    let mut table = Table::new(["first_layer", "last_layer", "clean", "corrupted"]);
    for b in &pm.certificate.bands {
        table.push(vec![
            json!(b.first),
            json!(b.last),
            json!(outcome_label(&b.clean)),
            json!(outcome_label(&b.corrupted)),
        ])?;
    }
    let payload = json!({
        "weights_file": WEIGHTS_FILE,
        "weights_sha256": sha256(&bytes),
        "certificate": pm.certificate,
    });
    Ok(Output {
        report: report("gen-model", cfg, payload, table)?,
        chart: None,
        artifacts: vec![(WEIGHTS_FILE.into(), bytes)],
    })
}

pub fn gen_corpus(cfg: &mut RunConfig) -> Result<Output> {
    let (model, cert) = load_model(require(&cfg.model, "model")?)?;
    let cert =
        cert.ok_or_else(|| Error::Config("corpus generation needs a planted model".into()))?;
    let tok = Tokenizer::standard();
    let scheme = match cfg.scheme {
        Some(s) => s,
        None => StandardScheme::ALL
            .into_iter()
            .find(|s| s.scheme().label_ids(&tok).ok().as_ref() == Some(&cert.plant.label_alphabet))
            .ok_or_else(|| {
                Error::Config("no standard scheme matches the model's labels; pass --scheme".into())
            })?,
    };
    cfg.scheme = Some(scheme);
    let spec = CorpusSpec {
        audio_len: *require(&cfg.audio_len, "audio-len")?,
        ..CorpusSpec::new(
            scheme.scheme(),
            *require(&cfg.format, "format")?,
            *require(&cfg.n, "n")?,
            *require(&cfg.seed, "seed")?,
        )
    };
    let corpus =
        generate_corpus(&spec, &cert.plant, &tok).map_err(|e| Error::Config(e.to_string()))?;
    corpus.validate(model.spec(), Some(&cert.layout))?;
    let bytes = corpus.to_jsonl()?;

    let mut table = Table::new(["label", "token_id", "count", "corrupted"]);
    for (word, &id) in corpus.scheme.labels.iter().zip(&corpus.label_ids) {
        let of_label = corpus.samples.iter().filter(|s| s.label == id);
        let count = of_label.clone().count();
        let corrupted = of_label.filter(|s| s.is_corrupted).count();
        table.push(vec![json!(word), json!(id), json!(count), json!(corrupted)])?;
    }
    let payload = json!({
        "corpus_file": CORPUS_FILE,
        "corpus_sha256": sha256(&bytes),
        "n_samples": corpus.len(),
        "n_corrupted": corpus.samples.iter().filter(|s| s.is_corrupted).count(),
        "label_ids": corpus.label_ids,
        "chance": num(corpus.chance()),
    });
    Ok(Output {
        report: report("gen-corpus", cfg, payload, table)?,
        chart: None,
        artifacts: vec![(CORPUS_FILE.into(), bytes)],
    })
}

fn layer_chart(title: &str, tables: &[(String, &ScoreTable)], chance: f64) -> LineChart {
    LineChart {
        title: title.into(),
        x_label: "layer".into(),
        y_label: "information score".into(),
        series: tables
            .iter()
            .map(|(name, t)| Series {
                name: name.clone(),
                points: t
                    .information
                    .iter()
                    .enumerate()
                    .map(|(l, &i)| (l as f64, i))
                    .collect(),
            })
            .collect(),
        chance: Some(chance),
        y_range: Some((0.0, 1.0)),
    }
}

fn layer_table(columns: &[(String, Option<&ScoreTable>)], n_layers: usize) -> Result<Table> {
    let mut table =
        Table::new(std::iter::once("layer".to_string()).chain(columns.iter().map(|c| c.0.clone())));
    for l in 0..=n_layers {
        let mut row = vec![json!(l)];
        row.extend(
            columns
                .iter()
                .map(|(_, t)| t.map_or(Value::Null, |t| num(t.information[l]))),
        );
        table.push(row)?;
    }
    Ok(table)
}

fn subset_indices(
    preds: &LensPredictions,
    split: &CorrectnessSplit,
    subset: ScoreSubset,
) -> Vec<usize> {
    match subset {
        ScoreSubset::All => preds.all_indices(),
        ScoreSubset::Correct => split.correct.clone(),
        ScoreSubset::Incorrect => split.incorrect.clone(),
    }
}

pub fn rq1(cfg: &mut RunConfig) -> Result<Output> {
    let (model, corpus, labels) = load_pair(
        require(&cfg.model, "model")?,
        require(&cfg.corpus, "corpus")?,
    )?;
    let subset = *require(&cfg.subset, "subset")?;
    let alpha = cfg.alpha();
    let mut positions: Vec<Position> = require(&cfg.positions, "positions")?
        .iter()
        .map(|&p| Position(p))
        .collect();
    if positions.is_empty() {
        return Err(Error::Config("no positions to analyse".into()));
    }
    let with_last = !positions.contains(&Position::LAST);
    if with_last {
        positions.push(Position::LAST);
    }
    let preds = lens_predictions(
        &model,
        &corpus,
        &positions,
        &[],
        &labels,
        PredictionDomain::Labels,
    )?;
    let last = preds
        .iter()
        .find(|p| p.position == Position::LAST)
        .expect("last position included");
    let split = CorrectnessSplit::from_predictions(last);
    let shown = if with_last {
        &preds[..preds.len() - 1]
    } else {
        &preds[..]
    };
    let tables = shown
        .iter()
        .map(|p| {
            ScoreTable::from_predictions(
                p,
                &subset_indices(p, &split, subset),
                subset,
                labels.len(),
                alpha,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let named: Vec<(String, &ScoreTable)> = tables
        .iter()
        .map(|t| (format!("info@{}", t.position), t))
        .collect();
    let table = layer_table(
        &named
            .iter()
            .map(|(n, t)| (n.clone(), Some(*t)))
            .collect::<Vec<_>>(),
        model.spec().n_layers,
    )?;
    let chart = layer_chart("layer-wise information", &named, labels.chance());
    let payload = json!({
        "n_samples": corpus.len(),
        "n_labels": labels.len(),
        "chance": num(labels.chance()),
        "tables": tables,
    });
    Ok(Output {
        report: report("rq1", cfg, payload, table)?,
        chart: Some(chart),
        artifacts: Vec::new(),
    })
}

pub fn rq2(cfg: &mut RunConfig) -> Result<Output> {
    let (model, corpus, labels) = load_pair(
        require(&cfg.model, "model")?,
        require(&cfg.corpus, "corpus")?,
    )?;
    let alpha = cfg.alpha();
    let preds = lens_predictions(
        &model,
        &corpus,
        &[Position::LAST],
        &[],
        &labels,
        PredictionDomain::Labels,
    )?;
    let p = &preds[0];
    let split = CorrectnessSplit::from_predictions(p);
    let table_for = |subset| {
        let idx = subset_indices(p, &split, subset);
        if idx.is_empty() {
            Ok(None)
        } else {
            ScoreTable::from_predictions(p, &idx, subset, labels.len(), alpha).map(Some)
        }
    };
    let all = table_for(ScoreSubset::All)?;
    let correct = table_for(ScoreSubset::Correct)?;
    let incorrect = table_for(ScoreSubset::Incorrect)?;
    let columns = [
        ("all".to_string(), all.as_ref()),
        ("correct".to_string(), correct.as_ref()),
        ("incorrect".to_string(), incorrect.as_ref()),
    ];
    let table = layer_table(&columns, model.spec().n_layers)?;
    let present: Vec<(String, &ScoreTable)> = columns
        .iter()
        .filter_map(|(n, t)| t.map(|t| (n.clone(), t)))
        .collect();
    let chart = layer_chart(
        "information by prediction correctness",
        &present,
        labels.chance(),
    );
    let payload = json!({
        "n_samples": corpus.len(),
        "n_correct": split.correct.len(),
        "n_incorrect": split.incorrect.len(),
        "accuracy": num(split.accuracy()),
        "chance": num(labels.chance()),
        "all": all,
        "correct": correct,
        "incorrect": incorrect,
    });
    Ok(Output {
        report: report("rq2", cfg, payload, table)?,
        chart: Some(chart),
        artifacts: Vec::new(),
    })
}

/// `"23.90 / 85.00"`: critical layer, then accuracy in percent.
pub fn table_cell(critical: Option<f64>, accuracy: f64) -> String {
    let c = critical.map_or_else(|| "n/a".to_string(), |c| format!("{c:.2}"));
    format!("{c} / {:.2}", accuracy * 100.0)
}

pub fn rq3(cfg: &mut RunConfig) -> Result<Output> {
    let runs = require(&cfg.runs, "run")?.clone();
    if runs.is_empty() {
        return Err(Error::Config("rq3 needs at least one --run".into()));
    }
    let alpha = cfg.alpha();
    let mut table = Table::new([
        "run",
        "model",
        "corpus",
        "critical_layer",
        "accuracy",
        "cell",
    ]);
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let (model, corpus, labels) = load_pair(&run.model, &run.corpus)?;
        let preds = lens_predictions(
            &model,
            &corpus,
            &[Position::LAST],
            &[],
            &labels,
            PredictionDomain::Labels,
        )?;
        let t = ScoreTable::all(&preds[0], labels.len(), alpha)?;
        table.push(vec![
            json!(i),
            json!(run.model.display().to_string()),
            json!(run.corpus.display().to_string()),
            opt_num(t.critical_layer),
            num(t.accuracy),
            json!(table_cell(t.critical_layer, t.accuracy)),
        ])?;
        pairs.push((t.critical_layer, t.accuracy));
        rows.push(t);
    }
    let (correlation, note) = match correlation_study(&pairs) {
        Ok(c) => (Some(c), None),
        Err(e @ (Error::UndefinedCorrelation(_) | Error::InvalidInput(_))) => {
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let mut points: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|&(c, a)| c.map(|c| (c, a)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let chart = LineChart {
        title: "accuracy against critical layer".into(),
        x_label: "critical layer".into(),
        y_label: "accuracy".into(),
        series: vec![Series {
            name: "runs".into(),
            points,
        }],
        chance: None,
        y_range: Some((0.0, 1.0)),
    };
    let payload = json!({
        "runs": rows,
        "correlation": correlation,
        "correlation_note": note,
    });
    Ok(Output {
        report: report("rq3", cfg, payload, table)?,
        chart: Some(chart),
        artifacts: Vec::new(),
    })
}

pub fn rq4(cfg: &mut RunConfig) -> Result<Output> {
    let (model, corpus, labels) = load_pair(
        require(&cfg.model, "model")?,
        require(&cfg.corpus, "corpus")?,
    )?;
    let out = run_masking_experiment(&model, &corpus, &labels, cfg.alpha())?;
    let columns = [
        ("last".to_string(), Some(&out.unmasked)),
        ("penultimate".to_string(), Some(&out.penultimate)),
        ("masked_last".to_string(), Some(&out.masked)),
    ];
    let table = layer_table(&columns, model.spec().n_layers)?;
    let chart = layer_chart(
        "audio masking at the last token",
        &columns
            .iter()
            .map(|(n, t)| (n.clone(), t.expect("present")))
            .collect::<Vec<_>>(),
        labels.chance(),
    );
    let payload = json!({
        "n_samples": corpus.len(),
        "chance": num(labels.chance()),
        "outcome": out,
    });
    Ok(Output {
        report: report("rq4", cfg, payload, table)?,
        chart: Some(chart),
        artifacts: Vec::new(),
    })
}

pub fn rq5(cfg: &mut RunConfig) -> Result<Output> {
    let (model, corpus, labels) = load_pair(
        require(&cfg.model, "model")?,
        require(&cfg.corpus, "corpus")?,
    )?;
    let gap = *require(&cfg.gap, "gap")?;
    let lambdas = require(&cfg.lambdas, "lambdas")?.clone();
    let seeds = require(&cfg.seeds, "seeds")?.clone();
    let (probe, test) = split_probe_test(
        &corpus,
        *require(&cfg.probe_size, "probe-size")?,
        *require(&cfg.split_seed, "split-seed")?,
    )?;

    let probe_preds = lens_predictions(
        &model,
        &probe,
        &[Position::LAST],
        &[],
        &labels,
        PredictionDomain::Labels,
    )?;
    let selection =
        select_enrichment_layer(&probe_preds[0], gap, SelectionRule::MaxInfoOnIncorrect)?;
    let plan = EnrichmentPlan {
        selected_layer: selection.layer,
        gap,
        lambdas: lambdas.clone(),
        selection_rule: selection.rule,
    };
    let sweep = run_lambda_sweep(&model, &test, &labels, &plan)?;
    let random = run_random_baseline(&model, &test, &labels, gap, &lambdas, &seeds)?;

    let mut table = Table::new(["lambda", "informed", "random_mean", "random_std"]);
    for (k, p) in sweep.points.iter().enumerate() {
        table.push(vec![
            num(p.lambda),
            num(p.accuracy),
            num(random.mean_accuracy[k]),
            opt_num(random.std_accuracy[k]),
        ])?;
    }
    let chart = LineChart {
        title: "accuracy after enrichment".into(),
        x_label: "lambda".into(),
        y_label: "accuracy".into(),
        series: vec![
            Series {
                name: format!("layer {}", selection.layer),
                points: sweep
                    .points
                    .iter()
                    .map(|p| (p.lambda, p.accuracy))
                    .collect(),
            },
            Series {
                name: "random layer".into(),
                points: lambdas
                    .iter()
                    .copied()
                    .zip(random.mean_accuracy.iter().copied())
                    .collect(),
            },
        ],
        chance: Some(labels.chance()),
        y_range: Some((0.0, 1.0)),
    };
    let probe_bytes = probe.to_jsonl()?;
    let test_bytes = test.to_jsonl()?;
    let payload = json!({
        "probe_size": probe.len(),
        "test_size": test.len(),
        "probe_sha256": sha256(&probe_bytes),
        "test_sha256": sha256(&test_bytes),
        "selection": selection,
        "sweep": sweep,
        "random_baseline": random,
    });
    Ok(Output {
        report: report("rq5", cfg, payload, table)?,
        chart: Some(chart),
        artifacts: vec![
            ("probe.jsonl".into(), probe_bytes),
            ("test.jsonl".into(), test_bytes),
        ],
    })
}

fn split_input(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let stem = path
                .file_stem()
                .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (stem, path)
        }
    }
}

pub fn report_merge(cfg: &mut RunConfig) -> Result<Output> {
    let inputs = require(&cfg.inputs, "input")?.clone();
    if inputs.len() < 2 {
        return Err(Error::Config(
            "report-merge needs at least two --input reports".into(),
        ));
    }
    let mut sources = Vec::new();
    let mut tables = Vec::new();
    for spec in &inputs {
        let (label, path) = split_input(spec);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let r = Report::from_json(&text)?;
        sources.push(
            json!({"label": label, "command": r.command, "file": path.display().to_string()}),
        );
        tables.push((label, r.table));
    }
    let labels: std::collections::BTreeSet<_> = tables.iter().map(|t| &t.0).collect();
    if labels.len() != tables.len() {
        return Err(Error::Config(
            "report labels must be distinct; use LABEL=PATH".into(),
        ));
    }
    let merged = merge_tables(&tables)?;
    let xs: Vec<Option<f64>> = merged
        .numeric_column(&merged.columns[0])
        .expect("key column");
    let series = merged.columns[1..]
        .iter()
        .filter_map(|name| {
            let ys = merged.numeric_column(name)?;
            if ys.iter().all(Option::is_none) {
                return None;
            }
            let points = xs
                .iter()
                .zip(&ys)
                .filter_map(|(x, y)| Some((((*x)?), y.unwrap_or(f64::NAN))))
                .collect();
            Some(Series {
                name: name.clone(),
                points,
            })
        })
        .collect();
    let chart = LineChart {
        title: "merged reports".into(),
        x_label: merged.columns[0].clone(),
        y_label: "value".into(),
        series,
        chance: None,
        y_range: None,
    };
    let payload =
        json!({"sources": sources, "n_rows": merged.rows.len(), "columns": merged.columns});
    Ok(Output {
        report: report("report-merge", cfg, payload, merged)?,
        chart: Some(chart),
        artifacts: Vec::new(),
    })
}
