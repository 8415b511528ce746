// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use attrlens_core::corpus::{
    generate_corpus, split_probe_test, Corpus, CorpusSpec, PromptFormat, StandardScheme, Tokenizer,
};
use attrlens_core::interventions::{
    run_lambda_sweep, run_masking_experiment, run_random_baseline, select_enrichment_layer,
    EnrichmentPlan, SelectionRule, DEFAULT_LAMBDAS, DEFAULT_RANDOM_SEEDS,
};
use attrlens_core::lens::{
    correlation_study, information_score, lens_predictions, logit_lens, split_by_correctness,
    trace_corpus, CorrectnessSplit, LabelSet, PredictionDomain, ScoreSubset, ScoreTable,
    DEFAULT_ALPHA,
};
use attrlens_core::model::{InputSequence, ModelSpec, NormKind};
use attrlens_core::numkernel::pearson;
use attrlens_core::planted::{
    build_planted, PlantCertificate, PlantSpec, DEFAULT_BEACON_SCALE, DEFAULT_NOISE_SCALE,
};
use attrlens_core::{Model, ModelWeights, Position};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

struct Scenario {
    model: Model,
    certificate: PlantCertificate,
    corpus: Corpus,
    labels: LabelSet,
}

fn plant_spec(
    scheme: StandardScheme,
    inject: usize,
    degrade: Option<usize>,
    fraction: f64,
) -> PlantSpec {
    let tok = Tokenizer::standard();
    PlantSpec {
        base: ModelSpec {
            n_layers: 12,
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            d_mlp: 8,
            vocab_size: tok.vocab_size(),
            norm_kind: NormKind::Identity,
            max_positions: 64,
            norm_eps: 1e-6,
        },
        inject_layer: inject,
        copy_gain: 1.0,
        degrade_layer: degrade,
        degrade_gain: 2.0,
        degrade_fraction: fraction,
        label_alphabet: scheme.scheme().label_ids(&tok).unwrap(),
        cue_token: 2,
        beacon_scale: DEFAULT_BEACON_SCALE,
        noise_scale: DEFAULT_NOISE_SCALE,
        seed: 17,
    }
}

fn scenario(
    plant: &PlantSpec,
    scheme: StandardScheme,
    n: usize,
    seed: u64,
) -> Result<Scenario, String> {
    let tok = Tokenizer::standard();
    let pm = build_planted(plant).map_err(|e| e.to_string())?;
    let corpus = generate_corpus(
        &CorpusSpec::new(scheme.scheme(), PromptFormat::P1, n, seed),
        plant,
        &tok,
    )
    .map_err(|e| e.to_string())?;
    let labels = LabelSet::new(corpus.label_ids.clone()).map_err(|e| e.to_string())?;
    Ok(Scenario {
        model: pm.model,
        certificate: pm.certificate,
        corpus,
        labels,
    })
}

fn random_input(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> InputSequence {
    let audio_len = rng.random_range(0..6);
    let text_len = rng.random_range(1..10);
    InputSequence {
        audio_prefix: (0..audio_len)
            .map(|_| {
                (0..spec.d_model)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
        text_tokens: (0..text_len)
            .map(|_| rng.random_range(0..spec.vocab_size as u32))
            .collect(),
        offsets: Vec::new(),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure!(
        elapsed <= Duration::from_secs(limit_s),
        "took {:.1}s, limit {limit_s}s",
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn final_layer_identity() -> Check {
    let start = Instant::now();
    let spec = ModelSpec {
        n_layers: 6,
        d_model: 32,
        n_heads: 4,
        d_head: 8,
        d_mlp: 64,
        vocab_size: 64,
        norm_kind: NormKind::Rms,
        max_positions: 32,
        norm_eps: 1e-6,
    };
    let model =
        Model::new(spec.clone(), ModelWeights::random(&spec, 2024)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let input = random_input(&mut rng, &spec);
        let trace = model.forward(&input, &[]).map_err(|e| e.to_string())?;
        let table = logit_lens(&model, &trace, Position::LAST).map_err(|e| e.to_string())?;
        let next = trace
            .next_token_distribution(Position::LAST)
            .map_err(|e| e.to_string())?;
        ensure!(
            bits(&table.rows[6]) == bits(next),
            "sample {i}: lens row L differs from next-token distribution"
        );
    }
    within(start.elapsed(), 5)?;
    Ok(format!(
        "100 samples bit-identical in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn accuracy_identity() -> Check {
    let start = Instant::now();
    let plant = plant_spec(StandardScheme::Emotion, 3, Some(9), 0.25);
    let s = scenario(&plant, StandardScheme::Emotion, 300, 4)?;
    let spec = s.model.spec().clone();
    let random = Model::new(
        ModelSpec {
            norm_kind: NormKind::Rms,
            ..spec.clone()
        },
        ModelWeights::random(&spec, 8),
    )
    .map_err(|e| e.to_string())?;
    let mut checked = Vec::new();
    for (name, model) in [("planted", &s.model), ("random", &random)] {
        let traces = trace_corpus(model, &s.corpus, &[]).map_err(|e| e.to_string())?;
        let info = information_score(
            model,
            &s.corpus,
            &traces,
            spec.n_layers,
            Position::LAST,
            &s.labels,
        )
        .map_err(|e| e.to_string())?;
        let acc = split_by_correctness(&s.corpus, &traces, &s.labels)
            .map_err(|e| e.to_string())?
            .accuracy();
        ensure!(info == acc, "{name}: I^L = {info} but accuracy = {acc}");
        checked.push(format!("{name} {acc}"));
    }
    within(start.elapsed(), 5)?;
    Ok(format!("I^L == accuracy ({})", checked.join(", ")))
}

fn planted_step_recovery() -> Check {
    let start = Instant::now();
    let mut notes = Vec::new();
    for scheme in [
        StandardScheme::Gender,
        StandardScheme::Emotion,
        StandardScheme::Language,
        StandardScheme::Animal,
    ] {
        let plant = plant_spec(scheme, 4, None, 0.0);
        let s = scenario(&plant, scheme, 500, 21)?;
        let preds = lens_predictions(
            &s.model,
            &s.corpus,
            &[Position::LAST],
            &[],
            &s.labels,
            PredictionDomain::Labels,
        )
        .map_err(|e| e.to_string())?;
        let t =
            ScoreTable::all(&preds[0], s.labels.len(), DEFAULT_ALPHA).map_err(|e| e.to_string())?;
        let chance = s.labels.chance();
        for (l, &i) in t.information.iter().enumerate() {
            if l < 4 {
                ensure!(
                    i <= chance + 0.1,
                    "{scheme:?} layer {l}: I = {i} above chance + 0.1"
                );
            } else {
                ensure!(i == 1.0, "{scheme:?} layer {l}: I = {i}, expected 1.0");
            }
        }
        let c = t
            .critical_layer
            .ok_or_else(|| format!("{scheme:?}: critical layer unresolved"))?;
        ensure!(
            (c - 8.0).abs() <= 0.02,
            "{scheme:?}: critical layer {c}, expected 8.0"
        );
        notes.push(format!("|Y|={} l*={c}", s.labels.len()));
    }
    within(start.elapsed(), 60)?;
    Ok(notes.join(", "))
}

fn two_dynamics() -> Check {
    let plant = plant_spec(StandardScheme::Emotion, 3, Some(9), 0.25);
    let s = scenario(&plant, StandardScheme::Emotion, 400, 6)?;
    let preds = lens_predictions(
        &s.model,
        &s.corpus,
        &[Position::LAST],
        &[],
        &s.labels,
        PredictionDomain::Labels,
    )
    .map_err(|e| e.to_string())?;
    let p = &preds[0];
    let split = CorrectnessSplit::from_predictions(p);
    let n = s.labels.len();
    let correct =
        ScoreTable::from_predictions(p, &split.correct, ScoreSubset::Correct, n, DEFAULT_ALPHA)
            .map_err(|e| e.to_string())?;
    let incorrect = ScoreTable::from_predictions(
        p,
        &split.incorrect,
        ScoreSubset::Incorrect,
        n,
        DEFAULT_ALPHA,
    )
    .map_err(|e| e.to_string())?;
    let all = ScoreTable::all(p, n, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
    ensure!(
        correct.information.windows(2).all(|w| w[1] >= w[0]),
        "correct subset not non-decreasing: {:?}",
        correct.information
    );
    ensure!(
        correct.information[3..].iter().all(|&i| i == 1.0),
        "correct subset below 1.0 after layer 3"
    );
    ensure!(
        incorrect.information[3..=8].iter().all(|&i| i == 1.0),
        "incorrect subset not 1.0 on layers 3-8: {:?}",
        incorrect.information
    );
    ensure!(
        incorrect.information[9..]
            .iter()
            .all(|&i| i <= s.labels.chance() + 0.1),
        "incorrect subset above chance on layers 9-12: {:?}",
        incorrect.information
    );
    ensure!(all.accuracy == 0.75, "accuracy {} != 0.75", all.accuracy);
    Ok(format!(
        "accuracy 0.75, {} correct / {} incorrect, drop at layer 9",
        split.correct.len(),
        split.incorrect.len()
    ))
}

fn textbook_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn correlation_sign() -> Check {
    // Later injection resolves the attribute later; more corrupted samples
    // lower the accuracy.
    let family = [(2, 0.0), (3, 0.1), (4, 0.2), (5, 0.3), (6, 0.4), (7, 0.5)];
    let mut pairs = Vec::new();
    for (inject, fraction) in family {
        let plant = plant_spec(StandardScheme::Animal, inject, Some(11), fraction);
        let s = scenario(&plant, StandardScheme::Animal, 200, 30 + inject as u64)?;
        let preds = lens_predictions(
            &s.model,
            &s.corpus,
            &[Position::LAST],
            &[],
            &s.labels,
            PredictionDomain::Labels,
        )
        .map_err(|e| e.to_string())?;
        let t =
            ScoreTable::all(&preds[0], s.labels.len(), DEFAULT_ALPHA).map_err(|e| e.to_string())?;
        pairs.push((t.critical_layer, t.accuracy));
    }
    let res = correlation_study(&pairs).map_err(|e| e.to_string())?;
    ensure!(res.n_used >= 6, "only {} resolved models", res.n_used);
    ensure!(res.r < -0.9, "r = {} not below -0.9", res.r);

    let xs = [23.90, 26.23, 28.76, 27.53];
    let ys = [85.00, 91.53, 33.53, 18.67];
    let r = pearson(&xs, &ys).map_err(|e| e.to_string())?;
    let oracle = textbook_pearson(&xs, &ys);
    ensure!(
        (r - oracle).abs() < 1e-9,
        "pearson {r} vs textbook {oracle}"
    );
    Ok(format!(
        "family r = {:.4} (p = {:.2e}); four-pair r = {r:.6}",
        res.r, res.p_value
    ))
}

fn masking_collapse() -> Check {
    let plant = plant_spec(StandardScheme::Animal, 3, Some(9), 0.25);
    let s = scenario(&plant, StandardScheme::Animal, 400, 12)?;
    let out = run_masking_experiment(&s.model, &s.corpus, &s.labels, DEFAULT_ALPHA)
        .map_err(|e| e.to_string())?;
    let chance = s.labels.chance();
    ensure!(
        out.non_last_identical,
        "non-last positions differ across arms"
    );
    ensure!(
        (out.masked.accuracy - chance).abs() <= 0.15,
        "masked accuracy {} not within 0.15 of {chance}",
        out.masked.accuracy
    );
    ensure!(
        out.unmasked.accuracy == 0.75,
        "unmasked accuracy {} != 1 - f",
        out.unmasked.accuracy
    );
    ensure!(
        out.penultimate
            .information
            .iter()
            .all(|&i| i <= chance + 0.1),
        "penultimate scores above chance: {:?}",
        out.penultimate.information
    );
    Ok(format!(
        "masked {:.4} vs chance {chance:.4}, unmasked {}",
        out.masked.accuracy, out.unmasked.accuracy
    ))
}

fn enrichment_efficacy() -> Check {
    let start = Instant::now();
    let plant = plant_spec(StandardScheme::Animal, 3, Some(9), 0.25);
    let s = scenario(&plant, StandardScheme::Animal, 500, 40)?;
    let (probe, test) = split_probe_test(&s.corpus, 100, 1).map_err(|e| e.to_string())?;
    ensure!(
        probe.len() == 100 && test.len() == 400,
        "split {}/{}",
        probe.len(),
        test.len()
    );

    let probe_preds = lens_predictions(
        &s.model,
        &probe,
        &[Position::LAST],
        &[],
        &s.labels,
        PredictionDomain::Labels,
    )
    .map_err(|e| e.to_string())?;
    let sel = select_enrichment_layer(&probe_preds[0], 5, SelectionRule::MaxInfoOnIncorrect)
        .map_err(|e| e.to_string())?;
    ensure!(sel.layer == 3, "selected layer {}, expected 3", sel.layer);

    let plan = EnrichmentPlan::new(sel.layer, sel.rule);
    let sweep = run_lambda_sweep(&s.model, &test, &s.labels, &plan).map_err(|e| e.to_string())?;
    ensure!(
        sweep.accuracy_at(0.0).map(f64::to_bits) == Some(sweep.baseline_accuracy.to_bits()),
        "lambda 0 accuracy differs from baseline"
    );
    let noop = [attrlens_core::Intervention::enrich(sel.layer, 5, 0.0)];
    for (i, sample) in test.samples.iter().enumerate() {
        let a = s
            .model
            .forward(&sample.input(), &[])
            .map_err(|e| e.to_string())?;
        let b = s
            .model
            .forward(&sample.input(), &noop)
            .map_err(|e| e.to_string())?;
        ensure!(a.bit_identical(&b), "sample {i}: lambda 0 trace differs");
    }
    ensure!(
        sweep.points.iter().any(|p| p.accuracy == 1.0),
        "no lambda reaches 1.0: {:?}",
        sweep.points
    );

    let random = run_random_baseline(
        &s.model,
        &test,
        &s.labels,
        5,
        &DEFAULT_LAMBDAS,
        &DEFAULT_RANDOM_SEEDS,
    )
    .map_err(|e| e.to_string())?;
    let threshold = s
        .certificate
        .enrichment_threshold()
        .ok_or_else(|| "certificate has no threshold".to_string())?;
    let mut compared = 0;
    for (k, p) in sweep.points.iter().enumerate() {
        if p.lambda >= threshold {
            compared += 1;
            ensure!(
                p.accuracy > random.mean_accuracy[k],
                "lambda {}: informed {} <= random mean {}",
                p.lambda,
                p.accuracy,
                random.mean_accuracy[k]
            );
        }
    }
    ensure!(
        compared > 0,
        "no grid point at or above the threshold {threshold}"
    );
    within(start.elapsed(), 180)?;
    Ok(format!(
        "layer 3, baseline {}, best {} at lambda {}, random layers {:?}, threshold {threshold} ({:.1}s)",
        sweep.baseline_accuracy,
        sweep.best_accuracy,
        sweep.best_lambda,
        random.layers,
        start.elapsed().as_secs_f64()
    ))
}

fn attrlens(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attrlens"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "attrlens {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn read_report(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p).display().to_string();
    let mut plant = serde_json::to_value(plant_spec(StandardScheme::Emotion, 3, Some(9), 0.25))
        .map_err(|e| e.to_string())?;
    plant["label_alphabet"] = Value::Array(Vec::new());
    std::fs::write(d("plant.json"), plant.to_string()).map_err(|e| e.to_string())?;

    let model = d("gm/model.lensw");
    let corpus = d("gc/corpus.jsonl");
    let run = |cmd: &str, out: &str, extra: &[&str]| -> Result<(), String> {
        let mut args = vec![cmd, "--out-dir", out];
        args.extend_from_slice(extra);
        attrlens(&args)
    };
    let run_m = format!("{model},{corpus}");
    let plant_path = d("plant.json");
    let cases: Vec<(&str, Vec<&str>)> = vec![
        (
            "gen-model",
            vec!["--plant", &plant_path, "--scheme", "emotion"],
        ),
        (
            "gen-corpus",
            vec!["--model", &model, "--n", "300", "--seed", "5"],
        ),
        (
            "rq1",
            vec!["--model", &model, "--corpus", &corpus, "--positions=-1,-2"],
        ),
        ("rq2", vec!["--model", &model, "--corpus", &corpus]),
        (
            "rq3",
            vec!["--run", &run_m, "--run", &run_m, "--run", &run_m],
        ),
        ("rq4", vec!["--model", &model, "--corpus", &corpus]),
        (
            "rq5",
            vec!["--model", &model, "--corpus", &corpus, "--probe-size", "60"],
        ),
    ];
    let out_dir = |cmd: &str| match cmd {
        "gen-model" => d("gm"),
        "gen-corpus" => d("gc"),
        other => d(other),
    };
    for (cmd, extra) in &cases {
        run(cmd, &out_dir(cmd), extra)?;
    }
    let (i1, i2) = (
        format!("a={}", d("rq1/rq1.json")),
        format!("b={}", d("rq4/rq4.json")),
    );
    run(
        "report-merge",
        &d("report-merge"),
        &["--input", &i1, "--input", &i2],
    )?;

    let mut checked = Vec::new();
    for cmd in [
        "gen-model",
        "gen-corpus",
        "rq1",
        "rq2",
        "rq3",
        "rq4",
        "rq5",
        "report-merge",
    ] {
        let first = Path::new(&out_dir(cmd)).join(format!("{cmd}.json"));
        let again_dir = d(&format!("again-{cmd}"));
        run(cmd, &again_dir, &["--config", &first.display().to_string()])?;
        let a = read_report(&first)?;
        let b = read_report(&Path::new(&again_dir).join(format!("{cmd}.json")))?;
        ensure!(
            a["payload"] == b["payload"],
            "{cmd}: payload differs on re-run"
        );
        ensure!(a["table"] == b["table"], "{cmd}: table differs on re-run");
        let csv = |dir: &str| {
            std::fs::read(Path::new(dir).join(format!("{cmd}.csv"))).map_err(|e| e.to_string())
        };
        ensure!(
            csv(&out_dir(cmd))? == csv(&again_dir)?,
            "{cmd}: CSV differs on re-run"
        );
        checked.push(cmd);
    }
    Ok(format!("{} commands reproduced bit-for-bit", checked.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 final-layer identity", final_layer_identity),
        ("2 accuracy identity", accuracy_identity),
        ("3 planted step recovery", planted_step_recovery),
        ("4 two dynamics", two_dynamics),
        ("5 correlation sign", correlation_sign),
        ("6 masking collapse", masking_collapse),
        ("7 enrichment efficacy", enrichment_efficacy),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(note)) => println!("PASS  {name}: {note}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("{} of 8 acceptance criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
