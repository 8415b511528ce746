// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal experiments: enrichment-layer selection, lambda sweeps with a
//! random-layer baseline, and last-token audio masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lens::{
    layer_predictions, predict_label, CorrectnessSplit, LabelSet, LensPredictions,
    PredictionDomain, ScoreTable,
};
use crate::model::{Intervention, Model, Position, DEFAULT_ENRICH_GAP};
use crate::numkernel::{mean, sample_std};

pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_RANDOM_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionRule {
    MaxInfoOnIncorrect,
    RandomLayer { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentPlan {
    pub selected_layer: usize,
    pub gap: usize,
    pub lambdas: Vec<f64>,
    pub selection_rule: SelectionRule,
}

impl EnrichmentPlan {
    pub fn new(selected_layer: usize, selection_rule: SelectionRule) -> Self {
        Self {
            selected_layer,
            gap: DEFAULT_ENRICH_GAP,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            selection_rule,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.gap == 0 || self.selected_layer == 0 || self.selected_layer + self.gap > n_layers {
            return Err(Error::invalid(format!(
                "layer {} with gap {} does not fit a {n_layers}-layer model",
                self.selected_layer, self.gap
            )));
        }
        if !self.lambdas.contains(&0.0) {
            return Err(Error::invalid("lambda grid must include 0"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::invalid(format!(
                "lambda {l} is not a finite non-negative number"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub rule: SelectionRule,
    /// Every candidate layer scored the same; the lowest one was returned.
    pub all_tied: bool,
    /// Incorrect-subset information for candidate layers `1..=L-gap`
    /// (informed rule only).
    pub candidate_information: Vec<f64>,
}

/// Pick the layer to enrich from.
///
/// `probe` must hold unintervened lens predictions at the last position.
/// The informed rule maximises incorrect-subset information over layers
/// `1..=L-gap` (lowest layer on ties); the random rule draws uniformly from
/// the same range.
pub fn select_enrichment_layer(
    probe: &LensPredictions,
    gap: usize,
    rule: SelectionRule,
) -> Result<LayerSelection> {
    if probe.position != Position::LAST {
        return Err(Error::invalid(
            "selection uses predictions at the last position",
        ));
    }
    let l = probe.n_layers();
    if gap == 0 || gap >= l {
        return Err(Error::invalid(format!(
            "gap {gap} leaves no candidate layer in a {l}-layer model"
        )));
    }
    let top = l - gap;
    match rule {
        SelectionRule::RandomLayer { seed } => Ok(LayerSelection {
            layer: ChaCha8Rng::seed_from_u64(seed).random_range(1..=top),
            rule,
            all_tied: false,
            candidate_information: Vec::new(),
        }),
        SelectionRule::MaxInfoOnIncorrect => {
            let split = CorrectnessSplit::from_predictions(probe);
            if split.incorrect.is_empty() {
                return Err(Error::SelectionUndefined(
                    "every probe sample is already predicted correctly".into(),
                ));
            }
            let info: Vec<f64> = (1..=top)
                .map(|layer| probe.information_score(layer, &split.incorrect))
                .collect();
            let mut best = 0;
            for (k, &v) in info.iter().enumerate() {
                if v > info[best] {
                    best = k;
                }
            }
            Ok(LayerSelection {
                layer: best + 1,
                rule,
                all_tied: info.iter().all(|&v| v == info[0]),
                candidate_information: info,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub plan: EnrichmentPlan,
    pub n_samples: usize,
    /// Accuracy without any intervention.
    pub baseline_accuracy: f64,
    pub points: Vec<SweepPoint>,
    pub best_lambda: f64,
    pub best_accuracy: f64,
    /// `(best - baseline) / baseline`; absent when the baseline is 0.
    pub relative_improvement: Option<f64>,
}

impl SweepResult {
    pub fn accuracy_at(&self, lambda: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.lambda == lambda)
            .map(|p| p.accuracy)
    }
}

/// Next-token accuracy over `corpus` under `interventions`.
pub fn corpus_accuracy(
    model: &Model,
    corpus: &Corpus,
    labels: &LabelSet,
    interventions: &[Intervention],
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let hits = corpus
        .samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&s.input(), interventions)?;
            Ok(predict_label(trace.next_token_distribution(Position::LAST)?, labels) == s.label)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Accuracy on `test` for every lambda in the plan, enriching
/// `h[l + gap] += lambda * h[l]` at the last position.
pub fn run_lambda_sweep(
    model: &Model,
    test: &Corpus,
    labels: &LabelSet,
    plan: &EnrichmentPlan,
) -> Result<SweepResult> {
    plan.validate(model.spec().n_layers)?;
    let baseline = corpus_accuracy(model, test, labels, &[])?;
    let points = plan
        .lambdas
        .iter()
        .map(|&lambda| {
            let iv = Intervention::enrich(plan.selected_layer, plan.gap, lambda);
            Ok(SweepPoint {
                lambda,
                accuracy: corpus_accuracy(model, test, labels, &[iv])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = points.iter().fold(
        points[0],
        |b, p| if p.accuracy > b.accuracy { *p } else { b },
    );
    Ok(SweepResult {
        plan: plan.clone(),
        n_samples: test.len(),
        baseline_accuracy: baseline,
        best_lambda: best.lambda,
        best_accuracy: best.accuracy,
        relative_improvement: (baseline > 0.0).then(|| (best.accuracy - baseline) / baseline),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub seeds: Vec<u64>,
    pub layers: Vec<usize>,
    pub runs: Vec<SweepResult>,
    pub lambdas: Vec<f64>,
    /// Per-lambda mean accuracy over seeds.
    pub mean_accuracy: Vec<f64>,
    /// Per-lambda sample standard deviation; absent for a single seed.
    pub std_accuracy: Vec<Option<f64>>,
    pub mean_best_accuracy: f64,
}

/// The same sweep with the source layer drawn at random, once per seed.
pub fn run_random_baseline(
    model: &Model,
    test: &Corpus,
    labels: &LabelSet,
    gap: usize,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<RandomBaseline> {
    if seeds.is_empty() {
        return Err(Error::invalid("random baseline needs at least one seed"));
    }
    let l = model.spec().n_layers;
    if gap == 0 || gap >= l {
        return Err(Error::invalid(format!(
            "gap {gap} leaves no candidate layer in a {l}-layer model"
        )));
    }
    let runs = seeds
        .iter()
        .map(|&seed| {
            let rule = SelectionRule::RandomLayer { seed };
            let layer = ChaCha8Rng::seed_from_u64(seed).random_range(1..=l - gap);
            let plan = EnrichmentPlan {
                selected_layer: layer,
                gap,
                lambdas: lambdas.to_vec(),
                selection_rule: rule,
            };
            run_lambda_sweep(model, test, labels, &plan)
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |k: usize| {
        runs.iter()
            .map(|r| r.points[k].accuracy)
            .collect::<Vec<_>>()
    };
    let mean_accuracy = (0..lambdas.len())
        .map(|k| mean(&column(k)).expect("non-empty"))
        .collect();
    let std_accuracy = (0..lambdas.len()).map(|k| sample_std(&column(k))).collect();
    let bests: Vec<f64> = runs.iter().map(|r| r.best_accuracy).collect();
    Ok(RandomBaseline {
        seeds: seeds.to_vec(),
        layers: runs.iter().map(|r| r.plan.selected_layer).collect(),
        lambdas: lambdas.to_vec(),
        mean_accuracy,
        std_accuracy,
        mean_best_accuracy: mean(&bests).expect("non-empty"),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingOutcome {
    pub unmasked: ScoreTable,
    pub masked: ScoreTable,
    /// Unmasked scores at the penultimate position.
    pub penultimate: ScoreTable,
    /// Unmasked minus masked final-layer accuracy.
    pub accuracy_drop: f64,
    /// Whether every position before the last matched bit for bit across arms.
    pub non_last_identical: bool,
}

/// Paired runs with and without blocking last-token attention to the audio
/// prefix.
pub fn run_masking_experiment(
    model: &Model,
    corpus: &Corpus,
    labels: &LabelSet,
    alpha: f64,
) -> Result<MaskingOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mask = [Intervention::mask_audio()];
    let domain = PredictionDomain::Labels;
    let rows = corpus
        .samples
        .par_iter()
        .map(|s| {
            let input = s.input();
            let plain = model.forward(&input, &[])?;
            let masked = model.forward(&input, &mask)?;
            let same = plain.prefix_bit_identical(&masked, input.len() - 1);
            Ok((
                layer_predictions(model, &plain, Position::LAST, labels, domain)?,
                layer_predictions(model, &masked, Position::LAST, labels, domain)?,
                layer_predictions(model, &plain, Position::PENULTIMATE, labels, domain)?,
                same,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<_> = corpus.samples.iter().map(|s| s.label).collect();
    let wrap = |position, predicted| LensPredictions {
        position,
        truth: truth.clone(),
        predicted,
    };
    let n = labels.len();
    let unmasked = ScoreTable::all(
        &wrap(Position::LAST, rows.iter().map(|r| r.0.clone()).collect()),
        n,
        alpha,
    )?;
    let masked = ScoreTable::all(
        &wrap(Position::LAST, rows.iter().map(|r| r.1.clone()).collect()),
        n,
        alpha,
    )?;
    let penultimate = ScoreTable::all(
        &wrap(
            Position::PENULTIMATE,
            rows.iter().map(|r| r.2.clone()).collect(),
        ),
        n,
        alpha,
    )?;
    Ok(MaskingOutcome {
        accuracy_drop: unmasked.accuracy - masked.accuracy,
        non_last_identical: rows.iter().all(|r| r.3),
        unmasked,
        masked,
        penultimate,
    })
}
