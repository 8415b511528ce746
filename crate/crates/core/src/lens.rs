// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens measurements: vocabulary projection of every layer, per-layer
//! information scores, thresholded contributions, critical layer, the
//! correctness split and the critical-layer / accuracy correlation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Intervention, Model, Position, TokenId, Trace};
use crate::numkernel::{argmax_det, pearson};

/// Contribution margin above chance.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Candidate label tokens, one representative token per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    ids: Vec<TokenId>,
}

impl LabelSet {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("empty label set"));
        }
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::invalid("label tokens must be distinct"));
        }
        Ok(Self { ids })
    }

    /// Multi-token labels are represented by their first token.
    pub fn from_token_sequences(labels: &[Vec<TokenId>]) -> Result<Self> {
        let firsts = labels
            .iter()
            .map(|seq| {
                seq.first()
                    .copied()
                    .ok_or_else(|| Error::invalid("label with no tokens"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(firsts)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.ids.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionDomain {
    /// Argmax restricted to the label alphabet.
    #[default]
    Labels,
    /// Argmax over the whole vocabulary. Exploration only.
    FullVocabulary,
}

/// Highest-probability label; ties go to the lowest token id.
pub fn predict_label(row: &[f64], labels: &LabelSet) -> TokenId {
    let mut best = labels.ids[0];
    for &id in &labels.ids[1..] {
        let (p, q) = (row[id as usize], row[best as usize]);
        if p > q || (p == q && id < best) {
            best = id;
        }
    }
    best
}

pub fn predict(row: &[f64], labels: &LabelSet, domain: PredictionDomain) -> TokenId {
    match domain {
        PredictionDomain::Labels => predict_label(row, labels),
        PredictionDomain::FullVocabulary => argmax_det(row) as TokenId,
    }
}

/// Vocabulary distribution of every layer (0..=L) at one position.
#[derive(Debug, Clone)]
pub struct LensTable {
    pub position: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn logit_lens(model: &Model, trace: &Trace, position: Position) -> Result<LensTable> {
    let p = position.resolve(trace.seq_len())?;
    let rows = (0..=trace.n_layers())
        .map(|l| model.vocab_distribution(trace.hidden(l, p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LensTable { position: p, rows })
}

/// One forward pass per sample, in parallel, in corpus order.
pub fn trace_corpus(
    model: &Model,
    corpus: &Corpus,
    interventions: &[Intervention],
) -> Result<Vec<Trace>> {
    corpus
        .samples
        .par_iter()
        .map(|s| model.forward(&s.input(), interventions))
        .collect()
}

/// Lens argmax per sample and layer at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LensPredictions {
    pub position: Position,
    pub truth: Vec<TokenId>,
    /// `[sample][layer]`, layers 0..=L.
    pub predicted: Vec<Vec<TokenId>>,
}

pub fn layer_predictions(
    model: &Model,
    trace: &Trace,
    position: Position,
    labels: &LabelSet,
    domain: PredictionDomain,
) -> Result<Vec<TokenId>> {
    Ok(logit_lens(model, trace, position)?
        .rows
        .iter()
        .map(|row| predict(row, labels, domain))
        .collect())
}

impl LensPredictions {
    pub fn from_traces(
        model: &Model,
        traces: &[Trace],
        truth: &[TokenId],
        position: Position,
        labels: &LabelSet,
        domain: PredictionDomain,
    ) -> Result<Self> {
        if traces.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} traces for {} samples",
                traces.len(),
                truth.len()
            )));
        }
        let predicted = traces
            .par_iter()
            .map(|t| layer_predictions(model, t, position, labels, domain))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            position,
            truth: truth.to_vec(),
            predicted,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.predicted
            .first()
            .map_or(0, |p| p.len().saturating_sub(1))
    }

    pub fn is_correct(&self, sample: usize, layer: usize) -> bool {
        self.predicted[sample][layer] == self.truth[sample]
    }

    /// Fraction of `subset` samples whose lens argmax at `layer` is the truth.
    /// Summed in index order, so the result is reproducible bit for bit.
    pub fn information_score(&self, layer: usize, subset: &[usize]) -> f64 {
        let hits = subset
            .iter()
            .filter(|&&i| self.is_correct(i, layer))
            .count();
        hits as f64 / subset.len() as f64
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Forward every sample once and collect lens predictions at each position,
/// without keeping the traces.
pub fn lens_predictions(
    model: &Model,
    corpus: &Corpus,
    positions: &[Position],
    interventions: &[Intervention],
    labels: &LabelSet,
    domain: PredictionDomain,
) -> Result<Vec<LensPredictions>> {
    let per_sample: Vec<Vec<Vec<TokenId>>> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&s.input(), interventions)?;
            positions
                .iter()
                .map(|&p| layer_predictions(model, &trace, p, labels, domain))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<TokenId> = corpus.samples.iter().map(|s| s.label).collect();
    Ok(positions
        .iter()
        .enumerate()
        .map(|(k, &position)| LensPredictions {
            position,
            truth: truth.clone(),
            predicted: per_sample.iter().map(|s| s[k].clone()).collect(),
        })
        .collect())
}

pub fn information_score(
    model: &Model,
    corpus: &Corpus,
    traces: &[Trace],
    layer: usize,
    position: Position,
    labels: &LabelSet,
) -> Result<f64> {
    let truth: Vec<TokenId> = corpus.samples.iter().map(|s| s.label).collect();
    if traces.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if layer > traces[0].n_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    let preds = LensPredictions::from_traces(
        model,
        traces,
        &truth,
        position,
        labels,
        PredictionDomain::Labels,
    )?;
    Ok(preds.information_score(layer, &preds.all_indices()))
}

/// `max(0, I - (1 + alpha) / n_labels)` per layer.
pub fn layer_contributions(scores: &[f64], n_labels: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if n_labels == 0 {
        return Err(Error::invalid("label alphabet is empty"));
    }
    let threshold = (1.0 + alpha) / n_labels as f64;
    Ok(scores.iter().map(|&i| (i - threshold).max(0.0)).collect())
}

/// Contribution-weighted mean layer. `contributions[k]` belongs to layer
/// `k + 1`. `None` when every contribution is zero.
pub fn critical_layer(contributions: &[f64]) -> Option<f64> {
    let total: f64 = contributions.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(
        contributions
            .iter()
            .enumerate()
            .map(|(k, s)| s / total * (k + 1) as f64)
            .sum(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessSplit {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl CorrectnessSplit {
    /// Split on the final-layer prediction of `preds`.
    pub fn from_predictions(preds: &LensPredictions) -> Self {
        let l = preds.n_layers();
        let (correct, incorrect) = (0..preds.len()).partition(|&i| preds.is_correct(i, l));
        Self { correct, incorrect }
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.len() as f64 / (self.correct.len() + self.incorrect.len()) as f64
    }
}

/// Partition on whether the last position's next-token distribution ranks the
/// true label first among the alphabet.
pub fn split_by_correctness(
    corpus: &Corpus,
    traces: &[Trace],
    labels: &LabelSet,
) -> Result<CorrectnessSplit> {
    if traces.len() != corpus.len() {
        return Err(Error::invalid(format!(
            "{} traces for {} samples",
            traces.len(),
            corpus.len()
        )));
    }
    let mut split = CorrectnessSplit {
        correct: Vec::new(),
        incorrect: Vec::new(),
    };
    for (i, (s, t)) in corpus.samples.iter().zip(traces).enumerate() {
        let dist = t.next_token_distribution(Position::LAST)?;
        if predict_label(dist, labels) == s.label {
            split.correct.push(i);
        } else {
            split.incorrect.push(i);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSubset {
    All,
    Correct,
    Incorrect,
}

/// Per-layer scores for one position and sample subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub position: Position,
    pub subset: ScoreSubset,
    pub n_samples: usize,
    pub n_labels: usize,
    pub alpha: f64,
    pub chance: f64,
    /// Information score `I` for layers 0..=L.
    pub information: Vec<f64>,
    /// Contribution `s` for layers 0..=L. Layer 0 is reported but never
    /// enters the critical layer.
    pub contributions: Vec<f64>,
    pub critical_layer: Option<f64>,
    /// `I` at layer L.
    pub accuracy: f64,
}

impl ScoreTable {
    pub fn from_predictions(
        preds: &LensPredictions,
        indices: &[usize],
        subset: ScoreSubset,
        n_labels: usize,
        alpha: f64,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid(format!("{subset:?} subset is empty")));
        }
        let l = preds.n_layers();
        let information: Vec<f64> = (0..=l)
            .map(|layer| preds.information_score(layer, indices))
            .collect();
        let contributions = layer_contributions(&information, n_labels, alpha)?;
        Ok(Self {
            position: preds.position,
            subset,
            n_samples: indices.len(),
            n_labels,
            alpha,
            chance: 1.0 / n_labels as f64,
            critical_layer: critical_layer(&contributions[1..]),
            accuracy: information[l],
            information,
            contributions,
        })
    }

    pub fn all(preds: &LensPredictions, n_labels: usize, alpha: f64) -> Result<Self> {
        Self::from_predictions(
            preds,
            &preds.all_indices(),
            ScoreSubset::All,
            n_labels,
            alpha,
        )
    }

    pub fn n_layers(&self) -> usize {
        self.information.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    /// Two-sided, from Student's t with n - 2 degrees of freedom.
    pub p_value: f64,
    /// `None` when |r| = 1 (infinite statistic).
    pub t_statistic: Option<f64>,
    pub n_used: usize,
    /// Pairs dropped because their critical layer was unresolved.
    pub n_skipped: usize,
}

/// Pearson correlation between critical layers and accuracies with its
/// two-sided p-value.
pub fn correlation_study(pairs: &[(Option<f64>, f64)]) -> Result<CorrelationResult> {
    let used: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|&(c, a)| c.map(|c| (c, a)))
        .collect();
    let n = used.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least three resolved pairs, have {n}"
        )));
    }
    let xs: Vec<f64> = used.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = used.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;
    let df = (n - 2) as f64;
    let (t, p) = if r.abs() >= 1.0 {
        (None, 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        (Some(t), (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(CorrelationResult {
        r,
        p_value: p,
        t_statistic: t,
        n_used: n,
        n_skipped: pairs.len() - n,
    })
}
