// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built transformer weights with closed-form information flow.
//!
//! Every block is zero except two attention heads, so under the identity norm
//! the residual stream at the last position is a sum of known directions:
//!
//! - block `inject_layer`, head 0: the last position (flagged by the cue
//!   token) attends to the audio beacon and writes `copy_gain * u_y`, where
//!   `u_y` is the unembedding direction of the sample's label.
//! - block `degrade_layer`, head 0 (optional): the last position attends to a
//!   corruptor flag, present only on corrupted samples, and writes
//!   `-degrade_gain * u_y + degrade_gain * u_y'` with `y'` the next label
//!   cyclically.
//!
//! Every other query attends to a sink at position 0, whose value is zero.
//! Label directions are orthonormal rows of the unembedding, so the
//! label-restricted logit lens reads the residual coordinates directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ModelWeights, NormKind, TokenId};

/// Lower bound the beacon attention weight must clear.
pub const ATTENTION_FLOOR: f64 = 1.0 - 1e-6;
pub const DEFAULT_BEACON_SCALE: f64 = 20.0;
pub const DEFAULT_NOISE_SCALE: f64 = 0.01;
/// Scale of the random filler written into dimensions no head reads.
const FILLER_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub base: ModelSpec,
    pub inject_layer: usize,
    pub copy_gain: f64,
    #[serde(default)]
    pub degrade_layer: Option<usize>,
    #[serde(default)]
    pub degrade_gain: f64,
    #[serde(default)]
    pub degrade_fraction: f64,
    pub label_alphabet: Vec<TokenId>,
    pub cue_token: TokenId,
    #[serde(default = "default_beacon")]
    pub beacon_scale: f64,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beacon() -> f64 {
    DEFAULT_BEACON_SCALE
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SCALE
}

/// Residual-stream coordinates used by the construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    /// Constant 1 at every position (positional embedding).
    pub const_dim: usize,
    /// Set at position 0 only.
    pub sink_dim: usize,
    /// Set by the cue token's embedding.
    pub cue_dim: usize,
    pub beacon_dim: usize,
    pub corruptor_dim: usize,
    /// `u_y` coordinates, one per label, in alphabet order.
    pub label_dims: Vec<usize>,
    /// One-hot label channel carried by the beacon embedding.
    pub channel_dims: Vec<usize>,
    /// Coordinates nothing reads; filled with seeded noise.
    pub free_dims: Vec<usize>,
}

impl FeatureLayout {
    pub fn required_dims(n_labels: usize) -> usize {
        5 + 2 * n_labels
    }

    pub fn new(d_model: usize, n_labels: usize) -> Result<Self> {
        let need = Self::required_dims(n_labels);
        if d_model < need {
            return Err(Error::invalid(format!(
                "planted layout for {n_labels} labels needs d_model >= {need}, got {d_model}"
            )));
        }
        Ok(Self {
            const_dim: 0,
            sink_dim: 1,
            cue_dim: 2,
            beacon_dim: 3,
            corruptor_dim: 4,
            label_dims: (5..5 + n_labels).collect(),
            channel_dims: (5 + n_labels..need).collect(),
            free_dims: (need..d_model).collect(),
        })
    }

    pub fn for_plant(plant: &PlantSpec) -> Result<Self> {
        Self::new(plant.base.d_model, plant.label_alphabet.len())
    }
}

impl PlantSpec {
    pub fn n_labels(&self) -> usize {
        self.label_alphabet.len()
    }

    pub fn validate(&self) -> Result<()> {
        let base = &self.base;
        base.validate()?;
        let l = base.n_layers;
        if base.norm_kind != NormKind::Identity {
            return Err(Error::invalid("planted models require the identity norm"));
        }
        if self.inject_layer < 1 || self.inject_layer > l {
            return Err(Error::invalid(format!(
                "inject_layer {} must lie in 1..={l}",
                self.inject_layer
            )));
        }
        if let Some(dl) = self.degrade_layer {
            if dl <= self.inject_layer || dl > l {
                return Err(Error::invalid(format!(
                    "degrade_layer {dl} must satisfy inject_layer ({}) < degrade_layer <= {l}",
                    self.inject_layer
                )));
            }
            if !(self.degrade_gain > 0.0 && self.degrade_gain.is_finite()) {
                return Err(Error::invalid("degrade_gain must be positive"));
            }
        }
        if !(self.copy_gain >= 0.0 && self.copy_gain.is_finite()) {
            return Err(Error::invalid("copy_gain must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.degrade_fraction) {
            return Err(Error::invalid("degrade_fraction must lie in [0, 1]"));
        }
        if !(self.beacon_scale > 0.0 && self.beacon_scale.is_finite()) {
            return Err(Error::invalid("beacon_scale must be positive"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be positive"));
        }
        let n = self.n_labels();
        if n < 2 {
            return Err(Error::invalid("label alphabet needs at least two labels"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &t in &self.label_alphabet {
            if t as usize >= base.vocab_size {
                return Err(Error::invalid(format!(
                    "label token {t} outside vocabulary"
                )));
            }
            if !seen.insert(t) {
                return Err(Error::invalid(format!("label token {t} repeated")));
            }
        }
        if self.cue_token as usize >= base.vocab_size || seen.contains(&self.cue_token) {
            return Err(Error::invalid(
                "cue token must be in vocabulary and not a label",
            ));
        }
        if base.d_head < n.max(2) {
            return Err(Error::invalid(format!(
                "d_head {} cannot carry {n} label channels",
                base.d_head
            )));
        }
        FeatureLayout::new(base.d_model, n)?;
        let floor = beacon_attention_floor(self.beacon_scale, base.max_positions);
        if floor < ATTENTION_FLOOR {
            return Err(Error::invalid(format!(
                "beacon_scale {} only guarantees attention weight {floor}",
                self.beacon_scale
            )));
        }
        Ok(())
    }
}

/// Worst-case weight on the beacon for a query scored `2k` against it, `k`
/// against the sink and 0 elsewhere.
pub fn beacon_attention_floor(beacon_scale: f64, max_positions: usize) -> f64 {
    let k = beacon_scale;
    1.0 / (1.0 + (-k).exp() + max_positions as f64 * (-2.0 * k).exp())
}

/// Closed-form lens argmax over the label alphabet at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LensOutcome {
    /// All label logits tie; the seeded noise decides.
    Chance,
    Correct,
    /// The cyclic successor of the true label wins.
    Wrong,
    /// Clean and corrupted samples disagree; expected accuracy given.
    Mixed {
        correct_fraction: f64,
    },
    /// Two labels tie exactly; outcome depends on noise.
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSubset {
    All,
    Clean,
    Corrupted,
}

/// Contiguous layer range `[first, last]` with constant predicted outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBand {
    pub first: usize,
    pub last: usize,
    pub clean: LensOutcome,
    pub corrupted: LensOutcome,
}

/// What the construction guarantees, stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantCertificate {
    pub plant: PlantSpec,
    pub layout: FeatureLayout,
    pub inject_layer: usize,
    pub degrade_layer: Option<usize>,
    pub degrade_fraction: f64,
    pub copy_gain: f64,
    pub degrade_gain: f64,
    pub attention_floor: f64,
    pub bands: Vec<LayerBand>,
}

/// Label-coordinate scores for the true label `y` and its successor `y'`;
/// every other label sits at 0.
#[derive(Debug, Clone, Copy)]
struct LabelScores {
    truth: f64,
    successor: f64,
}

impl PlantCertificate {
    fn scores(&self, layer: usize, corrupted: bool) -> LabelScores {
        let injected = if layer >= self.inject_layer {
            self.copy_gain
        } else {
            0.0
        };
        let degraded = corrupted && self.degrade_layer.is_some_and(|d| layer >= d);
        let beta = if degraded { self.degrade_gain } else { 0.0 };
        LabelScores {
            truth: injected - beta,
            successor: beta,
        }
    }

    fn outcome(&self, s: LabelScores) -> LensOutcome {
        let others = self.plant.n_labels() > 2;
        let rest = if others { 0.0 } else { f64::NEG_INFINITY };
        if s.truth == s.successor && (s.truth == rest || !others) {
            LensOutcome::Chance
        } else if s.truth > s.successor && s.truth > rest {
            LensOutcome::Correct
        } else if s.successor > s.truth && s.successor > rest {
            LensOutcome::Wrong
        } else if s.truth < rest && s.successor < rest {
            // Some third label wins, chosen by noise.
            LensOutcome::Chance
        } else {
            LensOutcome::Undetermined
        }
    }

    fn outcome_for(&self, layer: usize, corrupted: bool) -> LensOutcome {
        self.outcome(self.scores(layer, corrupted))
    }

    /// Expected last-position lens outcome at `layer` for a sample subset.
    pub fn predict_lens_band(&self, layer: usize, subset: SampleSubset) -> LensOutcome {
        let clean = self.outcome_for(layer, false);
        let corrupted = self.outcome_for(layer, true);
        match subset {
            SampleSubset::Clean => clean,
            SampleSubset::Corrupted => corrupted,
            SampleSubset::All => combine(clean, corrupted, self.degrade_fraction),
        }
    }

    /// Expected final-layer outcome after enriching the last position with
    /// `scale * h[source_layer]` (the target layer does not matter: every
    /// planted write is additive).
    pub fn predict_enriched(
        &self,
        source_layer: usize,
        scale: f64,
        subset: SampleSubset,
    ) -> LensOutcome {
        let l = self.plant.base.n_layers;
        let at = |corrupted: bool| {
            let fin = self.scores(l, corrupted);
            let src = self.scores(source_layer, corrupted);
            self.outcome(LabelScores {
                truth: fin.truth + scale * src.truth,
                successor: fin.successor + scale * src.successor,
            })
        };
        let (clean, corrupted) = (at(false), at(true));
        match subset {
            SampleSubset::Clean => clean,
            SampleSubset::Corrupted => corrupted,
            SampleSubset::All => combine(clean, corrupted, self.degrade_fraction),
        }
    }

    /// Smallest scale above which enriching from `inject_layer` rescues
    /// corrupted samples: `(1 + s) * gamma > 2 * beta`.
    pub fn enrichment_threshold(&self) -> Option<f64> {
        self.degrade_layer?;
        if self.copy_gain == 0.0 {
            return None;
        }
        Some(2.0 * self.degrade_gain / self.copy_gain - 1.0)
    }
}

fn combine(clean: LensOutcome, corrupted: LensOutcome, f: f64) -> LensOutcome {
    if f == 0.0 || clean == corrupted {
        return clean;
    }
    if f == 1.0 {
        return corrupted;
    }
    let acc = |o: LensOutcome| match o {
        LensOutcome::Correct => Some(1.0),
        LensOutcome::Wrong => Some(0.0),
        _ => None,
    };
    match (acc(clean), acc(corrupted)) {
        (Some(a), Some(b)) => LensOutcome::Mixed {
            correct_fraction: (1.0 - f) * a + f * b,
        },
        _ => LensOutcome::Undetermined,
    }
}

/// Planted weights plus their certificate.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model,
    pub certificate: PlantCertificate,
}

pub fn build_planted(plant: &PlantSpec) -> Result<PlantedModel> {
    plant.validate()?;
    let spec = &plant.base;
    let layout = FeatureLayout::for_plant(plant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plant.seed);
    let mut w = ModelWeights::zeros(spec);

    let mut filler = |row: &mut [f64]| {
        for &k in &layout.free_dims {
            row[k] = FILLER_SCALE * rng.sample::<f64, _>(StandardNormal);
        }
    };
    for p in 0..spec.max_positions {
        let row = w.positional_embedding.row_mut(p);
        filler(row);
        row[layout.const_dim] = 1.0;
        if p == 0 {
            row[layout.sink_dim] = 1.0;
        }
    }
    let labels: std::collections::BTreeSet<TokenId> =
        plant.label_alphabet.iter().copied().collect();
    for t in 0..spec.vocab_size {
        filler(w.token_embedding.row_mut(t));
        if !labels.contains(&(t as TokenId)) {
            filler(w.unembedding.row_mut(t));
        }
    }
    w.token_embedding
        .set(plant.cue_token as usize, layout.cue_dim, 1.0);
    for (k, &t) in plant.label_alphabet.iter().enumerate() {
        w.unembedding.set(t as usize, layout.label_dims[k], 1.0);
    }

    let n = plant.n_labels();
    let key_scale = plant.beacon_scale * (spec.d_head as f64).sqrt();
    let mut plant_head =
        |block: usize, key_dim: usize, out: &dyn Fn(usize) -> Vec<(usize, f64)>| {
            let lw = &mut w.layers[block - 1];
            // head 0 occupies rows / cols 0..d_head
            lw.w_q.set(0, layout.const_dim, 1.0);
            lw.w_q.set(1, layout.cue_dim, 2.0);
            lw.w_k.set(0, layout.sink_dim, key_scale);
            lw.w_k.set(1, key_dim, key_scale);
            for k in 0..n {
                lw.w_v.set(k, layout.channel_dims[k], 1.0);
                for (dim, gain) in out(k) {
                    let prev = lw.w_o.get(dim, k);
                    lw.w_o.set(dim, k, prev + gain);
                }
            }
        };
    let gamma = plant.copy_gain;
    plant_head(plant.inject_layer, layout.beacon_dim, &|k| {
        vec![(layout.label_dims[k], gamma)]
    });
    if let Some(dl) = plant.degrade_layer {
        let beta = plant.degrade_gain;
        plant_head(dl, layout.corruptor_dim, &|k| {
            vec![
                (layout.label_dims[k], -beta),
                (layout.label_dims[(k + 1) % n], beta),
            ]
        });
    }

    let model = Model::new(spec.clone(), w)?;
    let mut certificate = PlantCertificate {
        plant: plant.clone(),
        layout,
        inject_layer: plant.inject_layer,
        degrade_layer: plant.degrade_layer,
        degrade_fraction: plant.degrade_fraction,
        copy_gain: plant.copy_gain,
        degrade_gain: if plant.degrade_layer.is_some() {
            plant.degrade_gain
        } else {
            0.0
        },
        attention_floor: beacon_attention_floor(plant.beacon_scale, spec.max_positions),
        bands: Vec::new(),
    };
    certificate.bands = bands(&certificate);
    Ok(PlantedModel { model, certificate })
}

fn bands(cert: &PlantCertificate) -> Vec<LayerBand> {
    let l = cert.plant.base.n_layers;
    let mut out: Vec<LayerBand> = Vec::new();
    for layer in 0..=l {
        let clean = cert.predict_lens_band(layer, SampleSubset::Clean);
        let corrupted = cert.predict_lens_band(layer, SampleSubset::Corrupted);
        match out.last_mut() {
            Some(b) if b.clean == clean && b.corrupted == corrupted => b.last = layer,
            _ => out.push(LayerBand {
                first: layer,
                last: layer,
                clean,
                corrupted,
            }),
        }
    }
    out
}
