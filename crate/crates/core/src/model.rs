// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only, pre-norm transformer with a continuous "audio" prefix.
//!
//! The forward pass records the residual stream after every block and
//! applies declarative [`Intervention`]s at fixed hook points:
//!
//! - **Audio masking**: attention logits from one query position to a span
//!   of key positions get `-inf` (the entries are dropped before softmax) at
//!   every layer and every head. Other query positions are untouched.
//! - **Enrichment**: after block `source + gap` finishes, the residual stream
//!   at the target position becomes `h[source + gap] + scale * h[source]`,
//!   and every later block reads the patched stream.
//!
//! Layer 0 of a [`Trace`] is the post-embedding stream; layer `l >= 1` is the
//! stream after block `l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, gelu, masked_softmax, matvec, rmsnorm, softmax, Matrix};

pub type TokenId = u32;

pub const DEFAULT_NORM_EPS: f64 = 1e-6;
pub const DEFAULT_ENRICH_GAP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least two tokens"));
        }
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::invalid("max_positions must be positive"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::invalid(
                "norm_eps must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// Token position. Non-negative values count from the start, negative values
/// from the end (`-1` is the last token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Position(pub i64);

impl Position {
    pub const LAST: Position = Position(-1);
    pub const PENULTIMATE: Position = Position(-2);

    pub fn last() -> Self {
        Self::LAST
    }

    pub fn resolve(self, len: usize) -> Result<usize> {
        let idx = if self.0 < 0 {
            len as i64 + self.0
        } else {
            self.0
        };
        if idx < 0 || idx >= len as i64 {
            return Err(Error::invalid(format!(
                "position {} out of range for length {len}",
                self.0
            )));
        }
        Ok(idx as usize)
    }
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Half-open position range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Additive perturbation of one position's input embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingOffset {
    pub position: usize,
    pub delta: Vec<f64>,
}

/// Audio-prefix embeddings followed by text tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputSequence {
    pub audio_prefix: Vec<Vec<f64>>,
    pub text_tokens: Vec<TokenId>,
    #[serde(default)]
    pub offsets: Vec<EmbeddingOffset>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.audio_prefix.len() + self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn audio_span(&self) -> Span {
        Span::new(0, self.audio_prefix.len())
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        if self.len() > spec.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_positions {}",
                self.len(),
                spec.max_positions
            )));
        }
        for (i, a) in self.audio_prefix.iter().enumerate() {
            if a.len() != spec.d_model {
                return Err(Error::dim(format!(
                    "audio embedding {i} has {} dims, model has {}",
                    a.len(),
                    spec.d_model
                )));
            }
            if !a.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("audio embedding {i} is not finite")));
            }
        }
        if let Some(t) = self
            .text_tokens
            .iter()
            .find(|&&t| t as usize >= spec.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {}",
                spec.vocab_size
            )));
        }
        for off in &self.offsets {
            if off.position >= self.len() || off.delta.len() != spec.d_model {
                return Err(Error::dim(format!(
                    "embedding offset at position {} does not fit the sequence",
                    off.position
                )));
            }
        }
        Ok(())
    }
}

/// Declarative modification of a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Drop attention from `query_position` to every key in `masked_span`
    /// (default: the audio prefix) at all layers and heads.
    MaskAudioAttention {
        #[serde(default = "Position::last")]
        query_position: Position,
        #[serde(default)]
        masked_span: Option<Span>,
    },
    /// `h[source + gap] <- h[source + gap] + scale * h[source]` at one position.
    Enrich {
        source_layer: usize,
        #[serde(default = "default_gap")]
        gap: usize,
        scale: f64,
        #[serde(default = "Position::last")]
        target_position: Position,
    },
}

fn default_gap() -> usize {
    DEFAULT_ENRICH_GAP
}

impl Intervention {
    pub fn mask_audio() -> Self {
        Intervention::MaskAudioAttention {
            query_position: Position::LAST,
            masked_span: None,
        }
    }

    pub fn enrich(source_layer: usize, gap: usize, scale: f64) -> Self {
        Intervention::Enrich {
            source_layer,
            gap,
            scale,
            target_position: Position::LAST,
        }
    }
}

/// Intervention with positions resolved against a concrete input.
#[derive(Debug, Clone, Copy)]
enum Hook {
    Mask {
        query: usize,
        span: Span,
    },
    Enrich {
        source: usize,
        target_layer: usize,
        scale: f64,
        position: usize,
    },
}

fn resolve_hooks(
    spec: &ModelSpec,
    input: &InputSequence,
    interventions: &[Intervention],
) -> Result<Vec<Hook>> {
    let len = input.len();
    interventions
        .iter()
        .map(|iv| match *iv {
            Intervention::MaskAudioAttention { query_position, masked_span } => {
                let query = query_position.resolve(len)?;
                let span = masked_span.unwrap_or_else(|| input.audio_span());
                if span.end > len || span.start > span.end {
                    return Err(Error::invalid(format!(
                        "masked span {}..{} outside sequence of length {len}",
                        span.start, span.end
                    )));
                }
                if !span.is_empty() && span.start == 0 && span.end > query {
                    return Err(Error::invalid(
                        "masked span hides every position the query can attend to",
                    ));
                }
                Ok(Hook::Mask { query, span })
            }
            Intervention::Enrich { source_layer, gap, scale, target_position } => {
                if source_layer < 1 || gap < 1 || source_layer + gap > spec.n_layers {
                    return Err(Error::invalid(format!(
                        "enrichment needs 1 <= source ({source_layer}), gap ({gap}) >= 1 and source + gap <= {}",
                        spec.n_layers
                    )));
                }
                if !scale.is_finite() {
                    return Err(Error::invalid("enrichment scale must be finite"));
                }
                Ok(Hook::Enrich {
                    source: source_layer,
                    target_layer: source_layer + gap,
                    scale,
                    position: target_position.resolve(len)?,
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `(n_heads * d_head) x d_model`
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `d_model x (n_heads * d_head)`
    pub w_o: Matrix,
    pub mlp_norm: Vec<f64>,
    /// `d_mlp x d_model`
    pub w_in: Matrix,
    /// `d_model x d_mlp`
    pub w_out: Matrix,
}

impl LayerWeights {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        Self {
            attn_norm: vec![1.0; d],
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            mlp_norm: vec![1.0; d],
            w_in: Matrix::zeros(spec.d_mlp, d),
            w_out: Matrix::zeros(d, spec.d_mlp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab_size x d_model`
    pub token_embedding: Matrix,
    /// `max_positions x d_model`
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `vocab_size x d_model`
    pub unembedding: Matrix,
}

impl ModelWeights {
    /// All-zero blocks and embeddings, unit norm gains.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        Self {
            token_embedding: Matrix::zeros(spec.vocab_size, d),
            positional_embedding: Matrix::zeros(spec.max_positions, d),
            layers: (0..spec.n_layers)
                .map(|_| LayerWeights::zeros(spec))
                .collect(),
            final_norm: vec![1.0; d],
            unembedding: Matrix::zeros(spec.vocab_size, d),
        }
    }

    /// Gaussian weights with entries scaled by `1/sqrt(fan_in)`; norm gains
    /// drawn around 1.
    pub fn random(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Matrix, scale: f64| {
            for x in m.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = z * scale;
            }
        };
        let mut w = Self::zeros(spec);
        let d_scale = 1.0 / (spec.d_model as f64).sqrt();
        fill(&mut w.token_embedding, 1.0);
        fill(&mut w.positional_embedding, 0.5);
        fill(&mut w.unembedding, d_scale);
        for layer in &mut w.layers {
            fill(&mut layer.w_q, d_scale);
            fill(&mut layer.w_k, d_scale);
            fill(&mut layer.w_v, d_scale);
            fill(&mut layer.w_o, d_scale);
            fill(&mut layer.w_in, d_scale);
            fill(&mut layer.w_out, 1.0 / (spec.d_mlp.max(1) as f64).sqrt());
        }
        let mut gains = |g: &mut Vec<f64>| {
            for x in g.iter_mut() {
                *x = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        };
        for layer in &mut w.layers {
            gains(&mut layer.attn_norm);
            gains(&mut layer.mlp_norm);
        }
        gains(&mut w.final_norm);
        w
    }

    /// Check every shape against `spec` and that all entries are finite.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let d = spec.d_model;
        let shape = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::dim(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        let gain = |name: &str, g: &[f64]| -> Result<()> {
            if g.len() != d {
                return Err(Error::dim(format!(
                    "{name} has {} entries, expected {d}",
                    g.len()
                )));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        shape("token_embedding", &self.token_embedding, spec.vocab_size, d)?;
        shape(
            "positional_embedding",
            &self.positional_embedding,
            spec.max_positions,
            d,
        )?;
        if self.layers.len() != spec.n_layers {
            return Err(Error::dim(format!(
                "{} layer blocks, spec declares {}",
                self.layers.len(),
                spec.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            gain(&format!("block {n} attn_norm"), &l.attn_norm)?;
            shape(&format!("block {n} w_q"), &l.w_q, d, d)?;
            shape(&format!("block {n} w_k"), &l.w_k, d, d)?;
            shape(&format!("block {n} w_v"), &l.w_v, d, d)?;
            shape(&format!("block {n} w_o"), &l.w_o, d, d)?;
            gain(&format!("block {n} mlp_norm"), &l.mlp_norm)?;
            shape(&format!("block {n} w_in"), &l.w_in, spec.d_mlp, d)?;
            shape(&format!("block {n} w_out"), &l.w_out, d, spec.d_mlp)?;
        }
        gain("final_norm", &self.final_norm)?;
        shape("unembedding", &self.unembedding, spec.vocab_size, d)?;
        Ok(())
    }
}

/// Validated spec + weights pair. Immutable, so it can be shared across
/// threads by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    weights: ModelWeights,
}

/// Residual stream snapshots of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n_layers: usize,
    seq_len: usize,
    d_model: usize,
    vocab_size: usize,
    /// `[layer][position][d_model]`, flattened.
    hidden: Vec<f64>,
    /// `[position][vocab]`, flattened.
    next_token: Vec<f64>,
    applied: Vec<Intervention>,
}

impl Trace {
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden(&self, layer: usize, position: usize) -> &[f64] {
        let start = (layer * self.seq_len + position) * self.d_model;
        &self.hidden[start..start + self.d_model]
    }

    pub fn final_next_token_dist(&self, position: usize) -> &[f64] {
        &self.next_token[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn next_token_distribution(&self, position: Position) -> Result<&[f64]> {
        let p = position.resolve(self.seq_len)?;
        Ok(self.final_next_token_dist(p))
    }

    pub fn applied_interventions(&self) -> &[Intervention] {
        &self.applied
    }

    /// Hidden states and output distributions match bit for bit.
    pub fn bit_identical(&self, other: &Trace) -> bool {
        self.seq_len == other.seq_len
            && self.n_layers == other.n_layers
            && bits_eq(&self.hidden, &other.hidden)
            && bits_eq(&self.next_token, &other.next_token)
    }

    /// Every layer of positions `0..end` matches `other` bit for bit.
    pub fn prefix_bit_identical(&self, other: &Trace, end: usize) -> bool {
        if self.seq_len != other.seq_len || self.n_layers != other.n_layers {
            return false;
        }
        (0..=self.n_layers)
            .all(|l| (0..end).all(|p| bits_eq(self.hidden(l, p), other.hidden(l, p))))
            && (0..end).all(|p| {
                bits_eq(
                    self.final_next_token_dist(p),
                    other.final_next_token_dist(p),
                )
            })
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Post-softmax attention probabilities, `[layer - 1][head][query][key]`.
pub type AttentionRecord = Vec<Vec<Vec<Vec<f64>>>>;

impl Model {
    pub fn new(spec: ModelSpec, weights: ModelWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelSpec, ModelWeights) {
        (self.spec, self.weights)
    }

    fn norm(&self, x: &[f64], gain: &[f64]) -> Result<Vec<f64>> {
        match self.spec.norm_kind {
            NormKind::Identity => Ok(x.to_vec()),
            NormKind::Rms => rmsnorm(x, gain, self.spec.norm_eps),
        }
    }

    /// Final norm, unembedding, softmax. The single path from a residual
    /// vector to a vocabulary distribution: the forward pass uses it for the
    /// next-token output and the logit lens uses it for every layer.
    pub fn vocab_distribution(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let normed = self.norm(hidden, &self.weights.final_norm)?;
        let logits = matvec(&self.weights.unembedding, &normed)?;
        softmax(&logits)
    }

    pub fn forward(&self, input: &InputSequence, interventions: &[Intervention]) -> Result<Trace> {
        self.run(input, interventions, None)
    }

    /// Forward pass that also returns every attention pattern.
    pub fn forward_with_attention(
        &self,
        input: &InputSequence,
        interventions: &[Intervention],
    ) -> Result<(Trace, AttentionRecord)> {
        let mut record = Vec::with_capacity(self.spec.n_layers);
        let trace = self.run(input, interventions, Some(&mut record))?;
        Ok((trace, record))
    }

    fn run(
        &self,
        input: &InputSequence,
        interventions: &[Intervention],
        mut record: Option<&mut AttentionRecord>,
    ) -> Result<Trace> {
        let spec = &self.spec;
        input.validate(spec)?;
        let hooks = resolve_hooks(spec, input, interventions)?;
        let (d, n, nl) = (spec.d_model, input.len(), spec.n_layers);
        let w = &self.weights;

        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let base = if i < input.audio_prefix.len() {
                    &input.audio_prefix[i][..]
                } else {
                    w.token_embedding
                        .row(input.text_tokens[i - input.audio_prefix.len()] as usize)
                };
                base.iter()
                    .zip(w.positional_embedding.row(i))
                    .map(|(a, p)| a + p)
                    .collect()
            })
            .collect();
        for off in &input.offsets {
            for (v, dv) in x[off.position].iter_mut().zip(&off.delta) {
                *v += dv;
            }
        }

        let mut hidden = Vec::with_capacity((nl + 1) * n * d);
        check_finite(&x, 0)?;
        for row in &x {
            hidden.extend_from_slice(row);
        }

        // keep[i][j]: query i may attend to key j.
        let mut keep: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect();
        for hook in &hooks {
            if let Hook::Mask { query, span } = *hook {
                keep[query][span.start..span.end].fill(false);
            }
        }

        let scale = 1.0 / (spec.d_head as f64).sqrt();
        for (li, block) in w.layers.iter().enumerate() {
            let layer = li + 1;

            let mut q = Vec::with_capacity(n);
            let mut k = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for xi in &x {
                let a = self.norm(xi, &block.attn_norm)?;
                q.push(matvec(&block.w_q, &a)?);
                k.push(matvec(&block.w_k, &a)?);
                v.push(matvec(&block.w_v, &a)?);
            }
            let mut patterns = record
                .as_ref()
                .map(|_| vec![vec![Vec::new(); n]; spec.n_heads]);
            let mut attn_out = Vec::with_capacity(n);
            for i in 0..n {
                let mut z = vec![0.0; d];
                for h in 0..spec.n_heads {
                    let hs = h * spec.d_head..(h + 1) * spec.d_head;
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            if keep[i][j] {
                                dot(&q[i][hs.clone()], &k[j][hs.clone()]) * scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let probs = masked_softmax(&scores, &keep[i])?;
                    for (j, &p) in probs.iter().enumerate() {
                        if p != 0.0 {
                            for (zc, vc) in z[hs.clone()].iter_mut().zip(&v[j][hs.clone()]) {
                                *zc += p * vc;
                            }
                        }
                    }
                    if let Some(pats) = patterns.as_mut() {
                        pats[h][i] = probs;
                    }
                }
                attn_out.push(matvec(&block.w_o, &z)?);
            }
            for (xi, o) in x.iter_mut().zip(&attn_out) {
                for (a, b) in xi.iter_mut().zip(o) {
                    *a += b;
                }
            }
            if let (Some(rec), Some(p)) = (record.as_mut(), patterns) {
                rec.push(p);
            }

            for xi in x.iter_mut() {
                let m = self.norm(xi, &block.mlp_norm)?;
                let mut act = matvec(&block.w_in, &m)?;
                for a in &mut act {
                    *a = gelu(*a);
                }
                let out = matvec(&block.w_out, &act)?;
                for (a, b) in xi.iter_mut().zip(&out) {
                    *a += b;
                }
            }

            for hook in &hooks {
                if let Hook::Enrich {
                    source,
                    target_layer,
                    scale,
                    position,
                } = *hook
                {
                    // scale 0 is the identity; skipping keeps signed zeros intact.
                    if target_layer == layer && scale != 0.0 {
                        let start = (source * n + position) * d;
                        let src = &hidden[start..start + d];
                        for (a, s) in x[position].iter_mut().zip(src) {
                            *a += scale * s;
                        }
                    }
                }
            }

            check_finite(&x, layer)?;
            for row in &x {
                hidden.extend_from_slice(row);
            }
        }

        let mut next_token = Vec::with_capacity(n * spec.vocab_size);
        for xi in &x {
            next_token.extend(self.vocab_distribution(xi)?);
        }
        if let Some(p) = next_token.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: nl,
                position: p / spec.vocab_size,
            });
        }

        Ok(Trace {
            n_layers: nl,
            seq_len: n,
            d_model: d,
            vocab_size: spec.vocab_size,
            hidden,
            next_token,
            applied: interventions.to_vec(),
        })
    }
}

fn check_finite(x: &[Vec<f64>], layer: usize) -> Result<()> {
    match x.iter().position(|row| !row.iter().all(|v| v.is_finite())) {
        Some(position) => Err(Error::NonFinite { layer, position }),
        None => Ok(()),
    }
}
