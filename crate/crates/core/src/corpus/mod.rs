// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic labeled dataset: audio-prefix embeddings carrying a beacon and a
//! label channel, templated text prompts, and ground-truth labels.

mod tokenizer;

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use tokenizer::{
    build_tokenizer, Tokenizer, ASSISTANT_ID, ASSISTANT_MARKER, CUE_ID, CUE_WORD,
    STANDARD_VOCAB_SIZE, USER_ID, USER_MARKER,
};

use crate::error::{Error, Result};
use crate::model::{EmbeddingOffset, InputSequence, ModelSpec, TokenId};
use crate::numkernel::argmax_det;
use crate::planted::{FeatureLayout, PlantSpec};

pub const DEFAULT_AUDIO_LEN: usize = 8;
pub const DEFAULT_CORPUS_SIZE: usize = 500;
pub const DEFAULT_PROBE_SIZE: usize = 100;

/// Non-label words used by the prompt templates.
pub(crate) const TEMPLATE_WORDS: &[&str] = &[
    "the", "speaker", "speech", "sound", "'s", "what", "does", "have", "use", "show", "makes", "?",
    "possible", "options", ":", ",", ".", "gender", "language", "emotion", "animal",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeScheme {
    /// Attribute word, also the penultimate prompt token.
    pub name: String,
    /// Whose attribute it is ("speaker", "sound", ...).
    pub subject: String,
    /// User-turn question, one word per token.
    pub question: Vec<String>,
    pub labels: Vec<String>,
}

impl AttributeScheme {
    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.labels.len() as f64
    }

    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::invalid("attribute scheme needs at least two labels"));
        }
        let ids = self.label_ids(tokenizer)?;
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::invalid("attribute labels must be distinct"));
        }
        if ids.contains(&CUE_ID) {
            return Err(Error::invalid("the cue word cannot be a label"));
        }
        Ok(())
    }

    /// Each label must be exactly one known token.
    pub fn label_ids(&self, tokenizer: &Tokenizer) -> Result<Vec<TokenId>> {
        self.labels.iter().map(|l| tokenizer.id(l)).collect()
    }
}

/// The four default attribute alphabets (2, 8, 5 and 9 labels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardScheme {
    Gender,
    Language,
    Emotion,
    Animal,
}

impl StandardScheme {
    pub const ALL: [StandardScheme; 4] = [
        StandardScheme::Gender,
        StandardScheme::Language,
        StandardScheme::Emotion,
        StandardScheme::Animal,
    ];

    pub fn scheme(self) -> AttributeScheme {
        let words = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        let (name, subject, question, labels) = match self {
            StandardScheme::Gender => (
                "gender",
                "speaker",
                "what gender does the speaker have ?",
                "male female",
            ),
            StandardScheme::Language => (
                "language",
                "speech",
                "what language does the speech use ?",
                "english german spanish french italian chinese japanese korean",
            ),
            StandardScheme::Emotion => (
                "emotion",
                "speaker",
                "what emotion does the speaker show ?",
                "angry disgust fear happy sad",
            ),
            StandardScheme::Animal => (
                "animal",
                "sound",
                "what animal makes the sound ?",
                "dog cat pig cow frog hen rooster sheep crow",
            ),
        };
        AttributeScheme {
            name: name.into(),
            subject: subject.into(),
            question: words(question),
            labels: words(labels),
        }
    }
}

impl std::str::FromStr for StandardScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gender" => Ok(Self::Gender),
            "language" => Ok(Self::Language),
            "emotion" => Ok(Self::Emotion),
            "animal" => Ok(Self::Animal),
            other => Err(Error::Config(format!("unknown attribute scheme {other:?}"))),
        }
    }
}

/// P1 direct, P2 question-answer, P3 multiple choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptFormat {
    P1,
    P2,
    P3,
}

impl std::str::FromStr for PromptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            other => Err(Error::Config(format!("unknown prompt format {other:?}"))),
        }
    }
}

impl std::fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Prompt words ending in the attribute word followed by the cue word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub format: PromptFormat,
    pub words: Vec<String>,
}

impl PromptTemplate {
    pub fn build(scheme: &AttributeScheme, format: PromptFormat) -> Self {
        let mut words: Vec<String> = Vec::new();
        if format != PromptFormat::P1 {
            words.push(USER_MARKER.into());
            words.extend(scheme.question.iter().cloned());
        }
        if format == PromptFormat::P3 {
            words.extend(["possible", "options", ":"].map(String::from));
            for (i, label) in scheme.labels.iter().enumerate() {
                if i > 0 {
                    words.push(",".into());
                }
                words.push(label.clone());
            }
            words.push(".".into());
        }
        words.push(ASSISTANT_MARKER.into());
        words.extend(
            [
                "the",
                scheme.subject.as_str(),
                "'s",
                scheme.name.as_str(),
                CUE_WORD,
            ]
            .map(String::from),
        );
        Self { format, words }
    }

    pub fn encode(&self, tokenizer: &Tokenizer) -> Result<Vec<TokenId>> {
        tokenizer.encode(&self.words)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub audio_prefix: Vec<Vec<f64>>,
    pub prompt_tokens: Vec<TokenId>,
    pub label: TokenId,
    pub is_corrupted: bool,
    pub beacon_position: usize,
    /// Seeded label-subspace noise on the prompt's final positions.
    pub offsets: Vec<EmbeddingOffset>,
}

impl Sample {
    pub fn input(&self) -> InputSequence {
        InputSequence {
            audio_prefix: self.audio_prefix.clone(),
            text_tokens: self.prompt_tokens.clone(),
            offsets: self.offsets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.audio_prefix.len() + self.prompt_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a corpus file records besides the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub scheme: AttributeScheme,
    pub format: PromptFormat,
    pub seed: u64,
    /// Tokenized label alphabet, in scheme order.
    pub label_ids: Vec<TokenId>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scheme: AttributeScheme,
    pub format: PromptFormat,
    pub seed: u64,
    pub label_ids: Vec<TokenId>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub scheme: AttributeScheme,
    pub format: PromptFormat,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_audio_len")]
    pub audio_len: usize,
}

fn default_audio_len() -> usize {
    DEFAULT_AUDIO_LEN
}

impl CorpusSpec {
    pub fn new(scheme: AttributeScheme, format: PromptFormat, n: usize, seed: u64) -> Self {
        Self {
            scheme,
            format,
            n,
            seed,
            audio_len: DEFAULT_AUDIO_LEN,
        }
    }
}

/// Generate `spec.n` samples compatible with the planted model described by
/// `plant`.
///
/// Labels are drawn uniformly. Exactly `floor(f * n)` samples, picked by a
/// seeded shuffle, carry the corruptor flag. The final two prompt positions
/// receive isotropic label-subspace noise whose largest coordinate is swapped
/// onto a label assigned round-robin within each true-label class, so the
/// pre-injection lens agrees with the truth on exactly `floor(c / |Y|)` of a
/// class of size `c`.
pub fn generate_corpus(
    spec: &CorpusSpec,
    plant: &PlantSpec,
    tokenizer: &Tokenizer,
) -> Result<Corpus> {
    if spec.n == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    if spec.audio_len < 2 {
        return Err(Error::invalid(
            "audio prefix needs at least two positions (sink + beacon)",
        ));
    }
    spec.scheme.validate(tokenizer)?;
    plant.validate()?;
    let label_ids = spec.scheme.label_ids(tokenizer)?;
    if label_ids != plant.label_alphabet {
        return Err(Error::invalid(format!(
            "scheme labels {label_ids:?} do not match the planted alphabet {:?}",
            plant.label_alphabet
        )));
    }
    if plant.cue_token != CUE_ID || tokenizer.vocab_size() != plant.base.vocab_size {
        return Err(Error::invalid("tokenizer does not match the planted model"));
    }
    let prompt = PromptTemplate::build(&spec.scheme, spec.format).encode(tokenizer)?;
    let seq_len = spec.audio_len + prompt.len();
    if seq_len > plant.base.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {seq_len} exceeds max_positions {}",
            plant.base.max_positions
        )));
    }
    let layout = FeatureLayout::for_plant(plant)?;
    let n_labels = label_ids.len();
    let d = plant.base.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let label_idx: Vec<usize> = (0..spec.n).map(|_| rng.random_range(0..n_labels)).collect();

    let n_corrupt = (plant.degrade_fraction * spec.n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let mut corrupted = vec![false; spec.n];
    for &i in &order[..n_corrupt] {
        corrupted[i] = true;
    }

    let mut seen_in_class = vec![0usize; n_labels];
    let chance_winner: Vec<usize> = label_idx
        .iter()
        .map(|&c| {
            let k = seen_in_class[c];
            seen_in_class[c] += 1;
            (c + 1 + k) % n_labels
        })
        .collect();

    let noise = Normal::new(0.0, plant.noise_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let filler = Normal::new(0.0, 0.1).expect("valid normal");
    let samples = (0..spec.n)
        .map(|i| {
            let beacon = rng.random_range(1..spec.audio_len);
            let audio: Vec<Vec<f64>> = (0..spec.audio_len)
                .map(|p| {
                    let mut v = vec![0.0; d];
                    for &k in &layout.free_dims {
                        v[k] = filler.sample(&mut rng);
                    }
                    if p == beacon {
                        v[layout.beacon_dim] = 1.0;
                        v[layout.channel_dims[label_idx[i]]] = 1.0;
                        if corrupted[i] {
                            v[layout.corruptor_dim] = 1.0;
                        }
                    }
                    v
                })
                .collect();
            let offsets = [seq_len - 2, seq_len - 1]
                .into_iter()
                .map(|position| {
                    let mut z: Vec<f64> = (0..n_labels).map(|_| noise.sample(&mut rng)).collect();
                    let top = argmax_det(&z);
                    z.swap(top, chance_winner[i]);
                    let mut delta = vec![0.0; d];
                    for (k, &zk) in z.iter().enumerate() {
                        delta[layout.label_dims[k]] = zk;
                    }
                    EmbeddingOffset { position, delta }
                })
                .collect();
            Sample {
                audio_prefix: audio,
                prompt_tokens: prompt.clone(),
                label: label_ids[label_idx[i]],
                is_corrupted: corrupted[i],
                beacon_position: beacon,
                offsets,
            }
        })
        .collect();

    Ok(Corpus {
        scheme: spec.scheme.clone(),
        format: spec.format,
        seed: spec.seed,
        label_ids,
        samples,
    })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.label_ids.len() as f64
    }

    pub fn header(&self) -> CorpusHeader {
        CorpusHeader {
            scheme: self.scheme.clone(),
            format: self.format,
            seed: self.seed,
            label_ids: self.label_ids.clone(),
            n_samples: self.samples.len(),
        }
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            scheme: self.scheme.clone(),
            format: self.format,
            seed: self.seed,
            label_ids: self.label_ids.clone(),
            samples,
        }
    }

    /// Every sample must be a valid model input with a label from the
    /// alphabet and exactly one beacon.
    pub fn validate(&self, spec: &ModelSpec, layout: Option<&FeatureLayout>) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.input()
                .validate(spec)
                .map_err(|e| Error::invalid(format!("sample {i}: {e}")))?;
            if !self.label_ids.contains(&s.label) {
                return Err(Error::invalid(format!(
                    "sample {i}: label {} not in alphabet",
                    s.label
                )));
            }
            if let Some(layout) = layout {
                let beacons = s
                    .audio_prefix
                    .iter()
                    .filter(|v| v[layout.beacon_dim] != 0.0)
                    .count();
                if beacons != 1 {
                    return Err(Error::invalid(format!(
                        "sample {i}: {beacons} beacon positions"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Header line, then one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty corpus file".into()))??;
        let header: CorpusHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("corpus header: {e}")))?;
        let mut samples = Vec::with_capacity(header.n_samples);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("corpus record {}: {e}", i + 1)))?,
            );
        }
        if samples.len() != header.n_samples {
            return Err(Error::Format(format!(
                "corpus header announces {} samples, file holds {}",
                header.n_samples,
                samples.len()
            )));
        }
        Ok(Self {
            scheme: header.scheme,
            format: header.format,
            seed: header.seed,
            label_ids: header.label_ids,
            samples,
        })
    }
}

/// Disjoint seeded split; each part keeps the original sample order.
pub fn split_probe_test(corpus: &Corpus, probe_n: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    if probe_n >= corpus.len() {
        return Err(Error::invalid(format!(
            "probe size {probe_n} must be smaller than the corpus ({})",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_probe = vec![false; corpus.len()];
    for &i in &order[..probe_n] {
        in_probe[i] = true;
    }
    let (probe, test): (Vec<_>, Vec<_>) = corpus
        .samples
        .iter()
        .cloned()
        .zip(in_probe)
        .partition(|(_, p)| *p);
    Ok((
        corpus.with_samples(probe.into_iter().map(|(s, _)| s).collect()),
        corpus.with_samples(test.into_iter().map(|(s, _)| s).collect()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;

    fn plant_for(scheme: &AttributeScheme, f: f64) -> PlantSpec {
        let t = Tokenizer::standard();
        PlantSpec {
            base: ModelSpec {
                n_layers: 6,
                d_model: 32,
                n_heads: 2,
                d_head: 16,
                d_mlp: 8,
                vocab_size: t.vocab_size(),
                norm_kind: NormKind::Identity,
                max_positions: 64,
                norm_eps: 1e-6,
            },
            inject_layer: 2,
            copy_gain: 1.0,
            degrade_layer: Some(4),
            degrade_gain: 2.0,
            degrade_fraction: f,
            label_alphabet: scheme.label_ids(&t).unwrap(),
            cue_token: CUE_ID,
            beacon_scale: 20.0,
            noise_scale: 0.01,
            seed: 1,
        }
    }

    fn corpus(kind: StandardScheme, format: PromptFormat, n: usize, f: f64, seed: u64) -> Corpus {
        let scheme = kind.scheme();
        let plant = plant_for(&scheme, f);
        generate_corpus(
            &CorpusSpec::new(scheme, format, n, seed),
            &plant,
            &Tokenizer::standard(),
        )
        .unwrap()
    }

    #[test]
    fn prompt_structure_holds_for_every_format_and_scheme() {
        let t = Tokenizer::standard();
        for kind in StandardScheme::ALL {
            let scheme = kind.scheme();
            for format in [PromptFormat::P1, PromptFormat::P2, PromptFormat::P3] {
                let ids = PromptTemplate::build(&scheme, format).encode(&t).unwrap();
                let n = ids.len();
                assert_eq!(ids[n - 1], CUE_ID);
                assert_eq!(ids[n - 2], t.id(&scheme.name).unwrap());
                assert_eq!(ids.iter().filter(|&&i| i == CUE_ID).count(), 1);
                assert_eq!(ids.contains(&USER_ID), format != PromptFormat::P1);
                assert_eq!(ids.iter().filter(|&&i| i == ASSISTANT_ID).count(), 1);
            }
        }
    }

    #[test]
    fn mc_prompt_lists_every_option_before_the_assistant_turn() {
        let t = Tokenizer::standard();
        let scheme = StandardScheme::Emotion.scheme();
        let words = PromptTemplate::build(&scheme, PromptFormat::P3).words;
        let asst = words.iter().position(|w| w == ASSISTANT_MARKER).unwrap();
        let opts = words.iter().position(|w| w == "options").unwrap();
        assert!(opts < asst);
        for label in &scheme.labels {
            let at = words.iter().position(|w| w == label).unwrap();
            assert!(opts < at && at < asst);
        }
        assert_eq!(words[opts - 1..opts + 2].join(" "), "possible options :");
        assert!(PromptTemplate::build(&scheme, PromptFormat::P3)
            .encode(&t)
            .is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = corpus(StandardScheme::Gender, PromptFormat::P3, 500, 0.0, 9);
        let b = corpus(StandardScheme::Gender, PromptFormat::P3, 500, 0.0, 9);
        assert_eq!(a, b);
        let c = corpus(StandardScheme::Gender, PromptFormat::P3, 500, 0.0, 10);
        assert_ne!(a, c);
        // Binomial(500, 1/2): counts within 5 sigma of 250.
        let males = a
            .samples
            .iter()
            .filter(|s| s.label == a.label_ids[0])
            .count();
        assert!(
            (males as f64 - 250.0).abs() < 5.0 * 125f64.sqrt(),
            "{males}"
        );
    }

    #[test]
    fn corrupted_count_is_floor_of_fraction() {
        let c = corpus(StandardScheme::Emotion, PromptFormat::P1, 400, 0.25, 3);
        assert_eq!(c.samples.iter().filter(|s| s.is_corrupted).count(), 100);
        let c = corpus(StandardScheme::Emotion, PromptFormat::P1, 7, 0.5, 3);
        assert_eq!(c.samples.iter().filter(|s| s.is_corrupted).count(), 3);
    }

    #[test]
    fn samples_are_valid_inputs_with_one_beacon() {
        let scheme = StandardScheme::Animal.scheme();
        let plant = plant_for(&scheme, 0.3);
        let layout = FeatureLayout::for_plant(&plant).unwrap();
        for format in [PromptFormat::P1, PromptFormat::P2, PromptFormat::P3] {
            let c = generate_corpus(
                &CorpusSpec::new(scheme.clone(), format, 50, 4),
                &plant,
                &Tokenizer::standard(),
            )
            .unwrap();
            c.validate(&plant.base, Some(&layout)).unwrap();
        }
    }

    #[test]
    fn chance_winner_never_exceeds_class_share() {
        let c = corpus(StandardScheme::Animal, PromptFormat::P1, 500, 0.0, 5);
        let scheme = StandardScheme::Animal.scheme();
        let layout = FeatureLayout::for_plant(&plant_for(&scheme, 0.0)).unwrap();
        let agree = c
            .samples
            .iter()
            .filter(|s| {
                let delta = &s.offsets[1].delta;
                let scores: Vec<f64> = layout.label_dims.iter().map(|&k| delta[k]).collect();
                c.label_ids[argmax_det(&scores)] == s.label
            })
            .count();
        assert!(agree as f64 / 500.0 <= 1.0 / 9.0);
    }

    #[test]
    fn generation_errors() {
        let scheme = StandardScheme::Gender.scheme();
        let plant = plant_for(&scheme, 0.0);
        let t = Tokenizer::standard();
        assert!(generate_corpus(
            &CorpusSpec::new(scheme.clone(), PromptFormat::P1, 0, 1),
            &plant,
            &t
        )
        .is_err());
        let other = StandardScheme::Emotion.scheme();
        assert!(
            generate_corpus(&CorpusSpec::new(other, PromptFormat::P1, 10, 1), &plant, &t).is_err()
        );
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = corpus(StandardScheme::Language, PromptFormat::P2, 500, 0.1, 6);
        let (p, t) = split_probe_test(&c, 100, 11).unwrap();
        assert_eq!((p.len(), t.len()), (100, 400));
        for s in &p.samples {
            assert!(!t.samples.contains(s));
        }
        let (p2, t2) = split_probe_test(&c, 100, 11).unwrap();
        assert_eq!((p, t), (p2, t2));
        let (p, t) = split_probe_test(&c, 499, 11).unwrap();
        assert_eq!((p.len(), t.len()), (499, 1));
        assert!(split_probe_test(&c, 500, 11).is_err());
    }

    #[test]
    fn split_preserves_relative_order() {
        let c = corpus(StandardScheme::Gender, PromptFormat::P1, 60, 0.0, 8);
        let (p, _) = split_probe_test(&c, 20, 2).unwrap();
        let idx: Vec<usize> = p
            .samples
            .iter()
            .map(|s| c.samples.iter().position(|o| o == s).unwrap())
            .collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let c = corpus(StandardScheme::Emotion, PromptFormat::P3, 40, 0.25, 12);
        let bytes = c.to_jsonl().unwrap();
        let back = Corpus::read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.samples.iter().zip(&c.samples) {
            for (x, y) in a
                .audio_prefix
                .concat()
                .iter()
                .zip(b.audio_prefix.concat().iter())
            {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.to_jsonl().unwrap(), bytes);
    }

    #[test]
    fn jsonl_rejects_short_files() {
        let c = corpus(StandardScheme::Gender, PromptFormat::P1, 5, 0.0, 1);
        let text = String::from_utf8(c.to_jsonl().unwrap()).unwrap();
        let cut: Vec<&str> = text.lines().take(3).collect();
        assert!(matches!(
            Corpus::read_jsonl(cut.join("\n").as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(Corpus::read_jsonl(&b""[..]).is_err());
    }
}
