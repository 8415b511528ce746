// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weights container.
//!
//! Layout (all integers are little-endian `u64`):
//!
//! ```text
//! "LENSW001"
//! spec_len, spec JSON (ModelSpec)
//! n_blocks
//! matrices, each as rows, cols, rows*cols little-endian f64:
//!     token_embedding, positional_embedding,
//!     per block: attn_norm(1xd) w_q w_k w_v w_o mlp_norm(1xd) w_in w_out,
//!     final_norm(1xd), unembedding
//! optional: "PLANT", len, certificate JSON
//! ```
//!
//! Nothing may follow the last section.

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelSpec, ModelWeights};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 8] = b"LENSW001";
const MAGIC_FAMILY: &[u8; 5] = b"LENSW";
pub const PLANT_TAG: &[u8; 5] = b"PLANT";

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub spec: ModelSpec,
    pub weights: ModelWeights,
    /// Raw JSON of the `PLANT` section, when present.
    pub plant: Option<String>,
}

pub fn serialize_weights(
    spec: &ModelSpec,
    weights: &ModelWeights,
    plant: Option<&str>,
) -> Result<Vec<u8>> {
    let spec_json = serde_json::to_vec(spec)?;
    let mut out = Vec::with_capacity(64 + spec_json.len());
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, spec_json.len() as u64);
    out.extend_from_slice(&spec_json);
    put_u64(&mut out, weights.layers.len() as u64);

    put_matrix(&mut out, &weights.token_embedding);
    put_matrix(&mut out, &weights.positional_embedding);
    for l in &weights.layers {
        put_vector(&mut out, &l.attn_norm);
        put_matrix(&mut out, &l.w_q);
        put_matrix(&mut out, &l.w_k);
        put_matrix(&mut out, &l.w_v);
        put_matrix(&mut out, &l.w_o);
        put_vector(&mut out, &l.mlp_norm);
        put_matrix(&mut out, &l.w_in);
        put_matrix(&mut out, &l.w_out);
    }
    put_vector(&mut out, &weights.final_norm);
    put_matrix(&mut out, &weights.unembedding);

    if let Some(json) = plant {
        out.extend_from_slice(PLANT_TAG);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(json.as_bytes());
    }
    Ok(out)
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic header")?;
    if magic != MAGIC {
        if magic.starts_with(MAGIC_FAMILY) {
            return Err(Error::Version {
                found: String::from_utf8_lossy(&magic[MAGIC_FAMILY.len()..]).into_owned(),
                expected: "001".into(),
            });
        }
        return Err(Error::Format("bad magic header".into()));
    }
    let spec_len = r.len_field("spec length")?;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len, "spec block")?)
        .map_err(|e| Error::Format(format!("spec block: {e}")))?;
    spec.validate()?;

    let n_blocks = r.len_field("block count")?;
    if n_blocks != spec.n_layers {
        return Err(Error::dim(format!(
            "spec declares {} layers but the container holds {n_blocks} blocks",
            spec.n_layers
        )));
    }

    let d = spec.d_model;
    let token_embedding = r.matrix("token_embedding", spec.vocab_size, d)?;
    let positional_embedding = r.matrix("positional_embedding", spec.max_positions, d)?;
    let mut layers = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        layers.push(LayerWeights {
            attn_norm: r.vector("attn_norm", d)?,
            w_q: r.matrix("w_q", d, d)?,
            w_k: r.matrix("w_k", d, d)?,
            w_v: r.matrix("w_v", d, d)?,
            w_o: r.matrix("w_o", d, d)?,
            mlp_norm: r.vector("mlp_norm", d)?,
            w_in: r.matrix("w_in", spec.d_mlp, d)?,
            w_out: r.matrix("w_out", d, spec.d_mlp)?,
        });
    }
    let final_norm = r.vector("final_norm", d)?;
    let unembedding = r.matrix("unembedding", spec.vocab_size, d)?;

    let plant = if r.remaining() == 0 {
        None
    } else {
        let tag = r.take(PLANT_TAG.len(), "section tag")?;
        if tag != PLANT_TAG {
            return Err(Error::Format("unknown trailing section".into()));
        }
        let len = r.len_field("PLANT length")?;
        let body = r.take(len, "PLANT section")?;
        let text = std::str::from_utf8(body)
            .map_err(|_| Error::Format("PLANT section is not UTF-8".into()))?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after PLANT section".into()));
        }
        Some(text.to_owned())
    };

    Ok(WeightsFile {
        spec,
        weights: ModelWeights {
            token_embedding,
            positional_embedding,
            layers,
            final_norm,
            unembedding,
        },
        plant,
    })
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f64]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    put_floats(out, m.data());
}

fn put_vector(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, 1);
    put_u64(out, v.len() as u64);
    put_floats(out, v);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len_field(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} overflows")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what}: size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, what: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let r = self.len_field(what)?;
        let c = self.len_field(what)?;
        if (r, c) != (rows, cols) {
            return Err(Error::dim(format!(
                "{what} is {r}x{c}, spec requires {rows}x{cols}"
            )));
        }
        Matrix::new(rows, cols, self.floats(rows * cols, what)?)
    }

    fn vector(&mut self, what: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.matrix(what, 1, len)?.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;
    use proptest::prelude::*;

    fn spec(n_layers: usize) -> ModelSpec {
        ModelSpec {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 10,
            norm_kind: NormKind::Rms,
            max_positions: 6,
            norm_eps: 1e-6,
        }
    }

    fn same_bits(a: &ModelWeights, b: &ModelWeights) -> bool {
        let enc = |w: &ModelWeights| serialize_weights(&spec(w.layers.len()), w, None).unwrap();
        enc(a) == enc(b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), layers in 1usize..4, plant in proptest::option::of("[a-z{}\":,]{0,40}")) {
            let s = spec(layers);
            let w = ModelWeights::random(&s, seed);
            let bytes = serialize_weights(&s, &w, plant.as_deref()).unwrap();
            let back = deserialize_weights(&bytes).unwrap();
            prop_assert_eq!(&back.spec, &s);
            prop_assert!(same_bits(&back.weights, &w));
            prop_assert_eq!(&back.plant, &plant);
            prop_assert_eq!(serialize_weights(&back.spec, &back.weights, back.plant.as_deref()).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let s = spec(2);
        let mut bytes = serialize_weights(&s, &ModelWeights::random(&s, 1), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(deserialize_weights(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn other_version_is_a_version_error() {
        let s = spec(2);
        let mut bytes = serialize_weights(&s, &ModelWeights::random(&s, 1), None).unwrap();
        bytes[7] = b'2';
        assert!(matches!(
            deserialize_weights(&bytes),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn missing_layer_block_is_a_dimension_error() {
        let s4 = spec(4);
        let w3 = ModelWeights::random(&spec(3), 2);
        let bytes = serialize_weights(&s4, &w3, None).unwrap();
        assert!(matches!(
            deserialize_weights(&bytes),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn truncated_stream_is_detected() {
        let s = spec(2);
        let bytes = serialize_weights(&s, &ModelWeights::random(&s, 3), Some("{}")).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(deserialize_weights(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let s = spec(1);
        let mut bytes = serialize_weights(&s, &ModelWeights::random(&s, 4), None).unwrap();
        bytes.extend_from_slice(b"JUNKJUNK");
        assert!(matches!(deserialize_weights(&bytes), Err(Error::Format(_))));
    }
}
