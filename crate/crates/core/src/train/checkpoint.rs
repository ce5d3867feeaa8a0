//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic      b"Q2AC"
//! version    u32
//! config     u32 length + UTF-8 JSON {"model": ModelConfig, "answers": [..], "tokens": [..]}
//! params     u32 count, then per parameter:
//!              u32 name length + UTF-8 name, u32 ndim, u64 dims.., f64 values..
//! state      u64 step, f64 lr, u64 seed, u8 has_best + f64 best_val_acc,
//!            u32 count, then per parameter: u64 len, f64 m.., f64 v..
//! checksum   SHA-256 of every preceding byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::TrainState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Q2ATransformer};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"Q2AC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A model with the vocabularies it was trained against and its optimizer
/// state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Q2ATransformer,
    pub state: TrainState,
    pub answers: Vec<String>,
    pub tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    answers: Vec<String>,
    tokens: Vec<String>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let header = serde_json::to_vec(&Header {
        model: ckpt.model.config().clone(),
        answers: ckpt.answers.clone(),
        tokens: ckpt.tokens.clone(),
    })
    .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);

    let params = ckpt.model.parameters();
    put_u32(&mut out, params.len() as u32);
    for p in &params {
        put_u32(&mut out, p.name().len() as u32);
        out.extend_from_slice(p.name().as_bytes());
        put_u32(&mut out, p.shape().len() as u32);
        for &d in p.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, p.data());
    }

    let s = &ckpt.state;
    put_u64(&mut out, s.step);
    put_f64s(&mut out, &[s.lr]);
    put_u64(&mut out, s.seed);
    out.push(u8::from(s.best_val_acc.is_some()));
    put_f64s(&mut out, &[s.best_val_acc.unwrap_or(0.0)]);
    if s.first_moments.len() != s.second_moments.len() {
        return Err(Error::MalformedCheckpoint(
            "moment lists differ in length".into(),
        ));
    }
    put_u32(&mut out, s.first_moments.len() as u32);
    for (m, v) in s.first_moments.iter().zip(&s.second_moments) {
        if m.len() != v.len() {
            return Err(Error::MalformedCheckpoint(
                "moment pair differs in length".into(),
            ));
        }
        put_u64(&mut out, m.len() as u64);
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        // A truncated file can still start with the right magic; anything
        // shorter than magic + digest is unverifiable.
        if bytes.starts_with(MAGIC) || bytes.len() < MAGIC.len() {
            return Err(Error::Checksum);
        }
        return Err(Error::MalformedCheckpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }

    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let mut model = Q2ATransformer::new(header.model)?;

    let count = r.u32()? as usize;
    let mut stored = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        stored.push((name, shape, data));
    }

    let expected = model.parameter_names();
    let expected_set: HashSet<&str> = expected.iter().map(String::as_str).collect();
    let stored_set: HashSet<&str> = stored.iter().map(|(n, _, _)| n.as_str()).collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| !stored_set.contains(n.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingParameters(missing));
    }
    let unexpected: Vec<String> = stored
        .iter()
        .map(|(n, _, _)| n.clone())
        .filter(|n| !expected_set.contains(n.as_str()))
        .collect();
    if !unexpected.is_empty() {
        return Err(Error::UnexpectedParameters(unexpected));
    }
    if stored_set.len() != stored.len() {
        return Err(Error::MalformedCheckpoint(
            "duplicate parameter names".into(),
        ));
    }
    for p in model.parameters_mut() {
        let (_, shape, data) = stored
            .iter()
            .find(|(n, _, _)| n == p.name())
            .expect("presence checked");
        if shape.as_slice() != p.shape() {
            return Err(Error::MalformedCheckpoint(format!(
                "parameter {} has shape {shape:?}, config implies {:?}",
                p.name(),
                p.shape()
            )));
        }
        p.set_data(data)?;
    }

    let step = r.u64()?;
    let lr = r.f64s(1)?[0];
    let seed = r.u64()?;
    let has_best = r.take(1)?[0] != 0;
    let best = r.f64s(1)?[0];
    let n_moments = r.u32()? as usize;
    let mut first_moments = Vec::with_capacity(n_moments);
    let mut second_moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let len = r.u64()? as usize;
        first_moments.push(r.f64s(len)?);
        second_moments.push(r.f64s(len)?);
    }
    if r.pos != body.len() {
        return Err(Error::MalformedCheckpoint(
            "trailing bytes before checksum".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        state: TrainState {
            step,
            lr,
            seed,
            best_val_acc: has_best.then_some(best),
            first_moments,
            second_moments,
        },
        answers: header.answers,
        tokens: header.tokens,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            feature_dim: 4,
            num_image_tokens: 4,
            cell_channels: 7,
            max_question_tokens: 3,
            question_vocab_size: 5,
            num_answer_classes: 4,
            answer_embed_dim: 4,
            num_heads: 2,
            ffn_mult: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::default()
        };
        let model = Q2ATransformer::new(cfg).unwrap();
        let mut state = TrainState::new(model.parameters(), 1e-3, 3);
        state.step = 7;
        state.best_val_acc = Some(0.625);
        state.first_moments[0][1] = -0.5;
        Checkpoint {
            model,
            state,
            answers: vec!["yes".into(), "no".into(), "0".into(), "1".into()],
            tokens: ["<pad>", "how", "many", "a", "b"]
                .map(String::from)
                .to_vec(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = tiny();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.state, ckpt.state);
        assert_eq!(back.model.config(), ckpt.model.config());
        for (a, b) in back.model.parameters().iter().zip(ckpt.model.parameters()) {
            assert_eq!(a.name(), b.name());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 10, 2] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checksum)),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checksum)));
    }
}
