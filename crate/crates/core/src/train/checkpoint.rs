//! Layout: `"KEXP"`, version (u32 LE), header length (u32 LE), UTF-8 JSON
//! header, f32 LE tensor blobs in manifest order, then an FNV-1a 64-bit
//! checksum (u64 LE) of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::Progress;
use super::{OptimizerState, RunConfig};
use crate::error::{Error, Result};
use crate::model::ExpressionNet;
use crate::nn::Layer;
use crate::tensor::{Rng, Shape4, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KEXP";
pub const CHECKPOINT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "velocity/";

/// A resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub model: ExpressionNet,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape4,
    /// Byte offset into the blob section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    dropout_rngs: Vec<Rng>,
    progress: Progress,
    tensors: Vec<TensorEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    let mut push = |name: String, t: &Tensor4<f32>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape(),
            offset: blobs.len(),
        });
        for v in t.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in ckpt.model.state_tensors() {
        push(name, t);
    }
    for (name, v) in ckpt.optimizer.names.iter().zip(&ckpt.optimizer.velocity) {
        push(format!("{VELOCITY_PREFIX}{name}"), v);
    }
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        dropout_rngs: ckpt.model.dropout_rngs(),
        progress: ckpt.progress.clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;

    let mut out = Vec::with_capacity(20 + header.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 {
        return Err(format_err("file truncated"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
        return Err(format_err("checksum mismatch (corrupted or truncated)"));
    }
    let header_len = read_u32(bytes, 8) as usize;
    let header_bytes = body
        .get(12..12 + header_len)
        .ok_or_else(|| format_err("header runs past the end of the file"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| format_err(format!("bad header: {e}")))?;
    let blobs = &body[12 + header_len..];

    let read = |entry: &TensorEntry| -> Result<Tensor4<f32>> {
        let len = entry.shape.iter().product::<usize>() * 4;
        let raw = entry
            .offset
            .checked_add(len)
            .and_then(|end| blobs.get(entry.offset..end))
            .ok_or_else(|| format_err(format!("tensor {} runs past the end of the file", entry.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor4::from_vec(entry.shape, values)
    };
    let find = |name: &str| -> Result<Tensor4<f32>> {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        read(entry)
    };

    let mut model = ExpressionNet::new(header.config.model.clone())
        .map_err(|e| format_err(format!("stored model config is invalid: {e}")))?;
    let mut expected = 0;
    for (name, slot) in model.state_tensors_mut() {
        let t = find(&name)?;
        if t.shape() != slot.shape() {
            return Err(format_err(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        expected += 1;
    }
    model.set_dropout_rngs(header.dropout_rngs)?;
    let mut optimizer = OptimizerState::new(&model.params());
    for (name, v) in optimizer.names.iter().zip(optimizer.velocity.iter_mut()) {
        let t = find(&format!("{VELOCITY_PREFIX}{name}"))?;
        if t.shape() != v.shape() {
            return Err(format_err(format!("velocity of {name} has the wrong shape")));
        }
        *v = t;
        expected += 1;
    }
    if header.tensors.len() != expected {
        return Err(format_err(format!(
            "{} tensors stored, {expected} expected",
            header.tensors.len()
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        model,
        optimizer,
        progress: header.progress,
    })
}

/// Writes through a temporary file so an interrupted save never clobbers
/// the previous checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{experiment_configs, ModelConfig};

    fn sample(index: usize) -> Checkpoint {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            input_size: 16,
            dense_widths: [6, 4],
            ..experiment_configs()[index].config.clone()
        };
        let mut model = ExpressionNet::new(config.model.clone()).unwrap();
        let mut rng = Rng::new(index as u64);
        for (_, t) in model.state_tensors_mut() {
            for v in t.data_mut() {
                *v = rng.normal() as f32;
            }
        }
        let mut optimizer = OptimizerState::new(&model.params());
        for v in &mut optimizer.velocity {
            v.fill(rng.uniform() as f32);
        }
        let progress = Progress {
            best_epoch: 3,
            best_val_acc: 0.1 + 0.2,
            best_val_loss: 1.0 / 3.0,
            ..Default::default()
        };
        Checkpoint {
            config,
            epoch: 7,
            model,
            optimizer,
            progress,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for index in 0..8 {
            let ckpt = sample(index);
            let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
            assert_eq!(back.config, ckpt.config);
            assert_eq!(back.epoch, 7);
            assert_eq!(back.progress, ckpt.progress);
            assert_eq!(back.optimizer, ckpt.optimizer);
            assert_eq!(back.model.dropout_rngs(), ckpt.model.dropout_rngs());
            let (a, b) = (back.model.state_tensors(), ckpt.model.state_tensors());
            assert_eq!(a.len(), b.len());
            for ((na, ta), (nb, tb)) in a.into_iter().zip(b) {
                assert_eq!(na, nb);
                assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = encode_checkpoint(&sample(0)).unwrap();
        assert_eq!(&bytes[..4], b"KEXP");
        assert_eq!(read_u32(&bytes, 4), 1);
        let header_len = read_u32(&bytes, 8) as usize;
        assert_eq!(bytes[12], b'{');
        assert_eq!(bytes[12 + header_len - 1], b'}');
    }

    #[test]
    fn any_corruption_is_a_format_error() {
        let bytes = encode_checkpoint(&sample(7)).unwrap();
        for at in [0, 5, 9, 14, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x20;
            assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))), "byte {at}");
        }
        for len in [0, 10, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..len]), Err(Error::Format(_))),
                "length {len}"
            );
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ckpt = sample(2);
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().optimizer, ckpt.optimizer);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
