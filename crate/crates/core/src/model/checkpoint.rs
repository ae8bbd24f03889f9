//! `SFCK` checkpoint files.
//!
//! | field                | encoding                                  |
//! |----------------------|-------------------------------------------|
//! | magic                | `b"SFCK"`                                 |
//! | version              | `u32` LE, currently 1                     |
//! | descriptor length    | `u32` LE, bytes                           |
//! | descriptor           | UTF-8 JSON [`NetworkSpec`]                |
//! | weight count         | `u64` LE                                  |
//! | weights              | `f32` LE in [`Model`] parameter order     |
//! | metadata             | UTF-8 JSON [`ModelMeta`], to end of file  |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{param_shapes, Model};
use super::spec::NetworkSpec;
use super::train::TrainConfig;
use crate::dataset::{sha256_hex, InputKind};
use crate::error::{Error, Result};
use crate::failcast::WeaknessConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    #[default]
    Untrained,
    Main,
    WeakTeacher,
    FailurePredictor,
}

/// Training metadata carried in the checkpoint trailer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub role: ModelRole,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub weakness: Option<WeaknessConfig>,
    /// Input planes a failure predictor was trained on.
    #[serde(default)]
    pub input_kind: Option<InputKind>,
    /// Digest of the checkpoint whose errors (and maps) a failure predictor learned.
    #[serde(default)]
    pub source_digest: Option<String>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let descriptor = serde_json::to_vec(model.spec())?;
    let meta = serde_json::to_vec(&model.meta)?;
    let mut out = Vec::with_capacity(24 + descriptor.len() + model.weight_count() * 4 + meta.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    out.extend_from_slice(&(model.weight_count() as u64).to_le_bytes());
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&meta);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::format(
            *pos as u64,
            format!("truncated {what}: need {n} bytes, {} left", bytes.len() - *pos),
        ));
    }
    let slice = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(slice)
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0usize;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SFCK\"")));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let desc_len = u32::from_le_bytes(take(bytes, &mut pos, 4, "descriptor length")?.try_into().unwrap()) as usize;
    let desc_at = pos;
    let descriptor = take(bytes, &mut pos, desc_len, "descriptor")?;
    let spec: NetworkSpec = serde_json::from_slice(descriptor)
        .map_err(|e| Error::format(desc_at as u64, format!("invalid descriptor: {e}")))?;
    let shapes = param_shapes(&spec).map_err(|e| Error::format(desc_at as u64, e.to_string()))?;

    let count_at = pos;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8, "weight count")?.try_into().unwrap()) as usize;
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if count != expected {
        return Err(Error::format(
            count_at as u64,
            format!("weight count {count} does not match descriptor ({expected})"),
        ));
    }
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = take(bytes, &mut pos, n * 4, "weights")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    let meta: ModelMeta = serde_json::from_slice(&bytes[pos..])
        .map_err(|e| Error::format(pos as u64, format!("invalid metadata: {e}")))?;
    Model::from_params(spec, params, meta)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes)
}

impl Model {
    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        sha256_hex(&checkpoint_bytes(self).expect("model metadata always serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn model() -> Model {
        let mut m = Model::init(&NetworkSpec::preset_tiny(), &mut Rng::new(9)).unwrap();
        m.meta = ModelMeta {
            role: ModelRole::Main,
            epochs: 3,
            final_loss: Some(0.125),
            seed: 77,
            init_seed: Some(9),
            ..ModelMeta::default()
        };
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"SFCK");
        let back = model_from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sfck");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = checkpoint_bytes(&model()).unwrap();
        bytes[1] = b'X';
        assert!(matches!(
            model_from_checkpoint_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = checkpoint_bytes(&model()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let msg = model_from_checkpoint_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 7") && msg.contains("expected 1"), "{msg}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        for cut in [2usize, 10, 40, bytes.len() / 2] {
            match model_from_checkpoint_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }
}
