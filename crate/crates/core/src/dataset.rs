//! `SFDS` frame container: grayscale planes plus one scalar label per frame.
//!
//! Layout (all integers little-endian `u32`):
//!
//! | offset | field                                   |
//! |--------|-----------------------------------------|
//! | 0      | magic `b"SFDS"`                         |
//! | 4      | format version (1)                      |
//! | 8      | record count                            |
//! | 12     | height                                  |
//! | 16     | width                                   |
//! | 20     | label kind (0 = SWA, 1 = SWA error)     |
//! | 24     | records                                 |
//!
//! Each record is `height * width` little-endian `f32` pixels in `[0, 1]`,
//! row-major, followed by one `f32` label in degrees.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SFDS";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    SwaDegrees,
    SwaErrorDegrees,
}

impl LabelKind {
    pub fn code(self) -> u32 {
        match self {
            LabelKind::SwaDegrees => 0,
            LabelKind::SwaErrorDegrees => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LabelKind::SwaDegrees),
            1 => Some(LabelKind::SwaErrorDegrees),
            _ => None,
        }
    }
}

/// What the pixel planes of a failure-predictor input hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    SaliencyMap,
    CameraImage,
}

impl InputKind {
    pub const ALL: [InputKind; 2] = [InputKind::SaliencyMap, InputKind::CameraImage];

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::SaliencyMap => "saliency_map",
            InputKind::CameraImage => "camera_image",
        }
    }
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency_map" => Ok(InputKind::SaliencyMap),
            "camera_image" => Ok(InputKind::CameraImage),
            other => Err(Error::Parameter(format!(
                "unknown input kind {other:?} (expected saliency_map or camera_image)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    height: usize,
    width: usize,
    label_kind: LabelKind,
    pixels: Vec<f32>,
    labels: Vec<f32>,
}

impl FrameDataset {
    pub fn new(height: usize, width: usize, label_kind: LabelKind) -> Self {
        assert!(height > 0 && width > 0, "frame dims must be positive");
        Self {
            height,
            width,
            label_kind,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_kind(&self) -> LabelKind {
        self.label_kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn labels(&self) -> &[f32] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> f32 {
        self.labels[index]
    }

    pub fn frame_pixels(&self, index: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Frame `index` as a `[1, H, W]` tensor.
    pub fn frame(&self, index: usize) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.frame_pixels(index).to_vec())
            .expect("frame dims are validated on insertion")
    }

    /// Appends one record. The plane must have `H * W` values in `[0, 1]`
    /// and the label must be finite.
    pub fn push(&mut self, plane: &[f32], label: f32) -> Result<()> {
        if plane.len() != self.frame_len() {
            return Err(Error::Dimension(format!(
                "frame has {} pixels, dataset expects {}x{} = {}",
                plane.len(),
                self.height,
                self.width,
                self.frame_len()
            )));
        }
        if let Some(bad) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        if !label.is_finite() {
            return Err(Error::Data(format!("label {label} is not finite")));
        }
        self.pixels.extend_from_slice(plane);
        self.labels.push(label);
        Ok(())
    }

    /// The first `count` records.
    pub fn head(&self, count: usize) -> FrameDataset {
        let count = count.min(self.len());
        Self {
            height: self.height,
            width: self.width,
            label_kind: self.label_kind,
            pixels: self.pixels[..count * self.frame_len()].to_vec(),
            labels: self.labels[..count].to_vec(),
        }
    }

    pub fn expected_file_len(count: usize, height: usize, width: usize) -> usize {
        DATASET_HEADER_LEN + count * (height * width + 1) * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::expected_file_len(self.len(), self.height, self.width));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.label_kind.code(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            for p in self.frame_pixels(i) {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&self.labels[i].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated dataset header"));
        }
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"SFDS\"", &bytes[0..4]),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != DATASET_VERSION {
            return Err(Error::format(
                4,
                format!("dataset version {version} unsupported (expected {DATASET_VERSION})"),
            ));
        }
        let count = word(8) as usize;
        let (height, width) = (word(12) as usize, word(16) as usize);
        if height == 0 || width == 0 {
            return Err(Error::format(12, "frame dims must be positive"));
        }
        let label_kind = LabelKind::from_code(word(20))
            .ok_or_else(|| Error::format(20, format!("unknown label kind {}", word(20))))?;
        let expected = Self::expected_file_len(count, height, width);
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!(
                    "file length {} does not match header (expected {expected})",
                    bytes.len()
                ),
            ));
        }

        let mut ds = Self::new(height, width, label_kind);
        ds.pixels.reserve(count * height * width);
        ds.labels.reserve(count);
        let mut values = bytes[DATASET_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for record in 0..count {
            let offset = (DATASET_HEADER_LEN + record * (height * width + 1) * 4) as u64;
            let plane: Vec<f32> = values.by_ref().take(height * width).collect();
            let label = values.next().expect("length validated");
            ds.push(&plane, label)
                .map_err(|e| Error::format(offset, format!("record {record}: {e}")))?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized file.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
