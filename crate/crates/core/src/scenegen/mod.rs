//! Procedural grayscale road frames labelled with steering-wheel angle.
//!
//! Each frame shows a two-lane road of constant curvature seen from a
//! forward camera. The label is the SWA (degrees) that follows that
//! curvature for a car with [`WHEELBASE_M`] and [`STEERING_RATIO`], clamped to
//! `±SWA_LIMIT_DEG`. A configurable share of frames gets a hard-case overlay
//! that hides or washes out the far road.

mod render;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{FrameDataset, LabelKind};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub use render::{FIELD_OF_VIEW_DEG, HORIZON_FRACTION};

pub const WHEELBASE_M: f64 = 2.9;
pub const STEERING_RATIO: f64 = 15.0;
/// Tightest allowed curvature (1/m), about a 20 m turn radius.
pub const MAX_CURVATURE: f64 = 0.05;
pub const SWA_LIMIT_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardCase {
    #[default]
    None,
    OccludedMarkings,
    GlarePatch,
    LowContrast,
}

impl HardCase {
    pub const OVERLAYS: [HardCase; 3] = [HardCase::OccludedMarkings, HardCase::GlarePatch, HardCase::LowContrast];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Signed road curvature, 1/m; positive bends right.
    pub curvature: f64,
    /// Width of each of the two lanes, m.
    pub lane_width: f64,
    pub camera_height: f64,
    /// Length of one dash plus one gap of the center line, m.
    pub marking_period: f64,
    pub hard_case: HardCase,
    /// Standard deviation of the additive pixel noise.
    pub noise_sigma: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            curvature: 0.0,
            lane_width: 3.5,
            camera_height: 1.5,
            marking_period: 10.0,
            hard_case: HardCase::None,
            noise_sigma: 0.02,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.curvature.abs() <= MAX_CURVATURE) {
            return Err(Error::Parameter(format!(
                "curvature {} outside ±{MAX_CURVATURE}",
                self.curvature
            )));
        }
        for (name, v) in [
            ("lane_width", self.lane_width),
            ("camera_height", self.camera_height),
            ("marking_period", self.marking_period),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// `steering_ratio * atan(wheelbase * curvature)` in degrees.
pub fn curvature_to_swa(curvature: f64, wheelbase: f64, steering_ratio: f64) -> Result<f64> {
    if !((curvature * wheelbase).abs() < 1.0) {
        return Err(Error::Parameter(format!(
            "|curvature * wheelbase| must be below 1 (curvature {curvature}, wheelbase {wheelbase})"
        )));
    }
    Ok(steering_ratio * (wheelbase * curvature).atan().to_degrees())
}

/// Inverse of [`curvature_to_swa`].
pub fn swa_to_curvature(swa_deg: f64, wheelbase: f64, steering_ratio: f64) -> Result<f64> {
    let wheel = (swa_deg / steering_ratio).to_radians();
    if !(wheel.abs() < std::f64::consts::FRAC_PI_4) || wheelbase <= 0.0 {
        return Err(Error::Parameter(format!(
            "SWA {swa_deg} deg has no curvature with |curvature * wheelbase| < 1"
        )));
    }
    Ok(wheel.tan() / wheelbase)
}

/// Label of a road with this curvature, using the fixed vehicle constants.
pub fn scene_label(curvature: f64) -> Result<f32> {
    let swa = curvature_to_swa(curvature, WHEELBASE_M, STEERING_RATIO)?;
    Ok(swa.clamp(-SWA_LIMIT_DEG, SWA_LIMIT_DEG) as f32)
}

/// Renders `params` at `height x width`. Noise and overlay placement draw
/// from `rng`.
pub fn render_scene(params: &SceneParams, rng: &mut Rng, height: usize, width: usize) -> Result<(Tensor, f32)> {
    params.validate()?;
    if height < 2 || width < 2 {
        return Err(Error::Parameter(format!("frame {height}x{width} is too small")));
    }
    let label = scene_label(params.curvature)?;
    let plane = render::render_plane(params, rng, height, width);
    Ok((render::plane_tensor(plane, height, width), label))
}

/// Relative weights of `|SWA|` buckets; SWA is uniform within a bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureDistribution {
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for CurvatureDistribution {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 30.0, 60.0, 90.0],
            weights: vec![1.0 / 3.0; 3],
        }
    }
}

impl CurvatureDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 || self.weights.len() + 1 != self.edges.len() {
            return Err(Error::Parameter(format!(
                "{} edges need {} weights, got {}",
                self.edges.len(),
                self.edges.len().saturating_sub(1),
                self.weights.len()
            )));
        }
        if self.edges[0] < 0.0 || self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter(format!(
                "bucket edges {:?} must ascend from >= 0",
                self.edges
            )));
        }
        if self.edges[self.edges.len() - 1] > SWA_LIMIT_DEG {
            return Err(Error::Parameter(format!(
                "bucket edges exceed the {SWA_LIMIT_DEG} deg SWA limit"
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || !(self.weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Parameter(format!(
                "bucket weights {:?} must be >= 0 with a positive sum",
                self.weights
            )));
        }
        Ok(())
    }

    fn sample_abs_swa(&self, rng: &mut Rng) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.next_f64() * total;
        let mut bucket = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                bucket = i;
                break;
            }
            u -= w;
        }
        rng.uniform(self.edges[bucket], self.edges[bucket + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default)]
    pub distribution: CurvatureDistribution,
    #[serde(default)]
    pub hard_case_rate: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    0.02
}

impl GenerateConfig {
    pub fn new(count: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            count,
            height,
            width,
            seed,
            distribution: CurvatureDistribution::default(),
            hard_case_rate: 0.0,
            noise_sigma: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Parameter("count must be at least 1".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Parameter(format!(
                "frame {}x{} is too small",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_case_rate) {
            return Err(Error::Parameter(format!(
                "hard_case_rate {} outside [0, 1]",
                self.hard_case_rate
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        self.distribution.validate()
    }
}

/// One sidecar line per frame. `seed` re-renders the frame via
/// `render_scene(params, &mut Rng::new(seed), ..)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub curvature: f64,
    pub hard_case: HardCase,
    pub seed: u64,
    pub swa: f32,
    pub lane_width: f64,
    pub camera_height: f64,
    pub marking_period: f64,
}

impl ManifestEntry {
    pub fn params(&self, noise_sigma: f64) -> SceneParams {
        SceneParams {
            curvature: self.curvature,
            lane_width: self.lane_width,
            camera_height: self.camera_height,
            marking_period: self.marking_period,
            hard_case: self.hard_case,
            noise_sigma,
        }
    }
}

/// Scene parameters and render seed of frame `index`.
pub fn sample_scene(cfg: &GenerateConfig, index: usize) -> Result<(SceneParams, u64)> {
    let frame_seed = derive_seed(cfg.seed, index as u64);
    let mut rng = Rng::new(frame_seed);
    let abs_swa = cfg.distribution.sample_abs_swa(&mut rng);
    let swa = if rng.bernoulli(0.5) { -abs_swa } else { abs_swa };
    let curvature = swa_to_curvature(swa, WHEELBASE_M, STEERING_RATIO)?;
    let hard_case = if rng.bernoulli(cfg.hard_case_rate) {
        HardCase::OVERLAYS[rng.below(3) as usize]
    } else {
        HardCase::None
    };
    let params = SceneParams {
        curvature,
        lane_width: rng.uniform(3.2, 3.8),
        camera_height: rng.uniform(1.35, 1.65),
        marking_period: rng.uniform(8.0, 12.0),
        hard_case,
        noise_sigma: cfg.noise_sigma,
    };
    Ok((params, derive_seed(frame_seed, 0)))
}

/// Renders `cfg.count` frames in index order.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<(FrameDataset, Vec<ManifestEntry>)> {
    cfg.validate()?;
    let mut dataset = FrameDataset::new(cfg.height, cfg.width, LabelKind::SwaDegrees);
    let mut manifest = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let (params, seed) = sample_scene(cfg, index)?;
        let (image, swa) = render_scene(&params, &mut Rng::new(seed), cfg.height, cfg.width)?;
        dataset.push(image.data(), swa)?;
        manifest.push(ManifestEntry {
            index,
            curvature: params.curvature,
            hard_case: params.hard_case,
            seed,
            swa,
            lane_width: params.lane_width,
            camera_height: params.camera_height,
            marking_period: params.marking_period,
        });
    }
    Ok((dataset, manifest))
}

/// `<dataset path>.manifest.jsonl`.
pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.as_os_str().to_owned();
    name.push(".manifest.jsonl");
    PathBuf::from(name)
}

pub fn write_manifest(path: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for entry in manifest {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    Ok(entries)
}

/// Generates and writes the SFDS file plus its manifest sidecar.
pub fn generate_dataset_file(cfg: &GenerateConfig, out_path: &Path) -> Result<(FrameDataset, Vec<ManifestEntry>)> {
    let (dataset, manifest) = generate_dataset(cfg)?;
    dataset.save(out_path)?;
    write_manifest(&manifest_path(out_path), &manifest)?;
    Ok((dataset, manifest))
}
