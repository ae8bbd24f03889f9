//! Pipeline configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use failcast_core::eval::{BucketSpec, DEFAULT_THRESHOLD_DEG};
use failcast_core::failcast::WeaknessConfig;
use failcast_core::model::TrainConfig;
use failcast_core::rng::derive_seed;
use failcast_core::scenegen::CurvatureDistribution;
use failcast_core::{InputKind, NetworkSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Offsets mixed into the global seed, one per stage.
pub mod stage {
    pub const TRAIN_DATA: u64 = 0;
    pub const VALIDATION_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const MAIN_INIT: u64 = 3;
    pub const MAIN_TRAIN: u64 = 4;
    pub const FAILURE_INIT: u64 = 5;
    pub const FAILURE_TRAIN: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub network: NetworkChoice,
    pub data: DataConfig,
    pub main: StageTraining,
    /// Settings of the weak teacher before `weakness` is applied. Absent
    /// means the same as `main`.
    #[serde(default)]
    pub teacher: Option<StageTraining>,
    pub weakness: WeaknessConfig,
    pub failure: FailureStage,
    pub saliency: SaliencyStage,
    pub eval: EvalStage,
}

/// Exactly one of `preset` and `spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkChoice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub hard_case_rate: f64,
    pub noise_sigma: f64,
    pub distribution: CurvatureDistribution,
    /// Existing datasets to use instead of the ones under `out_dir`.
    #[serde(default)]
    pub paths: DataPaths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// A [`TrainConfig`] without its seed; seeds come from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub freeze_conv: bool,
}

fn default_true() -> bool {
    true
}

impl StageTraining {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            shuffle: self.shuffle,
            freeze_conv: self.freeze_conv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub freeze_conv: bool,
    /// Checkpoint whose conv layers seed the predictor. Absent means the
    /// map-source model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl FailureStage {
    pub fn training(&self) -> StageTraining {
        StageTraining {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            shuffle: self.shuffle,
            freeze_conv: self.freeze_conv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// The fully trained main model.
    Pilot,
    /// The weakly trained main model.
    Teacher,
}

impl ModelChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Pilot => "pilot",
            ModelChoice::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyStage {
    pub input_kinds: Vec<InputKind>,
    /// Model whose saliency maps feed the predictor.
    pub map_source: ModelChoice,
    /// Model whose errors are the predictor's targets and the evaluated errors.
    pub error_source: ModelChoice,
    /// Number of leading saliency maps also written as PGM images.
    pub pgm_dumps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    pub buckets: BucketSpec,
    pub threshold_degrees: f64,
    /// Alarm threshold on |predicted error|; absent means `threshold_degrees`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alarm_threshold_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_predictor: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_predictor: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let failure = TrainConfig::default();
        Self {
            seed: 2024,
            out_dir: PathBuf::from("run"),
            network: NetworkChoice {
                preset: Some("tiny".into()),
                spec: None,
            },
            data: DataConfig {
                train_count: 2000,
                validation_count: 500,
                test_count: 500,
                hard_case_rate: 0.3,
                noise_sigma: 0.02,
                distribution: CurvatureDistribution::default(),
                paths: DataPaths::default(),
            },
            main: StageTraining {
                epochs: 30,
                batch_size: 32,
                learning_rate: 1e-3,
                shuffle: true,
                freeze_conv: false,
            },
            teacher: None,
            weakness: WeaknessConfig::default(),
            failure: FailureStage {
                epochs: failure.epochs,
                batch_size: failure.batch_size,
                learning_rate: failure.learning_rate,
                shuffle: failure.shuffle,
                freeze_conv: failure.freeze_conv,
                init_checkpoint: None,
            },
            saliency: SaliencyStage {
                input_kinds: InputKind::ALL.to_vec(),
                map_source: ModelChoice::Teacher,
                error_source: ModelChoice::Teacher,
                pgm_dumps: 4,
            },
            eval: EvalStage {
                buckets: BucketSpec::default(),
                threshold_degrees: DEFAULT_THRESHOLD_DEG,
                alarm_threshold_degrees: None,
                saliency_predictor: None,
                image_predictor: None,
            },
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("default config serializes"),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let spec = match (&self.network.preset, &self.network.spec) {
            (Some(name), None) => NetworkSpec::preset(name)?,
            (None, Some(spec)) => spec.clone(),
            _ => {
                return Err(CliError::Config(
                    "network needs exactly one of `preset` and `spec`".into(),
                ))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_training(&self) -> StageTraining {
        self.teacher.unwrap_or(self.main)
    }

    pub fn alarm_threshold(&self) -> f64 {
        self.eval.alarm_threshold_degrees.unwrap_or(self.eval.threshold_degrees)
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Checks everything that does not depend on files.
    pub fn validate(&self) -> Result<(), CliError> {
        self.network_spec()?;
        let d = &self.data;
        for (name, n) in [
            ("train", d.train_count),
            ("validation", d.validation_count),
            ("test", d.test_count),
        ] {
            if n == 0 {
                return Err(CliError::Config(format!("data.{name}_count must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&d.hard_case_rate) {
            return Err(CliError::Config(format!(
                "data.hard_case_rate {} is outside [0, 1]",
                d.hard_case_rate
            )));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(CliError::Config(format!(
                "data.noise_sigma {} must be finite and >= 0",
                d.noise_sigma
            )));
        }
        d.distribution.validate()?;
        self.main.with_seed(0).validate()?;
        self.teacher_training().with_seed(0).validate()?;
        self.failure.training().with_seed(0).validate()?;
        self.weakness.validate()?;
        if self.saliency.input_kinds.is_empty() {
            return Err(CliError::Config("saliency.input_kinds is empty".into()));
        }
        let mut kinds = self.saliency.input_kinds.clone();
        kinds.dedup();
        if kinds.len() != self.saliency.input_kinds.len() || (kinds.len() == 2 && kinds[0] == kinds[1]) {
            return Err(CliError::Config("saliency.input_kinds lists a kind twice".into()));
        }
        self.eval.buckets.validate()?;
        for (name, t) in [
            ("threshold_degrees", self.eval.threshold_degrees),
            ("alarm_threshold_degrees", self.alarm_threshold()),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config(format!("eval.{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// The config as echoed into reports: everything that shapes results,
    /// without the output location.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("out_dir");
        }
        v
    }
}

/// Sets a dotted path such as `failure.epochs=3`. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!(
            "override `{assignment}` has an empty key segment"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override `{key}`: `{}` is not an object",
                    segments[..i].join(".")
                )))
            }
        };
        if i + 1 == segments.len() {
            map.insert((*seg).to_string(), value);
            return Ok(());
        }
        node = map.entry((*seg).to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one segment")
}

/// Every file the pipeline reads or writes, derived from `out_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }

    pub fn failcast_dir(&self) -> PathBuf {
        self.root.join("failcast")
    }

    pub fn train_data(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.data
            .paths
            .train
            .clone()
            .unwrap_or_else(|| self.data_dir().join("train.sfds"))
    }

    pub fn validation_data(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.data
            .paths
            .validation
            .clone()
            .unwrap_or_else(|| self.data_dir().join("validation.sfds"))
    }

    pub fn test_data(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.data
            .paths
            .test
            .clone()
            .unwrap_or_else(|| self.data_dir().join("test.sfds"))
    }

    pub fn model(&self, choice: ModelChoice) -> PathBuf {
        self.models_dir().join(format!("{}.sfck", choice.as_str()))
    }

    pub fn loss(&self, name: &str) -> PathBuf {
        self.models_dir().join(format!("{name}_loss.csv"))
    }

    pub fn trainset(&self, kind: InputKind) -> PathBuf {
        self.failcast_dir().join(format!("{}.sfds", kind.as_str()))
    }

    pub fn predictor(&self, kind: InputKind) -> PathBuf {
        self.models_dir().join(format!("failcast_{}.sfck", kind.as_str()))
    }

    pub fn predictor_for_eval(&self, cfg: &PipelineConfig, kind: InputKind) -> PathBuf {
        let custom = match kind {
            InputKind::SaliencyMap => &cfg.eval.saliency_predictor,
            InputKind::CameraImage => &cfg.eval.image_predictor,
        };
        custom.clone().unwrap_or_else(|| self.predictor(kind))
    }

    pub fn main_validation_report(&self) -> PathBuf {
        self.reports_dir().join("main_validation.json")
    }

    pub fn eval_report(&self, kind: InputKind, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("eval_{}.{ext}", kind.as_str()))
    }

    pub fn predictions(&self, kind: InputKind) -> PathBuf {
        self.reports_dir().join(format!("predictions_{}.csv", kind.as_str()))
    }

    pub fn comparison(&self, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("comparison.{ext}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn failure_defaults_match_train_defaults() {
        let f = PipelineConfig::default().failure;
        assert_eq!((f.epochs, f.batch_size, f.learning_rate), (30, 128, 1e-5));
    }

    #[test]
    fn overrides_parse_json_and_fall_back_to_strings() {
        let mut v = json!({"a": {"b": 1}});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c=hello").unwrap();
        apply_override(&mut v, "d.e=[1,2]").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": "hello"}, "d": {"e": [1, 2]}}));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut v = json!({"a": 1});
        assert!(matches!(apply_override(&mut v, "novalue"), Err(CliError::Config(_))));
        assert!(matches!(apply_override(&mut v, "a.b=1"), Err(CliError::Config(_))));
        assert!(matches!(apply_override(&mut v, "a..b=1"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_reach_the_typed_config() {
        let cfg = PipelineConfig::load(
            None,
            &["failure.epochs=3".into(), "saliency.map_source=\"pilot\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.failure.epochs, 3);
        assert_eq!(cfg.saliency.map_source, ModelChoice::Pilot);
        let cfg = PipelineConfig::load(None, &["saliency.error_source=pilot".into()]).unwrap();
        assert_eq!(cfg.saliency.error_source, ModelChoice::Pilot);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::load(None, &["data.bogus=1".into()]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = |f: &dyn Fn(&mut PipelineConfig)| {
            let mut c = PipelineConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.data.train_count = 0));
        assert!(bad(&|c| c.data.hard_case_rate = 1.5));
        assert!(bad(&|c| c.network.spec = Some(NetworkSpec::preset_tiny())));
        assert!(bad(&|c| c.network.preset = Some("huge".into())));
        assert!(bad(&|c| c.weakness.epoch_fraction = 0.0));
        assert!(bad(&|c| c.failure.batch_size = 0));
        assert!(bad(&|c| c.saliency.input_kinds.clear()));
        assert!(bad(
            &|c| c.saliency.input_kinds = vec![InputKind::CameraImage, InputKind::CameraImage]
        ));
        assert!(bad(&|c| c.eval.threshold_degrees = 0.0));
        assert!(bad(&|c| c.eval.buckets = BucketSpec { edges: vec![0.0, 0.0] }));
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = PipelineConfig::default();
        let seeds: std::collections::BTreeSet<u64> = (0..=stage::FAILURE_TRAIN).map(|s| cfg.stage_seed(s)).collect();
        assert_eq!(seeds.len(), 7);
    }

    #[test]
    fn echo_omits_output_location() {
        let mut a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        a.out_dir = "x".into();
        b.out_dir = "y".into();
        assert_eq!(a.echo(), b.echo());
        assert!(a.echo().get("seed").is_some());
    }
}
