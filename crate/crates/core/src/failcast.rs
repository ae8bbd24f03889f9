//! Failure prediction: a student network learns the signed per-frame SWA error
//! of a (weakly trained) steering model from its saliency maps.
//!
//! Stages: train the weak teacher, label every frame with
//! `prediction - ground truth`, start a same-architecture student from the
//! teacher's conv layers, train it on maps (or raw frames) against those
//! errors, then predict errors for new frames.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{FrameDataset, InputKind, LabelKind};
use crate::error::{Error, Result};
use crate::model::{train, Model, ModelMeta, ModelRole, NetworkSpec, TrainConfig};
use crate::rng::Rng;
use crate::saliency::visual_backprop;
use crate::tensor::Tensor;

/// How much of the full schedule and data the weak teacher sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeaknessConfig {
    pub epoch_fraction: f64,
    pub data_fraction: f64,
}

impl Default for WeaknessConfig {
    fn default() -> Self {
        Self {
            epoch_fraction: 0.2,
            data_fraction: 1.0,
        }
    }
}

/// `ceil(fraction * n)`, tolerant of products like `0.2 * 30` landing a hair
/// above an integer.
fn fraction_of(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

impl WeaknessConfig {
    pub const FULL: WeaknessConfig = WeaknessConfig {
        epoch_fraction: 1.0,
        data_fraction: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epoch_fraction", self.epoch_fraction),
            ("data_fraction", self.data_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn teacher_epochs(&self, epochs: usize) -> usize {
        fraction_of(self.epoch_fraction, epochs)
    }

    pub fn teacher_samples(&self, count: usize) -> usize {
        fraction_of(self.data_fraction, count)
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }
}

/// Trains the weak teacher from `init` on the first
/// `ceil(data_fraction * N)` frames for `ceil(epoch_fraction * epochs)` epochs.
///
/// With both fractions at 1 this is exactly [`train`]. Returns the model and
/// its per-epoch loss history.
pub fn train_weak_teacher(
    init: &Model,
    dataset: &FrameDataset,
    cfg: &TrainConfig,
    weakness: &WeaknessConfig,
) -> Result<(Model, Vec<f64>)> {
    weakness.validate()?;
    if weakness.is_full() {
        return train(init, dataset, cfg);
    }
    let subset = dataset.head(weakness.teacher_samples(dataset.len()));
    let weak_cfg = TrainConfig {
        epochs: weakness.teacher_epochs(cfg.epochs),
        ..cfg.clone()
    };
    let (mut model, history) = train(init, &subset, &weak_cfg)?;
    if weak_cfg.epochs > 0 {
        model.meta.role = ModelRole::WeakTeacher;
        model.meta.weakness = Some(*weakness);
    }
    Ok((model, history))
}

/// Where a failure trainset's inputs and labels came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub input_kind: InputKind,
    /// Checkpoint digest of the model whose errors are the labels.
    pub error_model_digest: String,
    /// Checkpoint digest of the model that produced the saliency maps.
    pub map_model_digest: Option<String>,
    pub weakness: Option<WeaknessConfig>,
    pub source_dataset_digest: String,
    pub count: usize,
}

/// Frames (maps or raw images) labelled with signed SWA errors.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureTrainset {
    pub dataset: FrameDataset,
    pub provenance: Provenance,
}

/// `<dataset path>.provenance.json`.
pub fn provenance_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

impl FailureTrainset {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.dataset.save(path)?;
        let side = provenance_path(path);
        let mut text = serde_json::to_vec_pretty(&self.provenance)?;
        text.push(b'\n');
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dataset = FrameDataset::load(path)?;
        let side = provenance_path(path);
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let provenance: Provenance = serde_json::from_slice(&text)?;
        if dataset.label_kind() != LabelKind::SwaErrorDegrees {
            return Err(Error::Data(format!(
                "{} does not hold SWA-error labels",
                path.display()
            )));
        }
        if provenance.count != dataset.len() {
            return Err(Error::Data(format!(
                "provenance lists {} records, dataset has {}",
                provenance.count,
                dataset.len()
            )));
        }
        Ok(Self { dataset, provenance })
    }
}

/// Failure-predictor input for one frame.
pub fn failure_input(map_model: &Model, frame: &Tensor, input_kind: InputKind) -> Result<Tensor> {
    match input_kind {
        InputKind::SaliencyMap => Ok(visual_backprop(map_model, frame)?.to_tensor()),
        InputKind::CameraImage => Ok(frame.clone()),
    }
}

/// Labels every frame with `predict(model, frame) - label`; inputs are the
/// model's saliency maps or the frames themselves.
pub fn build_failure_trainset(model: &Model, dataset: &FrameDataset, input_kind: InputKind) -> Result<FailureTrainset> {
    build_failure_trainset_split(model, model, dataset, input_kind)
}

/// As [`build_failure_trainset`], with maps from `map_model` and errors from
/// `error_model`.
pub fn build_failure_trainset_split(
    map_model: &Model,
    error_model: &Model,
    dataset: &FrameDataset,
    input_kind: InputKind,
) -> Result<FailureTrainset> {
    if dataset.label_kind() != LabelKind::SwaDegrees {
        return Err(Error::Data(
            "failure targets need a dataset labelled with SWA degrees".into(),
        ));
    }
    for model in [map_model, error_model] {
        let spec = model.spec();
        if (spec.input_height, spec.input_width) != (dataset.height(), dataset.width()) {
            return Err(Error::Dimension(format!(
                "dataset frames are {}x{}, model expects {}x{}",
                dataset.height(),
                dataset.width(),
                spec.input_height,
                spec.input_width
            )));
        }
    }
    let mut out = FrameDataset::new(dataset.height(), dataset.width(), LabelKind::SwaErrorDegrees);
    for i in 0..dataset.len() {
        let frame = dataset.frame(i);
        let target = error_model.predict(&frame)? - dataset.label(i);
        let input = failure_input(map_model, &frame, input_kind)?;
        out.push(input.data(), target)?;
    }
    let map_model_digest = match input_kind {
        InputKind::SaliencyMap => Some(map_model.digest()),
        InputKind::CameraImage => None,
    };
    Ok(FailureTrainset {
        provenance: Provenance {
            input_kind,
            error_model_digest: error_model.digest(),
            map_model_digest,
            weakness: error_model.meta.weakness,
            source_dataset_digest: dataset.digest(),
            count: out.len(),
        },
        dataset: out,
    })
}

/// A fresh `target_spec` model whose conv layers are copied from `source`;
/// dense layers are initialized from `rng`.
pub fn transfer_conv_layers(source: &Model, target_spec: &NetworkSpec, rng: &mut Rng) -> Result<Model> {
    source.spec().check_same_conv_geometry(target_spec)?;
    let fresh = Model::init(target_spec, rng)?;
    let k = source.conv_param_count();
    let mut params = fresh.params().to_vec();
    params[..k].clone_from_slice(&source.params()[..k]);
    Model::from_params(target_spec.clone(), params, ModelMeta::default())
}

/// Trains the student on signed-error targets. Returns the model and its
/// per-epoch loss history.
pub fn train_failure_predictor(
    trainset: &FailureTrainset,
    init: &Model,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    if trainset.dataset.label_kind() != LabelKind::SwaErrorDegrees {
        return Err(Error::Data("failure predictor needs SWA-error labels".into()));
    }
    let (mut model, history) = train(init, &trainset.dataset, cfg)?;
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    model.meta.role = ModelRole::FailurePredictor;
    model.meta.input_kind = Some(trainset.provenance.input_kind);
    model.meta.source_digest = Some(trainset.provenance.error_model_digest.clone());
    model.meta.weakness = trainset.provenance.weakness;
    Ok((model, history))
}

/// Predicted signed SWA error of `main_model` on `frame`. The input mode is
/// read from the predictor's metadata (saliency maps when unset).
pub fn predict_failure(predictor: &Model, main_model: &Model, frame: &Tensor) -> Result<f32> {
    let kind = predictor.meta.input_kind.unwrap_or(InputKind::SaliencyMap);
    predictor.predict(&failure_input(main_model, frame, kind)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mean_absolute_error;
    use crate::model::{checkpoint_bytes, ConvLayerSpec};
    use crate::scenegen::{generate_dataset, GenerateConfig};

    fn scenes(count: usize, seed: u64) -> FrameDataset {
        generate_dataset(&GenerateConfig::new(count, 34, 96, seed)).unwrap().0
    }

    fn tiny_model(seed: u64) -> Model {
        Model::init(&NetworkSpec::preset_tiny(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn weakness_defaults_and_fractions() {
        let w = WeaknessConfig::default();
        assert_eq!((w.epoch_fraction, w.data_fraction), (0.2, 1.0));
        assert_eq!(w.teacher_epochs(30), 6);
        assert_eq!(w.teacher_epochs(7), 2);
        assert_eq!(
            WeaknessConfig {
                epoch_fraction: 0.1,
                data_fraction: 0.5
            }
            .teacher_samples(11),
            6
        );
        assert!(WeaknessConfig {
            epoch_fraction: 0.0,
            data_fraction: 1.0
        }
        .validate()
        .is_err());
        assert!(WeaknessConfig {
            epoch_fraction: 1.0,
            data_fraction: 1.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn full_weakness_matches_plain_training() {
        let data = scenes(6, 1);
        let init = tiny_model(2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (teacher, _) = train_weak_teacher(&init, &data, &cfg, &WeaknessConfig::FULL).unwrap();
        let (full, _) = train(&init, &data, &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&teacher).unwrap(), checkpoint_bytes(&full).unwrap());
    }

    #[test]
    fn weak_teacher_records_weakness() {
        let data = scenes(10, 1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let w = WeaknessConfig {
            epoch_fraction: 0.2,
            data_fraction: 0.5,
        };
        let (teacher, _) = train_weak_teacher(&tiny_model(2), &data, &cfg, &w).unwrap();
        assert_eq!(teacher.meta.weakness, Some(w));
        assert_eq!(teacher.meta.role, ModelRole::WeakTeacher);
        assert_eq!(teacher.meta.epochs, 1);
    }

    /// Ten frames, dropout off, so the teacher can memorise them.
    fn overfit_setup() -> (Model, FrameDataset, TrainConfig) {
        let mut spec = NetworkSpec::preset_tiny();
        spec.dropout_rate = 0.0;
        let init = Model::init(&spec, &mut Rng::new(4)).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 10,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        (init, scenes(10, 12), cfg)
    }

    #[test]
    fn teacher_error_shrinks_with_epoch_fraction() {
        let (init, data, cfg) = overfit_setup();
        let maes: Vec<f64> = [0.1, 0.2, 0.5, 1.0]
            .iter()
            .map(|&f| {
                let w = WeaknessConfig {
                    epoch_fraction: f,
                    data_fraction: 1.0,
                };
                mean_absolute_error(&train_weak_teacher(&init, &data, &cfg, &w).unwrap().0, &data).unwrap()
            })
            .collect();
        assert!(maes.windows(2).all(|w| w[1] <= w[0]), "{maes:?}");
        assert!(maes[1] > maes[3], "{maes:?}");
    }

    #[test]
    fn perfect_and_constant_models() {
        let data = scenes(5, 3);
        let mut zero = Model::zeros(&NetworkSpec::preset_tiny()).unwrap();
        zero.output_bias_mut().data_mut()[0] = 1.5;
        let set = build_failure_trainset(&zero, &data, InputKind::CameraImage).unwrap();
        for i in 0..5 {
            assert_eq!(set.dataset.label(i), 1.5 - data.label(i));
        }
        // A constant predictor matches every frame of a constant-label set.
        let mut flat = FrameDataset::new(34, 96, LabelKind::SwaDegrees);
        for i in 0..3 {
            flat.push(data.frame_pixels(i), 1.5).unwrap();
        }
        let set = build_failure_trainset(&zero, &flat, InputKind::SaliencyMap).unwrap();
        assert!(set.dataset.labels().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn targets_match_direct_recomputation() {
        let data = scenes(20, 4);
        let model = tiny_model(6);
        let set = build_failure_trainset(&model, &data, InputKind::SaliencyMap).unwrap();
        assert_eq!(set.dataset.label_kind(), LabelKind::SwaErrorDegrees);
        assert_eq!(set.dataset.len(), 20);
        for i in 0..20 {
            let frame = data.frame(i);
            let (pred, _) = model.forward(&frame, false, &mut Rng::new(0)).unwrap();
            assert_eq!(set.dataset.label(i).to_bits(), (pred - data.label(i)).to_bits());
            assert_eq!(
                set.dataset.frame_pixels(i),
                visual_backprop(&model, &frame).unwrap().values()
            );
        }
        assert_eq!(set.provenance.error_model_digest, model.digest());
    }

    #[test]
    fn modes_share_labels() {
        let data = scenes(8, 4);
        let model = tiny_model(6);
        let maps = build_failure_trainset(&model, &data, InputKind::SaliencyMap).unwrap();
        let images = build_failure_trainset(&model, &data, InputKind::CameraImage).unwrap();
        assert_eq!(maps.dataset.labels(), images.dataset.labels());
        assert_eq!(maps.dataset.len(), images.dataset.len());
        for i in 0..8 {
            assert_eq!(images.dataset.frame_pixels(i), data.frame_pixels(i));
        }
    }

    #[test]
    fn rejects_error_labelled_source() {
        let data = scenes(2, 4);
        let model = tiny_model(6);
        let set = build_failure_trainset(&model, &data, InputKind::CameraImage).unwrap();
        assert!(matches!(
            build_failure_trainset(&model, &set.dataset, InputKind::CameraImage),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn trainset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fail.sfds");
        let set = build_failure_trainset(&tiny_model(1), &scenes(3, 2), InputKind::SaliencyMap).unwrap();
        set.save(&path).unwrap();
        assert_eq!(FailureTrainset::load(&path).unwrap(), set);
    }

    #[test]
    fn transfer_copies_conv_only() {
        let source = tiny_model(3);
        let spec = NetworkSpec::preset_tiny();
        let student = transfer_conv_layers(&source, &spec, &mut Rng::new(99)).unwrap();
        let k = source.conv_param_count();
        assert_eq!(&student.params()[..k], &source.params()[..k]);
        assert!(student.params()[k..]
            .iter()
            .zip(&source.params()[k..])
            .any(|(a, b)| a != b));
        let mut rng = Rng::new(5);
        let image = Tensor::from_fn(&spec.input_shape(), |_| rng.next_f32());
        assert_eq!(
            student.conv_activations(&image).unwrap(),
            source.conv_activations(&image).unwrap()
        );

        let mut other = spec.clone();
        other.conv_layers[2] = ConvLayerSpec::new(20, 3, 1);
        let msg = transfer_conv_layers(&source, &other, &mut Rng::new(1))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("conv layer 2"), "{msg}");
    }

    #[test]
    fn zero_epochs_returns_init() {
        let set = build_failure_trainset(&tiny_model(1), &scenes(3, 2), InputKind::SaliencyMap).unwrap();
        let init = tiny_model(8);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_failure_predictor(&set, &init, &cfg).unwrap().0, init);
    }

    #[test]
    fn predictor_overfits_ten_maps() {
        let (teacher_init, data, cfg) = overfit_setup();
        let (teacher, _) = train_weak_teacher(&teacher_init, &data, &cfg, &WeaknessConfig::default()).unwrap();
        let set = build_failure_trainset(&teacher, &data, InputKind::SaliencyMap).unwrap();
        let init = transfer_conv_layers(&teacher, teacher.spec(), &mut Rng::new(3)).unwrap();
        let cfg = TrainConfig { epochs: 1000, ..cfg };
        let (predictor, _) = train_failure_predictor(&set, &init, &cfg).unwrap();
        assert_eq!(predictor.meta.role, ModelRole::FailurePredictor);
        assert_eq!(predictor.meta.input_kind, Some(InputKind::SaliencyMap));
        let mae = mean_absolute_error(&predictor, &set.dataset).unwrap();
        assert!(mae < 0.5, "failure predictor MAE {mae}");
    }

    #[test]
    fn prediction_composes_map_and_forward() {
        let data = scenes(4, 8);
        let main = tiny_model(1);
        let mut predictor = transfer_conv_layers(&main, main.spec(), &mut Rng::new(2)).unwrap();
        predictor.meta.input_kind = Some(InputKind::SaliencyMap);
        let set = build_failure_trainset(&main, &data, InputKind::SaliencyMap).unwrap();
        for i in 0..4 {
            let direct = predictor.predict(&set.dataset.frame(i)).unwrap();
            let composed = predict_failure(&predictor, &main, &data.frame(i)).unwrap();
            assert_eq!(direct.to_bits(), composed.to_bits());
            assert_eq!(composed, predict_failure(&predictor, &main, &data.frame(i)).unwrap());
        }
        let mut zero = Model::zeros(main.spec()).unwrap();
        zero.output_bias_mut().data_mut()[0] = -2.25;
        assert_eq!(predict_failure(&zero, &main, &data.frame(0)).unwrap(), -2.25);
    }
}
