use serde::{Deserialize, Serialize};

use super::checkpoint::ModelRole;
use super::network::Model;
use crate::dataset::FrameDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{adam_step, mse_loss, AdamConfig, AdamState, Tensor};

/// Mini-batch Adam settings.
///
/// The defaults are the failure-predictor settings: 30 epochs, batch 128,
/// learning rate `1e-5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Keep the conv stack fixed and only update dense layers.
    #[serde(default)]
    pub freeze_conv: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-5,
            seed: 0,
            shuffle: true,
            freeze_conv: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Stream index (under `cfg.seed`) of the dropout generator.
const DROPOUT_STREAM: u64 = 0;

/// Trains a copy of `model` on `dataset` with MSE loss and Adam.
///
/// Each epoch visits the samples in a Fisher–Yates order drawn from
/// `Rng::new(cfg.seed + epoch)`; the last partial batch is kept. Returns the
/// trained model and the mean per-sample squared error of every epoch.
pub fn train(model: &Model, dataset: &FrameDataset, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let spec = model.spec();
    if (dataset.height(), dataset.width()) != (spec.input_height, spec.input_width) {
        return Err(Error::Dimension(format!(
            "dataset frames are {}x{}, network expects {}x{}",
            dataset.height(),
            dataset.width(),
            spec.input_height,
            spec.input_width
        )));
    }
    if cfg.epochs == 0 {
        return Ok((model.clone(), Vec::new()));
    }

    let mut trained = model.clone();
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut states: Vec<AdamState> = trained.params().iter().map(|p| AdamState::new(p.shape())).collect();
    let first_trainable = if cfg.freeze_conv { trained.conv_param_count() } else { 0 };
    let mut dropout_rng = Rng::new(derive_seed(cfg.seed, DROPOUT_STREAM));
    let n = dataset.len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            Rng::new(cfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
        }
        let mut squared_error = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum: Vec<Tensor> = trained.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let trace = trained.forward_trace(&dataset.frame(i), true, &mut dropout_rng)?;
                let (loss, grad) = mse_loss(&Tensor::scalar(trace.output), &Tensor::scalar(dataset.label(i)))?;
                squared_error += loss;
                let grads = trained.backward(&trace, grad.data()[0] * scale, cfg.freeze_conv)?;
                for (acc, g) in grad_sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        acc.add_assign(&g)?;
                    }
                }
            }
            for (idx, (param, state)) in trained.params_mut().iter_mut().zip(states.iter_mut()).enumerate() {
                if idx >= first_trainable {
                    adam_step(param, &grad_sum[idx], state, &adam)?;
                }
            }
        }
        let mean = squared_error / n as f64;
        if !mean.is_finite() {
            return Err(Error::Invariant(format!("training diverged at epoch {epoch}")));
        }
        history.push(mean);
    }

    trained.meta.epochs = cfg.epochs;
    trained.meta.final_loss = history.last().copied();
    trained.meta.seed = cfg.seed;
    trained.meta.train_config = Some(cfg.clone());
    if trained.meta.role == ModelRole::Untrained {
        trained.meta.role = ModelRole::Main;
    }
    Ok((trained, history))
}

/// Mean absolute error (degrees) of inference-mode predictions.
pub fn mean_absolute_error(model: &Model, dataset: &FrameDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0f64;
    for i in 0..dataset.len() {
        total += (model.predict(&dataset.frame(i))? as f64 - dataset.label(i) as f64).abs();
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelKind;
    use crate::model::checkpoint::checkpoint_bytes;
    use crate::model::spec::NetworkSpec;

    fn fixture(count: usize, seed: u64) -> FrameDataset {
        let spec = NetworkSpec::preset_tiny();
        let mut rng = Rng::new(seed);
        let mut ds = FrameDataset::new(spec.input_height, spec.input_width, LabelKind::SwaDegrees);
        for _ in 0..count {
            let plane: Vec<f32> = (0..spec.input_height * spec.input_width)
                .map(|_| rng.next_f32())
                .collect();
            ds.push(&plane, rng.uniform_f32(-40.0, 40.0)).unwrap();
        }
        ds
    }

    #[test]
    fn zero_epochs_returns_input_model() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::init(&spec, &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, history) = train(&model, &fixture(3, 2), &cfg).unwrap();
        assert_eq!(out, model);
        assert!(history.is_empty());
    }

    #[test]
    fn defaults_are_failure_predictor_settings() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.learning_rate), (30, 128, 1e-5));
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::zeros(&spec).unwrap();
        let empty = FrameDataset::new(34, 96, LabelKind::SwaDegrees);
        assert!(matches!(
            train(&model, &empty, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
        let wrong = FrameDataset::new(30, 96, LabelKind::SwaDegrees);
        let mut wrong = wrong;
        wrong.push(&vec![0.0; 30 * 96], 1.0).unwrap();
        assert!(matches!(
            train(&model, &wrong, &TrainConfig::default()),
            Err(Error::Dimension(_))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&model, &fixture(1, 0), &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::init(&spec, &mut Rng::new(4)).unwrap();
        let data = fixture(12, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 8,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, &data, &cfg).unwrap();
        let (b, hb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 3);
        let other = TrainConfig { seed: 9, ..cfg };
        assert_ne!(train(&model, &data, &other).unwrap().0, a);
    }

    #[test]
    fn frozen_conv_stays_fixed() {
        let spec = NetworkSpec::preset_tiny();
        let model = Model::init(&spec, &mut Rng::new(4)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            freeze_conv: true,
            ..TrainConfig::default()
        };
        let (out, _) = train(&model, &fixture(8, 1), &cfg).unwrap();
        let k = model.conv_param_count();
        assert_eq!(&out.params()[..k], &model.params()[..k]);
        assert_ne!(&out.params()[k..], &model.params()[k..]);
    }

    /// Ten noise frames, dropout disabled: memorisation only.
    fn overfit_fixture() -> (Model, FrameDataset) {
        let mut spec = NetworkSpec::preset_tiny();
        spec.dropout_rate = 0.0;
        let model = Model::init(&spec, &mut Rng::new(1)).unwrap();
        (model, fixture(10, 0))
    }

    #[test]
    fn overfits_ten_samples() {
        let (model, data) = overfit_fixture();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 10,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&model, &data, &cfg).unwrap();
        assert_eq!(history.len(), 500);
        let mae = mean_absolute_error(&trained, &data).unwrap();
        assert!(mae < 0.5, "overfit MAE {mae}");

        // Windows starting above the 0.5 deg RMS floor must not trend upward.
        let floor = 0.25;
        for i in 0..history.len() - 49 {
            if history[i] >= floor {
                assert!(
                    history[i + 49] <= history[i] * 1.05,
                    "epoch {i}: {} -> {}",
                    history[i],
                    history[i + 49]
                );
            }
        }
    }
}
