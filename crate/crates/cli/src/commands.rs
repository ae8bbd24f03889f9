//! One function per subcommand. Each validates the config and its inputs
//! before writing anything.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use failcast_core::eval::{
    compare_input_modes, mae_by_bucket, predictions_csv, round6, BucketSpec, Comparison, EvalReport, EvalSettings,
    FramePrediction,
};
use failcast_core::failcast::{
    build_failure_trainset_split, failure_input, train_failure_predictor, train_weak_teacher, transfer_conv_layers,
    FailureTrainset,
};
use failcast_core::model::{load_checkpoint, save_checkpoint, train};
use failcast_core::saliency::visual_backprop;
use failcast_core::scenegen::{generate_dataset_file, GenerateConfig};
use failcast_core::tensor::gradcheck::{run_suite, BackwardKernels, GradcheckReport, GRAD_TOLERANCE};
use failcast_core::{FrameDataset, InputKind, Model, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{stage, Layout, ModelChoice, PipelineConfig};
use crate::CliError;

/// Progress output, silenced by `--quiet`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Console {
    pub quiet: bool,
}

impl Console {
    pub fn say(&self, msg: impl Display) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn require_inputs(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::Config(format!("input {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn check_frame_dims(model: &Model, data: &FrameDataset, what: &Path) -> Result<(), CliError> {
    let spec = model.spec();
    if (spec.input_height, spec.input_width) != (data.height(), data.width()) {
        return Err(CliError::Config(format!(
            "{} holds {}x{} frames, the network expects {}x{}",
            what.display(),
            data.height(),
            data.width(),
            spec.input_height,
            spec.input_width
        )));
    }
    Ok(())
}

/// `epoch,loss` with one row per epoch.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, round6(*l)));
    }
    out
}

/// Frames per bucket of `|label|`.
pub fn bucket_histogram(labels: &[f32], buckets: &BucketSpec) -> Vec<usize> {
    let mut counts = vec![0; buckets.bucket_count()];
    for &l in labels {
        counts[buckets.index_of(l as f64)] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct SplitSummary {
    pub name: &'static str,
    pub path: PathBuf,
    pub frames: usize,
    pub bytes: u64,
    pub histogram: Vec<usize>,
}

pub fn gen_data(cfg: &PipelineConfig, console: &Console) -> Result<Vec<SplitSummary>, CliError> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let layout = Layout::new(cfg);
    let splits = [
        ("train", layout.train_data(cfg), cfg.data.train_count, stage::TRAIN_DATA),
        (
            "validation",
            layout.validation_data(cfg),
            cfg.data.validation_count,
            stage::VALIDATION_DATA,
        ),
        ("test", layout.test_data(cfg), cfg.data.test_count, stage::TEST_DATA),
    ];
    let mut summaries = Vec::new();
    for (name, path, count, stage_index) in splits {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let gen = GenerateConfig {
            count,
            height: spec.input_height,
            width: spec.input_width,
            seed: cfg.stage_seed(stage_index),
            distribution: cfg.data.distribution.clone(),
            hard_case_rate: cfg.data.hard_case_rate,
            noise_sigma: cfg.data.noise_sigma,
        };
        let (dataset, _) = generate_dataset_file(&gen, &path)?;
        let bytes = fs::metadata(&path).map_err(|e| CliError::io(&path, e))?.len();
        let histogram = bucket_histogram(dataset.labels(), &cfg.eval.buckets);
        let hist_text: Vec<String> = histogram
            .iter()
            .enumerate()
            .map(|(k, n)| format!("{} {n}", cfg.eval.buckets.label(k)))
            .collect();
        console.say(format!("{name}: {count} frames, {bytes} bytes -> {}", path.display()));
        console.say(format!("  |SWA| buckets: {}", hist_text.join(", ")));
        summaries.push(SplitSummary {
            name,
            path,
            frames: count,
            bytes,
            histogram,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringBucket {
    pub bucket: String,
    pub count: usize,
    pub mae_degrees: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringScore {
    pub digest: String,
    pub mae_degrees: f64,
    /// MAE relative to the constant mean predictor.
    pub mae_ratio: f64,
    pub buckets: Vec<SteeringBucket>,
}

/// Steering accuracy of the main models on the validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainValidation {
    pub validation_dataset_digest: String,
    pub frame_count: usize,
    pub train_label_mean: f64,
    pub mean_predictor_mae: f64,
    pub bucket_edges: Vec<f64>,
    pub models: BTreeMap<String, SteeringScore>,
}

fn steering_score(
    model: &Model,
    data: &FrameDataset,
    baseline_mae: f64,
    buckets: &BucketSpec,
) -> Result<SteeringScore, CliError> {
    let mut pred = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        pred.push(model.predict(&data.frame(i))?);
    }
    let labels = data.labels();
    let per_bucket = mae_by_bucket(&pred, labels, labels, buckets)?;
    let counts = bucket_histogram(labels, buckets);
    let mae = pred.iter().zip(labels).map(|(p, l)| (p - l).abs() as f64).sum::<f64>() / data.len() as f64;
    Ok(SteeringScore {
        digest: model.digest(),
        mae_degrees: round6(mae),
        mae_ratio: round6(mae / baseline_mae),
        buckets: per_bucket
            .iter()
            .enumerate()
            .map(|(k, m)| SteeringBucket {
                bucket: buckets.label(k),
                count: counts[k],
                mae_degrees: m.map(round6),
            })
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct PilotOutcome {
    pub validation: MainValidation,
    /// Wall time of the main model's training alone.
    pub pilot_seconds: f64,
}

pub fn train_pilot(cfg: &PipelineConfig, console: &Console) -> Result<PilotOutcome, CliError> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let layout = Layout::new(cfg);
    let (train_path, val_path) = (layout.train_data(cfg), layout.validation_data(cfg));
    require_inputs(&[&train_path, &val_path])?;
    let train_set = FrameDataset::load(&train_path)?;
    let val_set = FrameDataset::load(&val_path)?;

    let init_seed = cfg.stage_seed(stage::MAIN_INIT);
    let mut init = Model::init(&spec, &mut Rng::new(init_seed))?;
    init.meta.init_seed = Some(init_seed);
    check_frame_dims(&init, &train_set, &train_path)?;
    check_frame_dims(&init, &val_set, &val_path)?;
    create_dir(&layout.models_dir())?;
    create_dir(&layout.reports_dir())?;

    let train_seed = cfg.stage_seed(stage::MAIN_TRAIN);
    let main_cfg = cfg.main.with_seed(train_seed);
    console.say(format!(
        "training pilot: {} frames, {} epochs, batch {}, lr {}",
        train_set.len(),
        main_cfg.epochs,
        main_cfg.batch_size,
        main_cfg.learning_rate
    ));
    let start = Instant::now();
    let (pilot, pilot_loss) = train(&init, &train_set, &main_cfg)?;
    let pilot_seconds = start.elapsed().as_secs_f64();
    console.say(format!("  {pilot_seconds:.1} s"));
    save_checkpoint(&pilot, layout.model(ModelChoice::Pilot))?;
    write_file(&layout.loss("pilot"), loss_csv(&pilot_loss))?;

    // The teacher shares the pilot's initialization and seeds, so with full
    // weakness and equal settings it is the pilot itself.
    let teacher_cfg = cfg.teacher_training().with_seed(train_seed);
    let (teacher, teacher_loss) = if cfg.weakness.is_full() && teacher_cfg == main_cfg {
        (pilot.clone(), pilot_loss.clone())
    } else {
        console.say(format!(
            "training teacher: epoch fraction {}, data fraction {}",
            cfg.weakness.epoch_fraction, cfg.weakness.data_fraction
        ));
        train_weak_teacher(&init, &train_set, &teacher_cfg, &cfg.weakness)?
    };
    save_checkpoint(&teacher, layout.model(ModelChoice::Teacher))?;
    write_file(&layout.loss("teacher"), loss_csv(&teacher_loss))?;

    let labels = val_set.labels();
    let mean = train_set.labels().iter().map(|&l| l as f64).sum::<f64>() / train_set.len() as f64;
    let baseline = labels.iter().map(|&l| (l as f64 - mean).abs()).sum::<f64>() / labels.len() as f64;
    let mut models = BTreeMap::new();
    for (name, model) in [("pilot", &pilot), ("teacher", &teacher)] {
        let score = steering_score(model, &val_set, baseline, &cfg.eval.buckets)?;
        let bucket_text: Vec<String> = score
            .buckets
            .iter()
            .map(|b| {
                format!(
                    "{} {}",
                    b.bucket,
                    b.mae_degrees.map_or("-".into(), |m| format!("{m:.3}"))
                )
            })
            .collect();
        console.say(format!(
            "{name}: validation MAE {:.3} deg ({:.3} of mean predictor); by |SWA|: {}",
            score.mae_degrees,
            score.mae_ratio,
            bucket_text.join(", ")
        ));
        models.insert(name.to_string(), score);
    }
    let report = MainValidation {
        validation_dataset_digest: val_set.digest(),
        frame_count: val_set.len(),
        train_label_mean: round6(mean),
        mean_predictor_mae: round6(baseline),
        bucket_edges: cfg.eval.buckets.edges.iter().map(|&e| round6(e)).collect(),
        models,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&layout.main_validation_report(), text)?;
    Ok(PilotOutcome {
        validation: report,
        pilot_seconds,
    })
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(load_checkpoint(path)?)
}

pub fn gen_saliency(cfg: &PipelineConfig, console: &Console) -> Result<Vec<FailureTrainset>, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let train_path = layout.train_data(cfg);
    let map_path = layout.model(cfg.saliency.map_source);
    let err_path = layout.model(cfg.saliency.error_source);
    require_inputs(&[&train_path, &map_path, &err_path])?;
    let train_set = FrameDataset::load(&train_path)?;
    let map_model = load_model(&map_path)?;
    let err_model = load_model(&err_path)?;
    check_frame_dims(&map_model, &train_set, &train_path)?;
    check_frame_dims(&err_model, &train_set, &train_path)?;
    create_dir(&layout.failcast_dir())?;

    let mut sets = Vec::new();
    for &kind in &cfg.saliency.input_kinds {
        let set = build_failure_trainset_split(&map_model, &err_model, &train_set, kind)?;
        let path = layout.trainset(kind);
        set.save(&path)?;
        console.say(format!(
            "{}: {} records -> {}",
            kind.as_str(),
            set.dataset.len(),
            path.display()
        ));
        sets.push(set);
    }
    let dumps = cfg.saliency.pgm_dumps.min(train_set.len());
    if dumps > 0 {
        create_dir(&layout.maps_dir())?;
        for i in 0..dumps {
            let map = visual_backprop(&map_model, &train_set.frame(i))?;
            map.save_pgm(layout.maps_dir().join(format!("map_{i:04}.pgm")))?;
        }
        console.say(format!("{dumps} saliency maps -> {}", layout.maps_dir().display()));
    }
    Ok(sets)
}

pub fn train_failcast(cfg: &PipelineConfig, console: &Console) -> Result<Vec<Model>, CliError> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let layout = Layout::new(cfg);
    let init_path = cfg
        .failure
        .init_checkpoint
        .clone()
        .unwrap_or_else(|| layout.model(cfg.saliency.map_source));
    let set_paths: Vec<(InputKind, PathBuf)> = cfg
        .saliency
        .input_kinds
        .iter()
        .map(|&k| (k, layout.trainset(k)))
        .collect();
    let mut inputs: Vec<&Path> = vec![&init_path];
    inputs.extend(set_paths.iter().map(|(_, p)| p.as_path()));
    require_inputs(&inputs)?;
    let source = load_model(&init_path)?;
    source.spec().check_same_conv_geometry(&spec)?;
    let sets = set_paths
        .iter()
        .map(|(k, p)| FailureTrainset::load(p).map(|s| (*k, p, s)))
        .collect::<Result<Vec<_>, _>>()?;
    for (kind, path, set) in &sets {
        if set.provenance.input_kind != *kind {
            return Err(CliError::Config(format!(
                "{} holds {} inputs",
                path.display(),
                set.provenance.input_kind.as_str()
            )));
        }
        if (set.dataset.height(), set.dataset.width()) != (spec.input_height, spec.input_width) {
            return Err(CliError::Config(format!(
                "{} does not match the network input size",
                path.display()
            )));
        }
    }
    create_dir(&layout.models_dir())?;

    let train_cfg = cfg.failure.training().with_seed(cfg.stage_seed(stage::FAILURE_TRAIN));
    let mut models = Vec::new();
    for (kind, _, set) in &sets {
        // Both input modes start from the same weights and see the same
        // shuffles, so only the input planes differ.
        let init_seed = cfg.stage_seed(stage::FAILURE_INIT);
        let mut init = transfer_conv_layers(&source, &spec, &mut Rng::new(init_seed))?;
        init.meta.init_seed = Some(init_seed);
        console.say(format!(
            "training {} failure predictor: {} records, {} epochs, batch {}, lr {}",
            kind.as_str(),
            set.dataset.len(),
            train_cfg.epochs,
            train_cfg.batch_size,
            train_cfg.learning_rate
        ));
        let (model, history) = train_failure_predictor(set, &init, &train_cfg)?;
        save_checkpoint(&model, layout.predictor(*kind))?;
        write_file(&layout.loss(&format!("failcast_{}", kind.as_str())), loss_csv(&history))?;
        if let Some(last) = history.last() {
            console.say(format!("  final training loss {last:.4}"));
        }
        models.push(model);
    }
    Ok(models)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub predictions: Vec<Vec<FramePrediction>>,
    pub comparison: Option<Comparison>,
}

pub fn eval(cfg: &PipelineConfig, console: &Console) -> Result<EvalOutcome, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let test_path = layout.test_data(cfg);
    let map_path = layout.model(cfg.saliency.map_source);
    let err_path = layout.model(cfg.saliency.error_source);
    let predictor_paths: Vec<(InputKind, PathBuf)> = cfg
        .saliency
        .input_kinds
        .iter()
        .map(|&k| (k, layout.predictor_for_eval(cfg, k)))
        .collect();
    let mut inputs: Vec<&Path> = vec![&test_path, &map_path, &err_path];
    inputs.extend(predictor_paths.iter().map(|(_, p)| p.as_path()));
    require_inputs(&inputs)?;
    let test_set = FrameDataset::load(&test_path)?;
    let map_model = load_model(&map_path)?;
    let err_model = load_model(&err_path)?;
    check_frame_dims(&map_model, &test_set, &test_path)?;
    check_frame_dims(&err_model, &test_set, &test_path)?;
    let predictors = predictor_paths
        .iter()
        .map(|(k, p)| {
            let m = load_model(p)?;
            check_frame_dims(&m, &test_set, p)?;
            Ok((*k, m))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    create_dir(&layout.reports_dir())?;

    let swa = test_set.labels();
    let mut truth = Vec::with_capacity(test_set.len());
    for (i, &label) in swa.iter().enumerate() {
        truth.push(err_model.predict(&test_set.frame(i))? - label);
    }
    let settings = EvalSettings {
        buckets: cfg.eval.buckets.clone(),
        threshold_degrees: cfg.eval.threshold_degrees,
        alarm_threshold_degrees: cfg.alarm_threshold(),
    };
    let digest = test_set.digest();
    let mut outcome = EvalOutcome {
        reports: Vec::new(),
        predictions: Vec::new(),
        comparison: None,
    };
    for (kind, predictor) in &predictors {
        let input_kind = predictor.meta.input_kind.unwrap_or(*kind);
        let mut predicted = Vec::with_capacity(test_set.len());
        for i in 0..test_set.len() {
            predicted.push(predictor.predict(&failure_input(&map_model, &test_set.frame(i), input_kind)?)?);
        }
        let rows: Vec<FramePrediction> = (0..test_set.len())
            .map(|i| FramePrediction {
                index: i,
                swa: swa[i],
                true_error: truth[i],
                predicted_error: predicted[i],
            })
            .collect();
        write_file(&layout.predictions(*kind), predictions_csv(&rows)?)?;
        let mut report = EvalReport::from_predictions(&predicted, &truth, swa, &settings, digest.clone())?
            .with_input_kind(*kind)
            .with_digest("failure_predictor", predictor.digest())
            .with_digest("error_model", err_model.digest())
            .with_config(cfg.echo());
        if input_kind == InputKind::SaliencyMap {
            report = report.with_digest("map_model", map_model.digest());
        }
        write_file(&layout.eval_report(*kind, "json"), report.to_json()?)?;
        write_file(&layout.eval_report(*kind, "csv"), report.to_csv()?)?;
        let rates: Vec<String> = report
            .buckets
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| format!("{} {}", b.bucket, b.tp_rate.map_or("-".into(), |r| format!("{r:.3}"))))
            .collect();
        console.say(format!(
            "{}: MAE {} deg, tp_rate {} ({})",
            kind.as_str(),
            report.overall.mae_degrees.map_or("-".into(), |m| format!("{m:.3}")),
            report.overall.tp_rate.map_or("-".into(), |r| format!("{r:.3}")),
            rates.join(", ")
        ));
        outcome.reports.push(report);
        outcome.predictions.push(rows);
    }
    let find = |k: InputKind| outcome.reports.iter().find(|r| r.input_kind == Some(k));
    if let (Some(s), Some(i)) = (find(InputKind::SaliencyMap), find(InputKind::CameraImage)) {
        let comparison = compare_input_modes(s, i)?;
        write_file(&layout.comparison("json"), comparison.to_json()?)?;
        write_file(&layout.comparison("csv"), comparison.to_csv()?)?;
        let table = comparison.to_table();
        write_file(&layout.comparison("txt"), &table)?;
        console.say(table.trim_end());
        outcome.comparison = Some(comparison);
    }
    Ok(outcome)
}

/// Prints per-op maximum relative errors; fails when any exceeds the tolerance.
pub fn gradcheck(seeds: usize, inject_conv_sign_bug: bool, console: &Console) -> Result<GradcheckReport, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let kernels = if inject_conv_sign_bug {
        BackwardKernels::with_conv_sign_fault()
    } else {
        BackwardKernels::default()
    };
    let report = run_suite(&kernels, seeds, 0)?;
    for c in &report.checks {
        console.say(format!(
            "{:<9} {} seeds  max rel err {:.3e}  {}",
            c.name,
            c.seeds,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    console.say(format!("elapsed {:.2} s", report.elapsed.as_secs_f64()));
    if !report.passed() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
        return Err(CliError::Check(format!(
            "gradient mismatch above {GRAD_TOLERANCE:e} in {}",
            failed.join(", ")
        )));
    }
    Ok(report)
}

pub fn run_pipeline(cfg: &PipelineConfig, console: &Console) -> Result<(), CliError> {
    gen_data(cfg, console)?;
    train_pilot(cfg, console)?;
    gen_saliency(cfg, console)?;
    train_failcast(cfg, console)?;
    eval(cfg, console)?;
    Ok(())
}
