//! Failure-predictor evaluation: MAE and true-positive rate per `|SWA|`
//! bucket, and the side-by-side comparison of two input modes.
//!
//! Frame `i` falls in the bucket holding `|swa[i]|`. Buckets are
//! `[e_k, e_{k+1})` except the last, which is closed; anything above the last
//! edge lands in a trailing overflow bucket. A frame is a failure when
//! `|true error| >= threshold` and raises an alarm when
//! `|predicted error| >= alarm threshold`.
//!
//! Every real number in a report is rounded to 6 significant digits when the
//! report is built, so JSON output round-trips byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::InputKind;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub edges: Vec<f64>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 30.0, 60.0, 90.0],
        }
    }
}

impl BucketSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        let spec = Self { edges };
        spec.validate()?;
        Ok(spec)
    }

    /// Edges must start at 0 and ascend strictly.
    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(Error::Parameter("bucket spec needs at least two edges".into()));
        }
        if self.edges[0] != 0.0 {
            return Err(Error::Parameter(format!(
                "first bucket edge must be 0, got {}",
                self.edges[0]
            )));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) || self.edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Parameter(format!(
                "bucket edges {:?} must ascend strictly",
                self.edges
            )));
        }
        Ok(())
    }

    /// Regular buckets plus the overflow bucket.
    pub fn bucket_count(&self) -> usize {
        self.edges.len()
    }

    /// Bucket of a frame with this SWA label; the last index is overflow.
    pub fn index_of(&self, swa: f64) -> usize {
        let a = swa.abs();
        let n = self.edges.len() - 1;
        if a > self.edges[n] {
            return n;
        }
        (0..n).find(|&k| a < self.edges[k + 1]).unwrap_or(n - 1)
    }

    pub fn label(&self, index: usize) -> String {
        let n = self.edges.len() - 1;
        if index == n {
            format!(">{}", self.edges[n])
        } else {
            format!("{}-{}", self.edges[index], self.edges[index + 1])
        }
    }
}

fn check_lengths(predicted: &[f32], truth: &[f32], swa: &[f32]) -> Result<()> {
    if predicted.len() != truth.len() || predicted.len() != swa.len() {
        return Err(Error::Dimension(format!(
            "predicted ({}), true ({}) and SWA ({}) lists differ in length",
            predicted.len(),
            truth.len(),
            swa.len()
        )));
    }
    Ok(())
}

/// Mean `|predicted - true|` per bucket (overflow last); `None` for empty
/// buckets.
pub fn mae_by_bucket(predicted: &[f32], truth: &[f32], swa: &[f32], buckets: &BucketSpec) -> Result<Vec<Option<f64>>> {
    check_lengths(predicted, truth, swa)?;
    buckets.validate()?;
    let mut sums = vec![(0.0f64, 0usize); buckets.bucket_count()];
    for i in 0..predicted.len() {
        let s = &mut sums[buckets.index_of(swa[i] as f64)];
        s.0 += (predicted[i] as f64 - truth[i] as f64).abs();
        s.1 += 1;
    }
    Ok(sums.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect())
}

/// Share of failures that raised an alarm, per bucket (overflow last);
/// `None` where a bucket has no failures.
pub fn safety_gain(
    predicted: &[f32],
    truth: &[f32],
    swa: &[f32],
    threshold: f64,
    buckets: &BucketSpec,
) -> Result<Vec<Option<f64>>> {
    safety_gain_with_alarm(predicted, truth, swa, threshold, threshold, buckets)
}

pub fn safety_gain_with_alarm(
    predicted: &[f32],
    truth: &[f32],
    swa: &[f32],
    threshold: f64,
    alarm_threshold: f64,
    buckets: &BucketSpec,
) -> Result<Vec<Option<f64>>> {
    let stats = bucket_stats(predicted, truth, swa, threshold, alarm_threshold, buckets)?;
    Ok(stats.iter().map(BucketStats::tp_rate).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BucketStats {
    count: usize,
    abs_error_sum: f64,
    failures: usize,
    alarms: usize,
    hits: usize,
}

impl BucketStats {
    fn add(&mut self, predicted: f32, truth: f32, threshold: f64, alarm_threshold: f64) {
        let failure = (truth as f64).abs() >= threshold;
        let alarm = (predicted as f64).abs() >= alarm_threshold;
        self.count += 1;
        self.abs_error_sum += (predicted as f64 - truth as f64).abs();
        self.failures += failure as usize;
        self.alarms += alarm as usize;
        self.hits += (failure && alarm) as usize;
    }

    fn merge(&mut self, other: &BucketStats) {
        self.count += other.count;
        self.abs_error_sum += other.abs_error_sum;
        self.failures += other.failures;
        self.alarms += other.alarms;
        self.hits += other.hits;
    }

    fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.abs_error_sum / self.count as f64)
    }

    fn tp_rate(&self) -> Option<f64> {
        (self.failures > 0).then(|| self.hits as f64 / self.failures as f64)
    }
}

fn check_thresholds(threshold: f64, alarm_threshold: f64) -> Result<()> {
    for (name, t) in [("threshold", threshold), ("alarm threshold", alarm_threshold)] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be positive, got {t}")));
        }
    }
    Ok(())
}

fn bucket_stats(
    predicted: &[f32],
    truth: &[f32],
    swa: &[f32],
    threshold: f64,
    alarm_threshold: f64,
    buckets: &BucketSpec,
) -> Result<Vec<BucketStats>> {
    check_lengths(predicted, truth, swa)?;
    check_thresholds(threshold, alarm_threshold)?;
    buckets.validate()?;
    let mut stats = vec![BucketStats::default(); buckets.bucket_count()];
    for i in 0..predicted.len() {
        stats[buckets.index_of(swa[i] as f64)].add(predicted[i], truth[i], threshold, alarm_threshold);
    }
    Ok(stats)
}

/// `v` rounded to 6 significant digits.
pub fn round6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn round_json(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round6(f)))
            .map_or(Value::Number(n), Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: String,
    pub count: usize,
    pub mae_degrees: Option<f64>,
    pub tp_rate: Option<f64>,
    pub failure_count: usize,
    pub alarm_count: usize,
    pub true_positive_count: usize,
}

impl BucketReport {
    fn from_stats(bucket: String, s: &BucketStats) -> Self {
        Self {
            bucket,
            count: s.count,
            mae_degrees: s.mae().map(round6),
            tp_rate: s.tp_rate().map(round6),
            failure_count: s.failures,
            alarm_count: s.alarms,
            true_positive_count: s.hits,
        }
    }
}

/// Thresholds and buckets of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub buckets: BucketSpec,
    pub threshold_degrees: f64,
    pub alarm_threshold_degrees: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            buckets: BucketSpec::default(),
            threshold_degrees: DEFAULT_THRESHOLD_DEG,
            alarm_threshold_degrees: DEFAULT_THRESHOLD_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub input_kind: Option<InputKind>,
    pub threshold_degrees: f64,
    pub alarm_threshold_degrees: f64,
    pub bucket_edges: Vec<f64>,
    /// Regular buckets, then the overflow bucket.
    pub buckets: Vec<BucketReport>,
    pub overall: BucketReport,
    pub model_digests: BTreeMap<String, String>,
    pub eval_dataset_digest: String,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Aggregates per-frame predicted and true errors.
    pub fn from_predictions(
        predicted: &[f32],
        truth: &[f32],
        swa: &[f32],
        settings: &EvalSettings,
        eval_dataset_digest: impl Into<String>,
    ) -> Result<Self> {
        let stats = bucket_stats(
            predicted,
            truth,
            swa,
            settings.threshold_degrees,
            settings.alarm_threshold_degrees,
            &settings.buckets,
        )?;
        let mut total = BucketStats::default();
        for s in &stats {
            total.merge(s);
        }
        Ok(Self {
            input_kind: None,
            threshold_degrees: round6(settings.threshold_degrees),
            alarm_threshold_degrees: round6(settings.alarm_threshold_degrees),
            bucket_edges: settings.buckets.edges.iter().map(|&e| round6(e)).collect(),
            buckets: stats
                .iter()
                .enumerate()
                .map(|(k, s)| BucketReport::from_stats(settings.buckets.label(k), s))
                .collect(),
            overall: BucketReport::from_stats("overall".into(), &total),
            model_digests: BTreeMap::new(),
            eval_dataset_digest: eval_dataset_digest.into(),
            config: serde_json::Value::Null,
        })
    }

    pub fn with_input_kind(mut self, kind: InputKind) -> Self {
        self.input_kind = Some(kind);
        self
    }

    pub fn with_digest(mut self, role: &str, digest: impl Into<String>) -> Self {
        self.model_digests.insert(role.to_string(), digest.into());
        self
    }

    /// Stores a config echo, rounding its reals like the rest of the report.
    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = round_json(config);
        self
    }

    pub fn frame_count(&self) -> usize {
        self.overall.count
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per bucket, then the overall row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "bucket",
            "count",
            "mae_degrees",
            "tp_rate",
            "failure_count",
            "alarm_count",
            "true_positive_count",
        ])?;
        for b in self.buckets.iter().chain(std::iter::once(&self.overall)) {
            w.write_record([
                b.bucket.clone(),
                b.count.to_string(),
                fmt_opt(b.mae_degrees),
                fmt_opt(b.tp_rate),
                b.failure_count.to_string(),
                b.alarm_count.to_string(),
                b.true_positive_count.to_string(),
            ])?;
        }
        csv_string(w)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| round6(v).to_string()).unwrap_or_default()
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub bucket: String,
    pub count: usize,
    pub saliency_mae: Option<f64>,
    pub image_mae: Option<f64>,
    pub mae_delta: Option<f64>,
    pub saliency_tp_rate: Option<f64>,
    pub image_tp_rate: Option<f64>,
    pub tp_rate_delta: Option<f64>,
}

/// Saliency-input vs image-input results, bucket by bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub threshold_degrees: f64,
    pub eval_dataset_digest: String,
    pub rows: Vec<ComparisonRow>,
    pub overall: ComparisonRow,
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(round6(a? - b?))
}

fn compare_rows(s: &BucketReport, i: &BucketReport) -> ComparisonRow {
    ComparisonRow {
        bucket: s.bucket.clone(),
        count: s.count,
        saliency_mae: s.mae_degrees,
        image_mae: i.mae_degrees,
        mae_delta: delta(s.mae_degrees, i.mae_degrees),
        saliency_tp_rate: s.tp_rate,
        image_tp_rate: i.tp_rate,
        tp_rate_delta: delta(s.tp_rate, i.tp_rate),
    }
}

/// Pairs two reports on the same frames. Deltas are saliency minus image.
pub fn compare_input_modes(saliency: &EvalReport, image: &EvalReport) -> Result<Comparison> {
    if saliency.eval_dataset_digest != image.eval_dataset_digest {
        return Err(Error::Comparison(format!(
            "reports cover different evaluation sets ({} vs {})",
            saliency.eval_dataset_digest, image.eval_dataset_digest
        )));
    }
    if saliency.bucket_edges != image.bucket_edges {
        return Err(Error::Comparison(format!(
            "bucket edges differ: {:?} vs {:?}",
            saliency.bucket_edges, image.bucket_edges
        )));
    }
    if saliency.threshold_degrees != image.threshold_degrees
        || saliency.alarm_threshold_degrees != image.alarm_threshold_degrees
    {
        return Err(Error::Comparison("thresholds differ between the two reports".into()));
    }
    let rows = saliency
        .buckets
        .iter()
        .zip(&image.buckets)
        .map(|(s, i)| compare_rows(s, i))
        .collect();
    Ok(Comparison {
        threshold_degrees: saliency.threshold_degrees,
        eval_dataset_digest: saliency.eval_dataset_digest.clone(),
        rows,
        overall: compare_rows(&saliency.overall, &image.overall),
    })
}

impl Comparison {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "bucket",
            "count",
            "saliency_mae",
            "image_mae",
            "mae_delta",
            "saliency_tp_rate",
            "image_tp_rate",
            "tp_rate_delta",
        ])?;
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            w.write_record([
                r.bucket.clone(),
                r.count.to_string(),
                fmt_opt(r.saliency_mae),
                fmt_opt(r.image_mae),
                fmt_opt(r.mae_delta),
                fmt_opt(r.saliency_tp_rate),
                fmt_opt(r.image_tp_rate),
                fmt_opt(r.tp_rate_delta),
            ])?;
        }
        csv_string(w)
    }

    /// Plain-text table of true-positive rates.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let mut out = format!(
            "{:<10} {:>6} {:>14} {:>14}\n",
            "|SWA| deg", "frames", "saliency map", "camera image"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{:<10} {:>6} {:>14} {:>14}\n",
                r.bucket,
                r.count,
                pct(r.saliency_tp_rate),
                pct(r.image_tp_rate)
            ));
        }
        out
    }
}

/// Per-frame record behind every aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub index: usize,
    pub swa: f32,
    pub true_error: f32,
    pub predicted_error: f32,
}

pub fn predictions_csv(rows: &[FramePrediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["index", "swa", "true_error", "predicted_error"])?;
    }
    csv_string(w)
}

pub fn read_predictions_csv(text: &str) -> Result<Vec<FramePrediction>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Pearson correlation; `None` when either side has zero variance or the
/// lists are shorter than two.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
