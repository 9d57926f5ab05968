//! Datasets, the training loop with breakdown detection, run logs and tap
//! aggregation.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::rng;
use crate::tinynn::{BreakdownCause, DemoConfig, GradientTapRecord, Image, Model, NnError, TapCollector};

/// Bytes per CIFAR-100 binary record: coarse label, fine label, 3072 pixels.
pub const CIFAR_RECORD_LEN: usize = 3074;
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
const CIFAR_FINE_CLASSES: usize = 100;

/// Gradient norm above which a step counts toward runaway.
pub const GRAD_NORM_LIMIT: f64 = 1e6;
/// Consecutive over-limit steps that trigger a runaway breakdown.
pub const GRAD_NORM_PATIENCE: usize = 10;

const SYNTHETIC_SIDE: usize = 8;
const DATA_STREAM: u64 = u64::MAX;
const BATCH_STREAM: u64 = u64::MAX - 1;
const EVAL_CHUNK: usize = 50;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad dataset format: {0}")]
    Format(String),
    #[error("bad run log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Labelled images with a fixed train/eval split: index `i` is held out
/// for evaluation when `i % 5 == 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_eval_index(i: usize) -> bool {
        i % 5 == 4
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !Self::is_eval_index(i)).collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| Self::is_eval_index(i)).collect()
    }

    /// `(height, width, channels)` of the first image.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.height, im.width, im.channels))
    }
}

/// 8×8×1 images: one fixed `N(0, 1)` template per class plus
/// `N(0, noise_sd²)` pixel noise. Images are ordered class by class.
pub fn make_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset, HarnessError> {
    if num_classes < 2 {
        return Err(HarnessError::Config("synthetic data needs at least 2 classes".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(HarnessError::Config(format!("noise_sd must be finite and non-negative, got {noise_sd}")));
    }
    let px = SYNTHETIC_SIDE * SYNTHETIC_SIDE;
    let mut rng = rng::substream(seed, DATA_STREAM);
    let templates: Vec<Vec<f64>> = (0..num_classes).map(|_| rng::normal_vec(&mut rng, px, 1.0)).collect();
    let mut images = Vec::with_capacity(num_classes * samples_per_class);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            let noise = rng::normal_vec(&mut rng, px, noise_sd);
            let data = template.iter().zip(noise).map(|(t, n)| t + n).collect();
            images.push(Image::new(SYNTHETIC_SIDE, SYNTHETIC_SIDE, 1, data));
            labels.push(class);
        }
    }
    Ok(Dataset { images, labels, num_classes })
}

/// One raw CIFAR-100 record. `pixels` holds the R, G and B planes of a
/// 32×32 image, in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse_label: u8,
    pub fine_label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    /// Pixels scaled to `[0, 1]`, reordered height × width × channel.
    pub fn to_image(&self) -> Image {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut data = Vec::with_capacity(CIFAR_PIXELS);
        for p in 0..plane {
            for c in 0..3 {
                data.push(self.pixels[c * plane + p] as f64 / 255.0);
            }
        }
        Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)
    }

    /// Inverse of [`CifarRecord::to_image`] for images built from bytes.
    pub fn pixels_from_image(image: &Image) -> Vec<u8> {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut out = vec![0u8; CIFAR_PIXELS];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = (image.data[p * 3 + c] * 255.0).round() as u8;
            }
        }
        out
    }
}

pub fn read_cifar100_records(path: &Path) -> Result<Vec<CifarRecord>, HarnessError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(HarnessError::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[1] as usize >= CIFAR_FINE_CLASSES {
                return Err(HarnessError::Format(format!("record {i} has fine label {}", rec[1])));
            }
            Ok(CifarRecord { coarse_label: rec[0], fine_label: rec[1], pixels: rec[2..].to_vec() })
        })
        .collect()
}

pub fn write_cifar100_records(path: &Path, records: &[CifarRecord]) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(HarnessError::Format(format!("record has {} pixel bytes", r.pixels.len())));
        }
        out.write_all(&[r.coarse_label, r.fine_label])?;
        out.write_all(&r.pixels)?;
    }
    out.flush()?;
    Ok(())
}

/// First `subset_size` records of a CIFAR-100 binary file, labelled by fine class.
pub fn load_cifar100(path: &Path, subset_size: usize) -> Result<Dataset, HarnessError> {
    let records = read_cifar100_records(path)?;
    let take = subset_size.min(records.len());
    Ok(Dataset {
        images: records[..take].iter().map(CifarRecord::to_image).collect(),
        labels: records[..take].iter().map(|r| r.fine_label as usize).collect(),
        num_classes: CIFAR_FINE_CLASSES,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic { num_classes: usize, samples_per_class: usize, noise_sd: f64 },
    Cifar100 { path: PathBuf, subset_size: usize },
}

impl DatasetSpec {
    pub fn default_synthetic() -> Self {
        DatasetSpec::Synthetic { num_classes: 10, samples_per_class: 100, noise_sd: 0.5 }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset, HarnessError> {
        match self {
            DatasetSpec::Synthetic { num_classes, samples_per_class, noise_sd } => {
                make_synthetic(*num_classes, *samples_per_class, *noise_sd, seed)
            }
            DatasetSpec::Cifar100 { path, subset_size } => load_cifar100(path, *subset_size),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Adam { lr: f64, beta1: f64, beta2: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub demo: DemoConfig,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tap every `tap_every`-th step; 0 disables taps.
    pub tap_every: usize,
    pub tap_cap: usize,
}

impl TrainConfig {
    /// Synthetic task defaults: 10 classes, Adam, batch 32, no taps.
    pub fn synthetic(demo: DemoConfig, steps: usize, seed: u64) -> Self {
        Self {
            demo,
            dataset: DatasetSpec::default_synthetic(),
            optimizer: OptimizerSpec::default(),
            steps,
            batch_size: 32,
            seed,
            tap_every: 0,
            tap_cap: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(HarnessError::Config("batch_size must be at least 2".into()));
        }
        if self.tap_every > 0 && self.tap_cap == 0 {
            return Err(HarnessError::Config("tap_cap must be positive when taps are on".into()));
        }
        let lr_ok = match self.optimizer {
            OptimizerSpec::Adam { lr, beta1, beta2 } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)
            }
            OptimizerSpec::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if !lr_ok {
            return Err(HarnessError::Config("optimizer hyperparameters out of range".into()));
        }
        self.demo.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakdownKind {
    NonFiniteLoss,
    ScoreError,
    GradNormRunaway,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub step: usize,
    pub cause: BreakdownKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "acc")]
    pub train_accuracy: f64,
    pub grad_norm: f64,
}

/// Per-step metrics and the outcome of one training run. On breakdown the
/// records stop just before the failing step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRunLog {
    pub records: Vec<StepRecord>,
    pub breakdown: Option<Breakdown>,
    pub final_eval_accuracy: Option<f64>,
}

impl TrainRunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("finite record"));
            out.push('\n');
        }
        let terminal = match (self.breakdown, self.final_eval_accuracy) {
            (Some(b), _) => Some(json!({ "breakdown": b })),
            (None, Some(acc)) => Some(json!({ "final_eval_accuracy": acc })),
            (None, None) => None,
        };
        if let Some(t) = terminal {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HarnessError> {
        let mut log = TrainRunLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |e: serde_json::Error| HarnessError::Log(format!("line {}: {e}", i + 1));
            let v: Value = serde_json::from_str(line).map_err(bad)?;
            if let Some(b) = v.get("breakdown") {
                log.breakdown = Some(serde_json::from_value(b.clone()).map_err(bad)?);
            } else if let Some(acc) = v.get("final_eval_accuracy") {
                log.final_eval_accuracy = acc.as_f64();
            } else {
                log.records.push(serde_json::from_value(v).map_err(bad)?);
            }
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// A run log plus the tap records collected along the way.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutput {
    pub log: TrainRunLog,
    pub taps: Vec<GradientTapRecord>,
}

enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, t: i32, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
    Sgd { lr: f64, momentum: f64, velocity: Vec<Vec<f64>> },
}

impl Optimizer {
    fn new(spec: OptimizerSpec, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        match spec {
            OptimizerSpec::Adam { lr, beta1, beta2 } => {
                Optimizer::Adam { lr, beta1, beta2, t: 0, m: zeros.clone(), v: zeros }
            }
            OptimizerSpec::Sgd { lr, momentum } => Optimizer::Sgd { lr, momentum, velocity: zeros },
        }
    }

    fn step(&mut self, model: &mut Model) {
        match self {
            Optimizer::Adam { lr, beta1, beta2, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for ((p, m), v) in model.params_mut().iter_mut().zip(m).zip(v) {
                    let g = p.grad.as_ref().expect("gradients computed");
                    for i in 0..p.values.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        p.values[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            Optimizer::Sgd { lr, momentum, velocity } => {
                for (p, vel) in model.params_mut().iter_mut().zip(velocity) {
                    let g = p.grad.as_ref().expect("gradients computed");
                    for i in 0..p.values.len() {
                        vel[i] = *momentum * vel[i] + g[i];
                        p.values[i] -= *lr * vel[i];
                    }
                }
            }
        }
    }
}

fn grad_norm(model: &Model) -> f64 {
    model
        .params()
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn breakdown_kind(cause: &BreakdownCause) -> BreakdownKind {
    match cause {
        BreakdownCause::Score(_) | BreakdownCause::DegenerateRow { .. } => BreakdownKind::ScoreError,
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainRunLog, HarnessError> {
    Ok(train_with_taps(cfg)?.log)
}

/// Minibatch cross-entropy training. Batches are drawn from a reshuffled
/// pass over the training split each epoch.
pub fn train_with_taps(cfg: &TrainConfig) -> Result<TrainOutput, HarnessError> {
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.seed)?;
    if data.num_classes != cfg.demo.num_classes {
        return Err(HarnessError::Config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.demo.num_classes
        )));
    }
    if data.image_shape() != Some(cfg.demo.input_shape) {
        return Err(HarnessError::Config("dataset image shape does not match the model input".into()));
    }
    let train_idx = data.train_indices();
    let eval_idx = data.eval_indices();
    if train_idx.len() < cfg.batch_size {
        return Err(HarnessError::Config("training split is smaller than one batch".into()));
    }
    Ok(run_training(cfg, &data, train_idx, &eval_idx)?)
}

fn run_training(
    cfg: &TrainConfig,
    data: &Dataset,
    mut order: Vec<usize>,
    eval_idx: &[usize],
) -> Result<TrainOutput, NnError> {
    let mut model = Model::new(cfg.demo, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, &model);
    let mut batch_rng = rng::substream(cfg.seed, BATCH_STREAM);
    let mut out = TrainOutput::default();
    let mut cursor = order.len();
    let mut over_limit = 0;

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let images: Vec<Image> = batch.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

        let taps = (cfg.tap_every > 0 && step % cfg.tap_every == 0)
            .then(|| TapCollector::for_step(cfg.tap_cap, cfg.seed, step));
        let result = match model.compute_gradients(&images, &labels, taps, step) {
            Ok(r) => r,
            Err(signal) => {
                out.log.breakdown = Some(Breakdown { step, cause: breakdown_kind(&signal.cause) });
                return Ok(out);
            }
        };
        if !result.loss.is_finite() {
            out.log.breakdown = Some(Breakdown { step, cause: BreakdownKind::NonFiniteLoss });
            return Ok(out);
        }
        let norm = grad_norm(&model);
        if !norm.is_finite() {
            out.log.breakdown = Some(Breakdown { step, cause: BreakdownKind::GradNormRunaway });
            return Ok(out);
        }
        over_limit = if norm > GRAD_NORM_LIMIT { over_limit + 1 } else { 0 };
        if over_limit >= GRAD_NORM_PATIENCE {
            out.log.breakdown = Some(Breakdown { step, cause: BreakdownKind::GradNormRunaway });
            return Ok(out);
        }
        out.taps.extend(result.taps);
        out.log.records.push(StepRecord {
            step,
            loss: result.loss,
            train_accuracy: result.correct as f64 / cfg.batch_size as f64,
            grad_norm: norm,
        });
        opt.step(&mut model);
    }

    match evaluate(&model, data, eval_idx) {
        Ok(acc) => out.log.final_eval_accuracy = Some(acc),
        Err(cause) => out.log.breakdown = Some(Breakdown { step: cfg.steps, cause }),
    }
    Ok(out)
}

/// Accuracy on `indices`; a score failure during evaluation is reported as
/// its breakdown kind.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<f64, BreakdownKind> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let classes = model.config().num_classes;
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images: Vec<Image> = chunk.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = model.logits(&images).map_err(|s| breakdown_kind(&s.cause))?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(BreakdownKind::NonFiniteLoss);
        }
        correct += crate::tinynn::count_correct(&logits, classes, &labels);
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub fn write_taps(path: &Path, taps: &[GradientTapRecord]) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in taps {
        serde_json::to_writer(&mut out, t).map_err(|e| HarnessError::Log(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_taps(path: &Path) -> Result<Vec<GradientTapRecord>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut taps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        taps.push(serde_json::from_str(&line).map_err(|e| HarnessError::Log(format!("line {}: {e}", i + 1)))?);
    }
    Ok(taps)
}

/// Tap file written next to a run log: `run.jsonl` → `run.taps.jsonl`.
pub fn taps_path_for(run_log: &Path) -> PathBuf {
    let stem = run_log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    run_log.with_file_name(format!("{stem}.taps.jsonl"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub x_center: f64,
    /// Mean `|gradient|` of the bin; 0 for an empty bin.
    pub mean_abs_grad: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientHistogram {
    pub step: usize,
    pub layer_index: usize,
    pub bins: Vec<HistogramBin>,
}

/// Bins each record's samples uniformly over `x_range`; samples outside the
/// range land in the nearest edge bin.
pub fn aggregate_taps(
    taps: &[GradientTapRecord],
    bin_count: usize,
    x_range: (f64, f64),
) -> Result<Vec<GradientHistogram>, HarnessError> {
    let (lo, hi) = x_range;
    if bin_count < 2 {
        return Err(HarnessError::Config("need at least 2 bins".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(HarnessError::Config(format!("bad x range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bin_count as f64;
    Ok(taps
        .iter()
        .map(|rec| {
            let mut sums = vec![0.0; bin_count];
            let mut counts = vec![0usize; bin_count];
            for s in &rec.samples {
                let b = ((s.x - lo) / width).floor().clamp(0.0, (bin_count - 1) as f64) as usize;
                sums[b] += s.grad.abs();
                counts[b] += 1;
            }
            let bins = (0..bin_count)
                .map(|b| HistogramBin {
                    x_center: lo + (b as f64 + 0.5) * width,
                    mean_abs_grad: if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 },
                    count: counts[b],
                })
                .collect();
            GradientHistogram { step: rec.step, layer_index: rec.layer_index, bins }
        })
        .collect())
}

pub fn histograms_to_csv(hists: &[GradientHistogram]) -> String {
    let mut out = String::from("step,layer,x_center,mean_abs_grad,count\n");
    for h in hists {
        for b in &h.bins {
            out.push_str(&format!("{},{},{},{},{}\n", h.step, h.layer_index, b.x_center, b.mean_abs_grad, b.count));
        }
    }
    out
}
