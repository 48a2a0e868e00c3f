//! k-shot fine-tuning and evaluation.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use crgan_core::metrics::{evaluate_labels, mean_metrics, Metrics};
use crgan_core::schedule::StepDecay;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::to_f64;
use crate::data::{BasicAugment, Dataset, ImageChip, Split};
use crate::nn::{self, Adam, AdamConfig, Linear, Mode, Module, Named};
use crate::ssl::{Backbone, BackboneConfig};
use crate::{Error, Result};

/// Which parameters fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Backbone and head.
    Full,
    /// Head only, on frozen features.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub schedule: StepDecay,
    pub mode: FinetuneMode,
    /// Defaults to `min(32, total shots)` when absent.
    pub batch_size: Option<usize>,
    /// Random quarter turns and flips of the training shots.
    pub augment: bool,
    pub shots: usize,
    pub seeds: Vec<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            schedule: StepDecay::finetune_default(),
            mode: FinetuneMode::Full,
            batch_size: None,
            augment: true,
            shots: 8,
            seeds: vec![0, 1, 2],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("fine-tuning needs at least one epoch".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.schedule.base_lr > 0.0) || !(self.schedule.gamma > 0.0 && self.schedule.gamma <= 1.0) {
            return Err(Error::Config(
                "learning-rate schedule must have a positive rate and 0 < gamma <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Exactly `k` training chips per class, chosen by `seed`, in class order.
pub fn sample_k_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<ImageChip>> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * dataset.num_classes());
    for class in 0..dataset.num_classes() {
        let mut pool: Vec<&ImageChip> = dataset
            .chips
            .iter()
            .filter(|c| c.split == Split::Train && c.label == class)
            .collect();
        if pool.len() < k {
            return Err(Error::Validation(format!(
                "class {} has {} training chips, fewer than k = {k}",
                dataset.class_names[class],
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(k).cloned());
    }
    Ok(out)
}

/// Backbone plus linear classification head.
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Linear,
    pub classes: usize,
}

impl Classifier {
    pub fn new(backbone: Backbone, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Validation("a classifier needs at least two classes".into()));
        }
        let dtype = nn::params_of(&backbone)[0].1.dtype();
        let d = backbone.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Linear::new(&mut rng, d, classes, true, (1.0 / d as f64).sqrt(), dtype, &Device::Cpu)?;
        Ok(Self {
            backbone,
            head,
            classes,
        })
    }

    pub fn logits(&self, x: &Tensor, backbone_mode: Mode) -> Result<Tensor> {
        let f = self.backbone.forward(x, backbone_mode)?;
        let f = if backbone_mode == Mode::Eval { f.detach() } else { f };
        self.head.forward(&f)
    }

    /// Predicted labels in evaluation mode.
    pub fn predict(&self, chips: &[&ImageChip]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(chips.len());
        for group in chips.chunks(256) {
            let x = stack(group.iter().map(|c| c.pixels.as_slice()), group[0].side, self.dtype())?;
            let logits = to_f64(&self.logits(&x, Mode::Eval)?)?;
            out.extend(logits.chunks(self.classes).map(argmax));
        }
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.head.weight.dtype()
    }

    fn head_params(&self) -> Vec<Named> {
        nn::params_of(&self.head)
            .into_iter()
            .map(|(n, v)| (format!("head.{n}"), v))
            .collect()
    }
}

impl Module for Classifier {
    fn params(&self, prefix: &str, out: &mut Vec<Named>) {
        self.backbone.params(&nn::join(prefix, "backbone"), out);
        self.head.params(&nn::join(prefix, "head"), out);
    }

    fn buffers(&self, prefix: &str, out: &mut Vec<Named>) {
        self.backbone.buffers(&nn::join(prefix, "backbone"), out);
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

fn stack<'a>(images: impl Iterator<Item = &'a [f32]>, side: usize, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f32> = images.flat_map(|p| p.iter().copied()).collect();
    let n = flat.len() / (side * side);
    Ok(Tensor::from_vec(flat, (n, 1, side, side), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy of `logits` `(B, C)` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::Validation("labels do not match the logits".into()));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_p = shifted.broadcast_sub(&lse)?;
    let mut onehot = vec![0.0f32; b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, c), logits.device())?.to_dtype(logits.dtype())?;
    Ok(((log_p * onehot)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Per-epoch fine-tuning telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Fine-tunes `classifier` on the shots with the step-decay schedule.
pub fn finetune(
    classifier: &Classifier,
    shots: &[ImageChip],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<FinetuneEpochRow>> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::Validation("no training shots".into()));
    }
    let side = shots[0].side;
    let mut params = classifier.head_params();
    let backbone_mode = match cfg.mode {
        FinetuneMode::Full => {
            params.extend(nn::params_of(&classifier.backbone));
            Mode::Train
        }
        FinetuneMode::Head => Mode::Eval,
    };
    let mut opt = Adam::new(params, AdamConfig::with_lr(cfg.schedule.base_lr))?;
    let batch = cfg.batch_size.unwrap_or(32).min(shots.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e7);
    let mut order: Vec<usize> = (0..shots.len()).collect();
    let started = std::time::Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
        // Batch statistics of a single image are degenerate.
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            chunks.pop();
            let last = chunks.len() - 1;
            chunks[last] = &order[last * batch..];
        }
        let mut total = 0.0;
        for chunk in &chunks {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk.iter() {
                let c = &shots[i];
                images.push(if cfg.augment {
                    BasicAugment::draw(&mut rng).apply(&c.pixels, side)?
                } else {
                    c.pixels.clone()
                });
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| shots[i].label).collect();
            let x = stack(images.iter().map(Vec::as_slice), side, classifier.dtype())?;
            let loss = cross_entropy(&classifier.logits(&x, backbone_mode)?, &labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "cross_entropy".into(),
                    iteration: epoch as u64 + 1,
                    batch: chunk.to_vec(),
                });
            }
            total += value;
            opt.apply(&loss.backward()?)?;
        }
        rows.push(FinetuneEpochRow {
            epoch: epoch + 1,
            lr,
            loss: total / chunks.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Metrics of `classifier` on the test split.
pub fn evaluate(classifier: &Classifier, dataset: &Dataset) -> Result<Metrics> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Validation("the dataset has no test chips".into()));
    }
    let predicted = classifier.predict(&test)?;
    let truth: Vec<usize> = test.iter().map(|c| c.label).collect();
    let m = evaluate_labels(&truth, &predicted, dataset.num_classes())?;
    if !m.absent_classes.is_empty() {
        log::warn!(
            "classes {:?} have no test chips; macro metrics skip them",
            m.absent_classes
        );
    }
    Ok(m)
}

/// Where the fine-tuned backbone starts from.
pub enum Initialization<'a> {
    Pretrained(&'a Backbone),
    Random(BackboneConfig),
}

/// One evaluated (method, k, seed) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricRecord {
    pub fn new(method: &str, k: usize, seed: u64, m: &Metrics) -> Self {
        Self {
            method: method.to_string(),
            k,
            seed,
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy,
            balanced_accuracy: self.balanced_accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            absent_classes: Vec::new(),
        }
    }
}

/// Samples shots, fine-tunes and evaluates once per configured seed.
pub fn run_seeds(
    init: Initialization<'_>,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
    method: &str,
    dtype: DType,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let shots = sample_k_shot(dataset, cfg.shots, seed)?;
        let backbone = match &init {
            Initialization::Pretrained(b) => b.duplicate()?,
            Initialization::Random(c) => Backbone::new(*c, &mut ChaCha8Rng::seed_from_u64(seed), dtype)?,
        };
        let classifier = Classifier::new(backbone, dataset.num_classes(), seed)?;
        finetune(&classifier, &shots, cfg, seed)?;
        let m = evaluate(&classifier, dataset)?;
        out.push(MetricRecord::new(method, cfg.shots, seed, &m));
    }
    Ok(out)
}

/// Per-metric mean over seeds.
pub fn mean_record(records: &[MetricRecord]) -> Result<Metrics> {
    let runs: Vec<Metrics> = records.iter().map(MetricRecord::metrics).collect();
    Ok(mean_metrics(&runs)?)
}

/// Plain-text table with one row per (method, k), averaged over seeds.
pub fn render_table(records: &[MetricRecord]) -> Result<String> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(m, k)| *m == r.method && *k == r.k) {
            keys.push((r.method.clone(), r.k));
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>6} {:>13} {:>13} {:>13} {:>13} {:>13}",
        "Method", "k", "Seeds", "Precision(%)", "Accuracy(%)", "Recall(%)", "F1-score(%)", "Balanced(%)"
    );
    for (method, k) in keys {
        let group: Vec<MetricRecord> = records
            .iter()
            .filter(|r| r.method == method && r.k == k)
            .cloned()
            .collect();
        let m = mean_record(&group)?;
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>6} {:>13.2} {:>13.2} {:>13.2} {:>13.2} {:>13.2}",
            method,
            k,
            group.len(),
            m.precision,
            m.accuracy,
            m.recall,
            m.f1,
            m.balanced_accuracy
        );
    }
    Ok(out)
}
