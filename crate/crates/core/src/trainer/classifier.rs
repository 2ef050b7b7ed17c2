//! Toy classifier twins and the frozen/unfrozen batch-norm fine-tuning
//! experiment.
//!
//! Architecture: conv stem, two stride-2 filter blocks, global average
//! pooling and a dense layer. The adder twin uses adder filters in every
//! block after the stem.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::block::{FilterBlock, ParamKind, ParamMut};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{sparsity, FilterKind};
use crate::tensor::{Shape4, Tensor4};

use super::data::ClusterTask;
use super::optim::{sgd_step, OptimConfig, SgdState, Trainable};
use super::record::{LayerRecord, StepRecord, TrainRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Conv,
    Adder,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Conv => "conv",
            Arch::Adder => "adder",
        }
    }

    pub fn filter_kind(self) -> FilterKind {
        match self {
            Arch::Conv => FilterKind::Conv,
            Arch::Adder => FilterKind::Adder,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "cnn" => Ok(Arch::Conv),
            "adder" => Ok(Arch::Adder),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BnPolicy {
    /// Running statistics are used in training and never updated.
    Frozen,
    /// Batch statistics in training; running statistics follow the EMA.
    Unfrozen,
}

impl BnPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BnPolicy::Frozen => "frozen",
            BnPolicy::Unfrozen => "unfrozen",
        }
    }
}

impl fmt::Display for BnPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BnPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(BnPolicy::Frozen),
            "unfrozen" => Ok(BnPolicy::Unfrozen),
            other => Err(Error::Config(format!("unknown batch-norm policy `{other}`"))),
        }
    }
}

pub const CLASSES: usize = 4;
pub const WIDTHS: [usize; 3] = [8, 16, 16];
/// Seed of the pretraining task's prototypes.
pub const PRETRAIN_TASK_SEED: u64 = 0xA;
/// Seed of the fine-tuning task's prototypes.
pub const FINETUNE_TASK_SEED: u64 = 0xB;
/// Seed of the multiplicative noise applied to stale statistics. Fixed, so
/// every run sees the same stale state.
pub const STALE_SEED: u64 = 0x57A1E;
pub const STALE_NOISE: f64 = 0.5;

#[derive(Debug, Clone)]
struct DenseCache {
    pooled: Vec<f32>,
    feat: Shape4,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: Arch,
    pub stem: FilterBlock,
    pub blocks: Vec<FilterBlock>,
    /// `classes × channels`, row-major.
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
    fc_gw: Vec<f32>,
    fc_gb: Vec<f32>,
    cache: Option<DenseCache>,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        let kind = arch.filter_kind();
        let stem = FilterBlock::init(FilterKind::Conv, ClusterTask::CHANNELS, WIDTHS[0], 3, 1, true, true, rng)?;
        let blocks = vec![
            FilterBlock::init(kind, WIDTHS[0], WIDTHS[1], 3, 2, true, true, rng)?,
            FilterBlock::init(kind, WIDTHS[1], WIDTHS[2], 3, 2, true, true, rng)?,
        ];
        let c = WIDTHS[2];
        let std = (1.0 / c as f64).sqrt();
        let fc_weight = (0..CLASSES * c)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (std * z) as f32
            })
            .collect();
        Ok(Self {
            arch,
            stem,
            blocks,
            fc_weight,
            fc_bias: vec![0.0; CLASSES],
            fc_gw: vec![0.0; CLASSES * c],
            fc_gb: vec![0.0; CLASSES],
            cache: None,
        })
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = (String, &mut FilterBlock)> {
        std::iter::once(("stem".to_string(), &mut self.stem)).chain(
            self.blocks
                .iter_mut()
                .enumerate()
                .map(|(i, b)| (format!("block{i}"), b)),
        )
    }

    fn named_blocks(&self) -> impl Iterator<Item = (String, &FilterBlock)> {
        std::iter::once(("stem".to_string(), &self.stem)).chain(
            self.blocks
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("block{i}"), b)),
        )
    }

    /// Output of the last filter block, post-ReLU.
    pub fn features(&mut self, x: &Tensor4, training: bool) -> Result<Tensor4> {
        let mut h = self.stem.forward(x, training)?;
        for b in &mut self.blocks {
            h = b.forward(&h, training)?;
        }
        Ok(h)
    }

    /// Logits, `n × classes` row-major.
    pub fn forward(&mut self, x: &Tensor4, training: bool) -> Result<Vec<f32>> {
        let feat = self.features(x, training)?;
        let s = feat.shape();
        let area = (s.h * s.w) as f64;
        let pooled: Vec<f32> = (0..s.n * s.c)
            .map(|i| (feat.plane(i / s.c, i % s.c).iter().map(|&v| f64::from(v)).sum::<f64>() / area) as f32)
            .collect();
        let mut logits = vec![0.0f32; s.n * CLASSES];
        for n in 0..s.n {
            for k in 0..CLASSES {
                let dot: f64 = (0..s.c)
                    .map(|c| f64::from(pooled[n * s.c + c]) * f64::from(self.fc_weight[k * s.c + c]))
                    .sum();
                logits[n * CLASSES + k] = (dot + f64::from(self.fc_bias[k])) as f32;
            }
        }
        self.cache = training.then_some(DenseCache { pooled, feat: s });
        Ok(logits)
    }

    /// Backpropagates logit gradients through the last training forward.
    pub fn backward(&mut self, g_logits: &[f32]) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("backward called without a training forward".into()))?;
        let s = cache.feat;
        if g_logits.len() != s.n * CLASSES {
            return Err(Error::Shape("logit gradient length mismatch".into()));
        }
        let mut g_pooled = vec![0.0f64; s.n * s.c];
        for n in 0..s.n {
            for k in 0..CLASSES {
                let g = f64::from(g_logits[n * CLASSES + k]);
                self.fc_gb[k] += g as f32;
                for c in 0..s.c {
                    self.fc_gw[k * s.c + c] += (g * f64::from(cache.pooled[n * s.c + c])) as f32;
                    g_pooled[n * s.c + c] += g * f64::from(self.fc_weight[k * s.c + c]);
                }
            }
        }
        let area = (s.h * s.w) as f64;
        let mut g = Tensor4::from_fn(s, |n, c, _, _| (g_pooled[n * s.c + c] / area) as f32);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem.backward(&g)?;
        Ok(())
    }

    /// Mean cross-entropy of a training forward, followed by backward.
    pub fn train_batch(&mut self, x: &Tensor4, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x, true)?;
        let (loss, g) = softmax_cross_entropy(&logits, labels, CLASSES)?;
        self.backward(&g)?;
        Ok(loss)
    }

    pub fn accuracy(&mut self, x: &Tensor4, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x, false)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(n, &l)| {
                let row = &logits[n * CLASSES..(n + 1) * CLASSES];
                argmax(row) == l
            })
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Fraction of zeros in the last block's inference-mode output.
    pub fn last_block_sparsity(&mut self, x: &Tensor4) -> Result<f64> {
        sparsity(&self.features(x, false)?, 0.0)
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for (_, b) in self.blocks_mut() {
            if let Some(bn) = b.bn.as_mut() {
                bn.frozen = frozen;
            }
        }
    }

    /// Multiplies every running mean by `1 + σ·z` and every running
    /// variance by `exp(σ·z')`, with `z, z'` standard normal from `seed`.
    pub fn perturb_running_stats(&mut self, sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, b) in self.blocks_mut() {
            if let Some(bn) = b.bn.as_mut() {
                for m in bn.running_mean.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *m = (f64::from(*m) * (1.0 + sigma * z)) as f32;
                }
                for v in bn.running_var.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (f64::from(*v) * (sigma * z).exp()) as f32;
                }
            }
        }
    }

    pub fn snapshot(&self, step: usize, record: &mut TrainRecord) -> Result<()> {
        for (name, b) in self.named_blocks() {
            let (m, v) = b.bn.as_ref().map_or((f64::NAN, f64::NAN), |bn| (l2(&bn.running_mean), l2(&bn.running_var)));
            record.push_layer(LayerRecord {
                step,
                layer: name,
                bn_mean_norm: m,
                bn_var_norm: v,
                weight_l2: b.filter.weights().l2_norm(),
            })?;
        }
        record.push_layer(LayerRecord {
            step,
            layer: "fc".into(),
            bn_mean_norm: f64::NAN,
            bn_var_norm: f64::NAN,
            weight_l2: l2(&self.fc_weight),
        })
    }

    pub fn save(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, b) in self.named_blocks() {
            b.save(&name, ckpt)?;
        }
        let c = WIDTHS[2];
        ckpt.insert("fc.weight", Tensor4::from_vec(Shape4::new(CLASSES, c, 1, 1), self.fc_weight.clone())?)?;
        ckpt.insert("fc.bias", Tensor4::from_vec(Shape4::new(1, CLASSES, 1, 1), self.fc_bias.clone())?)?;
        Ok(())
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, b) in self.blocks_mut() {
            b.load(&name, ckpt)?;
        }
        for (name, dst) in [("fc.weight", &mut self.fc_weight), ("fc.bias", &mut self.fc_bias)] {
            let t = ckpt.require(name)?;
            if t.len() != dst.len() {
                return Err(Error::Shape(format!("`{name}` has {} entries, expected {}", t.len(), dst.len())));
            }
            dst.copy_from_slice(t.data());
        }
        Ok(())
    }
}

impl Trainable for Classifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        for (name, b) in self.blocks_mut() {
            b.visit_params(&name, f);
        }
        f(ParamMut {
            name: "fc.weight".into(),
            kind: ParamKind::DenseWeight,
            value: &mut self.fc_weight,
            grad: &self.fc_gw,
        });
        f(ParamMut {
            name: "fc.bias".into(),
            kind: ParamKind::Bias,
            value: &mut self.fc_bias,
            grad: &self.fc_gb,
        });
    }

    fn zero_grad(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.zero_grad();
        }
        self.fc_gw.fill(0.0);
        self.fc_gb.fill(0.0);
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> Result<(f64, Vec<f32>)> {
    let n = labels.len();
    if logits.len() != n * classes || n == 0 {
        return Err(Error::Shape(format!("{} logits for {n} labels of {classes} classes", logits.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; logits.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Index { dim: "label", index: l, bound: classes });
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - f64::from(row[l]);
        for k in 0..classes {
            let p = exps[k] / z;
            grad[i * classes + k] = ((p - f64::from(u8::from(k == l))) / n as f64) as f32;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }
    Ok((loss / n as f64, grad))
}

/// Settings shared by pretraining and fine-tuning runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierRun {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl ClassifierRun {
    pub fn pretrain_default(arch: Arch) -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            seed: 1,
            optim: default_optim(arch, 300),
        }
    }

    pub fn finetune_default(arch: Arch, batch_size: usize, seed: u64) -> Self {
        Self {
            steps: 60,
            batch_size,
            seed,
            optim: default_optim(arch, 60),
        }
    }
}

fn default_optim(_arch: Arch, steps: usize) -> OptimConfig {
    OptimConfig::new(0.05, steps)
}

pub fn pretrain_task() -> Result<ClusterTask> {
    ClusterTask::new(PRETRAIN_TASK_SEED, CLASSES)
}

/// The fine-tuning task: new prototypes under a gain/offset shift, so the
/// pretrained statistics no longer describe the inputs.
pub fn finetune_task() -> Result<ClusterTask> {
    let mut t = ClusterTask::new(FINETUNE_TASK_SEED, CLASSES)?;
    t.gain = 1.5;
    t.offset = 0.3;
    Ok(t)
}

/// Fixed seed of [`probe_batch`].
pub const PROBE_SEED: u64 = 0x5BA5;

/// A fixed batch of the fine-tuning task; the bundled sparsity input.
pub fn probe_batch(n: usize) -> Result<Tensor4> {
    Ok(finetune_task()?.batch(n, &mut ChaCha8Rng::seed_from_u64(PROBE_SEED)).0)
}

fn run_sgd(model: &mut Classifier, task: &ClusterTask, run: &ClassifierRun) -> Result<TrainRecord> {
    run.optim.validate()?;
    if run.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut state = SgdState::new();
    let mut record = TrainRecord::new();
    for step in 0..run.steps {
        let (x, labels) = task.batch(run.batch_size, &mut rng);
        model.zero_grad();
        let loss = model.train_batch(&x, &labels)?;
        let lr = run.optim.schedule.lr(run.optim.base_lr, step)?;
        sgd_step(model, &mut state, lr, &run.optim)?;
        record.push_step(StepRecord { step, loss, lr })?;
        model.snapshot(step, &mut record)?;
    }
    Ok(record)
}

/// Trains a fresh twin on the pretraining task. Model init uses
/// `run.seed`; batches use `run.seed + 1`.
pub fn pretrain_classifier(arch: Arch, run: &ClassifierRun) -> Result<(Classifier, TrainRecord)> {
    let mut model = Classifier::new(arch, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let task = pretrain_task()?;
    let batches = ClassifierRun { seed: run.seed + 1, ..run.clone() };
    let record = run_sgd(&mut model, &task, &batches)?;
    Ok((model, record))
}

/// Fine-tunes a pretrained twin on the shifted task.
///
/// The stored running statistics are first made stale with fixed
/// multiplicative noise. `Frozen` then trains with those statistics and
/// never updates them; `Unfrozen` trains with batch statistics.
pub fn finetune_classifier(
    arch: Arch,
    policy: BnPolicy,
    ckpt: &Checkpoint,
    run: &ClassifierRun,
) -> Result<(Classifier, TrainRecord)> {
    let mut model = Classifier::new(arch, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    model.load(ckpt)?;
    model.perturb_running_stats(STALE_NOISE, STALE_SEED);
    model.set_bn_frozen(policy == BnPolicy::Frozen);
    let task = finetune_task()?;
    let record = run_sgd(&mut model, &task, run)?;
    Ok((model, record))
}

/// [`finetune_classifier`] reading the checkpoint from disk.
pub fn train_toy_classifier(
    arch: Arch,
    policy: BnPolicy,
    checkpoint: &Path,
    run: &ClassifierRun,
) -> Result<TrainRecord> {
    let ckpt = Checkpoint::load(checkpoint)?;
    finetune_classifier(arch, policy, &ckpt, run).map(|(_, r)| r)
}
