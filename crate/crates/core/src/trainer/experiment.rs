//! Experiment configs and the single entry point that runs them.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::necks::NeckKind;

use super::classifier::{
    finetune_classifier, finetune_task, pretrain_classifier, pretrain_task, Arch, BnPolicy, Classifier, ClassifierRun,
};
use super::detector::{evaluate, train_detector_model, DetectorRun, Task};
use super::optim::{OptimConfig, Schedule};
use super::record::TrainRecord;

/// Held-out evaluation batch size for the classification tasks.
pub const EVAL_SAMPLES: usize = 256;
/// Added to the run seed to draw the held-out batch.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// A training experiment. `None` fields fall back to the task defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: Arch,
    pub neck: NeckKind,
    pub bn_policy: BnPolicy,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub base_lr: Option<f64>,
    pub lr_min: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    /// `0` disables the adaptive rescaling of adder weight gradients.
    pub adaptive_eta: Option<f64>,
    pub score_threshold: Option<f32>,
    /// Pretrained weights for `classify`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            arch: Arch::Adder,
            neck: NeckKind::Fpn,
            bn_policy: BnPolicy::Unfrozen,
            batch_size: None,
            seed: None,
            steps: None,
            base_lr: None,
            lr_min: None,
            momentum: None,
            weight_decay: None,
            adaptive_eta: None,
            score_threshold: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a key=value experiment file. Relative checkpoint paths are
    /// taken as given; callers resolve them.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let cfg = Self {
            task: kv.take("task")?.unwrap_or(d.task),
            arch: kv.take("arch")?.unwrap_or(d.arch),
            neck: kv.take("neck")?.unwrap_or(d.neck),
            bn_policy: kv.take("bn_policy")?.unwrap_or(d.bn_policy),
            batch_size: kv.take("batch_size")?,
            seed: kv.take("seed")?,
            steps: kv.take("steps")?,
            base_lr: kv.take("base_lr")?,
            lr_min: kv.take("lr_min")?,
            momentum: kv.take("momentum")?,
            weight_decay: kv.take("weight_decay")?,
            adaptive_eta: kv.take("adaptive_eta")?,
            score_threshold: kv.take("score_threshold")?,
            checkpoint: kv.take::<String>("checkpoint")?.map(PathBuf::from),
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "task = {}\narch = {}\nneck = {}\nbn_policy = {}\n",
            self.task, self.arch, self.neck, self.bn_policy
        );
        let mut opt = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        opt("batch_size", self.batch_size.map(|v| v.to_string()));
        opt("seed", self.seed.map(|v| v.to_string()));
        opt("steps", self.steps.map(|v| v.to_string()));
        opt("base_lr", self.base_lr.map(|v| format!("{v:?}")));
        opt("lr_min", self.lr_min.map(|v| format!("{v:?}")));
        opt("momentum", self.momentum.map(|v| format!("{v:?}")));
        opt("weight_decay", self.weight_decay.map(|v| format!("{v:?}")));
        opt("adaptive_eta", self.adaptive_eta.map(|v| format!("{v:?}")));
        opt("score_threshold", self.score_threshold.map(|v| format!("{v:?}")));
        opt("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        out
    }

    /// Applies the optimizer overrides to a task default.
    fn optim(&self, default: &OptimConfig, steps: usize) -> OptimConfig {
        let lr_min = match (self.lr_min, &default.schedule) {
            (Some(v), _) => v,
            (None, Schedule::Cosine { lr_min, .. }) => *lr_min,
            (None, Schedule::Step { .. }) => 0.0,
        };
        OptimConfig {
            base_lr: self.base_lr.unwrap_or(default.base_lr),
            momentum: self.momentum.unwrap_or(default.momentum),
            weight_decay: self.weight_decay.unwrap_or(default.weight_decay),
            schedule: Schedule::Cosine { total_steps: steps, lr_min },
            adaptive_eta: match self.adaptive_eta {
                Some(e) if e == 0.0 => None,
                Some(e) => Some(e),
                None => default.adaptive_eta,
            },
        }
    }

    fn classifier_run(&self, default: ClassifierRun) -> ClassifierRun {
        let steps = self.steps.unwrap_or(default.steps);
        ClassifierRun {
            steps,
            batch_size: self.batch_size.unwrap_or(default.batch_size),
            seed: self.seed.unwrap_or(default.seed),
            optim: self.optim(&default.optim, steps),
        }
    }

    fn detector_run(&self) -> DetectorRun {
        let mut run = DetectorRun::new(self.seed.unwrap_or(0));
        run.steps = self.steps.unwrap_or(run.steps);
        run.batch_size = self.batch_size.unwrap_or(run.batch_size);
        run.score_threshold = self.score_threshold.unwrap_or(run.score_threshold);
        run.optim = self.optim(&run.optim, run.steps);
        run
    }

    /// Rejects combinations that cannot run, before any work is done.
    pub fn validate(&self) -> Result<()> {
        if self.task == Task::Classify && self.checkpoint.is_none() {
            return Err(Error::Config("the classify task needs a pretrained checkpoint".into()));
        }
        if self.task != Task::Classify && self.checkpoint.is_some() {
            return Err(Error::Config(format!("the {} task does not read a checkpoint", self.task)));
        }
        if self.task != Task::Detect && self.score_threshold.is_some() {
            return Err(Error::Config("score_threshold only applies to the detect task".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be positive".into()));
        }
        if let Some(t) = self.score_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("score threshold {t} outside [0, 1]")));
            }
        }
        if matches!(self.adaptive_eta, Some(e) if !(e >= 0.0 && e.is_finite())) {
            return Err(Error::Config("adaptive_eta must be finite and non-negative".into()));
        }
        let optim = match self.task {
            Task::Detect => self.detector_run().optim,
            Task::Pretrain => self.classifier_run(ClassifierRun::pretrain_default(self.arch)).optim,
            Task::Classify => self.classifier_run(ClassifierRun::finetune_default(self.arch, 32, 0)).optim,
        };
        optim.validate()
    }
}

/// A metric value printed in a stable format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Real(f64),
    Count(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Real(v) => write!(f, "{v:.6}"),
            Metric::Count(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub record: TrainRecord,
    pub metrics: Vec<(&'static str, Metric)>,
    /// Trained weights, produced by `pretrain`.
    pub checkpoint: Option<Checkpoint>,
}

impl ExperimentReport {
    pub fn metric(&self, name: &str) -> Option<Metric> {
        self.metrics.iter().find(|(k, _)| *k == name).map(|&(_, v)| v)
    }

    /// `key value` lines.
    pub fn summary(&self) -> String {
        self.metrics.iter().map(|(k, v)| format!("{k} {v}\n")).collect()
    }
}

fn loss_metrics(record: &TrainRecord) -> Vec<(&'static str, Metric)> {
    vec![
        ("steps", Metric::Count(record.steps().len())),
        ("initial_loss", Metric::Real(record.initial_loss().unwrap_or(f64::NAN))),
        ("final_loss", Metric::Real(record.final_loss(10).unwrap_or(f64::NAN))),
    ]
}

fn held_out(model: &mut Classifier, pretraining: bool, seed: u64) -> Result<Vec<(&'static str, Metric)>> {
    let task = if pretraining { pretrain_task()? } else { finetune_task()? };
    let (x, labels) = task.batch(EVAL_SAMPLES, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(EVAL_SEED_OFFSET)));
    Ok(vec![
        ("accuracy", Metric::Real(model.accuracy(&x, &labels)?)),
        ("last_block_sparsity", Metric::Real(model.last_block_sparsity(&x)?)),
    ])
}

/// Runs one experiment. Deterministic for a fixed config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    match cfg.task {
        Task::Pretrain => {
            let run = cfg.classifier_run(ClassifierRun::pretrain_default(cfg.arch));
            let (mut model, record) = pretrain_classifier(cfg.arch, &run)?;
            let mut metrics = loss_metrics(&record);
            metrics.extend(held_out(&mut model, true, run.seed)?);
            let mut ckpt = Checkpoint::new();
            model.save(&mut ckpt)?;
            Ok(ExperimentReport { record, metrics, checkpoint: Some(ckpt) })
        }
        Task::Classify => {
            let path = cfg.checkpoint.as_ref().expect("validated");
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path.display().to_string()));
            }
            let ckpt = Checkpoint::load(path)?;
            let run = cfg.classifier_run(ClassifierRun::finetune_default(cfg.arch, 32, 0));
            let (mut model, record) = finetune_classifier(cfg.arch, cfg.bn_policy, &ckpt, &run)?;
            let mut metrics = loss_metrics(&record);
            metrics.extend(held_out(&mut model, false, run.seed)?);
            metrics.push(("bn_mean_total_variation", Metric::Real(record.bn_mean_total_variation())));
            Ok(ExperimentReport { record, metrics, checkpoint: None })
        }
        Task::Detect => {
            let run = cfg.detector_run();
            let mut t = train_detector_model(cfg.neck, cfg.arch, &run)?;
            let (f1, tp, fp, fn_) = evaluate(&mut t.model, &t.test, run.score_threshold)?;
            let mut metrics = loss_metrics(&t.record);
            metrics.extend([
                ("f1", Metric::Real(f1)),
                ("true_positives", Metric::Count(tp)),
                ("false_positives", Metric::Count(fp)),
                ("false_negatives", Metric::Count(fn_)),
            ]);
            Ok(ExperimentReport { record: t.record, metrics, checkpoint: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let cfg = ExperimentConfig {
            task: Task::Detect,
            arch: Arch::Conv,
            neck: NeckKind::Rpafpn,
            seed: Some(3),
            steps: Some(5),
            base_lr: Some(0.01),
            adaptive_eta: Some(0.0),
            score_threshold: Some(0.4),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text("").unwrap(), d);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_text("lr = 0.1").is_err());
        assert!(ExperimentConfig::from_text("arch = mlp").is_err());
        assert!(ExperimentConfig::from_text("steps = -1").is_err());
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        let bad = [
            ExperimentConfig::default(),
            ExperimentConfig { task: Task::Detect, checkpoint: Some("x".into()), ..Default::default() },
            ExperimentConfig { task: Task::Pretrain, score_threshold: Some(0.5), ..Default::default() },
            ExperimentConfig { task: Task::Detect, score_threshold: Some(1.5), ..Default::default() },
            ExperimentConfig { task: Task::Detect, steps: Some(0), ..Default::default() },
            ExperimentConfig { task: Task::Detect, base_lr: Some(-1.0), ..Default::default() },
            ExperimentConfig { task: Task::Detect, adaptive_eta: Some(-0.1), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let ok = ExperimentConfig { task: Task::Detect, adaptive_eta: Some(0.0), ..Default::default() };
        ok.validate().unwrap();
        assert_eq!(ok.detector_run().optim.adaptive_eta, None);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let cfg = ExperimentConfig { checkpoint: Some("/nonexistent/x.ckpt".into()), ..Default::default() };
        assert!(matches!(run_experiment(&cfg), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn short_runs_are_deterministic() {
        let cfg = ExperimentConfig { task: Task::Pretrain, steps: Some(3), batch_size: Some(4), seed: Some(5), ..Default::default() };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.summary(), b.summary());
        assert_eq!(a.checkpoint.unwrap().to_bytes(), b.checkpoint.unwrap().to_bytes());
        let det = ExperimentConfig { task: Task::Detect, steps: Some(2), batch_size: Some(2), ..Default::default() };
        let r = run_experiment(&det).unwrap();
        assert!(matches!(r.metric("f1"), Some(Metric::Real(f)) if (0.0..=1.0).contains(&f)));
    }
}
