//! Training micro-engine and the desk-scale experiments.

pub mod bnstats;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod experiment;
pub mod optim;
pub mod record;

pub use bnstats::{bn_stat_variance_experiment, BnStatRow};
pub use classifier::{Arch, BnPolicy, Classifier, ClassifierRun};
pub use detector::{train_detector_model, train_toy_detector, DetectionResult, Detector, DetectorRun, Task, TrainedDetector};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, Metric};
pub use optim::{cosine_lr, sgd_step, OptimConfig, Schedule, SgdState, Trainable};
pub use record::{LayerRecord, StepRecord, TrainRecord};
