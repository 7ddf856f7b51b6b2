//! Training: loss construction, the adaptive optimizer, and the fit loop.

pub mod fit;
pub mod loss;
pub mod optim;

pub use fit::{fit, fit_from, EpochMetrics, FitOutcome, TrainConfig};
pub use loss::{doc_loss, DocLoss, DocPlan, LossWeights};
