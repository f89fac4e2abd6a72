//! Joint adversarial optimization: learning-rate schedule, batch planning,
//! the four batch-normalization data-combination strategies, the training
//! loop, evaluation and diagnostics.

mod batch;
mod bn;
mod experiment;
mod loss;
mod metrics;
mod optim;
mod pca;
mod run;

pub use batch::{plan_batches, BatchPlan, BatchSpec};
pub use bn::{bn_apply, BnOutputs};
pub use experiment::{
    run_adaptation_experiment, run_multi_seed, ExperimentConfig, ExperimentOutcome,
    MultiSeedReport, SeedRun,
};
pub use loss::{total_loss, LossTerms};
pub use metrics::{confusion_matrix, evaluate_uar};
pub use optim::Optimizer;
pub use pca::{pca_project, PcaProjection};
pub use run::{train, TrainObserver, TrainOutcome};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How source and target samples are combined for batch normalization.
///
/// `Bn1`-`Bn3` mix half a batch of each domain; `Bn4` alternates
/// whole single-domain batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnStrategy {
    /// One BN pass over the whole mixed batch; the emotion head sees the
    /// source half of the result, the language head the whole result.
    Bn1,
    /// Source half normalized with source-half statistics for the emotion
    /// head; whole batch normalized with whole-batch statistics for the
    /// language head.
    Bn2,
    /// Each half normalized with its own statistics; the language head gets
    /// the concatenation of the two halves.
    Bn3,
    /// Whole single-domain batches, alternating source/target.
    Bn4,
}

impl BnStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            BnStrategy::Bn1 => "BN1",
            BnStrategy::Bn2 => "BN2",
            BnStrategy::Bn3 => "BN3",
            BnStrategy::Bn4 => "BN4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BN1" => Some(BnStrategy::Bn1),
            "BN2" => Some(BnStrategy::Bn2),
            "BN3" => Some(BnStrategy::Bn3),
            "BN4" => Some(BnStrategy::Bn4),
            _ => None,
        }
    }

    pub fn mixes_domains(&self) -> bool {
        !matches!(self, BnStrategy::Bn4)
    }
}

/// Weight-penalty flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent; exists so single-step update laws can be
    /// asserted literally (Adam rescales gradients).
    Sgd,
}

/// Every training hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Trade-off between emotion and language losses (emotion weight).
    /// `1.0` disables the adversarial term entirely (baseline mode).
    pub alpha: f64,
    /// Gradient reversal scale.
    pub grl_beta: f64,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub reg_kind: RegKind,
    pub reg_weight: f64,
    pub bn_strategy: BnStrategy,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.75,
            grl_beta: 1.0,
            lr_init: 1e-3,
            lr_decay: 0.93,
            lr_floor: 5e-5,
            epochs: 50,
            batch_size: 32,
            dropout: 0.7,
            reg_kind: RegKind::L2,
            reg_weight: 5e-3,
            bn_strategy: BnStrategy::Bn1,
            seed: 0,
            early_stop_patience: 10,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.grl_beta >= 0.0) || !self.grl_beta.is_finite() {
            return Err(Error::Config("grl_beta must be a finite nonnegative real".into()));
        }
        if self.lr_init <= 0.0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_floor < 0.0 {
            return Err(Error::Config("learning-rate schedule parameters out of range".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::Config("reg_weight must be >= 0".into()));
        }
        if self.bn_strategy.mixes_domains() {
            if self.batch_size % 2 != 0 {
                return Err(Error::Config(alloc::format!(
                    "{} needs an even batch size (half source, half target), got {}",
                    self.bn_strategy.as_str(),
                    self.batch_size
                )));
            }
            if self.batch_size < 4 {
                return Err(Error::Config("mixed-domain batches need batch_size >= 4".into()));
            }
        } else if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exponentially decayed learning rate with a floor:
/// `max(lr_floor, lr_init * lr_decay^epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let lr = cfg.lr_init * cfg.lr_decay.powi(epoch as i32);
    lr.max(cfg.lr_floor)
}

/// One row of the per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub emotion_loss: f64,
    pub language_loss: f64,
    pub total_loss: f64,
    /// Language-classifier UAR over this epoch's training batches.
    pub domain_uar: f64,
    /// Emotion UAR on the development set, eval mode.
    pub dev_uar: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-3);
        assert!((lr_at_epoch(&cfg, 1) - 9.3e-4).abs() < 1e-18);
        // 0.93^41 * 1e-3 is still above the floor; epoch 42 onward is clamped.
        assert!(lr_at_epoch(&cfg, 41) > 5e-5);
        for e in 42..200 {
            assert_eq!(lr_at_epoch(&cfg, e), 5e-5);
        }
    }

    #[test]
    fn lr_schedule_is_non_increasing_and_floored() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_at_epoch(&cfg, e);
            assert!(lr <= prev);
            assert!(lr >= cfg.lr_floor);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.alpha = 1.0;
        cfg.validate().unwrap(); // baseline mode allowed
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.75;
        cfg.batch_size = 31;
        assert!(cfg.validate().is_err());
        cfg.bn_strategy = BnStrategy::Bn4;
        cfg.validate().unwrap(); // odd batches fine when domains are not mixed
    }
}
