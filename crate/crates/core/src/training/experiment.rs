//! Multi-seed experiment protocol and its summary report.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward_emotion, encode_tensors, predict_classes, ModelConfig};
use crate::autodiff::Phase;

use super::{evaluate_uar, train, TrainConfig};

/// One seed's outcome; `uar` is `None` when the run aborted.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub uar: Option<f64>,
    pub error: Option<String>,
}

/// Mean and population standard deviation of UAR over seeds, with per-seed
/// detail and failure flags.
#[derive(Debug, Clone)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub mean: Option<f64>,
    pub std_pop: Option<f64>,
}

impl MultiSeedReport {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let ok: Vec<f64> = runs.iter().filter_map(|r| r.uar).collect();
        if ok.is_empty() {
            return MultiSeedReport { runs, mean: None, std_pop: None };
        }
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        let var = ok.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / ok.len() as f64;
        MultiSeedReport { runs, mean: Some(mean), std_pop: Some(var.sqrt()) }
    }

    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(|r| r.uar.is_some())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.uar.is_none()).count()
    }

    /// Table-cell formatting: percent UAR as `mean(std)`, e.g. `62.78(0.33)`,
    /// with population standard deviation. Failed runs are flagged.
    pub fn summary(&self) -> String {
        match (self.mean, self.std_pop) {
            (Some(m), Some(s)) => {
                let cell = format!("{:.2}({:.2})", m * 100.0, s * 100.0);
                if self.all_ok() {
                    cell
                } else {
                    format!("{cell} [{} failed]", self.failures())
                }
            }
            _ => format!("n/a [{} failed]", self.failures()),
        }
    }
}

/// Run a per-seed evaluation closure over every seed, collecting failures
/// instead of aborting the whole protocol.
pub fn run_multi_seed<F>(seeds: &[u64], mut run: F) -> Result<MultiSeedReport>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.len() < 2 {
        return Err(Error::Config("multi-seed protocol needs at least 2 seeds".into()));
    }
    let runs = seeds
        .iter()
        .map(|&seed| match run(seed) {
            Ok(uar) => SeedRun { seed, uar: Some(uar), error: None },
            Err(e) => SeedRun { seed, uar: None, error: Some(e.to_string()) },
        })
        .collect();
    Ok(MultiSeedReport::from_runs(runs))
}

/// Settings of one adaptation experiment (shared across seeds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of the labeled target corpus used as the dev set.
    pub dev_fraction: f64,
    /// Fraction of the source corpus held out to measure source UAR.
    pub source_holdout_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dev_fraction: 0.3,
            source_holdout_fraction: 0.2,
        }
    }
}

/// Target- and source-side UAR over the seed protocol.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub target: MultiSeedReport,
    pub source: MultiSeedReport,
}

fn eval_uar_on(
    ds: &Dataset,
    labels: &[u8],
    params: &mut crate::model::ModelParams,
    mc: &ModelConfig,
) -> Result<f64> {
    let reps = encode_tensors(&ds.features, params, mc, Phase::Eval, None)?;
    let preds = predict_classes(&forward_emotion(&reps, params)?);
    let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    evaluate_uar(&preds, &truth)
}

/// Full adaptation protocol per seed: hold out part of the source for a
/// source-side score, take a stratified dev split from the labeled target
/// for early stopping, train on the remaining source against the whole
/// (unlabeled) target, then score the target eval split and the source
/// holdout with the best checkpoint.
pub fn run_adaptation_experiment(
    source: &Dataset,
    target: &Dataset,
    target_labels: &[u8],
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<ExperimentOutcome> {
    if target.len() != target_labels.len() {
        return Err(Error::Data("target label list does not match the target corpus".into()));
    }
    let source_labels = source.require_labels()?;
    let mut target_runs = Vec::with_capacity(seeds.len());
    let mut source_runs = Vec::with_capacity(seeds.len());
    if seeds.len() < 2 {
        return Err(Error::Config("multi-seed protocol needs at least 2 seeds".into()));
    }
    for &seed in seeds {
        let mut one = || -> Result<(f64, f64)> {
            let (src_hold, src_train) =
                stratified_split(&source_labels, cfg.source_holdout_fraction, seed ^ 0x51)?;
            let (dev_idx, tgt_eval_idx) =
                stratified_split(target_labels, cfg.dev_fraction, seed ^ 0xde)?;
            let source_train = source.subset(&src_train);
            let mut dev = target.subset(&dev_idx);
            for (slot, &i) in dev.labels.iter_mut().zip(&dev_idx) {
                *slot = Some(target_labels[i]);
            }
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let outcome = train(&source_train, target, &dev, &cfg.model, &tc, None)?;
            let mut params = outcome.best_params;
            let mut mc = cfg.model.clone();
            mc.grl_beta = tc.grl_beta;

            let tgt_eval = target.subset(&tgt_eval_idx);
            let tgt_eval_labels: Vec<u8> =
                tgt_eval_idx.iter().map(|&i| target_labels[i]).collect();
            let t_uar = eval_uar_on(&tgt_eval, &tgt_eval_labels, &mut params, &mc)?;

            let src_eval = source.subset(&src_hold);
            let src_eval_labels: Vec<u8> = src_hold.iter().map(|&i| source_labels[i]).collect();
            let s_uar = eval_uar_on(&src_eval, &src_eval_labels, &mut params, &mc)?;
            Ok((t_uar, s_uar))
        };
        match one() {
            Ok((t, s)) => {
                target_runs.push(SeedRun { seed, uar: Some(t), error: None });
                source_runs.push(SeedRun { seed, uar: Some(s), error: None });
            }
            Err(e) => {
                target_runs.push(SeedRun { seed, uar: None, error: Some(e.to_string()) });
                source_runs.push(SeedRun { seed, uar: None, error: Some(e.to_string()) });
            }
        }
    }
    Ok(ExperimentOutcome {
        target: MultiSeedReport::from_runs(target_runs),
        source: MultiSeedReport::from_runs(source_runs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_outcomes_have_zero_std() {
        let report = run_multi_seed(&[1, 1, 1], |_| Ok(0.7)).unwrap();
        assert_eq!(report.mean, Some(0.7));
        assert!(report.std_pop.unwrap() < 1e-15);
        assert_eq!(report.summary(), "70.00(0.00)");
    }

    #[test]
    fn population_std_of_two_values() {
        let vals = [0.6, 0.8];
        let mut i = 0;
        let report = run_multi_seed(&[1, 2], |_| {
            let v = vals[i];
            i += 1;
            Ok(v)
        })
        .unwrap();
        assert!((report.mean.unwrap() - 0.7).abs() < 1e-15);
        assert!((report.std_pop.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn failures_are_flagged_not_fatal() {
        let report = run_multi_seed(&[1, 2, 3], |s| {
            if s == 2 {
                Err(Error::NanAbort { epoch: 0, batch: 1 })
            } else {
                Ok(0.5)
            }
        })
        .unwrap();
        assert_eq!(report.failures(), 1);
        assert!(!report.all_ok());
        assert!(report.summary().contains("failed"));
        assert!(report.runs[1].error.as_deref().unwrap().contains("epoch 0"));
    }

    #[test]
    fn single_seed_is_rejected() {
        assert!(run_multi_seed(&[1], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn table_cell_format() {
        let report = MultiSeedReport::from_runs(
            [0.7199, 0.7165, 0.7232]
                .iter()
                .enumerate()
                .map(|(i, &u)| SeedRun { seed: i as u64, uar: Some(u), error: None })
                .collect(),
        );
        let s = report.summary();
        assert!(s.starts_with("71.9"), "{s}");
        assert!(s.contains('('));
        assert!(s.ends_with(')'));
    }
}
