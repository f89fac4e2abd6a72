//! Epoch batch planning for the four data-combination strategies.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Domain;
use crate::error::{Error, Result};

use super::{BnStrategy, TrainConfig};

/// One training batch: either a mixed batch (source indices first) or a
/// whole single-domain batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchSpec {
    Mixed { source: Vec<usize>, target: Vec<usize> },
    Single { domain: Domain, indices: Vec<usize> },
}

impl BatchSpec {
    pub fn source_count(&self) -> usize {
        match self {
            BatchSpec::Mixed { source, .. } => source.len(),
            BatchSpec::Single { domain: Domain::Source, indices } => indices.len(),
            BatchSpec::Single { .. } => 0,
        }
    }
}

/// Ordered batches for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<BatchSpec>,
}

/// Chunk a shuffled index list, folding a trailing remainder of fewer than
/// 2 items into the final chunk so batch statistics stay well defined.
fn chunk(indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        let end = (i + size).min(indices.len());
        out.push(indices[i..end].to_vec());
        i = end;
    }
    if out.len() >= 2 {
        if let Some(last) = out.last() {
            if last.len() < 2 {
                let tail = out.pop().unwrap();
                out.last_mut().unwrap().extend(tail);
            }
        }
    }
    out
}

/// Plan one epoch of batches.
///
/// Mixed strategies pair a shuffled pass over every source sample with
/// equally many target indices (drawn with replacement when the target
/// corpus is smaller); the single-domain strategy alternates whole batches
/// from each domain, source first. Every source sample appears exactly once
/// in an emotion-loss batch per epoch.
pub fn plan_batches(
    source_n: usize,
    target_n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan> {
    cfg.validate()?;
    if source_n == 0 || target_n == 0 {
        return Err(Error::Data("both domains need at least one sample".into()));
    }
    let mut source_order: Vec<usize> = (0..source_n).collect();
    source_order.shuffle(rng);
    let mut target_order: Vec<usize> = (0..target_n).collect();
    target_order.shuffle(rng);

    if cfg.bn_strategy.mixes_domains() {
        let half = cfg.batch_size / 2;
        if source_n < half || target_n < half {
            return Err(Error::Data(format!(
                "need at least {half} samples per domain for a mixed batch, got {source_n}/{target_n}"
            )));
        }
        // One target index per source index for the whole epoch.
        let target_line: Vec<usize> = if target_n >= source_n {
            target_order[..source_n].to_vec()
        } else {
            (0..source_n).map(|_| rng.random_range(0..target_n)).collect()
        };
        let src_chunks = chunk(&source_order, half);
        let tgt_chunks = chunk(&target_line, half);
        debug_assert_eq!(src_chunks.len(), tgt_chunks.len());
        let batches = src_chunks
            .into_iter()
            .zip(tgt_chunks)
            .map(|(source, target)| BatchSpec::Mixed { source, target })
            .collect();
        Ok(BatchPlan { batches })
    } else {
        if source_n < cfg.batch_size || target_n < cfg.batch_size {
            return Err(Error::Data(format!(
                "need at least {} samples per domain for single-domain batches, got {source_n}/{target_n}",
                cfg.batch_size
            )));
        }
        let src_chunks = chunk(&source_order, cfg.batch_size);
        let tgt_chunks = chunk(&target_order, cfg.batch_size);
        let mut batches = Vec::with_capacity(src_chunks.len() + tgt_chunks.len());
        let mut si = src_chunks.into_iter();
        let mut ti = tgt_chunks.into_iter();
        loop {
            match (si.next(), ti.next()) {
                (None, None) => break,
                (s, t) => {
                    if let Some(indices) = s {
                        batches.push(BatchSpec::Single { domain: Domain::Source, indices });
                    }
                    if let Some(indices) = t {
                        batches.push(BatchSpec::Single { domain: Domain::Target, indices });
                    }
                }
            }
        }
        Ok(BatchPlan { batches })
    }
}
