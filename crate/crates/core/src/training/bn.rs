//! The four ways of choosing batch-normalization statistics when source
//! and target share or split mini-batches.

use crate::autodiff::{Graph, NodeId, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::data::Domain;
use crate::error::{Error, Result};

use super::BnStrategy;

/// Normalized features routed to the two heads.
pub struct BnOutputs {
    /// Input for the emotion classifier; absent for a target-domain batch
    /// under the single-domain strategy.
    pub emotion_input: Option<NodeId>,
    /// Input for the language classifier (always present).
    pub language_input: NodeId,
}

/// Apply one strategy to a batch of flattened encoder outputs.
///
/// For the mixed strategies the batch must be laid out source-half first
/// with `n_source` source rows. For the single-domain strategy `domain`
/// states which corpus the whole batch came from. Running statistics are
/// updated from the whole-batch pass (BN1/BN2) or from each per-slice pass
/// (BN3/BN4).
pub fn bn_apply(
    g: &mut Graph,
    strategy: BnStrategy,
    flat: NodeId,
    gamma: NodeId,
    shift: NodeId,
    n_source: usize,
    domain: Option<Domain>,
    running: &mut RunningStats,
) -> Result<BnOutputs> {
    let n = g.value(flat).rows();
    if strategy.mixes_domains() {
        let n_target = n.checked_sub(n_source).filter(|&t| t > 0).ok_or_else(|| {
            Error::Config("mixed batch must contain both domains".into())
        })?;
        if n_source < 2 || n_target < 2 {
            return Err(Error::DegenerateBatch(alloc::format!(
                "half-batches must have at least 2 rows, got {n_source}/{n_target}"
            )));
        }
        match strategy {
            BnStrategy::Bn1 => {
                let whole = g.batch_norm_train(
                    flat,
                    gamma,
                    shift,
                    flat,
                    BN_EPS,
                    Some((running, BN_MOMENTUM)),
                )?;
                let source_half = g.slice_rows(whole, 0, n_source)?;
                Ok(BnOutputs { emotion_input: Some(source_half), language_input: whole })
            }
            BnStrategy::Bn2 => {
                let src = g.slice_rows(flat, 0, n_source)?;
                let src_norm = g.batch_norm_train(src, gamma, shift, src, BN_EPS, None)?;
                let whole = g.batch_norm_train(
                    flat,
                    gamma,
                    shift,
                    flat,
                    BN_EPS,
                    Some((running, BN_MOMENTUM)),
                )?;
                Ok(BnOutputs { emotion_input: Some(src_norm), language_input: whole })
            }
            BnStrategy::Bn3 => {
                let src = g.slice_rows(flat, 0, n_source)?;
                let tgt = g.slice_rows(flat, n_source, n_target)?;
                let src_norm =
                    g.batch_norm_train(src, gamma, shift, src, BN_EPS, Some((running, BN_MOMENTUM)))?;
                let tgt_norm =
                    g.batch_norm_train(tgt, gamma, shift, tgt, BN_EPS, Some((running, BN_MOMENTUM)))?;
                let both = g.concat_rows(src_norm, tgt_norm)?;
                Ok(BnOutputs { emotion_input: Some(src_norm), language_input: both })
            }
            BnStrategy::Bn4 => unreachable!("Bn4 does not mix domains"),
        }
    } else {
        let domain = domain
            .ok_or_else(|| Error::Usage("single-domain strategy needs the batch domain".into()))?;
        if n < 2 {
            return Err(Error::DegenerateBatch("single-domain batch needs at least 2 rows".into()));
        }
        let whole =
            g.batch_norm_train(flat, gamma, shift, flat, BN_EPS, Some((running, BN_MOMENTUM)))?;
        let emotion_input = if domain == Domain::Source { Some(whole) } else { None };
        Ok(BnOutputs { emotion_input, language_input: whole })
    }
}
