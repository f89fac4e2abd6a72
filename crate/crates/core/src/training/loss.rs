//! Total training objective: weighted sum of the two cross-entropies plus
//! an optional weight penalty.

use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::RegKind;

/// Scalar nodes making up one batch's objective.
pub struct LossTerms {
    pub total: NodeId,
    pub emotion: Option<NodeId>,
    pub language: Option<NodeId>,
}

/// Build `alpha * L_e + (1 - alpha) * L_l + reg_weight * penalty(weights)`.
///
/// The emotion term covers source samples only (the caller feeds
/// source-half logits); the language term covers the whole batch. The
/// penalty spans weight tensors only, never biases or batch-norm
/// parameters.
pub fn total_loss(
    g: &mut Graph,
    emotion: Option<(NodeId, &Tensor)>,
    language: Option<(NodeId, &Tensor)>,
    alpha: f64,
    reg_kind: RegKind,
    reg_weight: f64,
    weight_nodes: &[NodeId],
) -> Result<LossTerms> {
    if emotion.is_none() && language.is_none() && (reg_kind == RegKind::None || reg_weight == 0.0) {
        return Err(Error::Usage("total_loss: no loss terms".into()));
    }
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let emotion_node = match emotion {
        Some((logits, onehot)) => {
            let ce = g.softmax_cross_entropy(logits, onehot)?;
            terms.push((ce, alpha));
            Some(ce)
        }
        None => None,
    };
    let language_node = match language {
        Some((logits, onehot)) => {
            let ce = g.softmax_cross_entropy(logits, onehot)?;
            terms.push((ce, 1.0 - alpha));
            Some(ce)
        }
        None => None,
    };
    if reg_kind != RegKind::None && reg_weight > 0.0 && !weight_nodes.is_empty() {
        let parts: Vec<(NodeId, f64)> = weight_nodes
            .iter()
            .map(|&w| {
                let n = match reg_kind {
                    RegKind::L1 => g.sum_abs(w),
                    RegKind::L2 => g.sum_squares(w),
                    RegKind::None => unreachable!(),
                };
                (n, 1.0)
            })
            .collect();
        let penalty = g.lin_comb(&parts)?;
        terms.push((penalty, reg_weight));
    }
    let total = g.lin_comb(&terms)?;
    Ok(LossTerms { total, emotion: emotion_node, language: language_node })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::RegKind;
    use alloc::vec;

    #[test]
    fn convex_combination_of_equal_losses() {
        // alpha = 0.5 with L_e = L_l = c and no penalty gives exactly c.
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(&[1, 2], vec![0.3, -0.1]).unwrap());
        let onehot = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let lt = total_loss(
            &mut g,
            Some((logits, &onehot)),
            Some((logits, &onehot)),
            0.5,
            RegKind::None,
            0.0,
            &[],
        )
        .unwrap();
        let c = g.value(lt.emotion.unwrap()).item();
        assert!((g.value(lt.total).item() - c).abs() < 1e-15);
    }

    #[test]
    fn pure_l2_penalty_on_single_weight() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let lt = total_loss(&mut g, None, None, 0.75, RegKind::L2, 5e-3, &[w]).unwrap();
        assert!((g.value(lt.total).item() - 5e-3 * 9.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_one_zeroes_language_gradient() {
        let mut g = Graph::new();
        let e_logits = g.leaf(Tensor::new(&[1, 2], vec![0.2, -0.4]).unwrap());
        let l_logits = g.leaf(Tensor::new(&[2, 2], vec![0.1, 0.9, -0.3, 0.2]).unwrap());
        let e_onehot = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l_onehot = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lt = total_loss(
            &mut g,
            Some((e_logits, &e_onehot)),
            Some((l_logits, &l_onehot)),
            1.0,
            RegKind::None,
            0.0,
            &[],
        )
        .unwrap();
        g.backward(lt.total).unwrap();
        assert!(g.grad(l_logits).data().iter().all(|&v| v == 0.0));
        assert!(g.grad(e_logits).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn no_terms_is_usage_error() {
        let mut g = Graph::new();
        assert!(matches!(
            total_loss(&mut g, None, None, 0.5, RegKind::None, 0.0, &[]),
            Err(Error::Usage(_))
        ));
    }
}
