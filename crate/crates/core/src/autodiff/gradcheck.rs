//! Finite-difference verification of analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, NodeId};
use super::{GrlConfig, FD_STEP};

/// Worst relative error observed for one checked parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of a gradient check over a set of parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_params(per_param: Vec<ParamCheck>, tolerance: f64) -> Self {
        let max_rel_err = per_param.iter().fold(0.0, |m: f64, p| m.max(p.max_rel_err));
        GradCheckReport { per_param, max_rel_err, passed: max_rel_err < tolerance }
    }
}

/// Relative error with an absolute floor of 1, so near-zero gradients are
/// compared absolutely at the scale of an O(1) loss.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare the analytic gradient of a scalar loss against central finite
/// differences, for every entry of every parameter.
///
/// `build` must be a pure function of the parameter values: it is re-run
/// once per perturbed entry, so any stochastic op must use a fixed mask and
/// running statistics must not be updated. For graphs containing a gradient
/// reversal layer the tape reports the reversed (pseudo-)gradient, which by
/// design is not the derivative of the loss; callers check such graphs
/// against a reversal-aware oracle instead (see the model-level check).
pub fn grad_check<F>(params: &[(&str, Tensor)], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Usage("grad_check: loss must be a scalar".into()));
        }
        Ok(g.value(loss).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Usage("grad_check: loss must be a scalar".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).clone()).collect();

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..values[pi].numel() {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + FD_STEP;
            let plus = forward(&values)?;
            values[pi].data_mut()[j] = orig - FD_STEP;
            let minus = forward(&values)?;
            values[pi].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[pi].data()[j], fd));
        }
        per_param.push(ParamCheck { name: String::from(*name), max_rel_err: worst });
    }
    Ok(GradCheckReport::from_params(per_param, tolerance))
}

/// Full central-finite-difference gradient of a scalar-loss builder, one
/// tensor per parameter. Shares `grad_check`'s purity requirements.
pub fn fd_gradient<F>(params: &[(&str, Tensor)], build: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Usage("fd_gradient: loss must be a scalar".into()));
        }
        Ok(g.value(loss).item())
    };
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(values[pi].shape());
        for j in 0..values[pi].numel() {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + FD_STEP;
            let plus = forward(&values)?;
            values[pi].data_mut()[j] = orig - FD_STEP;
            let minus = forward(&values)?;
            values[pi].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(grad);
    }
    Ok(grads)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random contraction coefficients, kept away from zero so every output
/// entry influences the scalar loss.
fn random_coeffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.25..1.0);
            if rng.random::<f64>() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

/// Finite-difference checks for every operator, on small random instances.
/// Returns one named report per check.
pub fn standard_op_checks(tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0dd5_eed5);

    // conv1d: input, kernels, bias.
    {
        let coeffs = random_coeffs(4 * 4, &mut rng);
        let params = [
            ("input", random_tensor(&[9, 3], &mut rng)),
            ("kernels", random_tensor(&[4, 3, 3], &mut rng)),
            ("bias", random_tensor(&[4], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let y = g.conv1d(ids[0], ids[1], ids[2], 2)?;
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("conv1d".into(), rep));
    }

    // maxpool1d (random input, no ties almost surely).
    {
        let coeffs = random_coeffs(3 * 3, &mut rng);
        let params = [("input", random_tensor(&[8, 3], &mut rng))];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let y = g.maxpool1d(ids[0], 3, 2)?;
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("maxpool1d".into(), rep));
    }

    // relu (inputs kept away from the kink).
    {
        let mut t = random_tensor(&[4, 5], &mut rng);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let coeffs = random_coeffs(20, &mut rng);
        let rep = grad_check(&[("input", t)], tolerance, |g, ids| {
            let y = g.relu(ids[0]);
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("relu".into(), rep));
    }

    // dense: input, weights, bias.
    {
        let coeffs = random_coeffs(3 * 2, &mut rng);
        let params = [
            ("input", random_tensor(&[3, 4], &mut rng)),
            ("weights", random_tensor(&[4, 2], &mut rng)),
            ("bias", random_tensor(&[2], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("dense".into(), rep));
    }

    // attention_pool: both outputs contribute to the loss.
    {
        let cw = random_coeffs(5, &mut rng);
        let cp = random_coeffs(3, &mut rng);
        let params = [
            ("feats", random_tensor(&[5, 3], &mut rng)),
            ("query", random_tensor(&[3], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let (w, p) = g.attention_pool(ids[0], ids[1])?;
            let sw = g.weighted_sum(w, &cw)?;
            let sp = g.weighted_sum(p, &cp)?;
            g.lin_comb(&[(sw, 1.0), (sp, 1.0)])
        })?;
        out.push(("attention_pool".into(), rep));
    }

    // batch_norm, stats over the input itself.
    {
        let coeffs = random_coeffs(6 * 3, &mut rng);
        let params = [
            ("input", random_tensor(&[6, 3], &mut rng)),
            ("gamma", random_tensor(&[3], &mut rng)),
            ("shift", random_tensor(&[3], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let y = g.batch_norm_train(ids[0], ids[1], ids[2], ids[0], super::BN_EPS, None)?;
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("batch_norm(self-stats)".into(), rep));
    }

    // batch_norm with a stats source that is a strict superset of the
    // normalized slice, exercising the statistics path separately.
    {
        let coeffs = random_coeffs(3 * 3, &mut rng);
        let params = [
            ("input", random_tensor(&[3, 3], &mut rng)),
            ("other", random_tensor(&[3, 3], &mut rng)),
            ("gamma", random_tensor(&[3], &mut rng)),
            ("shift", random_tensor(&[3], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let stats = g.concat_rows(ids[0], ids[1])?;
            let y = g.batch_norm_train(ids[0], ids[2], ids[3], stats, super::BN_EPS, None)?;
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("batch_norm(split-stats)".into(), rep));
    }

    // grad_reverse: the tape reports -beta times the true derivative, so
    // check the reversal law instead of the raw finite difference.
    {
        let beta = 0.7;
        let x = random_tensor(&[6], &mut rng);
        let w = random_tensor(&[6, 2], &mut rng);
        let b = random_tensor(&[2], &mut rng);
        let coeffs = random_coeffs(2, &mut rng);
        let build = |with_grl: bool| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let head = if with_grl {
                g.grad_reverse(xi, GrlConfig::new(beta).unwrap())
            } else {
                xi
            };
            let m = g.stack_rows(&[head])?;
            let wi = g.leaf(w.clone());
            let bi = g.leaf(b.clone());
            let y = g.dense(m, wi, bi)?;
            let loss = g.weighted_sum(y, &coeffs)?;
            g.backward(loss)?;
            Ok::<Tensor, Error>(g.grad(xi).clone())
        };
        let reversed = build(true)?;
        let plain = build(false)?;
        let mut worst = 0.0f64;
        for (a, p) in reversed.data().iter().zip(plain.data()) {
            worst = worst.max(relative_error(*a, -beta * p));
        }
        out.push((
            "grad_reverse(beta-law)".into(),
            GradCheckReport::from_params(
                vec![ParamCheck { name: "input".into(), max_rel_err: worst }],
                tolerance,
            ),
        ));
    }

    // softmax_cross_entropy over random logits and labels.
    {
        let mut onehot = Tensor::zeros(&[3, 4]);
        for r in 0..3 {
            let c = rng.random_range(0..4usize);
            onehot.data_mut()[r * 4 + c] = 1.0;
        }
        let params = [("logits", random_tensor(&[3, 4], &mut rng))];
        let rep = grad_check(&params, tolerance, move |g, ids| {
            g.softmax_cross_entropy(ids[0], &onehot)
        })?;
        out.push(("softmax_cross_entropy".into(), rep));
    }

    // dropout with a fixed mask.
    {
        let rate = 0.5;
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..20).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect();
        let coeffs = random_coeffs(20, &mut rng);
        let params = [("input", random_tensor(&[4, 5], &mut rng))];
        let rep = grad_check(&params, tolerance, move |g, ids| {
            let y = g.dropout_with_mask(ids[0], &mask);
            g.weighted_sum(y, &coeffs)
        })?;
        out.push(("dropout(fixed-mask)".into(), rep));
    }

    // Structural ops chained together: stack, append, flatten, slice, concat.
    {
        let coeffs = random_coeffs(8, &mut rng);
        let params = [
            ("row_a", random_tensor(&[2], &mut rng)),
            ("row_b", random_tensor(&[2], &mut rng)),
            ("extra", random_tensor(&[2], &mut rng)),
            ("tail", random_tensor(&[1, 2], &mut rng)),
        ];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let m = g.stack_rows(&[ids[0], ids[1]])?;
            let a = g.append_row(m, ids[2])?;
            let top = g.slice_rows(a, 0, 3)?;
            let c = g.concat_rows(top, ids[3])?;
            let f = g.flatten(c);
            g.weighted_sum(f, &coeffs)
        })?;
        out.push(("structural(stack/append/slice/concat/flatten)".into(), rep));
    }

    // Regularization terms (sum_abs inputs kept away from 0).
    {
        let mut t = random_tensor(&[3, 3], &mut rng);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.2;
            }
        }
        let params = [("weights", t)];
        let rep = grad_check(&params, tolerance, |g, ids| {
            let sq = g.sum_squares(ids[0]);
            let ab = g.sum_abs(ids[0]);
            g.lin_comb(&[(sq, 0.3), (ab, 0.7)])
        })?;
        out.push(("regularizers(sum_squares/sum_abs)".into(), rep));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_only_network_passes_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs = random_coeffs(4, &mut rng);
        let params = [
            ("input", random_tensor(&[2, 3], &mut rng)),
            ("w", random_tensor(&[3, 2], &mut rng)),
            ("b", random_tensor(&[2], &mut rng)),
        ];
        let rep = grad_check(&params, 1e-6, |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            g.weighted_sum(y, &coeffs)
        })
        .unwrap();
        assert!(rep.passed, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn all_standard_op_checks_pass() {
        let checks = standard_op_checks(1e-5).unwrap();
        assert!(checks.len() >= 10);
        for (name, rep) in checks {
            assert!(rep.passed, "{name}: max rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn zero_tolerance_never_passes() {
        let checks = standard_op_checks(0.0).unwrap();
        assert!(checks.iter().any(|(_, r)| !r.passed));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let params = [("x", Tensor::zeros(&[2, 2]))];
        let err = grad_check(&params, 1e-5, |g, ids| {
            Ok(g.relu(ids[0]))
        });
        assert!(matches!(err, Err(Error::Usage(_))));
    }
}
