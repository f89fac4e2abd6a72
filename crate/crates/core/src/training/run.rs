//! The joint adversarial training loop.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GrlConfig, Phase};
use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::model::{
    build_flatten_batch, emotion_head, encode_tensors, forward_emotion, init_model_with_rng,
    language_head, predict_classes, ModelConfig, ModelParams, ParamNodes,
};
use crate::tensor::Tensor;

use super::{
    bn_apply, evaluate_uar, lr_at_epoch, plan_batches, total_loss, BatchSpec, EpochMetrics,
    Optimizer, RegKind, TrainConfig,
};

/// Per-epoch callback (progress reporting, live metric sinks).
pub type TrainObserver<'a> = &'a mut dyn FnMut(&EpochMetrics);

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest dev UAR.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_dev_uar: f64,
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// One-hot rows for a list of class indices.
pub fn onehot(classes: &[usize], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), n_classes]);
    for (r, &c) in classes.iter().enumerate() {
        t.data_mut()[r * n_classes + c] = 1.0;
    }
    t
}

/// Train on a labeled source corpus and an unlabeled target corpus,
/// early-stopping on dev-set emotion UAR. Fully deterministic given
/// `cfg.seed`.
pub fn train(
    source: &Dataset,
    target: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: Option<TrainObserver>,
) -> Result<TrainOutcome> {
    train_impl(source, target, dev, model_cfg, cfg, observer, true)
}

/// Reference variant with the language head left out of the graph
/// entirely. The emotion-path trajectory of a full run with `alpha = 1`
/// and `beta = 0` is bit-identical to this.
pub fn train_without_language_head(
    source: &Dataset,
    target: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: Option<TrainObserver>,
) -> Result<TrainOutcome> {
    train_impl(source, target, dev, model_cfg, cfg, observer, false)
}

fn train_impl(
    source: &Dataset,
    target: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut observer: Option<TrainObserver>,
    language_enabled: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut mc = model_cfg.clone();
    mc.dropout_rate = cfg.dropout;
    mc.grl_beta = cfg.grl_beta;
    mc.validate()?;

    let src_labels = source.require_labels()?;
    if src_labels.iter().any(|&l| l as usize >= mc.n_emotions) {
        return Err(Error::Label("source label outside the emotion classes".into()));
    }
    let dev_labels = dev.require_labels()?;
    if dev.is_empty() {
        return Err(Error::Data("dev set is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::Data("target corpus is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_model_with_rng(&mc, &mut rng)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, &sizes);
    let grl = GrlConfig::new(cfg.grl_beta)?;

    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_dev_uar = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let plan = plan_batches(source.len(), target.len(), cfg, &mut rng)?;

        let mut emotion_sum = 0.0;
        let mut emotion_batches = 0usize;
        let mut language_sum = 0.0;
        let mut language_batches = 0usize;
        let mut total_sum = 0.0;
        let mut lang_preds: Vec<usize> = Vec::new();
        let mut lang_true: Vec<usize> = Vec::new();

        for (bi, batch) in plan.batches.iter().enumerate() {
            // Assemble the batch, source rows first.
            let (xs, n_src, emotion_classes, domain, row_domains): (
                Vec<Tensor>,
                usize,
                Option<Vec<usize>>,
                Option<Domain>,
                Vec<usize>,
            ) = match batch {
                BatchSpec::Mixed { source: si, target: ti } => {
                    let mut xs = Vec::with_capacity(si.len() + ti.len());
                    xs.extend(si.iter().map(|&i| source.features[i].clone()));
                    xs.extend(ti.iter().map(|&i| target.features[i].clone()));
                    let classes: Vec<usize> =
                        si.iter().map(|&i| src_labels[i] as usize).collect();
                    let mut rows = Vec::with_capacity(xs.len());
                    rows.extend(core::iter::repeat(Domain::Source.class_index()).take(si.len()));
                    rows.extend(core::iter::repeat(Domain::Target.class_index()).take(ti.len()));
                    (xs, si.len(), Some(classes), None, rows)
                }
                BatchSpec::Single { domain, indices } => {
                    let ds = if *domain == Domain::Source { source } else { target };
                    let xs: Vec<Tensor> =
                        indices.iter().map(|&i| ds.features[i].clone()).collect();
                    let classes = if *domain == Domain::Source {
                        Some(indices.iter().map(|&i| src_labels[i] as usize).collect())
                    } else {
                        None
                    };
                    let n_src = if *domain == Domain::Source { indices.len() } else { 0 };
                    let rows = core::iter::repeat(domain.class_index()).take(xs.len()).collect();
                    (xs, n_src, classes, Some(*domain), rows)
                }
            };

            let mut g = Graph::new();
            let pn = ParamNodes::from_params(&mut g, &params);
            let flat = build_flatten_batch(&mut g, &pn, &mc, &xs)?;
            let pre_bn = if mc.dropout_pre_bn {
                g.dropout(flat, mc.dropout_rate, Phase::Train, &mut rng)?
            } else {
                flat
            };
            let bn_out = bn_apply(
                &mut g,
                cfg.bn_strategy,
                pre_bn,
                pn.bn_gamma,
                pn.bn_shift,
                n_src,
                domain,
                &mut params.bn_running,
            )?;
            let (mut emo_in, mut lang_in) = (bn_out.emotion_input, bn_out.language_input);
            if !mc.dropout_pre_bn {
                if let Some(e) = emo_in {
                    emo_in = Some(g.dropout(e, mc.dropout_rate, Phase::Train, &mut rng)?);
                }
                lang_in = g.dropout(lang_in, mc.dropout_rate, Phase::Train, &mut rng)?;
            }

            let emotion_onehot = emotion_classes.map(|c| onehot(&c, mc.n_emotions));
            let emotion_term = match (emo_in, &emotion_onehot) {
                (Some(node), Some(oh)) => {
                    let logits = emotion_head(&mut g, &pn, node)?;
                    debug_assert_eq!(
                        g.value(logits).rows(),
                        n_src,
                        "emotion loss must cover exactly the source rows"
                    );
                    Some((logits, oh))
                }
                _ => None,
            };
            let language_pack = if language_enabled {
                let logits = language_head(&mut g, &pn, lang_in, grl)?;
                let oh = onehot(&row_domains, mc.n_languages);
                Some((logits, oh))
            } else {
                None
            };

            let terms = match &language_pack {
                Some((logits, oh)) => total_loss(
                    &mut g,
                    emotion_term,
                    Some((*logits, oh)),
                    cfg.alpha,
                    cfg.reg_kind,
                    cfg.reg_weight,
                    &pn.weight_nodes(),
                )?,
                None => {
                    let no_data_terms = emotion_term.is_none()
                        && (cfg.reg_kind == RegKind::None || cfg.reg_weight == 0.0);
                    if no_data_terms {
                        // Target-only batch in the ablated reference run:
                        // a zero loss keeps the optimizer-state cadence
                        // identical to the full run.
                        let zero = g.lin_comb(&[])?;
                        super::loss::LossTerms { total: zero, emotion: None, language: None }
                    } else {
                        total_loss(
                            &mut g,
                            emotion_term,
                            None,
                            cfg.alpha,
                            cfg.reg_kind,
                            cfg.reg_weight,
                            &pn.weight_nodes(),
                        )?
                    }
                }
            };

            let total_value = g.value(terms.total).item();
            if !total_value.is_finite() {
                return Err(Error::NanAbort { epoch, batch: bi });
            }
            g.backward(terms.total)?;
            let grads: Vec<Tensor> = pn.ids().iter().map(|&id| g.grad(id).clone()).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut tensors = params.tensors_mut();
            optimizer.step(&mut tensors, &grad_refs, lr);

            if let Some(e) = terms.emotion {
                emotion_sum += g.value(e).item();
                emotion_batches += 1;
            }
            if let Some(l) = terms.language {
                language_sum += g.value(l).item();
                language_batches += 1;
            }
            total_sum += total_value;
            if let Some((logits, _)) = &language_pack {
                lang_preds.extend(predict_classes(g.value(*logits)));
                lang_true.extend(&row_domains);
            }
        }

        let n_batches = plan.batches.len().max(1);
        let domain_uar = if lang_true.is_empty() {
            0.0
        } else {
            evaluate_uar(&lang_preds, &lang_true)?
        };
        let dev_reps = encode_tensors(&dev.features, &mut params, &mc, Phase::Eval, None)?;
        let dev_logits = forward_emotion(&dev_reps, &params)?;
        let dev_preds = predict_classes(&dev_logits);
        let dev_true: Vec<usize> = dev_labels.iter().map(|&l| l as usize).collect();
        let dev_uar = evaluate_uar(&dev_preds, &dev_true)?;

        let m = EpochMetrics {
            epoch,
            lr,
            emotion_loss: if emotion_batches > 0 { emotion_sum / emotion_batches as f64 } else { 0.0 },
            language_loss: if language_batches > 0 { language_sum / language_batches as f64 } else { 0.0 },
            total_loss: total_sum / n_batches as f64,
            domain_uar,
            dev_uar,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&m);
        }
        metrics.push(m);

        if dev_uar > best_dev_uar {
            best_dev_uar = dev_uar;
            best_epoch = epoch;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome { best_params, best_epoch, best_dev_uar, metrics, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_domains, SynthSpec};
    use crate::model::tiny_config;
    use crate::training::BnStrategy;
    use alloc::vec;

    fn tiny_synth(n: usize, seed: u64) -> (Dataset, Dataset, Vec<u8>) {
        let cfg = tiny_config();
        let spec = SynthSpec {
            n_per_domain: n,
            frames: cfg.input_frames,
            bands: cfg.input_dims,
            latent_dim: 5,
            class_sep: 3.0,
            noise: 0.4,
            seed,
            ..Default::default()
        };
        let out = synthesize_domains(&spec).unwrap();
        (out.source, out.target, out.target_labels)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            dropout: 0.3,
            early_stop_patience: 5,
            ..Default::default()
        }
    }

    fn dev_from(target: &Dataset, labels: &[u8], n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n).collect();
        let mut d = target.subset(&idx);
        for (i, l) in d.labels.iter_mut().enumerate() {
            *l = Some(labels[i]);
        }
        d
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let (source, target, tl) = tiny_synth(16, 3);
        let dev = dev_from(&target, &tl, 6);
        let cfg = quick_cfg();
        let mc = tiny_config();
        let a = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
        let b = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best_params, b.best_params);
    }

    #[test]
    fn baseline_mode_matches_ablated_reference_bitwise() {
        let (source, target, tl) = tiny_synth(16, 4);
        let dev = dev_from(&target, &tl, 6);
        let mut cfg = quick_cfg();
        cfg.alpha = 1.0;
        cfg.grl_beta = 0.0;
        cfg.epochs = 3;
        let mc = tiny_config();
        let full = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
        let ablated = train_without_language_head(&source, &target, &dev, &mc, &cfg, None).unwrap();
        assert_eq!(full.best_params.conv_kernels, ablated.best_params.conv_kernels);
        assert_eq!(full.best_params.emo_weight, ablated.best_params.emo_weight);
        assert_eq!(full.best_params.bn_gamma, ablated.best_params.bn_gamma);
        for (a, b) in full.metrics.iter().zip(&ablated.metrics) {
            assert_eq!(a.emotion_loss, b.emotion_loss);
            assert_eq!(a.dev_uar, b.dev_uar);
        }
    }

    #[test]
    fn all_strategies_complete_with_finite_losses() {
        let (source, target, tl) = tiny_synth(16, 5);
        let dev = dev_from(&target, &tl, 6);
        let mc = tiny_config();
        for strategy in [BnStrategy::Bn1, BnStrategy::Bn2, BnStrategy::Bn3, BnStrategy::Bn4] {
            let cfg = TrainConfig { bn_strategy: strategy, ..quick_cfg() };
            let out = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
            for m in &out.metrics {
                assert!(m.total_loss.is_finite(), "{strategy:?}");
                assert!((0.0..=1.0).contains(&m.dev_uar));
                assert!((0.0..=1.0).contains(&m.domain_uar));
            }
        }
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (source, target, tl) = tiny_synth(16, 6);
        let dev = dev_from(&target, &tl, 6);
        let mut cfg = quick_cfg();
        cfg.epochs = 30;
        cfg.early_stop_patience = 2;
        let mc = tiny_config();
        let out = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
        if out.stopped_early {
            assert!(out.metrics.len() <= out.best_epoch + 1 + 2);
            assert!(out.metrics.len() < 30);
        }
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let (source, target, tl) = tiny_synth(16, 7);
        let dev = dev_from(&target, &tl, 6);
        let unlabeled = source.without_labels();
        let err = train(&unlabeled, &target, &dev, &tiny_config(), &quick_cfg(), None);
        assert!(matches!(err, Err(Error::Label(_))));
    }

    #[test]
    fn sgd_single_step_matches_update_law() {
        use crate::autodiff::{GrlConfig, Graph};
        use crate::model::PARAM_NAMES;

        let (source, target, tl) = tiny_synth(8, 8);
        let dev = dev_from(&target, &tl, 4);
        let mc = tiny_config();
        let alpha = 0.7;
        let beta = 1.3;
        let cfg = TrainConfig {
            alpha,
            grl_beta: beta,
            epochs: 1,
            batch_size: 16, // one batch covers all 8 + 8 samples
            dropout: 0.0,
            reg_kind: RegKind::None,
            reg_weight: 0.0,
            optimizer: crate::training::OptimizerKind::Sgd,
            early_stop_patience: 5,
            seed: 11,
            ..Default::default()
        };
        let lr = lr_at_epoch(&cfg, 0);

        // Replicate the run's RNG consumption to recover theta_0 and the
        // batch composition.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut mc_eff = mc.clone();
        mc_eff.dropout_rate = 0.0;
        mc_eff.grl_beta = beta;
        let theta0 = init_model_with_rng(&mc_eff, &mut rng).unwrap();
        let plan = plan_batches(source.len(), target.len(), &cfg, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 1);
        let (si, ti) = match &plan.batches[0] {
            BatchSpec::Mixed { source, target } => (source.clone(), target.clone()),
            _ => panic!(),
        };
        let xs: Vec<Tensor> = si
            .iter()
            .map(|&i| source.features[i].clone())
            .chain(ti.iter().map(|&i| target.features[i].clone()))
            .collect();
        let src_classes: Vec<usize> =
            si.iter().map(|&i| source.labels[i].unwrap() as usize).collect();
        let e_oh = onehot(&src_classes, 2);
        let mut domains = vec![0usize; si.len()];
        domains.extend(vec![1usize; ti.len()]);
        let l_oh = onehot(&domains, 2);

        // Independent gradients: emotion loss alone, language loss alone
        // (reversal layer replaced by identity).
        let grads_of = |emotion: bool| -> Vec<Tensor> {
            let mut g = Graph::new();
            let pn = ParamNodes::from_params(&mut g, &theta0);
            let flat = build_flatten_batch(&mut g, &pn, &mc_eff, &xs).unwrap();
            let mut running = theta0.bn_running.clone();
            let bn = bn_apply(
                &mut g,
                BnStrategy::Bn1,
                flat,
                pn.bn_gamma,
                pn.bn_shift,
                si.len(),
                None,
                &mut running,
            )
            .unwrap();
            let loss = if emotion {
                let logits = emotion_head(&mut g, &pn, bn.emotion_input.unwrap()).unwrap();
                g.softmax_cross_entropy(logits, &e_oh).unwrap()
            } else {
                let logits = g
                    .dense(bn.language_input, pn.lang_weight, pn.lang_bias)
                    .unwrap();
                g.softmax_cross_entropy(logits, &l_oh).unwrap()
            };
            g.backward(loss).unwrap();
            pn.ids().iter().map(|&id| g.grad(id).clone()).collect()
        };
        let de = grads_of(true);
        let dl = grads_of(false);

        let out = train(&source, &target, &dev, &mc, &cfg, None).unwrap();
        let theta1 = out.best_params;

        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for (pi, name) in PARAM_NAMES.iter().enumerate() {
            let before = theta0.tensors()[pi].clone();
            let after = theta1.tensors()[pi].clone();
            let encoder = pi < 5;
            let language = *name == "lang.weight" || *name == "lang.bias";
            for j in 0..before.numel() {
                let delta = after.data()[j] - before.data()[j];
                let expected = if encoder {
                    -lr * (alpha * de[pi].data()[j] - (1.0 - alpha) * beta * dl[pi].data()[j])
                } else if language {
                    -lr * (1.0 - alpha) * dl[pi].data()[j]
                } else {
                    -lr * alpha * de[pi].data()[j]
                };
                assert!(
                    rel(delta, expected) < 1e-10,
                    "{name}[{j}]: delta {delta} vs expected {expected}"
                );
            }
        }
    }
}
