//! The encoder / emotion classifier / language classifier model.
//!
//! Encoder: 1-D convolution with ReLU, max pooling with a large stride,
//! softmax attention pooling whose output is appended as an extra frame,
//! flatten, dropout, batch normalization. Two single-dense-layer heads sit
//! on the shared representation; the language head is reached through a
//! gradient reversal layer so that adversarial training pushes the encoder
//! toward domain-invariant features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    fd_gradient, grad_check, relative_error, GradCheckReport, Graph, GrlConfig, NodeId, ParamCheck,
    Phase, RunningStats, BN_EPS, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::features::LogMelMatrix;
use crate::tensor::Tensor;

/// Architecture hyperparameters. Defaults give the 750x26 -> 1800 shape
/// chain: conv 247x200, pool 8x200, attention append 9x200, flatten 1800.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_filters: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dropout_rate: f64,
    /// Dropout sits between flatten and batch norm when true (the default),
    /// after batch norm otherwise.
    pub dropout_pre_bn: bool,
    pub grl_beta: f64,
    pub n_emotions: usize,
    pub n_languages: usize,
    pub input_frames: usize,
    pub input_dims: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_filters: 200,
            kernel: 10,
            conv_stride: 3,
            pool_size: 30,
            pool_stride: 30,
            dropout_rate: 0.7,
            dropout_pre_bn: true,
            grl_beta: 1.0,
            n_emotions: 2,
            n_languages: 2,
            input_frames: 750,
            input_dims: 26,
        }
    }
}

impl ModelConfig {
    pub fn conv_out_len(&self) -> usize {
        (self.input_frames - self.kernel) / self.conv_stride + 1
    }

    pub fn pool_out_len(&self) -> usize {
        (self.conv_out_len() - self.pool_size) / self.pool_stride + 1
    }

    /// Width of the flattened representation: pooled frames plus the
    /// appended attention frame, times the filter count.
    pub fn flatten_width(&self) -> usize {
        (self.pool_out_len() + 1) * self.n_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 || self.input_frames == 0 || self.input_dims == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.kernel == 0 || self.conv_stride == 0 || self.pool_size == 0 || self.pool_stride == 0 {
            return Err(Error::Config("kernel, pool size and strides must be >= 1".into()));
        }
        if self.kernel > self.input_frames {
            return Err(Error::Config(format!(
                "kernel {} exceeds input length {}",
                self.kernel, self.input_frames
            )));
        }
        if self.pool_size > self.conv_out_len() {
            return Err(Error::Config(format!(
                "pool size {} exceeds conv output length {}",
                self.pool_size,
                self.conv_out_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must be in [0,1)".into()));
        }
        if !(self.grl_beta >= 0.0) {
            return Err(Error::Config("gradient reversal scale must be >= 0".into()));
        }
        if self.n_emotions < 2 || self.n_languages < 2 {
            return Err(Error::Config("classifier heads need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Which of the three trainable groups a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder: convolution, attention query, batch-norm affine.
    Encoder,
    /// Emotion classifier head.
    Emotion,
    /// Language classifier head.
    Language,
}

/// All trainable parameters plus the batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv_kernels: Tensor,
    pub conv_bias: Tensor,
    pub attn_query: Tensor,
    pub bn_gamma: Tensor,
    pub bn_shift: Tensor,
    pub bn_running: RunningStats,
    pub emo_weight: Tensor,
    pub emo_bias: Tensor,
    pub lang_weight: Tensor,
    pub lang_bias: Tensor,
}

/// Fixed order in which parameters are enumerated everywhere (gradients,
/// optimizer state, checkpoints).
pub const PARAM_NAMES: [&str; 9] = [
    "conv.kernels",
    "conv.bias",
    "attn.query",
    "bn.gamma",
    "bn.shift",
    "emo.weight",
    "emo.bias",
    "lang.weight",
    "lang.bias",
];

impl ModelParams {
    /// Parameters in [`PARAM_NAMES`] order with their group and whether
    /// they count as a weight for regularization (biases and batch-norm
    /// parameters are excluded from the penalty).
    pub fn named(&self) -> [(&'static str, ParamGroup, bool, &Tensor); 9] {
        [
            ("conv.kernels", ParamGroup::Encoder, true, &self.conv_kernels),
            ("conv.bias", ParamGroup::Encoder, false, &self.conv_bias),
            ("attn.query", ParamGroup::Encoder, true, &self.attn_query),
            ("bn.gamma", ParamGroup::Encoder, false, &self.bn_gamma),
            ("bn.shift", ParamGroup::Encoder, false, &self.bn_shift),
            ("emo.weight", ParamGroup::Emotion, true, &self.emo_weight),
            ("emo.bias", ParamGroup::Emotion, false, &self.emo_bias),
            ("lang.weight", ParamGroup::Language, true, &self.lang_weight),
            ("lang.bias", ParamGroup::Language, false, &self.lang_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.conv_kernels,
            &mut self.conv_bias,
            &mut self.attn_query,
            &mut self.bn_gamma,
            &mut self.bn_shift,
            &mut self.emo_weight,
            &mut self.emo_bias,
            &mut self.lang_weight,
            &mut self.lang_bias,
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.conv_kernels,
            &self.conv_bias,
            &self.attn_query,
            &self.bn_gamma,
            &self.bn_shift,
            &self.emo_weight,
            &self.emo_bias,
            &self.lang_weight,
            &self.lang_bias,
        ]
    }
}

fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect()).expect("shape")
}

/// Initialize parameters deterministically from a seed: Glorot-uniform
/// weights, zero biases, zero attention query (uniform initial attention),
/// batch norm at identity with running mean 0 / variance 1.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_model_with_rng(cfg, &mut rng)
}

pub fn init_model_with_rng(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let (f, k, d) = (cfg.n_filters, cfg.kernel, cfg.input_dims);
    let w = cfg.flatten_width();
    Ok(ModelParams {
        conv_kernels: glorot_uniform(&[f, k, d], k * d, k * f, rng),
        conv_bias: Tensor::zeros(&[f]),
        attn_query: Tensor::zeros(&[f]),
        bn_gamma: Tensor::filled(&[w], 1.0),
        bn_shift: Tensor::zeros(&[w]),
        bn_running: RunningStats::new(w),
        emo_weight: glorot_uniform(&[w, cfg.n_emotions], w, cfg.n_emotions, rng),
        emo_bias: Tensor::zeros(&[cfg.n_emotions]),
        lang_weight: glorot_uniform(&[w, cfg.n_languages], w, cfg.n_languages, rng),
        lang_bias: Tensor::zeros(&[cfg.n_languages]),
    })
}

/// Graph leaves for every parameter, in [`PARAM_NAMES`] order.
pub struct ParamNodes {
    pub conv_kernels: NodeId,
    pub conv_bias: NodeId,
    pub attn_query: NodeId,
    pub bn_gamma: NodeId,
    pub bn_shift: NodeId,
    pub emo_weight: NodeId,
    pub emo_bias: NodeId,
    pub lang_weight: NodeId,
    pub lang_bias: NodeId,
}

impl ParamNodes {
    pub fn from_params(g: &mut Graph, p: &ModelParams) -> Self {
        ParamNodes {
            conv_kernels: g.leaf(p.conv_kernels.clone()),
            conv_bias: g.leaf(p.conv_bias.clone()),
            attn_query: g.leaf(p.attn_query.clone()),
            bn_gamma: g.leaf(p.bn_gamma.clone()),
            bn_shift: g.leaf(p.bn_shift.clone()),
            emo_weight: g.leaf(p.emo_weight.clone()),
            emo_bias: g.leaf(p.emo_bias.clone()),
            lang_weight: g.leaf(p.lang_weight.clone()),
            lang_bias: g.leaf(p.lang_bias.clone()),
        }
    }

    pub fn from_leaves(ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 9);
        ParamNodes {
            conv_kernels: ids[0],
            conv_bias: ids[1],
            attn_query: ids[2],
            bn_gamma: ids[3],
            bn_shift: ids[4],
            emo_weight: ids[5],
            emo_bias: ids[6],
            lang_weight: ids[7],
            lang_bias: ids[8],
        }
    }

    pub fn ids(&self) -> [NodeId; 9] {
        [
            self.conv_kernels,
            self.conv_bias,
            self.attn_query,
            self.bn_gamma,
            self.bn_shift,
            self.emo_weight,
            self.emo_bias,
            self.lang_weight,
            self.lang_bias,
        ]
    }

    /// Nodes of weight tensors subject to regularization.
    pub fn weight_nodes(&self) -> [NodeId; 4] {
        [self.conv_kernels, self.attn_query, self.emo_weight, self.lang_weight]
    }
}

/// Per-sample encoder path up to the flattened vector (conv -> ReLU ->
/// max pool -> attention append -> flatten). No dropout or batch norm here;
/// those act on the stacked batch.
pub fn sample_path(g: &mut Graph, pn: &ParamNodes, cfg: &ModelConfig, x: Tensor) -> Result<NodeId> {
    if x.shape() != [cfg.input_frames, cfg.input_dims] {
        return Err(Error::Dimension(format!(
            "encoder input must be {}x{}, got {:?}",
            cfg.input_frames,
            cfg.input_dims,
            x.shape()
        )));
    }
    let xi = g.leaf(x);
    let c = g.conv1d(xi, pn.conv_kernels, pn.conv_bias, cfg.conv_stride)?;
    let r = g.relu(c);
    let p = g.maxpool1d(r, cfg.pool_size, cfg.pool_stride)?;
    let (_, pooled) = g.attention_pool(p, pn.attn_query)?;
    let appended = g.append_row(p, pooled)?;
    Ok(g.flatten(appended))
}

/// Stack per-sample flatten vectors into an `N x flatten_width` batch node.
pub fn build_flatten_batch(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    xs: &[Tensor],
) -> Result<NodeId> {
    if xs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let rows: Result<Vec<NodeId>> =
        xs.iter().map(|x| sample_path(g, pn, cfg, x.clone())).collect();
    g.stack_rows(&rows?)
}

/// Emotion head: plain affine map to logits.
pub fn emotion_head(g: &mut Graph, pn: &ParamNodes, f: NodeId) -> Result<NodeId> {
    g.dense(f, pn.emo_weight, pn.emo_bias)
}

/// Language head behind the gradient reversal layer.
pub fn language_head(g: &mut Graph, pn: &ParamNodes, f: NodeId, beta: GrlConfig) -> Result<NodeId> {
    let reversed = g.grad_reverse(f, beta);
    g.dense(reversed, pn.lang_weight, pn.lang_bias)
}

/// The 1800-dimensional (for the default config) post-batch-norm encoder
/// output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub values: Vec<f64>,
}

impl Representation {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Encode a batch of utterances into representations.
///
/// Train mode applies dropout and normalizes with statistics over this
/// batch (updating the running statistics); eval mode is deterministic,
/// row-wise independent of batch size, and uses the running statistics.
pub fn encode(
    xs: &[&LogMelMatrix],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    phase: Phase,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Representation>> {
    let tensors: Vec<Tensor> = xs.iter().map(|m| m.to_tensor()).collect();
    encode_tensors(&tensors, params, cfg, phase, rng)
}

pub fn encode_tensors(
    xs: &[Tensor],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    phase: Phase,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Representation>> {
    let mut g = Graph::new();
    let pn = ParamNodes::from_params(&mut g, params);
    let flat = build_flatten_batch(&mut g, &pn, cfg, xs)?;
    let out = match phase {
        Phase::Eval => {
            let pre = flat;
            g.batch_norm_eval(pre, pn.bn_gamma, pn.bn_shift, &params.bn_running, BN_EPS)?
        }
        Phase::Train => {
            if xs.len() < 2 {
                return Err(Error::DegenerateBatch(
                    "train-mode encoding needs a batch of at least 2".into(),
                ));
            }
            let rng = rng.ok_or_else(|| Error::Usage("train-mode encode needs an RNG".into()))?;
            if cfg.dropout_pre_bn {
                let dropped = g.dropout(flat, cfg.dropout_rate, Phase::Train, rng)?;
                g.batch_norm_train(
                    dropped,
                    pn.bn_gamma,
                    pn.bn_shift,
                    dropped,
                    BN_EPS,
                    Some((&mut params.bn_running, BN_MOMENTUM)),
                )?
            } else {
                let bn = g.batch_norm_train(
                    flat,
                    pn.bn_gamma,
                    pn.bn_shift,
                    flat,
                    BN_EPS,
                    Some((&mut params.bn_running, BN_MOMENTUM)),
                )?;
                g.dropout(bn, cfg.dropout_rate, Phase::Train, rng)?
            }
        }
    };
    let v = g.value(out);
    Ok((0..v.rows()).map(|r| Representation { values: v.row(r).to_vec() }).collect())
}

fn affine(f: &[Representation], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if f.is_empty() {
        return Err(Error::Input("empty representation batch".into()));
    }
    let i = weight.shape()[0];
    let o = weight.shape()[1];
    let mut out = vec![0.0; f.len() * o];
    for (r, rep) in f.iter().enumerate() {
        if rep.dim() != i {
            return Err(Error::Dimension(format!(
                "representation dim {} does not match head input {i}",
                rep.dim()
            )));
        }
        for c in 0..o {
            let mut acc = bias.data()[c];
            for (ii, v) in rep.values.iter().enumerate() {
                acc += v * weight.at(ii, c);
            }
            out[r * o + c] = acc;
        }
    }
    Tensor::new(&[f.len(), o], out)
}

/// Emotion logits for a batch of representations (softmax lives in the
/// loss or in prediction).
pub fn forward_emotion(f: &[Representation], params: &ModelParams) -> Result<Tensor> {
    affine(f, &params.emo_weight, &params.emo_bias)
}

/// Language logits. Forward values are identical to a plain dense layer:
/// the gradient reversal layer only acts on the backward pass.
pub fn forward_language(f: &[Representation], params: &ModelParams) -> Result<Tensor> {
    affine(f, &params.lang_weight, &params.lang_bias)
}

/// Row-wise argmax with ties broken to the lowest class index.
pub fn predict_classes(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode emotion predictions for a batch of utterances.
pub fn predict_emotion(
    xs: &[&LogMelMatrix],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    let mut scratch = params.clone();
    let reps = encode(xs, &mut scratch, cfg, Phase::Eval, None)?;
    Ok(predict_classes(&forward_emotion(&reps, params)?))
}

// ---- model-level gradient check -------------------------------------------

/// Small configuration with the same graph structure as the default model.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_filters: 8,
        kernel: 5,
        conv_stride: 2,
        pool_size: 4,
        pool_stride: 4,
        dropout_rate: 0.5,
        dropout_pre_bn: true,
        grl_beta: 0.8,
        n_emotions: 2,
        n_languages: 2,
        input_frames: 40,
        input_dims: 6,
        ..Default::default()
    }
}

struct ModelCheckSetup {
    cfg: ModelConfig,
    xs: Vec<Tensor>,
    emotion_onehot: Tensor,
    language_onehot: Tensor,
    mask: Vec<f64>,
    alpha: f64,
    reg_weight: f64,
}

fn model_check_setup() -> ModelCheckSetup {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0de1);
    let n = 4; // 2 source + 2 target
    let xs: Vec<Tensor> = (0..n)
        .map(|_| {
            let len = cfg.input_frames * cfg.input_dims;
            Tensor::new(
                &[cfg.input_frames, cfg.input_dims],
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let emotion_onehot = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let language_onehot =
        Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let w = cfg.flatten_width();
    let mask: Vec<f64> =
        (0..n * w).map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { 2.0 }).collect();
    ModelCheckSetup { cfg, xs, emotion_onehot, language_onehot, mask, alpha: 0.6, reg_weight: 5e-3 }
}

/// Builds the shared trunk (up to batch-normalized features) and returns
/// the feature node. BN statistics are taken over the whole batch, as in
/// the whole-batch training strategy.
fn check_trunk(g: &mut Graph, pn: &ParamNodes, s: &ModelCheckSetup) -> Result<NodeId> {
    let flat = build_flatten_batch(g, pn, &s.cfg, &s.xs)?;
    let dropped = g.dropout_with_mask(flat, &s.mask);
    g.batch_norm_train(dropped, pn.bn_gamma, pn.bn_shift, dropped, BN_EPS, None)
}

fn l2_term(g: &mut Graph, pn: &ParamNodes) -> Result<NodeId> {
    let sq: Vec<(NodeId, f64)> =
        pn.weight_nodes().iter().map(|&w| (g.sum_squares(w), 1.0)).collect();
    g.lin_comb(&sq)
}

/// Full-model gradient check against central finite differences.
///
/// Three graphs cover the reversal layer honestly:
/// emotion path and (reversal-free) language path are checked entry-wise
/// against naive finite differences; on the full graph the encoder
/// pseudo-gradient is checked against `alpha * FD(emotion part) - (1-alpha)
/// * beta * FD(language part)`, and the head parameters against naive
/// finite differences of the total loss.
pub fn model_grad_check(tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let s = model_check_setup();
    let params = init_model(&s.cfg, 0x51ee7)?;
    let named: Vec<(&str, Tensor)> =
        params.named().iter().map(|(n, _, _, t)| (*n, (*t).clone())).collect();
    let beta = s.cfg.grl_beta;
    let alpha = s.alpha;

    // alpha * emotion CE + reg.
    let emotion_build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let pn = ParamNodes::from_leaves(ids);
        let f = check_trunk(g, &pn, &s)?;
        let src = g.slice_rows(f, 0, 2)?;
        let logits = emotion_head(g, &pn, src)?;
        let ce = g.softmax_cross_entropy(logits, &s.emotion_onehot)?;
        let reg = l2_term(g, &pn)?;
        g.lin_comb(&[(ce, alpha), (reg, s.reg_weight)])
    };
    // (1 - alpha) * language CE without the reversal layer.
    let language_build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let pn = ParamNodes::from_leaves(ids);
        let f = check_trunk(g, &pn, &s)?;
        let logits = g.dense(f, pn.lang_weight, pn.lang_bias)?;
        let ce = g.softmax_cross_entropy(logits, &s.language_onehot)?;
        g.lin_comb(&[(ce, 1.0 - alpha)])
    };

    let mut out = Vec::new();
    out.push((
        String::from("model(emotion-path)"),
        grad_check(&named, tolerance, emotion_build)?,
    ));
    out.push((
        String::from("model(language-path)"),
        grad_check(&named, tolerance, language_build)?,
    ));

    // Full graph with the reversal layer in place.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = named.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let pn = ParamNodes::from_leaves(&ids);
    let f = check_trunk(&mut g, &pn, &s)?;
    let src = g.slice_rows(f, 0, 2)?;
    let e_logits = emotion_head(&mut g, &pn, src)?;
    let e_ce = g.softmax_cross_entropy(e_logits, &s.emotion_onehot)?;
    let l_logits = language_head(&mut g, &pn, f, GrlConfig::new(beta)?)?;
    let l_ce = g.softmax_cross_entropy(l_logits, &s.language_onehot)?;
    let reg = l2_term(&mut g, &pn)?;
    let total = g.lin_comb(&[(e_ce, alpha), (l_ce, 1.0 - alpha), (reg, s.reg_weight)])?;
    g.backward(total)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).clone()).collect();

    let fd_emotion = fd_gradient(&named, emotion_build)?;
    let fd_language = fd_gradient(&named, language_build)?;

    let mut per_param = Vec::new();
    for (pi, (name, _, _, _)) in params.named().iter().enumerate() {
        let encoder = pi < 5; // conv, attention query, batch norm
        let mut worst = 0.0f64;
        for j in 0..analytic[pi].numel() {
            let a = analytic[pi].data()[j];
            let expected = if encoder {
                fd_emotion[pi].data()[j] - beta * fd_language[pi].data()[j]
            } else {
                // Head parameters see no reversal on their own path.
                fd_emotion[pi].data()[j] + fd_language[pi].data()[j]
            };
            worst = worst.max(relative_error(a, expected));
        }
        per_param.push(ParamCheck { name: String::from(*name), max_rel_err: worst });
    }
    out.push((
        String::from("model(full,grl-composed)"),
        GradCheckReport::from_params(per_param, tolerance),
    ));
    Ok(out)
}
