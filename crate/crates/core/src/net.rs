//! A small pre-norm causal transformer in `f64` with hand-written backprop,
//! an Adam optimizer with decoupled weight decay and global-norm clipping,
//! and a versioned binary checkpoint format.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedCorpus, PosInventory, PosPartition, Vocabulary};
use crate::heads::{self, HeadError, HeadKind};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input of length {len} exceeds the context length {context_len}")]
    TooLong { len: usize, context_len: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {id} at position {position} is out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { position: usize, id: usize, vocab_size: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found}, reader expects {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint stream is truncated")]
    Truncated,
    #[error("tensor {name:?} does not match the embedded config")]
    ShapeMismatch { name: String },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("invalid embedded config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub pos_count: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, two heads, width 64, feed-forward 256, window 64, dropout 0.1.
    pub fn desk_scale(vocab_size: usize, pos_count: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            context_len: 64,
            vocab_size,
            pos_count,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
            ("pos_count", self.pos_count),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NetError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Columns are `[q | k | v]`, heads contiguous within each block.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

/// Backbone weights plus the token output embeddings `w_x` (rows of
/// `token_output`) and POS output embeddings `o_rho` (rows of `pos_output`).
/// Input and output token embeddings are separate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_input: Array2<f64>,
    pub positional: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array1<f64>,
    pub final_bias: Array1<f64>,
    pub token_output: Array2<f64>,
    pub pos_output: Array2<f64>,
}

/// Flat view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

impl ModelParams {
    /// Normal(0, 0.02) weights, unit gains, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        Self::init_with_scale(config, 0.02)
    }

    pub fn init_with_scale(config: &ModelConfig, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let (d, f) = (config.d_model, config.d_ff);
        let token_input = normal(config.vocab_size, d);
        let positional = normal(config.context_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                w_qkv: normal(d, 3 * d),
                b_qkv: Array1::zeros(3 * d),
                w_out: normal(d, d),
                b_out: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w_ff1: normal(d, f),
                b_ff1: Array1::zeros(f),
                w_ff2: normal(f, d),
                b_ff2: Array1::zeros(d),
            })
            .collect();
        let token_output = normal(config.vocab_size, d);
        let pos_output = normal(config.pos_count, d);
        Self {
            token_input,
            positional,
            layers,
            final_gain: Array1::ones(d),
            final_bias: Array1::zeros(d),
            token_output,
            pos_output,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn d_model(&self) -> usize {
        self.final_gain.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_output.nrows()
    }

    pub fn pos_count(&self) -> usize {
        self.pos_output.nrows()
    }

    /// Every tensor in a fixed order with a stable dotted name.
    pub fn tensors<'a>(&'a self) -> Vec<TensorRef<'a>> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &'a [f64]| out.push((name, shape, data));
        push("token_input".into(), self.token_input.shape().to_vec(), slice2(&self.token_input));
        push("positional".into(), self.positional.shape().to_vec(), slice2(&self.positional));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            push(p("ln1_gain"), vec![l.ln1_gain.len()], slice1(&l.ln1_gain));
            push(p("ln1_bias"), vec![l.ln1_bias.len()], slice1(&l.ln1_bias));
            push(p("w_qkv"), l.w_qkv.shape().to_vec(), slice2(&l.w_qkv));
            push(p("b_qkv"), vec![l.b_qkv.len()], slice1(&l.b_qkv));
            push(p("w_out"), l.w_out.shape().to_vec(), slice2(&l.w_out));
            push(p("b_out"), vec![l.b_out.len()], slice1(&l.b_out));
            push(p("ln2_gain"), vec![l.ln2_gain.len()], slice1(&l.ln2_gain));
            push(p("ln2_bias"), vec![l.ln2_bias.len()], slice1(&l.ln2_bias));
            push(p("w_ff1"), l.w_ff1.shape().to_vec(), slice2(&l.w_ff1));
            push(p("b_ff1"), vec![l.b_ff1.len()], slice1(&l.b_ff1));
            push(p("w_ff2"), l.w_ff2.shape().to_vec(), slice2(&l.w_ff2));
            push(p("b_ff2"), vec![l.b_ff2.len()], slice1(&l.b_ff2));
        }
        push("final_gain".into(), vec![self.final_gain.len()], slice1(&self.final_gain));
        push("final_bias".into(), vec![self.final_bias.len()], slice1(&self.final_bias));
        push("token_output".into(), self.token_output.shape().to_vec(), slice2(&self.token_output));
        push("pos_output".into(), self.pos_output.shape().to_vec(), slice2(&self.pos_output));
        out.into_iter()
            .map(|(name, shape, data)| TensorRef { name, shape, data })
            .collect()
    }

    /// Mutable flat slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        let mut out: Vec<&mut [f64]> = vec![m2(&mut self.token_input), m2(&mut self.positional)];
        for l in &mut self.layers {
            out.push(m1(&mut l.ln1_gain));
            out.push(m1(&mut l.ln1_bias));
            out.push(m2(&mut l.w_qkv));
            out.push(m1(&mut l.b_qkv));
            out.push(m2(&mut l.w_out));
            out.push(m1(&mut l.b_out));
            out.push(m1(&mut l.ln2_gain));
            out.push(m1(&mut l.ln2_bias));
            out.push(m2(&mut l.w_ff1));
            out.push(m1(&mut l.b_ff1));
            out.push(m2(&mut l.w_ff2));
            out.push(m1(&mut l.b_ff2));
        }
        out.push(m1(&mut self.final_gain));
        out.push(m1(&mut self.final_bias));
        out.push(m2(&mut self.token_output));
        out.push(m2(&mut self.pos_output));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Per-position hidden states `h_0 .. h_{T-1}` (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(Array2<f64>);

impl HiddenStates {
    pub fn from_array(a: Array2<f64>) -> Self {
        Self(a)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.0.row(t)
    }

    pub fn last(&self) -> ArrayView1<'_, f64> {
        self.0.row(self.0.nrows() - 1)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Dropout is active only in `Train`, driven by the supplied stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let g = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[t];
        Zip::from(dx.row_mut(t))
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (k * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * u * u)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LnCache,
    c: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    drop_ff: Option<Array2<f64>>,
}

struct ForwardCache {
    tokens: Vec<usize>,
    drop_embed: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<(), NetError> {
    if tokens.is_empty() {
        return Err(NetError::EmptyInput);
    }
    if tokens.len() > config.context_len {
        return Err(NetError::TooLong {
            len: tokens.len(),
            context_len: config.context_len,
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= config.vocab_size) {
        return Err(NetError::TokenOutOfRange {
            position,
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

fn forward_cached(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[usize],
    mut mode: Mode<'_>,
) -> Result<(HiddenStates, ForwardCache), NetError> {
    check_tokens(config, tokens)?;
    let t_len = tokens.len();
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let rate = config.dropout_rate;
    let mut mask = |rows: usize, cols: usize| match &mut mode {
        Mode::Train(rng) if rate > 0.0 => Some(dropout_mask(rng, rows, cols, rate)),
        _ => None,
    };

    let mut x = Array2::zeros((t_len, d));
    for (t, &id) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &params.token_input.row(id);
        row += &params.positional.row(t);
    }
    let drop_embed = mask(t_len, d);
    if let Some(m) = &drop_embed {
        x *= m;
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let qkv = a.dot(&lp.w_qkv) + &lp.b_qkv;
        let mut ctx = Array2::zeros((t_len, d));
        let mut probs = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut sc = q.dot(&k.t());
            for i in 0..t_len {
                let mut row = sc.row_mut(i);
                let max = (0..=i).map(|j| row[j] * scale).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..t_len {
                    if j <= i {
                        row[j] = (row[j] * scale - max).exp();
                        z += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                row /= z;
            }
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
            probs.push(sc);
        }
        let mut o = ctx.dot(&lp.w_out) + &lp.b_out;
        let drop_attn = mask(t_len, d);
        if let Some(m) = &drop_attn {
            o *= m;
        }
        x += &o;

        let (c, ln2) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let f1 = c.dot(&lp.w_ff1) + &lp.b_ff1;
        let g = f1.mapv(gelu);
        let mut f2 = g.dot(&lp.w_ff2) + &lp.b_ff2;
        let drop_ff = mask(t_len, d);
        if let Some(m) = &drop_ff {
            f2 *= m;
        }
        x += &f2;
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            ctx,
            drop_attn,
            ln2,
            c,
            f1,
            g,
            drop_ff,
        });
    }
    let (h, final_ln) = layer_norm(&x, &params.final_gain, &params.final_bias);
    Ok((
        HiddenStates(h),
        ForwardCache {
            tokens: tokens.to_vec(),
            drop_embed,
            layers,
            final_ln,
        },
    ))
}

/// Hidden states for `tokens` (length at most `context_len`). Row `t` depends
/// only on `tokens[..=t]`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[usize],
    mode: Mode<'_>,
) -> Result<HiddenStates, NetError> {
    forward_cached(params, config, tokens, mode).map(|(h, _)| h)
}

fn backward(params: &ModelParams, config: &ModelConfig, cache: &ForwardCache, d_hidden: Array2<f64>, grads: &mut ModelParams) {
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = cache.tokens.len();

    let mut dx = layer_norm_backward(
        &d_hidden,
        &cache.final_ln,
        &params.final_gain,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];

        // Feed-forward branch.
        let mut df2 = dx.clone();
        if let Some(m) = &lc.drop_ff {
            df2 *= m;
        }
        gl.b_ff2 += &df2.sum_axis(Axis(0));
        gl.w_ff2 += &lc.g.t().dot(&df2);
        let dg = df2.dot(&lp.w_ff2.t());
        let df1 = Zip::from(&dg).and(&lc.f1).map_collect(|&g, &u| g * gelu_grad(u));
        gl.b_ff1 += &df1.sum_axis(Axis(0));
        gl.w_ff1 += &lc.c.t().dot(&df1);
        let dc = df1.dot(&lp.w_ff1.t());
        dx += &layer_norm_backward(&dc, &lc.ln2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);

        // Attention branch.
        let mut do_ = dx.clone();
        if let Some(m) = &lc.drop_attn {
            do_ *= m;
        }
        gl.b_out += &do_.sum_axis(Axis(0));
        gl.w_out += &lc.ctx.t().dot(&do_);
        let dctx = do_.dot(&lp.w_out.t());
        let mut dqkv = Array2::<f64>::zeros((t_len, 3 * d));
        for h in 0..config.n_heads {
            let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = lc.qkv.slice(s![.., qc..qc + dh]);
            let k = lc.qkv.slice(s![.., kc..kc + dh]);
            let v = lc.qkv.slice(s![.., vc..vc + dh]);
            let a = &lc.probs[h];
            let dctx_h = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            dqkv.slice_mut(s![.., vc..vc + dh]).assign(&a.t().dot(&dctx_h));
            let da = dctx_h.dot(&v.t());
            let mut ds = Array2::<f64>::zeros((t_len, t_len));
            for i in 0..t_len {
                let dot: f64 = (0..=i).map(|j| a[[i, j]] * da[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            dqkv.slice_mut(s![.., qc..qc + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., kc..kc + dh]).assign(&ds.t().dot(&q));
        }
        gl.b_qkv += &dqkv.sum_axis(Axis(0));
        gl.w_qkv += &lc.a.t().dot(&dqkv);
        let da = dqkv.dot(&lp.w_qkv.t());
        dx += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
    }

    if let Some(m) = &cache.drop_embed {
        dx *= m;
    }
    for (t, &id) in cache.tokens.iter().enumerate() {
        let row = dx.row(t);
        let mut ti = grads.token_input.row_mut(id);
        ti += &row;
        let mut pi = grads.positional.row_mut(t);
        pi += &row;
    }
}

/// One training window: `targets[t]` (with tag `target_pos[t]`) follows `inputs[..=t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_pos: Vec<usize>,
}

/// Wraps each sequence as `BOS .. EOS` and cuts it into contiguous,
/// non-overlapping windows of at most `context_len` inputs. The last window of
/// a sequence is shorter rather than padded, which leaves the loss unchanged.
pub fn make_windows(corpus: &EncodedCorpus, context_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for seq in &corpus.sequences {
        let mut toks = Vec::with_capacity(seq.tokens.len() + 2);
        toks.push(Vocabulary::BOS);
        toks.extend_from_slice(&seq.tokens);
        toks.push(Vocabulary::EOS);
        let mut pos = Vec::with_capacity(toks.len());
        pos.push(PosInventory::SPECIAL);
        pos.extend_from_slice(&seq.pos);
        pos.push(PosInventory::SPECIAL);
        let n_targets = toks.len() - 1;
        let mut start = 0;
        while start < n_targets {
            let end = (start + context_len).min(n_targets);
            out.push(Window {
                inputs: toks[start..end].to_vec(),
                targets: toks[start + 1..end + 1].to_vec(),
                target_pos: pos[start + 1..end + 1].to_vec(),
            });
            start = end;
        }
    }
    out
}

/// Mean per-target loss over the batch and its exact gradient. `dropout_seed`
/// enables dropout with masks drawn from a stream seeded by it.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    partition: Option<&PosPartition>,
    batch: &[Window],
    head: HeadKind,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams), NetError> {
    let n_targets: usize = batch.iter().map(|w| w.targets.len()).sum();
    if n_targets == 0 {
        return Err(NetError::EmptyInput);
    }
    let scale = 1.0 / n_targets as f64;
    let mut grads = params.zeros_like();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut total = 0.0;
    for w in batch {
        let mode = match rng.as_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let (hidden, cache) = forward_cached(params, config, &w.inputs, mode)?;
        let targets: Vec<(usize, usize)> = w.targets.iter().copied().zip(w.target_pos.iter().copied()).collect();
        let (loss, d_hidden) =
            heads::head_loss_and_grads(params, partition, head, hidden.view(), &targets, scale, &mut grads)?;
        total += loss;
        backward(params, config, &cache, d_hidden, &mut grads);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(NetError::NonFiniteLoss);
    }
    Ok((loss, grads))
}

/// Mean per-target loss without dropout.
pub fn evaluate_loss(
    params: &ModelParams,
    config: &ModelConfig,
    partition: Option<&PosPartition>,
    windows: &[Window],
    head: HeadKind,
) -> Result<f64, NetError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scratch = params.zeros_like();
    for w in windows {
        let hidden = forward(params, config, &w.inputs, Mode::Eval)?;
        let targets: Vec<(usize, usize)> = w.targets.iter().copied().zip(w.target_pos.iter().copied()).collect();
        let (loss, _) = heads::head_loss_and_grads(params, partition, head, hidden.view(), &targets, 1.0, &mut scratch)?;
        total += loss;
        count += targets.len();
    }
    if count == 0 {
        return Err(NetError::EmptyInput);
    }
    Ok(total / count as f64)
}

/// Adam hyperparameters; defaults are learning rate 1e-4, betas (0.9, 0.999),
/// epsilon 1e-8, gradient clipping 0.25, weight decay 0.001.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 0.25,
            weight_decay: 0.001,
        }
    }
}

/// Adam moments shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first_moment: ModelParams,
    second_moment: ModelParams,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Clips `grads` to the global-norm threshold, then applies one Adam step
    /// with decoupled weight decay.
    pub fn update(&mut self, params: &mut ModelParams, grads: &mut ModelParams) {
        let c = &self.config;
        let norm = grads.squared_norm().sqrt();
        if c.grad_clip > 0.0 && norm > c.grad_clip {
            grads.scale(c.grad_clip / norm);
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.learning_rate;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon) + c.weight_decay * p[i];
                p[i] -= lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 12,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One training-log line. Epoch 0 is the untrained model and has no training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
    /// Not serialized, so log files stay byte-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<ModelParams>,
        log: Vec<EpochLog>,
    },
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Trains from the seeded initialization. Single-threaded and bit-deterministic
/// in `config.seed`; `on_epoch` sees each log line as it is produced.
pub fn train(
    config: &ModelConfig,
    partition: Option<&PosPartition>,
    train_set: &EncodedCorpus,
    valid_set: Option<&EncodedCorpus>,
    head: HeadKind,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if head == HeadKind::Posg && partition.is_none() {
        return Err(NetError::Config("the POS head needs a partition".into()).into());
    }
    if options.batch_size == 0 {
        return Err(NetError::Config("batch_size must be at least 1".into()).into());
    }
    let mut params = ModelParams::init(config);
    let log = train_from(config, partition, train_set, valid_set, head, options, &mut params, &mut on_epoch)?;
    Ok(TrainOutcome { params, log })
}

#[allow(clippy::too_many_arguments)]
fn train_from(
    config: &ModelConfig,
    partition: Option<&PosPartition>,
    train_set: &EncodedCorpus,
    valid_set: Option<&EncodedCorpus>,
    head: HeadKind,
    options: &TrainOptions,
    params: &mut ModelParams,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    let started = Instant::now();
    let mut windows = make_windows(train_set, config.context_len);
    let valid_windows = valid_set.map(|v| make_windows(v, config.context_len));
    let mut log = Vec::new();
    let mut record = |entry: EpochLog, log: &mut Vec<EpochLog>| {
        on_epoch(&entry);
        log.push(entry);
    };
    let valid_loss = |p: &ModelParams| -> Result<Option<f64>, NetError> {
        valid_windows
            .as_deref()
            .map(|w| evaluate_loss(p, config, partition, w, head))
            .transpose()
    };

    record(
        EpochLog {
            epoch: 0,
            train_loss: None,
            valid_loss: valid_loss(params)?,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        &mut log,
    );

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ee_d0fb_a7c4);
    let mut optimizer = OptimizerState::new(options.optimizer.clone(), params);
    let mut step = 0usize;
    for epoch in 1..=options.epochs {
        shuffle(&mut windows, &mut order_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_targets = 0usize;
        for batch in windows.chunks(options.batch_size) {
            let dropout_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64 + 1);
            let result = loss_and_grads(params, config, partition, batch, head, Some(dropout_seed));
            let (loss, mut grads) = match result {
                Ok(v) => v,
                Err(NetError::NonFiniteLoss) | Err(NetError::Head(HeadError::NonFinite)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(params.clone()),
                        log,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let before = params.clone();
            optimizer.update(params, &mut grads);
            if !params.all_finite() {
                *params = before.clone();
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(before),
                    log,
                });
            }
            let n: usize = batch.iter().map(|w| w.targets.len()).sum();
            epoch_loss += loss * n as f64;
            epoch_targets += n;
            step += 1;
        }
        record(
            EpochLog {
                epoch,
                train_loss: (epoch_targets > 0).then(|| epoch_loss / epoch_targets as f64),
                valid_loss: valid_loss(params)?,
                wall_seconds: started.elapsed().as_secs_f64(),
            },
            &mut log,
        );
    }
    Ok(log)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model: architecture, head and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub params: ModelParams,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        save_checkpoint(&self.params, &self.config, self.head)
    }
}

/// Layout (all little-endian): magic, `u32` version, config fields as `u64`
/// except `dropout_rate` (`f64`), head byte, `u32` tensor count, then per
/// tensor a `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims, `f64` data.
pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, head: HeadKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        config.n_layers,
        config.n_heads,
        config.d_model,
        config.d_ff,
        config.context_len,
        config.vocab_size,
        config.pos_count,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&config.dropout_rate.to_le_bytes());
    out.extend_from_slice(&config.seed.to_le_bytes());
    out.push(match head {
        HeadKind::Mle => 0,
        HeadKind::Posg => 1,
    });
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    load_checkpoint_expecting(bytes, CHECKPOINT_VERSION)
}

/// Like [`load_checkpoint`] for a reader that understands `expected_version` only.
pub fn load_checkpoint_expecting(bytes: &[u8], expected_version: u32) -> Result<Model, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != expected_version {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: expected_version,
        });
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Config("dimension overflow".into()))?;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        context_len: dims[4],
        vocab_size: dims[5],
        pos_count: dims[6],
        dropout_rate: r.f64()?,
        seed: r.u64()?,
    };
    let head = match r.take(1)?[0] {
        0 => HeadKind::Mle,
        1 => HeadKind::Posg,
        other => return Err(CheckpointError::Config(format!("unknown head byte {other}"))),
    };
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    // Shapes are validated against the config before any large allocation.
    let expected: Vec<(String, Vec<usize>)> = expected_shapes(&config);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: format!("<{count} tensors, expected {}>", expected.len()),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::ShapeMismatch { name: name.clone() })?;
        let rank = r.u32()? as usize;
        let mut found_shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            found_shape.push(r.u64()? as usize);
        }
        if found != name || &found_shape != shape {
            return Err(CheckpointError::ShapeMismatch { name: found.to_string() });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        data.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect::<Vec<_>>());
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let mut params = ModelParams::init_with_scale(&config, 0.0);
    for (dst, src) in params.tensors_mut().into_iter().zip(data) {
        dst.copy_from_slice(&src);
    }
    Ok(Model { config, head, params })
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut out = vec![
        ("token_input".to_string(), vec![config.vocab_size, d]),
        ("positional".to_string(), vec![config.context_len, d]),
    ];
    for i in 0..config.n_layers {
        for (n, shape) in [
            ("ln1_gain", vec![d]),
            ("ln1_bias", vec![d]),
            ("w_qkv", vec![d, 3 * d]),
            ("b_qkv", vec![3 * d]),
            ("w_out", vec![d, d]),
            ("b_out", vec![d]),
            ("ln2_gain", vec![d]),
            ("ln2_bias", vec![d]),
            ("w_ff1", vec![d, f]),
            ("b_ff1", vec![f]),
            ("w_ff2", vec![f, d]),
            ("b_ff2", vec![d]),
        ] {
            out.push((format!("layers.{i}.{n}"), shape));
        }
    }
    out.push(("final_gain".into(), vec![d]));
    out.push(("final_bias".into(), vec![d]));
    out.push(("token_output".into(), vec![config.vocab_size, d]));
    out.push(("pos_output".into(), vec![config.pos_count, d]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EncodedSequence;

    fn tiny(dropout_rate: f64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            context_len: 6,
            vocab_size: 9,
            pos_count: 3,
            dropout_rate,
            seed: 7,
        }
    }

    fn partition() -> PosPartition {
        // 0..=3 special, 4..=6 tag 1, 7..=8 tag 2, token 6 also tag 2.
        let sets = vec![
            vec![0],
            vec![0],
            vec![0],
            vec![0],
            vec![1],
            vec![1],
            vec![1, 2],
            vec![2],
            vec![2],
        ];
        PosPartition::from_tag_sets(sets, 3).unwrap()
    }

    fn batch() -> Vec<Window> {
        vec![
            Window {
                inputs: vec![1, 4, 7, 6, 5],
                targets: vec![4, 7, 6, 5, 2],
                target_pos: vec![1, 2, 2, 1, 0],
            },
            Window {
                inputs: vec![1, 8, 6],
                targets: vec![8, 6, 4],
                target_pos: vec![2, 1, 1],
            },
        ]
    }

    fn loss_at(params: &ModelParams, cfg: &ModelConfig, head: HeadKind, seed: Option<u64>) -> f64 {
        let part = partition();
        loss_and_grads(params, cfg, Some(&part), &batch(), head, seed).unwrap().0
    }

    fn gradient_check(head: HeadKind, dropout_rate: f64, seed: Option<u64>) {
        let cfg = tiny(dropout_rate);
        let params = ModelParams::init_with_scale(&cfg, 0.5);
        let part = partition();
        let (_, grads) = loss_and_grads(&params, &cfg, Some(&part), &batch(), head, seed).unwrap();
        let eps = 1e-5;
        let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
        let mut worst = 0.0f64;
        for (ti, name) in names.iter().enumerate() {
            let n = analytic[ti].len();
            // Stride keeps the check fast while touching every tensor.
            for i in (0..n).step_by(n.div_ceil(7).max(1)) {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][i] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][i] -= eps;
                let numeric = (loss_at(&plus, &cfg, head, seed) - loss_at(&minus, &cfg, head, seed)) / (2.0 * eps);
                let a = analytic[ti][i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_mle() {
        gradient_check(HeadKind::Mle, 0.0, None);
    }

    #[test]
    fn gradients_match_finite_differences_posg() {
        gradient_check(HeadKind::Posg, 0.0, None);
    }

    #[test]
    fn gradients_match_finite_differences_with_fixed_dropout_masks() {
        gradient_check(HeadKind::Posg, 0.3, Some(11));
        gradient_check(HeadKind::Mle, 0.3, Some(12));
    }

    fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * r * g + b).collect()
    }

    fn ref_affine(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
        (0..w.ncols())
            .map(|j| b[j] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
            .collect()
    }

    /// Plain-loop forward pass, one position at a time.
    fn reference_forward(p: &ModelParams, cfg: &ModelConfig, tokens: &[usize]) -> Vec<Vec<f64>> {
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| (0..d).map(|j| p.token_input[[id, j]] + p.positional[[t, j]]).collect())
            .collect();
        for l in &p.layers {
            let qkv: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| {
                    let a = ref_layer_norm(x, l.ln1_gain.as_slice().unwrap(), l.ln1_bias.as_slice().unwrap());
                    ref_affine(&a, &l.w_qkv, &l.b_qkv)
                })
                .collect();
            for i in 0..xs.len() {
                let mut ctx = vec![0.0; d];
                for h in 0..cfg.n_heads {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let w = (s - m).exp() / z;
                        for c in 0..dh {
                            ctx[h * dh + c] += w * qkv[j][2 * d + h * dh + c];
                        }
                    }
                }
                let o = ref_affine(&ctx, &l.w_out, &l.b_out);
                for j in 0..d {
                    xs[i][j] += o[j];
                }
            }
            for x in xs.iter_mut() {
                let c = ref_layer_norm(x, l.ln2_gain.as_slice().unwrap(), l.ln2_bias.as_slice().unwrap());
                let f: Vec<f64> = ref_affine(&c, &l.w_ff1, &l.b_ff1)
                    .into_iter()
                    .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                    .collect();
                let f2 = ref_affine(&f, &l.w_ff2, &l.b_ff2);
                for j in 0..d {
                    x[j] += f2[j];
                }
            }
        }
        xs.iter()
            .map(|x| ref_layer_norm(x, p.final_gain.as_slice().unwrap(), p.final_bias.as_slice().unwrap()))
            .collect()
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let cfg = tiny(0.1);
        let p = ModelParams::init_with_scale(&cfg, 0.4);
        let tokens = [1, 5, 8, 2, 0, 7];
        let h = forward(&p, &cfg, &tokens, Mode::Eval).unwrap();
        let r = reference_forward(&p, &cfg, &tokens);
        for t in 0..tokens.len() {
            for j in 0..cfg.d_model {
                assert!((h.row(t)[j] - r[t][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hidden_state_is_causal() {
        let cfg = tiny(0.0);
        let p = ModelParams::init_with_scale(&cfg, 0.4);
        let a = forward(&p, &cfg, &[1, 4, 5, 6, 7], Mode::Eval).unwrap();
        let b = forward(&p, &cfg, &[1, 4, 5, 8, 3], Mode::Eval).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny(0.0);
        let p = ModelParams::init(&cfg);
        assert_eq!(forward(&p, &cfg, &[], Mode::Eval), Err(NetError::EmptyInput));
        assert!(matches!(
            forward(&p, &cfg, &[1; 7], Mode::Eval),
            Err(NetError::TooLong { len: 7, context_len: 6 })
        ));
        assert!(matches!(
            forward(&p, &cfg, &[1, 9], Mode::Eval),
            Err(NetError::TokenOutOfRange { position: 1, id: 9, .. })
        ));
        let mut bad = cfg.clone();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dropout_changes_train_mode_only() {
        let cfg = tiny(0.5);
        let p = ModelParams::init_with_scale(&cfg, 0.4);
        let e1 = forward(&p, &cfg, &[1, 4, 5], Mode::Eval).unwrap();
        let e2 = forward(&p, &cfg, &[1, 4, 5], Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = forward(&p, &cfg, &[1, 4, 5], Mode::Train(&mut rng)).unwrap();
        assert_ne!(e1, t);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let cfg = tiny(0.1);
        let mut params = ModelParams::init(&cfg);
        let before = params.clone();
        let mut opt = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &params,
        );
        let (_, mut g) = loss_and_grads(&params, &cfg, None, &batch(), HeadKind::Mle, Some(1)).unwrap();
        opt.update(&mut params, &mut g);
        assert_eq!(params, before);
    }

    #[test]
    fn gradient_clipping_bounds_global_norm() {
        let cfg = tiny(0.0);
        let mut params = ModelParams::init(&cfg);
        let mut g = params.zeros_like();
        g.token_output.fill(10.0);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &params);
        opt.update(&mut params, &mut g);
        assert!((g.squared_norm().sqrt() - 0.25).abs() < 1e-12);
    }

    fn toy_corpus() -> EncodedCorpus {
        let seq = |t: &[usize], p: &[usize]| EncodedSequence {
            tokens: t.to_vec(),
            pos: p.to_vec(),
        };
        EncodedCorpus {
            sequences: vec![
                seq(&[4, 7, 5, 8, 6, 4, 7, 5], &[1, 2, 1, 2, 2, 1, 2, 1]),
                seq(&[5, 8, 4, 7], &[1, 2, 1, 2]),
                seq(&[6, 6, 4], &[1, 2, 1]),
            ],
            coerced: 0,
        }
    }

    #[test]
    fn windows_wrap_sequences_and_split_at_context() {
        let w = make_windows(&toy_corpus(), 4);
        // 9 targets -> 4 + 4 + 1, 5 -> 4 + 1, 4 -> 4.
        let lens: Vec<usize> = w.iter().map(|w| w.inputs.len()).collect();
        assert_eq!(lens, vec![4, 4, 1, 4, 1, 4]);
        assert_eq!(w[0].inputs[0], Vocabulary::BOS);
        assert_eq!(w[2].targets, vec![Vocabulary::EOS]);
        assert_eq!(w[0].target_pos, vec![1, 2, 1, 2]);
        assert_eq!(w[1].inputs[0], 8);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = tiny(0.1);
        let part = partition();
        let corpus = toy_corpus();
        let opts = TrainOptions {
            epochs: 30,
            batch_size: 2,
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
        };
        let run = || train(&cfg, Some(&part), &corpus, Some(&corpus), HeadKind::Posg, &opts, |_| {}).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 31);
        assert_eq!(a.log[0].train_loss, None);
        let strip = |l: &[EpochLog]| l.iter().map(|e| (e.epoch, e.train_loss, e.valid_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        let first = a.log[0].valid_loss.unwrap();
        let last = a.log[30].valid_loss.unwrap();
        assert!(last < first - 0.5, "{first} -> {last}");
    }

    #[test]
    fn posg_training_requires_partition() {
        let cfg = tiny(0.0);
        let r = train(&cfg, None, &toy_corpus(), None, HeadKind::Posg, &TrainOptions::default(), |_| {});
        assert!(matches!(r, Err(TrainError::Net(NetError::Config(_)))));
    }

    #[test]
    fn divergence_returns_last_good_weights() {
        let cfg = tiny(0.0);
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 1,
            optimizer: OptimizerConfig {
                learning_rate: f64::INFINITY,
                grad_clip: 0.0,
                ..Default::default()
            },
        };
        match train(&cfg, None, &toy_corpus(), None, HeadKind::Mle, &opts, |_| {}) {
            Err(TrainError::Diverged { last_good, step, .. }) => {
                assert!(last_good.all_finite());
                assert_eq!(step, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny(0.1);
        let p = ModelParams::init_with_scale(&cfg, 0.3);
        let bytes = save_checkpoint(&p, &cfg, HeadKind::Posg);
        let c = load_checkpoint(&bytes).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.config, cfg);
        assert_eq!(c.head, HeadKind::Posg);
        assert_eq!(save_checkpoint(&c.params, &c.config, c.head), bytes);
    }

    #[test]
    fn checkpoint_errors_are_typed() {
        let cfg = tiny(0.1);
        let p = ModelParams::init(&cfg);
        let bytes = save_checkpoint(&p, &cfg, HeadKind::Mle);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(load_checkpoint(&bad), Err(CheckpointError::BadMagic));
        assert_eq!(
            load_checkpoint_expecting(&bytes, 2),
            Err(CheckpointError::VersionMismatch { found: 1, expected: 2 })
        );
        assert_eq!(load_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated));
        assert_eq!(load_checkpoint(&bytes[..5]), Err(CheckpointError::Truncated));
        // Shrink d_ff in the header: the first feed-forward tensor no longer fits.
        let mut shrunk = bytes.clone();
        shrunk[12 + 3 * 8] = 11;
        assert!(matches!(load_checkpoint(&shrunk), Err(CheckpointError::ShapeMismatch { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(load_checkpoint(&extra), Err(CheckpointError::TrailingBytes(1)));
    }
}
