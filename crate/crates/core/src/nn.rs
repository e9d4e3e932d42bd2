//! Reusable layers: parameter storage, linear and layer-norm helpers,
//! attention masks, multi-head attention, the transformer unit, sinusoidal
//! positional encodings and embedding lookup.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_many, GradCheckReport, Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive logit applied to disallowed attention keys.
pub const MASK_FILL: f64 = -1e9;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix<'s>(&'s self, prefix: &'s str) -> impl Iterator<Item = (&'s str, &'s Tensor<T>)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Parameter initialization. Values are drawn in `f64` and cast, so an `f32`
/// and an `f64` model built from the same seed agree up to rounding.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-limit..limit)))
    }

    pub fn zeros<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }
}

/// Forward-pass context: a fresh tape plus lazily bound parameters.
pub struct Ctx<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p, T: Real> Ctx<'p, T> {
    /// `trainable` controls whether bound parameters record gradients.
    pub fn new(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Runs `f` with a context that records onto an existing graph, with
    /// parameters bound as constants. Used to plug model code into
    /// gradient checks that own the tape.
    pub fn on_graph<R>(g: &mut Graph<T>, params: &'p ParamStore<T>, f: impl FnOnce(&mut Self) -> R) -> R {
        let mut cx = Self::new(params, false);
        std::mem::swap(&mut cx.g, g);
        let out = f(&mut cx);
        std::mem::swap(&mut cx.g, g);
        out
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.g.leaf(value, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.g.constant(value)
    }

    /// Makes `name` resolve to an existing node instead of the stored
    /// tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Parameters used so far, in name order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter reached by the last backward pass.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.g.grad(v).map(|gr| (k.clone(), gr.to_vec())))
            .collect()
    }
}

/// Finite-difference check of the gradients of `f` with respect to the
/// named parameters of `store`. Every other parameter stays constant.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let inputs = names
        .iter()
        .map(|n| store.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    grad_check_many(
        |g, vars| {
            Ctx::on_graph(g, store, |cx| {
                for (name, &v) in names.iter().zip(vars) {
                    cx.bind(name, v);
                }
                f(cx)
            })
        },
        &inputs,
        eps,
        tol,
    )
}

// ---- layers ----------------------------------------------------------------

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) {
    store.insert(format!("{prefix}.weight"), init.glorot(&[d_in, d_out], d_in, d_out));
    if bias {
        store.insert(format!("{prefix}.bias"), init.zeros(&[d_out]));
    }
}

/// `x W (+ b)` applied to the last axis of `x`.
pub fn linear<T: Real>(cx: &mut Ctx<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = cx.param(&format!("{prefix}.weight"))?;
    let shape = cx.g.shape(x).to_vec();
    let d_in = *shape.last().unwrap_or(&1);
    let d_out = cx.g.shape(w)[1];
    let rows = shape.iter().product::<usize>() / d_in.max(1);
    let flat = cx.g.reshape(x, &[rows, d_in])?;
    let mut y = cx.g.matmul(flat, w)?;
    let bias_name = format!("{prefix}.bias");
    if cx.params().contains(&bias_name) {
        let b = cx.param(&bias_name)?;
        y = cx.g.add_trailing(y, b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = d_out;
    cx.g.reshape(y, &out_shape)
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), init.ones(&[d]));
    store.insert(format!("{prefix}.bias"), init.zeros(&[d]));
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<T: Real>(cx: &mut Ctx<T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = cx.param(&format!("{prefix}.gain"))?;
    let bias = cx.param(&format!("{prefix}.bias"))?;
    let n = cx.g.layer_norm(x, LAYER_NORM_EPS);
    let scaled = cx.g.mul_trailing(n, gain)?;
    cx.g.add_trailing(scaled, bias)
}

/// Row lookup `table[indices]`, gradients scatter-added into the table.
pub fn embed<T: Real>(cx: &mut Ctx<T>, indices: &[usize], table: &str) -> Result<Var> {
    let t = cx.param(table)?;
    cx.g.gather(t, indices)
}

// ---- positional encodings ----------------------------------------------------

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<T: Real>(length: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width {d} must be even")));
    }
    Ok(Tensor::from_fn(&[length, d], |flat| {
        let (p, j) = (flat / d, flat % d);
        let i2 = (j - j % 2) as f64;
        let angle = p as f64 / 10000f64.powf(i2 / d as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

// ---- attention ---------------------------------------------------------------

/// Boolean `[rows, cols]` matrix; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        let mask = Self { rows, cols, allowed };
        if let Some(r) = (0..rows).find(|&r| !mask.row(r).iter().any(|&a| a)) {
            return Err(Error::Contract(format!("attention mask row {r} allows no keys")));
        }
        Ok(mask)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q).expect("diagonal always allowed")
    }

    /// Query `t` sees keys `t..len`.
    pub fn anti_causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k >= q).expect("diagonal always allowed")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// 0 where allowed, [`MASK_FILL`] elsewhere.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let fill = T::lit(MASK_FILL);
        Tensor::from_fn(
            &[self.rows, self.cols],
            |i| if self.allowed[i] { T::zero() } else { fill },
        )
    }
}

/// Normalization placement inside the transformer unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    /// `LN(x + f(x))`, the original transformer ordering.
    Post,
    /// `x + f(LN(x))`.
    Pre,
}

pub const NORM_ORDER: NormOrder = NormOrder::Post;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub norm: NormOrder,
}

impl TransformerConfig {
    pub fn new(d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let cfg = Self {
            d_model,
            heads,
            d_ff,
            norm: NORM_ORDER,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of head count {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

pub fn init_attention<T: Real>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, d: usize) {
    for name in ["q", "k", "v", "o"] {
        init_linear(store, init, &format!("{prefix}.{name}"), d, d, true);
    }
}

/// Attention output and the per-head weights `[B*heads, L_q, L_k]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Splits `[B, L, d]` into `[B*h, L, d/h]`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, d / heads])
}

fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (l, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, l, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, l, heads * dh])
}

/// Scaled dot-product attention with `heads` heads over `q: [B,L_q,d]`,
/// `k, v: [B,L_k,d]`. Disallowed keys get [`MASK_FILL`] added before the
/// softmax.
pub fn multi_head_attention<T: Real>(
    cx: &mut Ctx<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    prefix: &str,
    heads: usize,
) -> Result<AttentionOutput> {
    let (sq, sk) = (cx.g.shape(q).to_vec(), cx.g.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || cx.g.shape(v) != sk.as_slice() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let (batch, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if mask.rows() != lq || mask.cols() != lk {
        return Err(Error::Shape {
            op: "attention mask",
            lhs: vec![mask.rows(), mask.cols()],
            rhs: vec![lq, lk],
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let qp = linear(cx, q, &format!("{prefix}.q"))?;
    let kp = linear(cx, k, &format!("{prefix}.k"))?;
    let vp = linear(cx, v, &format!("{prefix}.v"))?;
    let qh = split_heads(&mut cx.g, qp, heads)?;
    let kh = split_heads(&mut cx.g, kp, heads)?;
    let vh = split_heads(&mut cx.g, vp, heads)?;
    let scores = cx.g.batch_matmul(qh, kh, true)?;
    let mut scores = cx.g.scale(scores, T::lit(1.0 / ((d / heads) as f64).sqrt()));
    if !mask.is_full() {
        let m = cx.constant(mask.additive());
        scores = cx.g.add_trailing(scores, m)?;
    }
    let weights = cx.g.softmax(scores);
    let ctx = cx.g.batch_matmul(weights, vh, false)?;
    let merged = merge_heads(&mut cx.g, ctx, batch, heads)?;
    let output = linear(cx, merged, &format!("{prefix}.o"))?;
    Ok(AttentionOutput { output, weights })
}

pub fn init_transformer_unit<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    cfg: &TransformerConfig,
) {
    init_attention(store, init, &format!("{prefix}.attn"), cfg.d_model);
    init_linear(store, init, &format!("{prefix}.ff1"), cfg.d_model, cfg.d_ff, true);
    init_linear(store, init, &format!("{prefix}.ff2"), cfg.d_ff, cfg.d_model, true);
    init_layer_norm(store, init, &format!("{prefix}.ln1"), cfg.d_model);
    init_layer_norm(store, init, &format!("{prefix}.ln2"), cfg.d_model);
}

/// Self-attention plus feed-forward block over `x: [B, L, d]`, each with a
/// residual connection and layer norm placed per `cfg.norm`.
pub fn transformer_unit<T: Real>(
    cx: &mut Ctx<T>,
    x: Var,
    mask: &AttentionMask,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Result<Var> {
    let attn = format!("{prefix}.attn");
    let (ln1, ln2) = (format!("{prefix}.ln1"), format!("{prefix}.ln2"));
    match cfg.norm {
        NormOrder::Post => {
            let a = multi_head_attention(cx, x, x, x, mask, &attn, cfg.heads)?.output;
            let r = cx.g.add(x, a)?;
            let h = layer_norm(cx, r, &ln1)?;
            let f = feed_forward(cx, h, prefix)?;
            let r = cx.g.add(h, f)?;
            layer_norm(cx, r, &ln2)
        }
        NormOrder::Pre => {
            let n = layer_norm(cx, x, &ln1)?;
            let a = multi_head_attention(cx, n, n, n, mask, &attn, cfg.heads)?.output;
            let h = cx.g.add(x, a)?;
            let n = layer_norm(cx, h, &ln2)?;
            let f = feed_forward(cx, n, prefix)?;
            cx.g.add(h, f)
        }
    }
}

fn feed_forward<T: Real>(cx: &mut Ctx<T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(cx, x, &format!("{prefix}.ff1"))?;
    let h = cx.g.relu(h);
    linear(cx, h, &format!("{prefix}.ff2"))
}
