//! Serial attention decoder used as the one-way baseline. Step `t` attends
//! the visual features with the previous hidden state as query, then feeds
//! the attended context and the previous character embedding through a
//! gated recurrent cell:
//!
//! ```text
//! a_t = softmax_ij(w_e . tanh(W_h H_{t-1} + W_v v_ij))
//! c_t = sum_ij a_t,ij v_ij
//! H_t = GRU([c_t, e_{t-1}], H_{t-1})
//! p(y_t) = softmax(W_c H_t + b_c)
//! ```

use std::time::{Duration, Instant};

use crate::backbone::FeatureMap2D;
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, Ctx, Init, ParamStore};
use crate::tensor::{Real, Tensor, Var};

pub const ATT_W_H: &str = "serial.att.w_h";
pub const ATT_W_V: &str = "serial.att.w_v";
pub const ATT_W_E: &str = "serial.att.w_e";
pub const EMBED: &str = "serial.embed";
pub const GRU_X: &str = "serial.gru.x";
pub const GRU_H: &str = "serial.gru.h";
pub const CLS: &str = "serial.cls";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerialConfig {
    /// Output classes `K`, including EOS as the last class.
    pub num_classes: usize,
    pub d_model: usize,
}

impl SerialConfig {
    pub fn eos(&self) -> usize {
        self.num_classes - 1
    }

    /// Embedding-table row fed at the first step.
    pub fn start_row(&self) -> usize {
        self.num_classes
    }
}

pub fn init_serial<T: Real>(store: &mut ParamStore<T>, init: &mut Init, cfg: &SerialConfig) {
    let (d, k) = (cfg.d_model, cfg.num_classes);
    store.insert(ATT_W_H, init.glorot(&[d, d], d, d));
    store.insert(ATT_W_V, init.glorot(&[d, d], d, d));
    store.insert(ATT_W_E, init.glorot(&[d, 1], d, 1));
    store.insert(EMBED, init.glorot(&[k + 1, d], k + 1, d));
    init_linear(store, init, GRU_X, 2 * d, 3 * d, true);
    init_linear(store, init, GRU_H, d, 3 * d, true);
    init_linear(store, init, CLS, d, k, true);
}

/// Per-sequence state shared by all steps: the features and their key
/// projection, computed once.
struct Memory {
    values: Var,
    keys: Var,
    batch: usize,
    cells: usize,
    d: usize,
}

fn memory<T: Real>(cx: &mut Ctx<T>, v: &FeatureMap2D, cfg: &SerialConfig) -> Result<Memory> {
    let d = cfg.d_model;
    if v.channels != d {
        return Err(Error::Config(format!(
            "visual features have width {}, serial decoder expects {d}",
            v.channels
        )));
    }
    let (b, cells) = (v.batch, v.cells());
    let w_v = cx.param(ATT_W_V)?;
    let flat = cx.g.reshape(v.features, &[b * cells, d])?;
    let keys = cx.g.matmul(flat, w_v)?;
    let keys = cx.g.reshape(keys, &[b, cells, d])?;
    Ok(Memory {
        values: v.features,
        keys,
        batch: b,
        cells,
        d,
    })
}

/// One recurrent step. `h: [B, d]`, `prev: [B, d]`. Returns the new hidden
/// state and the step logits `[B, K]`.
fn step<T: Real>(cx: &mut Ctx<T>, m: &Memory, h: Var, prev: Var) -> Result<(Var, Var)> {
    let (b, cells, d) = (m.batch, m.cells, m.d);
    let w_h = cx.param(ATT_W_H)?;
    let w_e = cx.param(ATT_W_E)?;
    let q = cx.g.matmul(h, w_h)?;
    let q = cx.g.reshape(q, &[b, 1, d])?;
    let q = cx.g.expand(q, &[b, cells, d])?;
    let hidden = cx.g.add(m.keys, q)?;
    let hidden = cx.g.tanh(hidden);
    let hidden = cx.g.reshape(hidden, &[b * cells, d])?;
    let scores = cx.g.matmul(hidden, w_e)?;
    let scores = cx.g.reshape(scores, &[b, 1, cells])?;
    let alpha = cx.g.softmax(scores);
    let context = cx.g.batch_matmul(alpha, m.values, false)?;
    let context = cx.g.reshape(context, &[b, d])?;

    let x = cx.g.concat(&[context, prev], 1)?;
    let gx = linear(cx, x, GRU_X)?;
    let gh = linear(cx, h, GRU_H)?;
    let part = |cx: &mut Ctx<T>, v: Var, i: usize| cx.g.narrow(v, 1, i * d, d);
    let (xr, xz, xn) = (part(cx, gx, 0)?, part(cx, gx, 1)?, part(cx, gx, 2)?);
    let (hr, hz, hn) = (part(cx, gh, 0)?, part(cx, gh, 1)?, part(cx, gh, 2)?);
    let r = cx.g.add(xr, hr)?;
    let r = cx.g.sigmoid(r);
    let z = cx.g.add(xz, hz)?;
    let z = cx.g.sigmoid(z);
    let rn = cx.g.mul(r, hn)?;
    let n = cx.g.add(xn, rn)?;
    let n = cx.g.tanh(n);
    let keep = cx.g.mul(z, h)?;
    let one_minus = cx.g.affine(z, -T::one(), T::one());
    let fresh = cx.g.mul(one_minus, n)?;
    let h = cx.g.add(fresh, keep)?;
    let logits = linear(cx, h, CLS)?;
    Ok((h, logits))
}

fn initial_state<T: Real>(cx: &mut Ctx<T>, cfg: &SerialConfig, batch: usize) -> Result<(Var, Var)> {
    let h = cx.constant(Tensor::zeros(&[batch, cfg.d_model]));
    let table = cx.param(EMBED)?;
    let start = cx.g.gather(table, &vec![cfg.start_row(); batch])?;
    Ok((h, start))
}

/// Teacher-forced logits `[B, N, K]`: step `t` consumes the embedding of
/// label `t-1`. `labels` holds `B*N` entries.
pub fn serial_logits<T: Real>(
    cx: &mut Ctx<T>,
    v: &FeatureMap2D,
    labels: &[usize],
    max_len: usize,
    cfg: &SerialConfig,
) -> Result<Var> {
    let m = memory(cx, v, cfg)?;
    if labels.len() != m.batch * max_len {
        return Err(Error::Shape {
            op: "serial labels",
            lhs: vec![m.batch, max_len],
            rhs: vec![labels.len()],
        });
    }
    let (mut h, mut prev) = initial_state(cx, cfg, m.batch)?;
    let mut steps = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let (next, logits) = step(cx, &m, h, prev)?;
        steps.push(cx.g.reshape(logits, &[m.batch, 1, cfg.num_classes])?);
        h = next;
        if t + 1 < max_len {
            let rows: Vec<usize> = (0..m.batch).map(|b| labels[b * max_len + t]).collect();
            let table = cx.param(EMBED)?;
            prev = cx.g.gather(table, &rows)?;
        }
    }
    cx.g.concat(&steps, 1)
}

/// Teacher-forced mean cross-entropy over all `N` steps.
pub fn serial_train_loss<T: Real>(
    cx: &mut Ctx<T>,
    v: &FeatureMap2D,
    labels: &[usize],
    max_len: usize,
    cfg: &SerialConfig,
) -> Result<Var> {
    let logits = serial_logits(cx, v, labels, max_len, cfg)?;
    cx.g.cross_entropy_mean(logits, labels)
}

#[derive(Clone, Debug)]
pub struct SerialDecode {
    /// Decoded classes per batch entry, EOS excluded.
    pub sequences: Vec<Vec<usize>>,
    /// Argmax of every executed step, `[steps][B]`.
    pub raw: Vec<Vec<usize>>,
    /// Elapsed time since decoding began, recorded after each step.
    pub trace: Vec<Duration>,
}

impl SerialDecode {
    pub fn steps(&self) -> usize {
        self.raw.len()
    }
}

/// Greedy decoding. Each step feeds back the previous prediction; stops once
/// every sequence has produced EOS or after `max_len` steps.
pub fn serial_decode<T: Real>(
    cx: &mut Ctx<T>,
    v: &FeatureMap2D,
    max_len: usize,
    cfg: &SerialConfig,
) -> Result<SerialDecode> {
    decode_steps(cx, v, max_len, cfg, true)
}

/// Greedy decoding that always runs `max_len` steps, as a batch decoder does
/// when some sequence in the batch is `max_len` long. Sequences still end at
/// their first EOS.
pub fn serial_decode_full<T: Real>(
    cx: &mut Ctx<T>,
    v: &FeatureMap2D,
    max_len: usize,
    cfg: &SerialConfig,
) -> Result<SerialDecode> {
    decode_steps(cx, v, max_len, cfg, false)
}

fn decode_steps<T: Real>(
    cx: &mut Ctx<T>,
    v: &FeatureMap2D,
    max_len: usize,
    cfg: &SerialConfig,
    stop_at_eos: bool,
) -> Result<SerialDecode> {
    let began = Instant::now();
    let m = memory(cx, v, cfg)?;
    let (mut h, mut prev) = initial_state(cx, cfg, m.batch)?;
    let mut sequences = vec![Vec::new(); m.batch];
    let mut done = vec![false; m.batch];
    let mut raw = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_len {
        let (next, logits) = step(cx, &m, h, prev)?;
        let picks = cx.g.argmax_rows(logits);
        for (b, &c) in picks.iter().enumerate() {
            if !done[b] {
                if c == cfg.eos() {
                    done[b] = true;
                } else {
                    sequences[b].push(c);
                }
            }
        }
        raw.push(picks.clone());
        trace.push(began.elapsed());
        if stop_at_eos && done.iter().all(|&d| d) {
            break;
        }
        h = next;
        let table = cx.param(EMBED)?;
        prev = cx.g.gather(table, &picks)?;
    }
    Ok(SerialDecode { sequences, raw, trace })
}
