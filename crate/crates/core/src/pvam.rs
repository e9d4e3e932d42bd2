//! Parallel visual attention: every reading order `t` queries the visual
//! features independently,
//!
//! ```text
//! e[t,ij] = w_e . tanh(W_o f_o(t) + W_v v[ij])
//! alpha[t] = softmax_ij(e[t])
//! g[t] = sum_ij alpha[t,ij] v[ij]
//! ```
//!
//! so all `N` aligned features come out of one batched evaluation.

use crate::backbone::FeatureMap2D;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::{Real, Var};

pub const W_E: &str = "pvam.w_e";
pub const W_O: &str = "pvam.w_o";
pub const W_V: &str = "pvam.w_v";
pub const ORDER_EMBED: &str = "pvam.order_embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PvamConfig {
    /// Number of reading orders `N`.
    pub max_len: usize,
    pub d_model: usize,
}

pub fn init_pvam<T: Real>(store: &mut ParamStore<T>, init: &mut Init, cfg: &PvamConfig) {
    let d = cfg.d_model;
    store.insert(W_E, init.glorot(&[d, 1], d, 1));
    store.insert(W_O, init.glorot(&[d, d], d, d));
    store.insert(W_V, init.glorot(&[d, d], d, d));
    store.insert(ORDER_EMBED, init.glorot(&[cfg.max_len, d], cfg.max_len, d));
}

/// `G: [B, n, d]` and the attention maps `alpha: [B, n, h*w]` for the
/// queried reading orders.
#[derive(Clone, Copy, Debug)]
pub struct AlignedFeatures {
    pub features: Var,
    pub attention: Var,
}

fn attend_orders<T: Real>(cx: &mut Ctx<T>, v: &FeatureMap2D, orders: &[usize]) -> Result<AlignedFeatures> {
    let w_o = cx.param(W_O)?;
    let d = cx.g.shape(w_o)[0];
    if v.channels != d {
        return Err(Error::Config(format!(
            "visual features have width {}, attention expects {d}",
            v.channels
        )));
    }
    let table = cx.param(ORDER_EMBED)?;
    let table_rows = cx.g.shape(table)[0];
    if let Some(&t) = orders.iter().find(|&&t| t >= table_rows) {
        return Err(Error::Index {
            what: "reading order",
            index: t,
            bound: table_rows,
        });
    }
    let (b, cells, n) = (v.batch, v.cells(), orders.len());
    let w_v = cx.param(W_V)?;
    let w_e = cx.param(W_E)?;

    let order = cx.g.gather(table, orders)?;
    let query = cx.g.matmul(order, w_o)?;
    let query = cx.g.reshape(query, &[1, n, 1, d])?;
    let query = cx.g.expand(query, &[b, n, cells, d])?;

    let flat_v = cx.g.reshape(v.features, &[b * cells, d])?;
    let keys = cx.g.matmul(flat_v, w_v)?;
    let keys = cx.g.reshape(keys, &[b, 1, cells, d])?;
    let keys = cx.g.expand(keys, &[b, n, cells, d])?;

    let hidden = cx.g.add(query, keys)?;
    let hidden = cx.g.tanh(hidden);
    let hidden = cx.g.reshape(hidden, &[b * n * cells, d])?;
    let scores = cx.g.matmul(hidden, w_e)?;
    let scores = cx.g.reshape(scores, &[b, n, cells])?;
    let attention = cx.g.softmax(scores);
    let features = cx.g.batch_matmul(attention, v.features, false)?;
    Ok(AlignedFeatures { features, attention })
}

/// Aligned features for all reading orders `0..N` at once.
pub fn attend_all<T: Real>(cx: &mut Ctx<T>, v: &FeatureMap2D) -> Result<AlignedFeatures> {
    let table = cx.param(ORDER_EMBED)?;
    let n = cx.g.shape(table)[0];
    let orders: Vec<usize> = (0..n).collect();
    attend_orders(cx, v, &orders)
}

/// Aligned feature of a single reading order `t`: `[B, 1, d]` and
/// `[B, 1, h*w]`. Matches row `t` of [`attend_all`] exactly.
pub fn attend_single<T: Real>(cx: &mut Ctx<T>, v: &FeatureMap2D, t: usize) -> Result<AlignedFeatures> {
    attend_orders(cx, v, &[t])
}
