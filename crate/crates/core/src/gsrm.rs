//! Global semantic reasoning. Aligned visual features are mapped to
//! approximate character embeddings `e'` (classifier, argmax, lookup), then
//! two shifted, causally masked transformer streams read every position's
//! context while never seeing the position itself:
//!
//! ```text
//! forward  input  [START, e'_1 .. e'_{N-1}]  causal       -> sees e'_{<t}
//! backward input  [e'_2 .. e'_N, END]        anti-causal  -> sees e'_{>t}
//! s_t = forward_t + backward_t
//! ```

use crate::error::{Error, Result};
use crate::nn::{
    init_linear, init_transformer_unit, linear, positional_encoding, transformer_unit, AttentionMask, Ctx, Init,
    ParamStore, TransformerConfig,
};
use crate::tensor::{Real, Var};

pub const EMBED_CLS: &str = "gsrm.embed_cls";
pub const CHAR_EMBED: &str = "gsrm.char_embed";
pub const REASON_CLS: &str = "gsrm.reason_cls";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn prefix(self, shared: bool) -> &'static str {
        match (shared, self) {
            (true, _) => "gsrm.shared",
            (false, Direction::Forward) => "gsrm.fwd",
            (false, Direction::Backward) => "gsrm.bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GsrmConfig {
    /// Output classes `K`, including EOS.
    pub num_classes: usize,
    pub max_len: usize,
    pub transformer: TransformerConfig,
    pub units: usize,
    /// Both streams use one set of transformer weights.
    pub shared_streams: bool,
    /// Build `e'` from ground-truth labels during training.
    pub teacher_forcing: bool,
}

impl GsrmConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.units == 0 {
            return Err(Error::Config(
                "semantic reasoning needs at least one transformer unit".into(),
            ));
        }
        if self.num_classes == 0 || self.max_len == 0 {
            return Err(Error::Config("class count and sequence length must be positive".into()));
        }
        Ok(())
    }

    /// Embedding-table row of the start sentinel.
    pub fn start_row(&self) -> usize {
        self.num_classes
    }

    /// Embedding-table row of the end sentinel.
    pub fn end_row(&self) -> usize {
        self.num_classes + 1
    }
}

pub fn init_gsrm<T: Real>(store: &mut ParamStore<T>, init: &mut Init, cfg: &GsrmConfig) {
    let (d, k) = (cfg.transformer.d_model, cfg.num_classes);
    init_linear(store, init, EMBED_CLS, d, k, true);
    store.insert(CHAR_EMBED, init.glorot(&[k + 2, d], k + 2, d));
    let streams: &[Direction] = if cfg.shared_streams {
        &[Direction::Forward]
    } else {
        &[Direction::Forward, Direction::Backward]
    };
    for dir in streams {
        for u in 0..cfg.units {
            let prefix = format!("{}.unit{u}", dir.prefix(cfg.shared_streams));
            init_transformer_unit(store, init, &prefix, &cfg.transformer);
        }
    }
    init_linear(store, init, REASON_CLS, d, k, true);
}

/// Output of the visual-to-semantic block.
#[derive(Clone, Debug)]
pub struct SemanticEmbedding {
    /// `[B, N, K]`
    pub logits: Var,
    /// Argmax class per position, `B*N` entries.
    pub indices: Vec<usize>,
    /// `e'`, `[B, N, d]`
    pub embeddings: Var,
}

/// Classifies each aligned feature `g: [B, N, d]` and looks up the
/// embedding of the winning class. The lookup uses discrete indices, so the
/// classifier receives no gradient from anything downstream of `e'`.
/// With `teacher` set, `e'` is built from those labels instead.
pub fn visual_to_semantic<T: Real>(cx: &mut Ctx<T>, g: Var, teacher: Option<&[usize]>) -> Result<SemanticEmbedding> {
    let shape = cx.g.shape(g).to_vec();
    let logits = linear(cx, g, EMBED_CLS)?;
    let indices = cx.g.argmax_rows(logits);
    let rows = match teacher {
        Some(labels) => {
            if labels.len() != indices.len() {
                return Err(Error::Shape {
                    op: "teacher labels",
                    lhs: shape,
                    rhs: vec![labels.len()],
                });
            }
            labels
        }
        None => &indices,
    };
    let table = cx.param(CHAR_EMBED)?;
    let flat = cx.g.gather(table, rows)?;
    let embeddings = cx.g.reshape(flat, &shape)?;
    Ok(SemanticEmbedding {
        logits,
        indices,
        embeddings,
    })
}

/// Reasoned features `S: [B, N, d]` and their class logits `[B, N, K]`.
#[derive(Clone, Copy, Debug)]
pub struct SemanticFeatures {
    pub features: Var,
    pub logits: Var,
}

fn sentinel<T: Real>(cx: &mut Ctx<T>, row: usize, batch: usize, d: usize) -> Result<Var> {
    let table = cx.param(CHAR_EMBED)?;
    let rows = cx.g.gather(table, &vec![row; batch])?;
    cx.g.reshape(rows, &[batch, 1, d])
}

/// One directional stream over `e: [B, N, d]`.
pub fn stream<T: Real>(cx: &mut Ctx<T>, e: Var, cfg: &GsrmConfig, dir: Direction) -> Result<Var> {
    let shape = cx.g.shape(e).to_vec();
    if shape.len() != 3 || shape[2] != cfg.transformer.d_model {
        return Err(Error::Shape {
            op: "semantic reasoning input",
            lhs: shape,
            rhs: vec![cfg.transformer.d_model],
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let (input, mask) = match dir {
        Direction::Forward => {
            let start = sentinel(cx, cfg.start_row(), b, d)?;
            let input = if n > 1 {
                let head = cx.g.narrow(e, 1, 0, n - 1)?;
                cx.g.concat(&[start, head], 1)?
            } else {
                start
            };
            (input, AttentionMask::causal(n))
        }
        Direction::Backward => {
            let end = sentinel(cx, cfg.end_row(), b, d)?;
            let input = if n > 1 {
                let tail = cx.g.narrow(e, 1, 1, n - 1)?;
                cx.g.concat(&[tail, end], 1)?
            } else {
                end
            };
            (input, AttentionMask::anti_causal(n))
        }
    };
    let pe = cx.constant(positional_encoding(n, d)?);
    let mut x = cx.g.add_trailing(input, pe)?;
    for u in 0..cfg.units {
        let prefix = format!("{}.unit{u}", dir.prefix(cfg.shared_streams));
        x = transformer_unit(cx, x, &mask, &prefix, &cfg.transformer)?;
    }
    Ok(x)
}

/// Bidirectional reasoning: `s_t` depends on every `e'_j` except `e'_t`.
pub fn reason<T: Real>(cx: &mut Ctx<T>, e: Var, cfg: &GsrmConfig) -> Result<SemanticFeatures> {
    let fwd = stream(cx, e, cfg, Direction::Forward)?;
    let bwd = stream(cx, e, cfg, Direction::Backward)?;
    let features = cx.g.add(fwd, bwd)?;
    let logits = linear(cx, features, REASON_CLS)?;
    Ok(SemanticFeatures { features, logits })
}

/// Single-stream reasoning, for the one-way ablations.
pub fn reason_one_way<T: Real>(cx: &mut Ctx<T>, e: Var, cfg: &GsrmConfig, dir: Direction) -> Result<SemanticFeatures> {
    let features = stream(cx, e, cfg, dir)?;
    let logits = linear(cx, features, REASON_CLS)?;
    Ok(SemanticFeatures { features, logits })
}

/// Mean cross-entropy of the embedding-block logits.
pub fn embedding_loss<T: Real>(cx: &mut Ctx<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    cx.g.cross_entropy_mean(logits, labels)
}

/// Mean cross-entropy of the reasoning logits.
pub fn reasoning_loss<T: Real>(cx: &mut Ctx<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    cx.g.cross_entropy_mean(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use crate::tensor::{argmax, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EMBED_CLS_WEIGHT: &str = "gsrm.embed_cls.weight";
    const EMBED_CLS_BIAS: &str = "gsrm.embed_cls.bias";

    fn config(k: usize, n: usize, d: usize, units: usize, shared: bool) -> GsrmConfig {
        GsrmConfig {
            num_classes: k,
            max_len: n,
            transformer: TransformerConfig::new(d, 2, 2 * d).unwrap(),
            units,
            shared_streams: shared,
            teacher_forcing: false,
        }
    }

    fn store_for(cfg: &GsrmConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_gsrm(&mut store, &mut Init { rng: &mut rng }, cfg);
        store
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forced_class_selects_that_embedding_row() {
        let cfg = config(6, 4, 8, 1, false);
        let mut store = store_for(&cfg, 1);
        store.get_mut("gsrm.embed_cls.weight").unwrap().data_mut().fill(0.0);
        store.get_mut("gsrm.embed_cls.bias").unwrap().data_mut()[3] = 5.0;
        let mut cx = Ctx::new(&store, false);
        let g = cx.constant(random(&[2, 4, 8], 2));
        let out = visual_to_semantic(&mut cx, g, None).unwrap();
        assert_eq!(out.indices, vec![3; 8]);
        let row3 = store.get(CHAR_EMBED).unwrap().row(3);
        for r in 0..8 {
            assert_eq!(cx.g.value(out.embeddings).row(r), row3);
        }
    }

    #[test]
    fn ties_pick_lowest_class() {
        let cfg = config(6, 2, 4, 1, false);
        let mut store = store_for(&cfg, 1);
        store.get_mut("gsrm.embed_cls.weight").unwrap().data_mut().fill(0.0);
        let bias = store.get_mut("gsrm.embed_cls.bias").unwrap().data_mut();
        bias[1] = 2.0;
        bias[4] = 2.0;
        let mut cx = Ctx::new(&store, false);
        let g = cx.constant(random(&[1, 2, 4], 3));
        assert_eq!(visual_to_semantic(&mut cx, g, None).unwrap().indices, vec![1, 1]);
    }

    #[test]
    fn indices_match_loop_argmax() {
        let cfg = config(7, 5, 8, 1, false);
        let store = store_for(&cfg, 4);
        let gv = random(&[3, 5, 8], 5);
        let mut cx = Ctx::new(&store, false);
        let g = cx.constant(gv.clone());
        let out = visual_to_semantic(&mut cx, g, None).unwrap();
        let w = store.get("gsrm.embed_cls.weight").unwrap();
        let bias = store.get("gsrm.embed_cls.bias").unwrap();
        for r in 0..15 {
            let scores: Vec<f64> = (0..7)
                .map(|c| bias.data()[c] + (0..8).map(|j| gv.row(r)[j] * w.get(&[j, c])).sum::<f64>())
                .collect();
            assert_eq!(out.indices[r], argmax(&scores));
        }
    }

    #[test]
    fn teacher_forcing_uses_labels() {
        let cfg = config(5, 3, 4, 1, false);
        let store = store_for(&cfg, 6);
        let mut cx = Ctx::new(&store, false);
        let g = cx.constant(random(&[1, 3, 4], 7));
        let out = visual_to_semantic(&mut cx, g, Some(&[4, 0, 2])).unwrap();
        let table = store.get(CHAR_EMBED).unwrap();
        for (r, c) in [4, 0, 2].into_iter().enumerate() {
            assert_eq!(cx.g.value(out.embeddings).row(r), table.row(c));
        }
    }

    #[test]
    fn loss_reference_values() {
        let cfg = config(37, 4, 8, 1, false);
        let store = store_for(&cfg, 8);
        let mut cx = Ctx::new(&store, false);
        let uniform = cx.constant(Tensor::zeros(&[1, 4, 37]));
        let l = embedding_loss(&mut cx, uniform, &[0, 5, 9, 36]).unwrap();
        assert!((cx.g.value(l).item() - 37f64.ln()).abs() < 1e-12);

        let perfect = cx.constant(Tensor::from_fn(
            &[1, 2, 37],
            |i| if i % 37 == i / 37 { 50.0 } else { 0.0 },
        ));
        let l = reasoning_loss(&mut cx, perfect, &[0, 1]).unwrap();
        assert!(cx.g.value(l).item() < 1e-12);

        let logits = random(&[2, 3, 37], 9);
        let labels = [3, 0, 36, 12, 12, 7];
        let v = cx.constant(logits.clone());
        let l = reasoning_loss(&mut cx, v, &labels).unwrap();
        let oracle = (0..6)
            .map(|r| {
                let row = logits.row(r);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                z.ln() - row[labels[r]]
            })
            .sum::<f64>()
            / 6.0;
        assert!((cx.g.value(l).item() - oracle).abs() < 1e-12);
    }

    fn run_reason(store: &ParamStore<f32>, cfg: &GsrmConfig, e: &Tensor<f32>, dir: Option<Direction>) -> Tensor<f32> {
        let mut cx = Ctx::new(store, false);
        let v = cx.constant(e.clone());
        let out = match dir {
            None => reason(&mut cx, v, cfg),
            Some(d) => reason_one_way(&mut cx, v, cfg, d),
        }
        .unwrap();
        cx.g.value(out.features).clone()
    }

    fn positions_changed(a: &Tensor<f32>, b: &Tensor<f32>, n: usize) -> Vec<bool> {
        (0..n).map(|t| a.row(t) != b.row(t)).collect()
    }

    #[test]
    fn self_exclusion_is_bitwise() {
        let n = 8;
        let cfg = config(12, n, 16, 2, false);
        let store = store_for(&cfg, 10).cast::<f32>();
        let table = store.get(CHAR_EMBED).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..12)).collect();
        let build = |rows: &[usize]| Tensor::from_fn(&[1, n, 16], |i| table.row(rows[i / 16])[i % 16]);
        let base = run_reason(&store, &cfg, &build(&rows), None);
        for t in 0..n {
            let mut swapped = rows.clone();
            swapped[t] = (rows[t] + 1 + rng.random_range(0..11)) % 12;
            let out = run_reason(&store, &cfg, &build(&swapped), None);
            let changed = positions_changed(&base, &out, n);
            assert!(!changed[t], "position {t} saw its own embedding");
            assert!(changed.iter().any(|&c| c), "perturbing {t} changed nothing");
        }
    }

    #[test]
    fn one_way_streams_are_causal() {
        let n = 6;
        let cfg = config(10, n, 8, 2, false);
        let store = store_for(&cfg, 12).cast::<f32>();
        let e = random(&[1, n, 8], 13).cast::<f32>();
        for dir in [Direction::Forward, Direction::Backward] {
            let base = run_reason(&store, &cfg, &e, Some(dir));
            for j in 0..n {
                let mut p = e.clone();
                p.data_mut()[j * 8] += 0.5;
                let changed = positions_changed(&base, &run_reason(&store, &cfg, &p, Some(dir)), n);
                for (t, &c) in changed.iter().enumerate() {
                    let visible = match dir {
                        Direction::Forward => j < t,
                        Direction::Backward => j > t,
                    };
                    assert_eq!(c, visible, "{dir:?} perturb {j} position {t}");
                }
            }
        }
    }

    #[test]
    fn single_position_sees_only_sentinels() {
        let cfg = config(5, 1, 8, 1, false);
        let store = store_for(&cfg, 14).cast::<f32>();
        let a = run_reason(&store, &cfg, &random(&[2, 1, 8], 15).cast(), None);
        let b = run_reason(&store, &cfg, &random(&[2, 1, 8], 16).cast(), None);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_units_reduce_to_normalized_shifted_inputs() {
        let (n, d) = (4, 8);
        let cfg = config(5, n, d, 2, true);
        let mut store = store_for(&cfg, 17);
        for (name, t) in store.iter_mut() {
            if name.starts_with("gsrm.shared") && !name.contains(".ln") {
                t.data_mut().fill(0.0);
            }
        }
        let e = random(&[1, n, d], 18);
        let mut cx = Ctx::new(&store, false);
        let v = cx.constant(e.clone());
        let out = reason(&mut cx, v, &cfg).unwrap();
        let s = cx.g.value(out.features).clone();

        let table = store.get(CHAR_EMBED).unwrap();
        let pe = positional_encoding::<f64>(n, d).unwrap();
        let normalize = |x: Vec<f64>| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            x.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        };
        let reduce = |row: &[f64], p: usize| {
            let mut x: Vec<f64> = row.iter().zip(pe.row(p)).map(|(a, b)| a + b).collect();
            for _ in 0..4 {
                x = normalize(x);
            }
            x
        };
        for t in 0..n {
            let fwd_in = if t == 0 { table.row(5) } else { e.row(t - 1) };
            let bwd_in = if t == n - 1 { table.row(6) } else { e.row(t + 1) };
            let expect: Vec<f64> = reduce(fwd_in, t)
                .iter()
                .zip(reduce(bwd_in, t))
                .map(|(a, b)| a + b)
                .collect();
            for (x, y) in s.row(t).iter().zip(expect) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reasoning_is_deterministic() {
        let cfg = config(8, 5, 8, 2, false);
        let store = store_for(&cfg, 19).cast::<f32>();
        let e = random(&[2, 5, 8], 20).cast::<f32>();
        assert_eq!(run_reason(&store, &cfg, &e, None), run_reason(&store, &cfg, &e, None));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = config(4, 3, 4, 1, false);
        let store = store_for(&cfg, 21);
        let g = random(&[1, 3, 4], 22);
        let labels = [1, 3, 0];
        let names: Vec<&str> = store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !n.starts_with(EMBED_CLS))
            .collect();
        let report = grad_check_params(&store, &names, 1e-6, 1e-4, |cx| {
            let gv = cx.constant(g.clone());
            let e = visual_to_semantic(cx, gv, None)?;
            let s = reason(cx, e.embeddings, &cfg)?;
            reasoning_loss(cx, s.logits, &labels)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        let report = grad_check_params(&store, &[EMBED_CLS_WEIGHT, EMBED_CLS_BIAS], 1e-6, 1e-4, |cx| {
            let gv = cx.constant(g.clone());
            let e = visual_to_semantic(cx, gv, None)?;
            embedding_loss(cx, e.logits, &labels)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
