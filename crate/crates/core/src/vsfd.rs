//! Visual-semantic fusion: a per-dimension gate blends aligned visual
//! features `g_t` with reasoned features `s_t`,
//!
//! ```text
//! z_t = sigmoid(W_z [g_t, s_t])
//! f_t = z_t * g_t + (1 - z_t) * s_t
//! ```
//!
//! and a classifier reads every `f_t` at once.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, Ctx, Init, ParamStore};
use crate::tensor::{argmax, Real, Tensor, Var};

pub const GATE: &str = "vsfd.gate";
pub const CONCAT_PROJ: &str = "vsfd.concat_proj";
pub const CLS: &str = "vsfd.cls";

/// How `G` and `S` are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Gated,
    Add,
    Concat,
    Dot,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Gated, Fusion::Add, Fusion::Concat, Fusion::Dot];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Gated => "gated",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
            Fusion::Dot => "dot",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown fusion mode `{s}` (expected gated, add, concat or dot)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_e: f64,
    pub alpha_r: f64,
    pub alpha_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_e: 1.0,
            alpha_r: 0.15,
            alpha_f: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha_e", self.alpha_e),
            ("alpha_r", self.alpha_r),
            ("alpha_f", self.alpha_f),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn init_vsfd<T: Real>(store: &mut ParamStore<T>, init: &mut Init, d: usize, num_classes: usize, fusion: Fusion) {
    match fusion {
        Fusion::Gated => init_linear(store, init, GATE, 2 * d, d, false),
        Fusion::Concat => init_linear(store, init, CONCAT_PROJ, 2 * d, d, false),
        Fusion::Add | Fusion::Dot => {}
    }
    init_linear(store, init, CLS, d, num_classes, true);
}

fn check_pair<T: Real>(cx: &Ctx<T>, g: Var, s: Var) -> Result<()> {
    let (sg, ss) = (cx.g.shape(g), cx.g.shape(s));
    if sg != ss {
        return Err(Error::Config(format!(
            "cannot fuse features of shapes {sg:?} and {ss:?}"
        )));
    }
    Ok(())
}

/// Gated fusion of `G, S: [B, N, d]`. Returns `(F, z)`.
pub fn fuse_gated<T: Real>(cx: &mut Ctx<T>, g: Var, s: Var) -> Result<(Var, Var)> {
    check_pair(cx, g, s)?;
    let axis = cx.g.shape(g).len() - 1;
    let both = cx.g.concat(&[g, s], axis)?;
    let pre = linear(cx, both, GATE)?;
    let z = cx.g.sigmoid(pre);
    let zg = cx.g.mul(z, g)?;
    let one_minus = cx.g.affine(z, -T::one(), T::one());
    let zs = cx.g.mul(one_minus, s)?;
    Ok((cx.g.add(zg, zs)?, z))
}

/// Combines `G` and `S` with the chosen fusion mode.
pub fn fuse<T: Real>(cx: &mut Ctx<T>, g: Var, s: Var, fusion: Fusion) -> Result<Var> {
    check_pair(cx, g, s)?;
    match fusion {
        Fusion::Gated => Ok(fuse_gated(cx, g, s)?.0),
        Fusion::Add => cx.g.add(g, s),
        Fusion::Dot => cx.g.mul(g, s),
        Fusion::Concat => {
            let axis = cx.g.shape(g).len() - 1;
            let both = cx.g.concat(&[g, s], axis)?;
            linear(cx, both, CONCAT_PROJ)
        }
    }
}

/// Per-position class logits `[B, N, K]`.
pub fn classify<T: Real>(cx: &mut Ctx<T>, f: Var) -> Result<Var> {
    linear(cx, f, CLS)
}

/// Mean cross-entropy of the fused prediction.
pub fn decode_loss<T: Real>(cx: &mut Ctx<T>, f: Var, labels: &[usize]) -> Result<Var> {
    let logits = classify(cx, f)?;
    cx.g.cross_entropy_mean(logits, labels)
}

/// `alpha_e L_e + alpha_r L_r + alpha_f L_f`.
pub fn total_loss<T: Real>(cx: &mut Ctx<T>, l_e: Var, l_r: Var, l_f: Var, w: &LossWeights) -> Result<Var> {
    let e = cx.g.scale(l_e, T::lit(w.alpha_e));
    let r = cx.g.scale(l_r, T::lit(w.alpha_r));
    let f = cx.g.scale(l_f, T::lit(w.alpha_f));
    let er = cx.g.add(e, r)?;
    cx.g.add(er, f)
}

/// Argmax class per position, truncated before the first EOS (the last
/// class). `logits` is `[B, N, K]`; one sequence per batch entry.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<Vec<usize>> {
    let shape = logits.shape();
    let (n, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let eos = k - 1;
    logits
        .data()
        .chunks(n * k)
        .map(|seq| seq.chunks(k).map(argmax).take_while(|&c| c != eos).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn store_for(d: usize, k: usize, fusion: Fusion, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_vsfd(&mut store, &mut Init { rng: &mut rng }, d, k, fusion);
        store
    }

    fn fused(store: &ParamStore<f64>, g: &Tensor<f64>, s: &Tensor<f64>, fusion: Fusion) -> Tensor<f64> {
        let mut cx = Ctx::new(store, false);
        let (gv, sv) = (cx.constant(g.clone()), cx.constant(s.clone()));
        let f = fuse(&mut cx, gv, sv, fusion).unwrap();
        cx.g.value(f).clone()
    }

    #[test]
    fn zero_gate_weights_give_exact_mean() {
        let mut store = store_for(6, 5, Fusion::Gated, 1);
        store.get_mut("vsfd.gate.weight").unwrap().data_mut().fill(0.0);
        let (g, s) = (random(&[2, 3, 6], 2), random(&[2, 3, 6], 3));
        let f = fused(&store, &g, &s, Fusion::Gated);
        for i in 0..f.numel() {
            assert_eq!(f.data()[i], 0.5 * g.data()[i] + 0.5 * s.data()[i]);
        }
    }

    #[test]
    fn equal_inputs_are_a_fixed_point() {
        let store = store_for(6, 5, Fusion::Gated, 4);
        let g = random(&[1, 4, 6], 5);
        let f = fused(&store, &g, &g, Fusion::Gated);
        for (a, b) in f.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gated_fusion_is_bounded_and_matches_loop() {
        let (d, n) = (5, 3);
        let store = store_for(d, 4, Fusion::Gated, 6);
        let (g, s) = (random(&[2, n, d], 7), random(&[2, n, d], 8));
        let f = fused(&store, &g, &s, Fusion::Gated);
        let w = store.get("vsfd.gate.weight").unwrap();
        for r in 0..2 * n {
            let both: Vec<f64> = g.row(r).iter().chain(s.row(r)).copied().collect();
            for j in 0..d {
                let pre: f64 = (0..2 * d).map(|i| both[i] * w.get(&[i, j])).sum();
                let z = 1.0 / (1.0 + (-pre).exp());
                assert!(z > 0.0 && z < 1.0);
                let expect = z * g.row(r)[j] + (1.0 - z) * s.row(r)[j];
                let got = f.row(r)[j];
                assert!((got - expect).abs() < 1e-12);
                let (lo, hi) = (g.row(r)[j].min(s.row(r)[j]), g.row(r)[j].max(s.row(r)[j]));
                assert!(lo <= got && got <= hi);
            }
        }
    }

    #[test]
    fn variant_identities() {
        let store = store_for(4, 3, Fusion::Concat, 9);
        let g = random(&[1, 2, 4], 10);
        assert_eq!(fused(&store, &g, &Tensor::zeros(&[1, 2, 4]), Fusion::Add), g);
        assert_eq!(fused(&store, &g, &Tensor::full(&[1, 2, 4], 1.0), Fusion::Dot), g);
    }

    #[test]
    fn concat_matches_hand_weights() {
        let mut store = ParamStore::<f64>::new();
        // [g0, g1, s0, s1] -> [g0 + s1, 2 g1 - s0]
        store.insert(
            "vsfd.concat_proj.weight",
            Tensor::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 2.0, 0.0, -1.0, 1.0, 0.0]).unwrap(),
        );
        let g = Tensor::from_f64(&[1, 1, 2], &[0.5, -1.5]).unwrap();
        let s = Tensor::from_f64(&[1, 1, 2], &[2.0, 3.0]).unwrap();
        assert_eq!(fused(&store, &g, &s, Fusion::Concat).data(), &[3.5, -5.0]);
    }

    #[test]
    fn mode_parsing_and_shape_errors() {
        assert_eq!("dot".parse::<Fusion>().unwrap(), Fusion::Dot);
        assert!(matches!("mean".parse::<Fusion>(), Err(Error::Config(_))));
        let store = store_for(4, 3, Fusion::Gated, 11);
        let mut cx = Ctx::new(&store, false);
        let g = cx.constant(Tensor::zeros(&[1, 2, 4]));
        let s = cx.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(fuse(&mut cx, g, s, Fusion::Add), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_weighting() {
        let store = ParamStore::<f64>::new();
        let mut cx = Ctx::new(&store, false);
        let one = cx.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut cx, one, one, one, &LossWeights::default()).unwrap();
        assert!((cx.g.value(t).item() - 3.15).abs() < 1e-15);
        let zero = LossWeights {
            alpha_e: 0.0,
            alpha_r: 0.0,
            alpha_f: 0.0,
        };
        let t = total_loss(&mut cx, one, one, one, &zero).unwrap();
        assert_eq!(cx.g.value(t).item(), 0.0);
        let lr = cx.constant(Tensor::scalar(0.7));
        let only_r = LossWeights { alpha_r: 0.15, ..zero };
        let t = total_loss(&mut cx, one, lr, one, &only_r).unwrap();
        assert_eq!(cx.g.value(t).item(), 0.15 * 0.7);
    }

    #[test]
    fn decode_loss_reference_values() {
        let store = store_for(3, 37, Fusion::Add, 12);
        let mut zeroed = store.clone();
        zeroed.get_mut("vsfd.cls.weight").unwrap().data_mut().fill(0.0);
        let mut cx = Ctx::new(&zeroed, false);
        let f = cx.constant(random(&[1, 4, 3], 13));
        let l = decode_loss(&mut cx, f, &[0, 1, 2, 36]).unwrap();
        assert!((cx.g.value(l).item() - 37f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predict_truncates_at_first_eos() {
        // K = 4 with EOS = 3; rows forcing [0, 1, EOS, 2].
        let hot = |c: usize| (0..4).map(move |i| if i == c { 1.0 } else { 0.0 });
        let data: Vec<f64> = [0, 1, 3, 2]
            .into_iter()
            .flat_map(hot)
            .chain([3, 0, 0, 0].into_iter().flat_map(hot))
            .collect();
        let logits = Tensor::new(vec![2, 4, 4], data).unwrap();
        assert_eq!(predict(&logits), vec![vec![0, 1], vec![]]);
    }

    #[test]
    fn predict_matches_loop_and_is_scale_invariant() {
        let logits = random(&[3, 6, 5], 14);
        let expected: Vec<Vec<usize>> = (0..3)
            .map(|b| {
                let mut out = Vec::new();
                for t in 0..6 {
                    let row = logits.row(b * 6 + t);
                    let mut best = 0;
                    for c in 1..5 {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    if best == 4 {
                        break;
                    }
                    out.push(best);
                }
                out
            })
            .collect();
        assert_eq!(predict(&logits), expected);
        let shifted = Tensor::from_fn(&[3, 6, 5], |i| 3.0 * logits.data()[i] + (i / 5) as f64);
        assert_eq!(predict(&shifted), expected);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for fusion in Fusion::ALL {
            let store = store_for(4, 5, fusion, 15);
            let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
            let (g, s) = (random(&[2, 3, 4], 16), random(&[2, 3, 4], 17));
            let labels = [0, 4, 2, 1, 4, 4];
            let report = grad_check_params(&store, &names, 1e-6, 1e-4, |cx| {
                let (gv, sv) = (cx.constant(g.clone()), cx.constant(s.clone()));
                let f = fuse(cx, gv, sv, fusion)?;
                decode_loss(cx, f, &labels)
            })
            .unwrap();
            assert!(report.passed(), "{fusion}: {:?}", report.worst());
        }
    }
}
