//! Finite-difference audit of every trainable module at 64-bit precision on
//! randomly sized small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_features, init_backbone, BackboneConfig, FeatureMap2D};
use crate::baseline::{init_serial, serial_train_loss, SerialConfig};
use crate::error::Result;
use crate::gsrm::{self, GsrmConfig, EMBED_CLS};
use crate::nn::{
    grad_check_params, init_layer_norm, init_linear, init_transformer_unit, layer_norm, linear, transformer_unit,
    AttentionMask, Ctx, Init, ParamStore, TransformerConfig,
};
use crate::pvam::{attend_all, init_pvam, PvamConfig};
use crate::tensor::{ElementCheck, GradCheckReport, Tensor, Var};
use crate::vsfd::{self, Fusion};

pub const MODULES: [&str; 8] = [
    "nn.linear_layer_norm",
    "nn.transformer_unit",
    "backbone",
    "pvam",
    "gsrm.embedding",
    "gsrm.reasoning",
    "vsfd",
    "serial",
];

pub const EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub instance: usize,
    pub max_rel_err: f64,
    /// Elements compared; flat elements behind argmax are skipped.
    pub checked: usize,
    pub passed: bool,
    pub worst: Option<ElementCheck>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Random linear read-out `sum(x * r)`, so that no output direction is
/// degenerate.
fn readout(cx: &mut Ctx<f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = cx.constant(r.clone());
    let p = cx.g.mul(x, rv)?;
    Ok(cx.g.sum(p))
}

fn all_names(store: &ParamStore<f64>) -> Vec<&str> {
    store.iter().map(|(n, _)| n).collect()
}

fn feature_map(cx: &mut Ctx<f64>, v: &Tensor<f64>, h: usize, w: usize) -> FeatureMap2D {
    let s = v.shape().to_vec();
    FeatureMap2D {
        features: cx.constant(v.clone()),
        batch: s[0],
        height: h,
        width: w,
        channels: s[2],
    }
}

fn check_module(module: &str, rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut init = Init { rng: &mut init_rng };
    let mut store = ParamStore::new();
    let b = rng.random_range(1..=2);
    let heads = rng.random_range(1..=2);
    let d = 4 * heads;
    let n = rng.random_range(2..=4);
    let k = rng.random_range(3..=5);
    let tcfg = TransformerConfig::new(d, heads, rng.random_range(4..=8))?;
    match module {
        "nn.linear_layer_norm" => {
            let d_in = rng.random_range(2..=5);
            init_linear(&mut store, &mut init, "lin", d_in, d, true);
            init_layer_norm(&mut store, &mut init, "ln", d);
            let x = uniform(rng, &[b, n, d_in]);
            let r = uniform(rng, &[b, n, d]);
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let xv = cx.constant(x.clone());
                let y = linear(cx, xv, "lin")?;
                let y = layer_norm(cx, y, "ln")?;
                readout(cx, y, &r)
            })
        }
        "nn.transformer_unit" => {
            init_transformer_unit(&mut store, &mut init, "unit", &tcfg);
            let x = uniform(rng, &[b, n, d]);
            let r = uniform(rng, &[b, n, d]);
            let mask = if rng.random() {
                AttentionMask::causal(n)
            } else {
                AttentionMask::full(n, n)
            };
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let xv = cx.constant(x.clone());
                let y = transformer_unit(cx, xv, &mask, "unit", &tcfg)?;
                readout(cx, y, &r)
            })
        }
        "backbone" => {
            let cfg = BackboneConfig {
                in_channels: 1,
                stage_widths: [rng.random_range(3..=4), rng.random_range(3..=4), 4],
                transformer: tcfg,
                units: 1,
                fpn: rng.random(),
            };
            init_backbone(&mut store, &mut init, &cfg);
            let (h, w) = (8, 8 * rng.random_range(1..=2));
            let x = Tensor::from_fn(&[1, h, w, 1], |_| rng.random_range(0.0..1.0));
            let r = uniform(rng, &[1, (h / 8) * (w / 8), d]);
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let xv = cx.constant(x.clone());
                let v = extract_features(cx, xv, &cfg)?;
                readout(cx, v.features, &r)
            })
        }
        "pvam" => {
            init_pvam(&mut store, &mut init, &PvamConfig { max_len: n, d_model: d });
            let (h, w) = (rng.random_range(1..=2), rng.random_range(2..=4));
            let v = uniform(rng, &[b, h * w, d]);
            let r = uniform(rng, &[b, n, d]);
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let fm = feature_map(cx, &v, h, w);
                let a = attend_all(cx, &fm)?;
                readout(cx, a.features, &r)
            })
        }
        "gsrm.embedding" | "gsrm.reasoning" => {
            let cfg = GsrmConfig {
                num_classes: k,
                max_len: n,
                transformer: tcfg,
                units: rng.random_range(1..=2),
                shared_streams: rng.random_bool(0.25),
                teacher_forcing: false,
            };
            gsrm::init_gsrm(&mut store, &mut init, &cfg);
            let g = uniform(rng, &[b, n, d]);
            let y = labels(rng, b * n, k);
            let embedding = module == "gsrm.embedding";
            let names: Vec<&str> = all_names(&store)
                .into_iter()
                .filter(|name| name.starts_with(EMBED_CLS) == embedding)
                .collect();
            grad_check_params(&store, &names, EPS, tol, |cx| {
                let gv = cx.constant(g.clone());
                let e = gsrm::visual_to_semantic(cx, gv, None)?;
                if embedding {
                    gsrm::embedding_loss(cx, e.logits, &y)
                } else {
                    let s = gsrm::reason(cx, e.embeddings, &cfg)?;
                    gsrm::reasoning_loss(cx, s.logits, &y)
                }
            })
        }
        "vsfd" => {
            let fusion = Fusion::ALL[rng.random_range(0..Fusion::ALL.len())];
            vsfd::init_vsfd(&mut store, &mut init, d, k, fusion);
            let (g, s) = (uniform(rng, &[b, n, d]), uniform(rng, &[b, n, d]));
            let y = labels(rng, b * n, k);
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let (gv, sv) = (cx.constant(g.clone()), cx.constant(s.clone()));
                let f = vsfd::fuse(cx, gv, sv, fusion)?;
                vsfd::decode_loss(cx, f, &y)
            })
        }
        "serial" => {
            let cfg = SerialConfig {
                num_classes: k,
                d_model: d,
            };
            init_serial(&mut store, &mut init, &cfg);
            let (h, w) = (1, rng.random_range(2..=4));
            let v = uniform(rng, &[b, h * w, d]);
            let y = labels(rng, b * n, k);
            grad_check_params(&store, &all_names(&store), EPS, tol, |cx| {
                let fm = feature_map(cx, &v, h, w);
                serial_train_loss(cx, &fm, &y, n, &cfg)
            })
        }
        other => Err(crate::error::Error::Config(format!("unknown module `{other}`"))),
    }
}

/// Runs `instances` randomized checks of every module in [`MODULES`].
pub fn audit(seed: u64, instances: usize, tol: f64) -> Result<Vec<ModuleCheck>> {
    let mut out = Vec::with_capacity(MODULES.len() * instances);
    for (m, module) in MODULES.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        for instance in 0..instances {
            let report = check_module(module, &mut rng, tol)?;
            out.push(ModuleCheck {
                module,
                instance,
                max_rel_err: report.max_rel_err,
                checked: report.checked(),
                passed: report.passed(),
                worst: report.worst().cloned(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_a_few_instances() {
        let checks = audit(11, 2, 1e-4).unwrap();
        assert_eq!(checks.len(), 2 * MODULES.len());
        for c in &checks {
            assert!(c.passed && c.checked > 0, "{c:?}");
        }
    }
}
