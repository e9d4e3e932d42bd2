//! Decoder latency: parallel SRN decoding against the serial attention
//! baseline on the same precomputed visual features.

use std::time::Instant;

use super::config::DecoderKind;
use super::model::{init_params, parallel_logits, Model};
use crate::backbone::{extract_features, FeatureMap2D};
use crate::baseline::{serial_decode, serial_decode_full};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::pvam::ORDER_EMBED;
use crate::tensor::{Tensor, Var};
use crate::vsfd;

/// Wall time of one decode, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
}

impl Timing {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub max_len: usize,
    pub srn: Timing,
    pub serial: Timing,
    /// `serial.mean / srn.mean`.
    pub ratio: f64,
    /// Graph nodes of one parallel decode; all positions share each node.
    pub srn_nodes: usize,
    /// Graph nodes of one timed serial decode (`max_len` steps).
    pub serial_nodes: usize,
    /// Recurrent steps when the serial decoder stops at its first EOS.
    pub serial_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    /// Timed repetitions after one untimed warm-up; at least 3 are run.
    pub repetitions: usize,
    /// Decodes per repetition; the repetition reports their mean.
    pub inner: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            inner: 20,
        }
    }
}

/// Reading-order table with `n` rows: the trained rows, repeated cyclically
/// when `n` exceeds them. Only the shape matters for timing.
pub fn resize_order_table(params: &mut ParamStore<f32>, n: usize) -> Result<()> {
    let table = params.get(ORDER_EMBED)?;
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let resized = Tensor::from_fn(&[n, d], |i| table.data()[((i / d) % rows) * d + i % d]);
    params.insert(ORDER_EMBED, resized);
    Ok(())
}

fn features(model: &Model, image: &Tensor<f32>) -> Result<(Tensor<f32>, (usize, usize))> {
    let mut cx = Ctx::new(&model.params, false);
    let x = cx.constant(image.clone());
    let v = extract_features(&mut cx, x, &model.config.backbone())?;
    Ok((cx.g.value(v.features).clone(), (v.height, v.width)))
}

fn feature_map(cx: &mut Ctx<f32>, v: &Tensor<f32>, grid: (usize, usize)) -> FeatureMap2D {
    let s = v.shape().to_vec();
    let features: Var = cx.constant(v.clone());
    FeatureMap2D {
        features,
        batch: s[0],
        height: grid.0,
        width: grid.1,
        channels: s[2],
    }
}

/// Times `f` and returns the node count of its last call.
fn time(opts: &BenchOptions, mut f: impl FnMut() -> Result<usize>) -> Result<(Timing, usize)> {
    let mut nodes = f()?;
    let mut samples = Vec::with_capacity(opts.repetitions.max(3));
    for _ in 0..opts.repetitions.max(3) {
        let began = Instant::now();
        for _ in 0..opts.inner.max(1) {
            nodes = f()?;
        }
        samples.push(began.elapsed().as_secs_f64() / opts.inner.max(1) as f64);
    }
    Ok((Timing::from_samples(&samples), nodes))
}

/// Times both decoders on one image `[1, H, W, 1]` for every length in
/// `lengths`. `serial` must share the architecture of `srn`'s backbone; when
/// absent, a freshly initialized serial decoder is used.
pub fn benchmark(
    srn: &Model,
    serial: Option<&Model>,
    image: &Tensor<f32>,
    lengths: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<LatencyRow>> {
    if srn.config.decoder == DecoderKind::Serial {
        return Err(Error::Config("benchmark needs a parallel decoder checkpoint".into()));
    }
    if image.shape().first() != Some(&1) {
        return Err(Error::Input(format!(
            "benchmark times one image, got {:?}",
            image.shape()
        )));
    }
    let fresh;
    let serial = match serial {
        Some(m) if m.config.decoder == DecoderKind::Serial => m,
        Some(_) => return Err(Error::Config("serial checkpoint has a parallel decoder".into())),
        None => {
            let mut cfg = srn.config.clone();
            cfg.decoder = DecoderKind::Serial;
            let mut m = Model {
                params: init_params(&cfg, 0),
                config: cfg,
            };
            m.adopt(&srn.params);
            fresh = m;
            &fresh
        }
    };
    let (v_par, grid_par) = features(srn, image)?;
    let (v_ser, grid_ser) = features(serial, image)?;
    let serial_cfg = serial.config.serial();

    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        if n == 0 {
            return Err(Error::Config("benchmark length must be positive".into()));
        }
        let mut cfg = srn.config.clone();
        cfg.max_len = n;
        let mut params = srn.params.clone();
        resize_order_table(&mut params, n)?;

        let (srn_time, srn_nodes) = time(opts, || {
            let mut cx = Ctx::new(&params, false);
            let v = feature_map(&mut cx, &v_par, grid_par);
            let (logits, _) = parallel_logits(&mut cx, &cfg, &v)?;
            std::hint::black_box(vsfd::predict(cx.g.value(logits)));
            Ok(cx.g.len())
        })?;
        let (serial_time, serial_nodes) = time(opts, || {
            let mut cx = Ctx::new(&serial.params, false);
            let v = feature_map(&mut cx, &v_ser, grid_ser);
            std::hint::black_box(serial_decode_full(&mut cx, &v, n, &serial_cfg)?);
            Ok(cx.g.len())
        })?;
        let serial_steps = {
            let mut cx = Ctx::new(&serial.params, false);
            let v = feature_map(&mut cx, &v_ser, grid_ser);
            serial_decode(&mut cx, &v, n, &serial_cfg)?.steps()
        };
        rows.push(LatencyRow {
            max_len: n,
            ratio: serial_time.mean / srn_time.mean,
            srn: srn_time,
            serial: serial_time,
            srn_nodes,
            serial_nodes,
            serial_steps,
        });
    }
    Ok(rows)
}

/// Plain-text table of [`benchmark`] rows, times in milliseconds.
pub fn format_table(rows: &[LatencyRow]) -> String {
    let mut out =
        String::from("N\tsrn_ms\tsrn_std\tserial_ms\tserial_std\tratio\tsrn_nodes\tserial_nodes\tserial_steps\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{}\t{}\t{}\n",
            r.max_len,
            r.srn.mean * 1e3,
            r.srn.std * 1e3,
            r.serial.mean * 1e3,
            r.serial.std * 1e3,
            r.ratio,
            r.srn_nodes,
            r.serial_nodes,
            r.serial_steps
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 16,
            stage_widths: [4, 8, 16],
            backbone_units: 1,
            gsrm_units: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn order_table_tiles_rows() {
        let mut p = init_params::<f32>(&small(), 0);
        let before = p.get(ORDER_EMBED).unwrap().clone();
        resize_order_table(&mut p, 19).unwrap();
        let after = p.get(ORDER_EMBED).unwrap();
        assert_eq!(after.shape(), &[19, 16]);
        assert_eq!(after.row(17), before.row(1));
        resize_order_table(&mut p, 3).unwrap();
        assert_eq!(p.get(ORDER_EMBED).unwrap().row(2), before.row(2));
    }

    #[test]
    fn rows_report_steps_and_positive_times() {
        let model = Model::init(&small(), 1).unwrap();
        let image = Tensor::from_fn(&[1, 16, 64, 1], |i| (i % 7) as f32 / 7.0);
        let opts = BenchOptions {
            repetitions: 3,
            inner: 1,
        };
        let rows = benchmark(&model, None, &image, &[4, 12], &opts).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.serial_steps >= 1 && r.serial_steps <= r.max_len);
            assert!(r.srn.mean > 0.0 && r.serial.mean > 0.0 && r.ratio > 0.0);
        }
        assert_eq!(rows[0].srn_nodes, rows[1].srn_nodes);
        assert!(rows[1].serial_nodes > rows[0].serial_nodes);
        assert_eq!(format_table(&rows).lines().count(), 3);
        let two = Tensor::from_fn(&[2, 16, 64, 1], |_| 0.5f32);
        assert!(benchmark(&model, None, &two, &[4], &opts).is_err());
    }

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(t.mean, 2.0);
        assert_eq!(t.std, 1.0);
    }
}
