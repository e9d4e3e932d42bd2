use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderKind, ModelConfig};
use crate::backbone::{extract_features, init_backbone, FeatureMap2D};
use crate::baseline::{init_serial, serial_decode, serial_train_loss, SerialConfig};
use crate::error::{Error, Result};
use crate::gsrm::{self, Direction};
use crate::nn::{linear, Ctx, Init, ParamStore};
use crate::pvam::{attend_all, init_pvam, AlignedFeatures, PvamConfig};
use crate::tensor::{Real, Tensor, Var};
use crate::vsfd::{self, LossWeights};

/// Parameters of each module are drawn from their own random stream, so a
/// module initializes identically whichever other modules are present.
const BACKBONE_STREAM: u64 = 1;
const PVAM_STREAM: u64 = 2;
const GSRM_STREAM: u64 = 3;
const VSFD_STREAM: u64 = 4;
const SERIAL_STREAM: u64 = 5;

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ModelConfig {
    pub fn pvam(&self) -> PvamConfig {
        PvamConfig {
            max_len: self.max_len,
            d_model: self.d_model,
        }
    }

    pub fn serial(&self) -> SerialConfig {
        SerialConfig {
            num_classes: self.num_classes,
            d_model: self.d_model,
        }
    }
}

/// Fresh parameters for `cfg`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    init_backbone(
        &mut store,
        &mut Init {
            rng: &mut module_rng(seed, BACKBONE_STREAM),
        },
        &cfg.backbone(),
    );
    if cfg.decoder == DecoderKind::Serial {
        init_serial(
            &mut store,
            &mut Init {
                rng: &mut module_rng(seed, SERIAL_STREAM),
            },
            &cfg.serial(),
        );
        return store;
    }
    init_pvam(
        &mut store,
        &mut Init {
            rng: &mut module_rng(seed, PVAM_STREAM),
        },
        &cfg.pvam(),
    );
    let mut g = cfg.gsrm();
    g.units = g.units.max(1);
    let mut gsrm_store = ParamStore::new();
    gsrm::init_gsrm(
        &mut gsrm_store,
        &mut Init {
            rng: &mut module_rng(seed, GSRM_STREAM),
        },
        &g,
    );
    let keep = |name: &str| match cfg.decoder {
        DecoderKind::SrnNoGsrm => name.starts_with(gsrm::EMBED_CLS),
        DecoderKind::Fsrm => cfg.shared_streams || !name.starts_with("gsrm.bwd."),
        DecoderKind::Bsrm => cfg.shared_streams || !name.starts_with("gsrm.fwd."),
        _ => true,
    };
    for (name, t) in gsrm_store.iter() {
        if keep(name) {
            store.insert(name, t.clone());
        }
    }
    if cfg.decoder.has_gsrm() {
        vsfd::init_vsfd(
            &mut store,
            &mut Init {
                rng: &mut module_rng(seed, VSFD_STREAM),
            },
            cfg.d_model,
            cfg.num_classes,
            cfg.fusion,
        );
    }
    store
}

/// Which losses a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Embedding-block loss only.
    Warmup,
    /// Full weighted loss.
    Joint,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_e: Option<Var>,
    pub l_r: Option<Var>,
    pub l_f: Option<Var>,
    pub total: Var,
}

fn check_images<T: Real>(cx: &Ctx<T>, cfg: &ModelConfig, images: Var) -> Result<usize> {
    let s = cx.g.shape(images);
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 1 {
        return Err(Error::Input(format!(
            "expected images [B,{},{},1], got {s:?}",
            cfg.height, cfg.width
        )));
    }
    Ok(s[0])
}

/// Reasoning and fusion on top of aligned features. Returns `(S logits,
/// fused features F)`.
fn semantic_branch<T: Real>(cx: &mut Ctx<T>, cfg: &ModelConfig, aligned: Var, embeddings: Var) -> Result<(Var, Var)> {
    let g = cfg.gsrm();
    let s = match cfg.decoder {
        DecoderKind::Fsrm => gsrm::reason_one_way(cx, embeddings, &g, Direction::Forward)?,
        DecoderKind::Bsrm => gsrm::reason_one_way(cx, embeddings, &g, Direction::Backward)?,
        _ => gsrm::reason(cx, embeddings, &g)?,
    };
    let f = vsfd::fuse(cx, aligned, s.features, cfg.fusion)?;
    Ok((s.logits, f))
}

/// Training objective for a batch. `labels` holds `B*N` class indices.
pub fn loss<T: Real>(
    cx: &mut Ctx<T>,
    cfg: &ModelConfig,
    images: Var,
    labels: &[usize],
    stage: Stage,
    weights: &LossWeights,
) -> Result<LossTerms> {
    check_images(cx, cfg, images)?;
    let v = extract_features(cx, images, &cfg.backbone())?;
    if cfg.decoder == DecoderKind::Serial {
        let l = serial_train_loss(cx, &v, labels, cfg.max_len, &cfg.serial())?;
        return Ok(LossTerms {
            l_e: None,
            l_r: None,
            l_f: Some(l),
            total: l,
        });
    }
    let aligned = attend_all(cx, &v)?;
    if !cfg.decoder.has_gsrm() {
        let logits = linear(cx, aligned.features, gsrm::EMBED_CLS)?;
        let l_e = gsrm::embedding_loss(cx, logits, labels)?;
        let total = cx.g.scale(l_e, T::lit(weights.alpha_e));
        return Ok(LossTerms {
            l_e: Some(l_e),
            l_r: None,
            l_f: None,
            total,
        });
    }
    let teacher = cfg.teacher_forcing.then_some(labels);
    let sem = gsrm::visual_to_semantic(cx, aligned.features, teacher)?;
    let l_e = gsrm::embedding_loss(cx, sem.logits, labels)?;
    if stage == Stage::Warmup {
        let total = cx.g.scale(l_e, T::lit(weights.alpha_e));
        return Ok(LossTerms {
            l_e: Some(l_e),
            l_r: None,
            l_f: None,
            total,
        });
    }
    let (reason_logits, fused) = semantic_branch(cx, cfg, aligned.features, sem.embeddings)?;
    let l_r = gsrm::reasoning_loss(cx, reason_logits, labels)?;
    let l_f = vsfd::decode_loss(cx, fused, labels)?;
    let total = vsfd::total_loss(cx, l_e, l_r, l_f, weights)?;
    Ok(LossTerms {
        l_e: Some(l_e),
        l_r: Some(l_r),
        l_f: Some(l_f),
        total,
    })
}

/// Final per-position logits `[B, N, K]` of a parallel decoder over
/// precomputed visual features, plus the attention maps.
pub fn parallel_logits<T: Real>(
    cx: &mut Ctx<T>,
    cfg: &ModelConfig,
    v: &FeatureMap2D,
) -> Result<(Var, AlignedFeatures)> {
    let aligned = attend_all(cx, v)?;
    if !cfg.decoder.has_gsrm() {
        return Ok((linear(cx, aligned.features, gsrm::EMBED_CLS)?, aligned));
    }
    let sem = gsrm::visual_to_semantic(cx, aligned.features, None)?;
    let (_, fused) = semantic_branch(cx, cfg, aligned.features, sem.embeddings)?;
    Ok((vsfd::classify(cx, fused)?, aligned))
}

#[derive(Clone, Debug)]
pub struct Decoded<T> {
    /// Class indices per image, EOS excluded.
    pub sequences: Vec<Vec<usize>>,
    /// Attention maps `[B, N, h*w]` of parallel decoders.
    pub attention: Option<Tensor<T>>,
    /// Feature grid `(h, w)`.
    pub grid: (usize, usize),
}

/// Inference on `images: [B, H, W, 1]`.
pub fn decode<T: Real>(cx: &mut Ctx<T>, cfg: &ModelConfig, images: Var) -> Result<Decoded<T>> {
    check_images(cx, cfg, images)?;
    let v = extract_features(cx, images, &cfg.backbone())?;
    let grid = (v.height, v.width);
    if cfg.decoder == DecoderKind::Serial {
        let out = serial_decode(cx, &v, cfg.max_len, &cfg.serial())?;
        return Ok(Decoded {
            sequences: out.sequences,
            attention: None,
            grid,
        });
    }
    let (logits, aligned) = parallel_logits(cx, cfg, &v)?;
    Ok(Decoded {
        sequences: vsfd::predict(cx.g.value(logits)),
        attention: Some(cx.g.value(aligned.attention).clone()),
        grid,
    })
}

/// Architecture plus trained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: init_params(config, seed),
        })
    }

    /// Copies every parameter of `other` whose name and shape match one of
    /// ours. Returns how many were copied.
    pub fn adopt(&mut self, other: &ParamStore<f32>) -> usize {
        let mut copied = 0;
        for (name, t) in self.params.iter_mut() {
            if let Ok(src) = other.get(name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn decode(&self, images: &Tensor<f32>) -> Result<Decoded<f32>> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.constant(images.clone());
        decode(&mut cx, &self.config, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(decoder: DecoderKind) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            stage_widths: [4, 8, 16],
            backbone_units: 1,
            gsrm_units: 1,
            decoder,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shared_modules_initialize_identically() {
        let a = init_params::<f32>(&small(DecoderKind::Srn), 3);
        let b = init_params::<f32>(&small(DecoderKind::SrnNoGsrm), 3);
        let c = init_params::<f32>(&small(DecoderKind::Serial), 3);
        for (name, t) in b.iter() {
            assert_eq!(a.get(name).unwrap(), t, "{name}");
        }
        assert_eq!(
            a.get("backbone.lateral3.weight").unwrap(),
            c.get("backbone.lateral3.weight").unwrap()
        );
        assert!(!b.contains("gsrm.fwd.unit0.ff1.weight"));
        assert!(!b.contains("vsfd.cls.weight"));
        let f = init_params::<f32>(&small(DecoderKind::Fsrm), 3);
        assert!(f.contains("gsrm.fwd.unit0.ff1.weight") && !f.contains("gsrm.bwd.unit0.ff1.weight"));
    }

    #[test]
    fn every_decoder_runs_end_to_end() {
        for kind in DecoderKind::ALL {
            let model = Model::init(&small(kind), 1).unwrap();
            let images = Tensor::from_fn(&[2, 16, 64, 1], |i| ((i * 7919) % 255) as f32 / 255.0);
            let out = model.decode(&images).unwrap();
            assert_eq!(out.sequences.len(), 2);
            assert!(out.sequences.iter().all(|s| s.len() <= 8));
            assert_eq!(out.grid, (2, 8));
            assert_eq!(out.attention.is_some(), kind != DecoderKind::Serial);

            let mut cx = Ctx::new(&model.params, true);
            let x = cx.constant(images.clone());
            let labels = vec![0, 1, 12, 12, 12, 12, 12, 12, 3, 12, 12, 12, 12, 12, 12, 12];
            let terms = loss(
                &mut cx,
                &model.config,
                x,
                &labels,
                Stage::Joint,
                &LossWeights::default(),
            )
            .unwrap();
            let total = cx.g.value(terms.total).item();
            assert!(total.is_finite() && total > 0.0, "{kind}: {total}");
        }
    }

    #[test]
    fn wrong_image_size_is_input_error() {
        let model = Model::init(&small(DecoderKind::Srn), 1).unwrap();
        assert!(matches!(
            model.decode(&Tensor::zeros(&[1, 16, 32, 1])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn warmup_touches_only_visual_parameters() {
        let model = Model::init(&small(DecoderKind::Srn), 2).unwrap();
        let images = Tensor::from_fn(&[1, 16, 64, 1], |i| (i % 5) as f32 / 5.0);
        let labels = vec![0, 1, 2, 12, 12, 12, 12, 12];
        for (stage, reasoning_moves) in [(Stage::Warmup, false), (Stage::Joint, true)] {
            let mut cx = Ctx::new(&model.params, true);
            let x = cx.constant(images.clone());
            let terms = loss(&mut cx, &model.config, x, &labels, stage, &LossWeights::default()).unwrap();
            cx.g.backward(terms.total).unwrap();
            let grads = cx.grads();
            let nonzero = |name: &str| grads.get(name).is_some_and(|g| g.iter().any(|&v| v != 0.0));
            assert!(nonzero("pvam.w_o") && nonzero("gsrm.embed_cls.weight"));
            assert_eq!(nonzero("gsrm.fwd.unit0.ff1.weight"), reasoning_moves);
            assert_eq!(nonzero("vsfd.cls.weight"), reasoning_moves);
        }
    }
}
