//! Ablation sweeps. Every variant of one seed branches from the same
//! warm-up run, so variants differ only in what happens after warm-up.

use super::config::{Config, DecoderKind};
use super::eval::{evaluate, Metrics};
use super::model::{Model, Stage};
use super::train::{encode_all, EpochStats, Trainer};
use crate::data::{Charset, Sample};
use crate::error::{Error, Result};
use crate::vsfd::Fusion;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub decoder: DecoderKind,
    pub fusion: Fusion,
}

const fn variant(name: &'static str, decoder: DecoderKind, fusion: Fusion) -> Variant {
    Variant { name, decoder, fusion }
}

/// Full model, no reasoning, one-way reasoning, and the alternative fusions.
pub const VARIANTS: [Variant; 7] = [
    variant("srn", DecoderKind::Srn, Fusion::Gated),
    variant("srn_no_gsrm", DecoderKind::SrnNoGsrm, Fusion::Gated),
    variant("fsrm", DecoderKind::Fsrm, Fusion::Gated),
    variant("bsrm", DecoderKind::Bsrm, Fusion::Gated),
    variant("add", DecoderKind::Srn, Fusion::Add),
    variant("concat", DecoderKind::Srn, Fusion::Concat),
    variant("dot", DecoderKind::Srn, Fusion::Dot),
];

pub fn find_variant(name: &str) -> Result<Variant> {
    VARIANTS
        .iter()
        .copied()
        .find(|v| v.name == name)
        .ok_or_else(|| Error::Config(format!("unknown ablation variant `{name}`")))
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub charset: Charset,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub test: Metrics,
    pub history: Vec<EpochStats>,
    pub model: Model,
}

/// Warm-up once for `seed`, then train and test every variant from the
/// warmed-up weights and optimizer state. `on_epoch` sees `(variant name or
/// "warmup", stats)`.
pub fn run_seed(
    base: &Config,
    splits: &Splits,
    seed: u64,
    variants: &[Variant],
    mut on_epoch: impl FnMut(&str, &EpochStats),
) -> Result<Vec<RunResult>> {
    let mut config = base.clone();
    config.train.seed = seed;
    config.model.decoder = DecoderKind::Srn;
    config.validate()?;
    let labels = encode_all(&splits.train, &splits.charset, config.model.max_len)?;
    let mut warm = Trainer::new(Model::init(&config.model, seed)?, config.train.clone())?;
    for _ in 0..config.train.warmup_epochs {
        let stats = warm.run_epoch(Stage::Warmup, &splits.train, &labels, &splits.val, &splits.charset)?;
        on_epoch("warmup", &stats);
    }

    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        let mut model_cfg = config.model.clone();
        model_cfg.decoder = v.decoder;
        model_cfg.fusion = v.fusion;
        let mut model = Model::init(&model_cfg, seed)?;
        model.adopt(&warm.model.params);
        let mut trainer = Trainer {
            model,
            config: config.train.clone(),
            adam: warm.adam.clone(),
            epoch: warm.epoch,
            history: warm.history.clone(),
        };
        trainer.fit(&splits.train, &splits.val, &splits.charset, |s| on_epoch(v.name, s))?;
        let test = evaluate(&trainer.model, &splits.test, &splits.charset, config.train.batch_size)?;
        results.push(RunResult {
            variant: *v,
            seed,
            test,
            history: trainer.history,
            model: trainer.model,
        });
    }
    Ok(results)
}

/// Mean test word accuracy of `variant` over all seeds in `results`.
pub fn mean_word_accuracy(results: &[RunResult], variant: &str) -> Option<f64> {
    let accs: Vec<f64> = results
        .iter()
        .filter(|r| r.variant.name == variant)
        .map(|r| r.test.word_accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// One line per variant: mean and per-seed test word accuracy.
pub fn summary(results: &[RunResult]) -> String {
    let mut out = String::new();
    for v in VARIANTS {
        let Some(mean) = mean_word_accuracy(results, v.name) else {
            continue;
        };
        let per_seed: Vec<String> = results
            .iter()
            .filter(|r| r.variant.name == v.name)
            .map(|r| format!("{:.4}", r.test.word_accuracy))
            .collect();
        out.push_str(&format!(
            "{:<12} mean {:.4} seeds [{}]\n",
            v.name,
            mean,
            per_seed.join(", ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_lexicon, synthesize, DatasetSpec, RenderParams, Split};

    #[test]
    fn variants_branch_from_one_warmup() {
        let charset = Charset::desk();
        let lex = generate_lexicon(&charset, 6, 3, 5, 2).unwrap();
        let spec = DatasetSpec {
            count: 24,
            ratios: [0.5, 0.25, 0.25],
            seed: 3,
            render: RenderParams::default(),
        };
        let split = |s| synthesize(&lex, &charset, &spec, s).unwrap();
        let splits = Splits {
            train: split(Split::Train),
            val: split(Split::Val),
            test: split(Split::Test),
            charset: charset.clone(),
        };
        let mut cfg = Config::default();
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.d_ff = 16;
        cfg.model.stage_widths = [4, 8, 16];
        cfg.model.backbone_units = 1;
        cfg.model.gsrm_units = 1;
        cfg.train.warmup_epochs = 1;
        cfg.train.joint_epochs = 1;
        cfg.train.batch_size = 8;
        let mut seen = Vec::new();
        let picks = [VARIANTS[0], VARIANTS[1]];
        let results = run_seed(&cfg, &splits, 5, &picks, |name, s| {
            seen.push((name.to_string(), s.epoch))
        })
        .unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(
            seen,
            vec![
                ("warmup".to_string(), 1),
                ("srn".to_string(), 2),
                ("srn_no_gsrm".to_string(), 2)
            ]
        );
        assert_eq!(results[0].history[0], results[1].history[0]);
        assert!(results[0].history[1].l_r > 0.0 && results[1].history[1].l_r == 0.0);
        assert!(mean_word_accuracy(&results, "srn").is_some());
        assert!(summary(&results).starts_with("srn "));
        assert!(find_variant("dot").is_ok() && find_variant("tri").is_err());
    }
}
