use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::gsrm::GsrmConfig;
use crate::nn::{TransformerConfig, NORM_ORDER};
use crate::vsfd::{Fusion, LossWeights};

/// Which decoder sits on top of the shared backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecoderKind {
    /// Parallel attention, bidirectional reasoning, fusion.
    #[default]
    Srn,
    /// Parallel attention only; predictions come from the embedding-block
    /// classifier.
    SrnNoGsrm,
    /// Forward-only reasoning.
    Fsrm,
    /// Backward-only reasoning.
    Bsrm,
    /// Recurrent attention baseline.
    Serial,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::Srn,
        DecoderKind::SrnNoGsrm,
        DecoderKind::Fsrm,
        DecoderKind::Bsrm,
        DecoderKind::Serial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Srn => "srn",
            DecoderKind::SrnNoGsrm => "srn_no_gsrm",
            DecoderKind::Fsrm => "fsrm",
            DecoderKind::Bsrm => "bsrm",
            DecoderKind::Serial => "serial",
        }
    }

    /// Uses a reasoning module and fusion.
    pub fn has_gsrm(self) -> bool {
        matches!(self, DecoderKind::Srn | DecoderKind::Fsrm | DecoderKind::Bsrm)
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder `{s}`")))
    }
}

/// Model architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output length `N`.
    pub max_len: usize,
    /// Classes including EOS.
    pub num_classes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub stage_widths: [usize; 3],
    pub backbone_units: usize,
    pub fpn: bool,
    pub gsrm_units: usize,
    pub shared_streams: bool,
    pub teacher_forcing: bool,
    pub fusion: Fusion,
    pub decoder: DecoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 64,
            max_len: 8,
            num_classes: 13,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            stage_widths: [16, 32, 64],
            backbone_units: 2,
            fpn: true,
            gsrm_units: 4,
            shared_streams: false,
            teacher_forcing: false,
            fusion: Fusion::Gated,
            decoder: DecoderKind::Srn,
        }
    }
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            norm: NORM_ORDER,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            stage_widths: self.stage_widths,
            transformer: self.transformer(),
            units: self.backbone_units,
            fpn: self.fpn,
        }
    }

    pub fn gsrm(&self) -> GsrmConfig {
        GsrmConfig {
            num_classes: self.num_classes,
            max_len: self.max_len,
            transformer: self.transformer(),
            units: self.gsrm_units,
            shared_streams: self.shared_streams,
            teacher_forcing: self.teacher_forcing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.decoder.has_gsrm() {
            self.gsrm().validate()?;
        }
        if self.max_len == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "need max_len >= 1 and at least one symbol plus EOS".into(),
            ));
        }
        if !self.height.is_multiple_of(crate::backbone::STRIDE) || !self.width.is_multiple_of(crate::backbone::STRIDE) {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by {}",
                self.width,
                self.height,
                crate::backbone::STRIDE
            )));
        }
        Ok(())
    }
}

/// Optimization schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs optimizing only the embedding-block loss.
    pub warmup_epochs: usize,
    /// Epochs optimizing the full weighted loss.
    pub joint_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            joint_epochs: 5,
            lr: 1e-4,
            batch_size: 32,
            weights: LossWeights::default(),
            seed: 0,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

impl Config {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "stage_widths" => {
                let parts = value
                    .split(',')
                    .map(|p| parse::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                m.stage_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("stage_widths needs three comma-separated values".into()))?;
            }
            "backbone_units" => m.backbone_units = parse(key, value)?,
            "fpn" => m.fpn = parse_bool(key, value)?,
            "gsrm_units" => m.gsrm_units = parse(key, value)?,
            "shared_streams" => m.shared_streams = parse_bool(key, value)?,
            "teacher_forcing" => m.teacher_forcing = parse_bool(key, value)?,
            "fusion" => m.fusion = value.parse()?,
            "decoder" => m.decoder = value.parse()?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "joint_epochs" => t.joint_epochs = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "alpha_e" => t.weights.alpha_e = parse(key, value)?,
            "alpha_r" => t.weights.alpha_r = parse(key, value)?,
            "alpha_f" => t.weights.alpha_f = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let w = m.stage_widths;
        vec![
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("max_len", m.max_len.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("stage_widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("backbone_units", m.backbone_units.to_string()),
            ("fpn", m.fpn.to_string()),
            ("gsrm_units", m.gsrm_units.to_string()),
            ("shared_streams", m.shared_streams.to_string()),
            ("teacher_forcing", m.teacher_forcing.to_string()),
            ("fusion", m.fusion.to_string()),
            ("decoder", m.decoder.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("joint_epochs", t.joint_epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("alpha_e", t.weights.alpha_e.to_string()),
            ("alpha_r", t.weights.alpha_r.to_string()),
            ("alpha_f", t.weights.alpha_f.to_string()),
            ("seed", t.seed.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
        ]
    }

    /// `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.model.decoder = DecoderKind::Bsrm;
        cfg.model.fusion = Fusion::Dot;
        cfg.train.lr = 3e-4;
        cfg.train.weights.alpha_r = 0.5;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(matches!(Config::parse("depth=3\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("decoder=ctc\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("lr\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("fpn=maybe\n"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = Config::parse("# desk run\nseed = 4\n\nstage_widths=8,16,32\n").unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.model.stage_widths, [8, 16, 32]);
        assert_eq!(cfg.train.weights, LossWeights::default());
        assert_eq!(cfg.model.gsrm_units, 4);
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        assert!(Config::parse("heads=3\n").is_err());
        assert!(Config::parse("height=20\n").is_err());
        assert!(Config::parse("gsrm_units=0\n").is_err());
        assert!(Config::parse("gsrm_units=0\ndecoder=srn_no_gsrm\n").is_ok());
    }
}
