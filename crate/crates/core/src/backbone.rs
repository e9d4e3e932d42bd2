//! Image to enhanced 2D visual features: a three-stage strided convolution
//! stack, a two-level top-down merge, 2D positional encoding and transformer
//! units over the flattened grid.

use crate::error::{Error, Result};
use crate::nn::{self, AttentionMask, Ctx, Init, ParamStore, TransformerConfig};
use crate::tensor::{Conv2dGeometry, Real, Tensor, Var};

/// Total downsampling of the backbone.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the three stride-2 stages.
    pub stage_widths: [usize; 3],
    pub transformer: TransformerConfig,
    pub units: usize,
    /// Merge the stride-4 stage into the output; otherwise only the deepest
    /// stage is projected.
    pub fpn: bool,
}

impl BackboneConfig {
    pub fn d_model(&self) -> usize {
        self.transformer.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.in_channels == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.units > 0 && !self.d_model().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "2D positional encoding needs width divisible by 4, got {}",
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Enhanced visual features `V`, stored as `[B, h*w, d]` in row-major grid
/// order.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap2D {
    pub features: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap2D {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Row/column encoding: the first `d/2` channels encode the row index, the
/// last `d/2` the column index. Returns `[h*w, d]`.
pub fn positional_encoding_2d<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D positional encoding width {d} must be divisible by 4"
        )));
    }
    let half = d / 2;
    let rows = nn::positional_encoding::<T>(h, half)?;
    let cols = nn::positional_encoding::<T>(w, half)?;
    Ok(Tensor::from_fn(&[h * w, d], |flat| {
        let (cell, j) = (flat / d, flat % d);
        let (r, c) = (cell / w, cell % w);
        if j < half {
            rows.get(&[r, j])
        } else {
            cols.get(&[c, j - half])
        }
    }))
}

const CONV3: Conv2dGeometry = Conv2dGeometry {
    kernel: 3,
    stride: 1,
    padding: 1,
};

const CONV3_S2: Conv2dGeometry = Conv2dGeometry {
    kernel: 3,
    stride: 2,
    padding: 1,
};

const CONV2_S2: Conv2dGeometry = Conv2dGeometry {
    kernel: 2,
    stride: 2,
    padding: 0,
};

pub fn init_backbone<T: Real>(store: &mut ParamStore<T>, init: &mut Init, cfg: &BackboneConfig) {
    let d = cfg.d_model();
    let mut c_in = cfg.in_channels;
    for (s, &width) in cfg.stage_widths.iter().enumerate() {
        for j in 0..2 {
            let fan_in = 9 * if j == 0 { c_in } else { width };
            nn::init_linear(store, init, &format!("backbone.stage{s}.conv{j}"), fan_in, width, true);
            nn::init_layer_norm(store, init, &format!("backbone.stage{s}.norm{j}"), width);
        }
        c_in = width;
    }
    nn::init_linear(store, init, "backbone.lateral3", cfg.stage_widths[2], d, true);
    if cfg.fpn {
        nn::init_linear(store, init, "backbone.lateral2", cfg.stage_widths[1], d, true);
        nn::init_linear(store, init, "backbone.smooth", 4 * d, d, true);
    }
    for u in 0..cfg.units {
        nn::init_transformer_unit(store, init, &format!("backbone.unit{u}"), &cfg.transformer);
    }
}

/// Convolution of `[B,H,W,C]` via patch unfolding and a matrix product.
fn conv2d<T: Real>(cx: &mut Ctx<T>, x: Var, prefix: &str, geom: Conv2dGeometry) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let cols = cx.g.im2col(x, geom)?;
    let y = nn::linear(cx, cols, prefix)?;
    let c_out = cx.g.shape(y)[1];
    cx.g.reshape(y, &[b, geom.output_extent(h), geom.output_extent(w), c_out])
}

fn conv_norm_relu<T: Real>(cx: &mut Ctx<T>, x: Var, prefix: &str, j: usize, geom: Conv2dGeometry) -> Result<Var> {
    let y = conv2d(cx, x, &format!("{prefix}.conv{j}"), geom)?;
    let y = nn::layer_norm(cx, y, &format!("{prefix}.norm{j}"))?;
    Ok(cx.g.relu(y))
}

/// Convolutional part only: returns the merged stride-8 map `[B, h, w, d]`
/// before positional encoding.
pub fn conv_features<T: Real>(cx: &mut Ctx<T>, images: Var, cfg: &BackboneConfig) -> Result<Var> {
    let s = cx.g.shape(images).to_vec();
    if s.len() != 4 || s[3] != cfg.in_channels {
        return Err(Error::Input(format!(
            "expected images [B,H,W,{}], got {:?}",
            cfg.in_channels, s
        )));
    }
    if !s[1].is_multiple_of(STRIDE) || !s[2].is_multiple_of(STRIDE) || s[1] == 0 || s[2] == 0 {
        return Err(Error::Input(format!(
            "image size {}x{} is not divisible by {STRIDE}",
            s[1], s[2]
        )));
    }
    let mut x = images;
    let mut stages = Vec::with_capacity(3);
    for stage in 0..3 {
        let prefix = format!("backbone.stage{stage}");
        x = conv_norm_relu(cx, x, &prefix, 0, CONV3_S2)?;
        x = conv_norm_relu(cx, x, &prefix, 1, CONV3)?;
        stages.push(x);
    }
    let top = nn::linear(cx, stages[2], "backbone.lateral3")?;
    if !cfg.fpn {
        return Ok(top);
    }
    // Top-down merge at stride 4, then back to stride 8.
    let up = cx.g.upsample2(top)?;
    let lateral = nn::linear(cx, stages[1], "backbone.lateral2")?;
    let merged = cx.g.add(up, lateral)?;
    conv2d(cx, merged, "backbone.smooth", CONV2_S2)
}

/// Maps `images: [B,H,W,C]` to `V` with `h = H/8`, `w = W/8`.
pub fn extract_features<T: Real>(cx: &mut Ctx<T>, images: Var, cfg: &BackboneConfig) -> Result<FeatureMap2D> {
    let map = conv_features(cx, images, cfg)?;
    let s = cx.g.shape(map).to_vec();
    let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
    let mut seq = cx.g.reshape(map, &[b, h * w, d])?;
    if cfg.units > 0 {
        let pe = cx.constant(positional_encoding_2d(h, w, d)?);
        seq = cx.g.add_trailing(seq, pe)?;
        let mask = AttentionMask::full(h * w, h * w);
        for u in 0..cfg.units {
            seq = nn::transformer_unit(cx, seq, &mask, &format!("backbone.unit{u}"), &cfg.transformer)?;
        }
    }
    Ok(FeatureMap2D {
        features: seq,
        batch: b,
        height: h,
        width: w,
        channels: d,
    })
}
