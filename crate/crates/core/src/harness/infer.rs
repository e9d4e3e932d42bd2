use std::fs;
use std::path::{Path, PathBuf};

use super::model::Model;
use crate::backbone::STRIDE;
use crate::data::{batch_tensor, decode_labels, pgm, Charset, GrayImage};
use crate::error::{Error, Result};

/// Min-max rescales one `h x w` attention map to `0..=255` and upsamples it
/// by nearest neighbour to `STRIDE * h x STRIDE * w`. A constant map becomes
/// mid gray.
pub fn attention_image(map: &[f32], h: usize, w: usize) -> Result<GrayImage> {
    if map.len() != h * w {
        return Err(Error::Shape {
            op: "attention map",
            lhs: vec![map.len()],
            rhs: vec![h, w],
        });
    }
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let level = |v: f32| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    };
    let mut img = GrayImage::new(w * STRIDE, h * STRIDE);
    for y in 0..img.height {
        for x in 0..img.width {
            img.pixels[y * img.width + x] = level(map[(y / STRIDE) * w + x / STRIDE]);
        }
    }
    Ok(img)
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub text: String,
    /// Attention map files written, one per decoded character.
    pub maps: Vec<PathBuf>,
}

/// Decodes one image. With `dump` set, writes `attn_<t>.pgm` into that
/// directory for every decoded position.
pub fn infer_image(model: &Model, charset: &Charset, image: &GrayImage, dump: Option<&Path>) -> Result<Inference> {
    if charset.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "charset has {} classes, model expects {}",
            charset.num_classes(),
            model.config.num_classes
        )));
    }
    let out = model.decode(&batch_tensor(&[image])?)?;
    let seq = &out.sequences[0];
    let text = decode_labels(seq, charset);
    let mut maps = Vec::new();
    if let Some(dir) = dump {
        let attention = out
            .attention
            .as_ref()
            .ok_or_else(|| Error::Config(format!("decoder `{}` has no attention maps", model.config.decoder)))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = out.grid;
        for t in 0..seq.len() {
            let path = dir.join(format!("attn_{t:02}.pgm"));
            pgm::write(&path, &attention_image(attention.row(t), h, w)?)?;
            maps.push(path);
        }
    }
    Ok(Inference { text, maps })
}

/// [`infer_image`] on a PGM file.
pub fn infer_file(model: &Model, charset: &Charset, image: &Path, dump: Option<&Path>) -> Result<Inference> {
    infer_image(model, charset, &pgm::read(image)?, dump)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_mid_gray() {
        let img = attention_image(&[0.25; 4], 1, 4).unwrap();
        assert_eq!((img.width, img.height), (32, 8));
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn rescale_and_nearest_upsample() {
        let img = attention_image(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(7, 7), 0);
        assert_eq!(img.get(8, 0), 128);
        assert_eq!(img.get(15, 7), 128);
        assert_eq!(img.get(0, 8), 255);
        assert_eq!(img.get(8, 15), 64);
    }
}
