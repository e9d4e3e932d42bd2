use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::{Charset, GrayImage};
use crate::error::{Error, Result};

/// Largest horizontal start offset, in unscaled pixels.
pub const MAX_OFFSET: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive Gaussian pixel noise, in `[0, 1]`
    /// intensity units.
    pub noise: f64,
    /// Upper bound of the per-glyph interpolation factor toward the
    /// look-alike; glyphs drawn past 0.5 resemble their partner more.
    pub confusability: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            height: 16,
            width: 64,
            noise: 0.2,
            confusability: 0.7,
        }
    }
}

impl RenderParams {
    /// Horizontal and vertical glyph scale.
    pub fn scale(&self) -> (usize, usize) {
        ((self.width / 64).max(1), (self.height / 8).max(1))
    }

    /// Horizontal distance between glyph origins.
    pub fn advance(&self) -> usize {
        (GLYPH_WIDTH + 2) * self.scale().0
    }

    /// Longest word that fits.
    pub fn max_chars(&self) -> usize {
        let xs = self.scale().0;
        (self.width + 2 * xs) / self.advance()
    }
}

/// Renders `word` as light glyphs on a darker background. All randomness
/// (placement, jitter, contrast, blending factors, noise) comes from `seed`.
pub fn render_word(word: &str, charset: &Charset, seed: u64, params: &RenderParams) -> Result<GrayImage> {
    let chars: Vec<char> = word.chars().collect();
    for &c in &chars {
        if charset.index(c).is_none() {
            return Err(Error::Input(format!("`{c}` in `{word}` is not in the charset")));
        }
    }
    let (xs, ys) = params.scale();
    let (gw, gh) = (GLYPH_WIDTH * xs, GLYPH_HEIGHT * ys);
    if chars.len() > params.max_chars() || gh > params.height {
        return Err(Error::Input(format!(
            "`{word}` does not fit a {}x{} image",
            params.width, params.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = if chars.is_empty() {
        0
    } else {
        (chars.len() - 1) * params.advance() + gw
    };
    let x0 = rng.random_range(0..=(params.width - span).min(MAX_OFFSET * xs));
    let y0 = (params.height - gh) / 2;
    let background: f64 = rng.random_range(0.0..0.3);
    let ink = rng.random_range(0.7..1.0);

    let mut canvas = vec![background; params.width * params.height];
    for (i, &c) in chars.iter().enumerate() {
        let base = font::glyph(c).expect("charset symbols have glyphs");
        let u = rng.random_range(0.0..=1.0) * params.confusability;
        let coverage = match charset.partner(c) {
            Some(p) => font::blend(&base, &font::glyph(p).expect("charset symbols have glyphs"), u as f32),
            None => base.to_vec(),
        };
        let jx = rng.random_range(-1i64..=1);
        let jy = rng.random_range(-1i64..=1);
        let gx = (x0 + i * params.advance()) as i64 + jx;
        let gy = y0 as i64 + jy;
        for py in 0..gh {
            for px in 0..gw {
                let cov = coverage[(py / ys) * GLYPH_WIDTH + px / xs] as f64;
                let (x, y) = (gx + px as i64, gy + py as i64);
                if cov == 0.0 || x < 0 || y < 0 || x >= params.width as i64 || y >= params.height as i64 {
                    continue;
                }
                let cell = &mut canvas[y as usize * params.width + x as usize];
                *cell = cell.max(background + (ink - background) * cov);
            }
        }
    }
    if params.noise > 0.0 {
        let normal = Normal::new(0.0, params.noise).map_err(|e| Error::Config(format!("noise level: {e}")))?;
        for v in &mut canvas {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(GrayImage {
        width: params.width,
        height: params.height,
        pixels: canvas
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> RenderParams {
        RenderParams {
            noise: 0.0,
            confusability: 0.0,
            ..RenderParams::default()
        }
    }

    #[test]
    fn same_seed_same_image() {
        let cs = Charset::desk();
        let p = RenderParams::default();
        assert_eq!(
            render_word("local", &cs, 9, &p).unwrap(),
            render_word("local", &cs, 9, &p).unwrap()
        );
        assert_ne!(
            render_word("local", &cs, 9, &p).unwrap(),
            render_word("local", &cs, 10, &p).unwrap()
        );
    }

    #[test]
    fn clean_render_uses_two_levels() {
        let cs = Charset::desk();
        let img = render_word("tus", &cs, 3, &clean()).unwrap();
        let mut levels: Vec<u8> = img.pixels.clone();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels.len(), 2);
        let ink = levels[1];
        let inked = img.pixels.iter().filter(|&&p| p == ink).count();
        let expected: f32 = "tus".chars().map(|c| font::glyph(c).unwrap().iter().sum::<f32>()).sum();
        assert_eq!(inked, expected as usize * 2);
    }

    #[test]
    fn confusability_pulls_pairs_together() {
        let cs = Charset::desk();
        // Same seed, so placement and blend draws coincide between the two
        // words; only the blended coverage differs.
        let gap = |conf: f64, seed: u64| {
            let p = RenderParams {
                confusability: conf,
                ..clean()
            };
            let x = render_word("ce", &cs, seed, &p).unwrap();
            let y = render_word("ec", &cs, seed, &p).unwrap();
            x.pixels
                .iter()
                .zip(&y.pixels)
                .map(|(&u, &v)| (u as i64 - v as i64).abs())
                .sum::<i64>()
        };
        let total = |conf: f64| (0..50).map(|s| gap(conf, s)).sum::<i64>();
        assert!((0..50).all(|s| gap(0.0, s) > 0));
        assert!(total(0.7) < total(0.3) && total(0.3) < total(0.0));
    }

    #[test]
    fn overlong_words_rejected() {
        let cs = Charset::desk();
        let p = RenderParams::default();
        assert_eq!(p.max_chars(), 9);
        assert!(render_word("aaaaaaaaa", &cs, 0, &p).is_ok());
        assert!(matches!(render_word("aaaaaaaaaa", &cs, 0, &p), Err(Error::Input(_))));
        assert!(matches!(render_word("ax", &cs, 0, &p), Err(Error::Input(_))));
    }

    #[test]
    fn larger_canvas_scales_glyphs() {
        let p = RenderParams {
            height: 64,
            width: 256,
            ..clean()
        };
        assert_eq!(p.scale(), (4, 8));
        let img = render_word("0123456", &Charset::alphanumeric(), 1, &p).unwrap();
        assert_eq!(img.pixels.len(), 64 * 256);
    }
}
