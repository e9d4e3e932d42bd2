//! Synthetic glyph-word images: charset, lexicon, renderer and on-disk
//! dataset layout.

mod dataset;
pub mod font;
mod lexicon;
pub mod pgm;
mod render;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use dataset::{generate_dataset, load_split, synthesize, DatasetSpec, Sample, Split};
pub use lexicon::{check_disambiguation, generate_lexicon, Lexicon};
pub use render::{render_word, RenderParams};

/// Ordered symbols plus the glyph pairs that are rendered toward each
/// other. Class `i < len` is `symbols[i]`; class `len` is EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    pairs: Vec<(char, char)>,
}

impl Charset {
    pub fn new(symbols: &str, pairs: &[(char, char)]) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("symbol `{c}` listed twice")));
            }
            if !font::has_glyph(*c) {
                return Err(Error::Config(format!("no glyph for symbol `{c}`")));
            }
        }
        for &(a, b) in pairs {
            if a == b || !symbols.contains(&a) || !symbols.contains(&b) {
                return Err(Error::Config(format!("invalid confusion pair ({a}, {b})")));
            }
        }
        Ok(Self {
            symbols,
            pairs: pairs.to_vec(),
        })
    }

    /// Twelve lowercase letters, four of them paired with a look-alike.
    pub fn desk() -> Self {
        Self::new("acehilnorstu", &[('c', 'e'), ('i', 'l'), ('h', 'n'), ('a', 'o')]).expect("valid builtin charset")
    }

    /// `0-9a-z`, no confusion pairs.
    pub fn alphanumeric() -> Self {
        Self::new("0123456789abcdefghijklmnopqrstuvwxyz", &[]).expect("valid builtin charset")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn pairs(&self) -> &[(char, char)] {
        &self.pairs
    }

    /// Classes including EOS.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// The look-alike partner of `c`, if any.
    pub fn partner(&self, c: char) -> Option<char> {
        self.pairs.iter().find_map(|&(a, b)| match c {
            _ if c == a => Some(b),
            _ if c == b => Some(a),
            _ => None,
        })
    }

    /// One symbol per line, then a blank line, then one `a b` pair per line.
    pub fn to_text(&self) -> String {
        let mut out: String = self.symbols.iter().map(|c| format!("{c}\n")).collect();
        if !self.pairs.is_empty() {
            out.push('\n');
            for (a, b) in &self.pairs {
                out.push_str(&format!("{a} {b}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut symbols = String::new();
        let mut pairs = Vec::new();
        let mut in_pairs = false;
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                in_pairs = true;
                continue;
            }
            if in_pairs {
                let parts: Vec<char> = line.split(' ').filter_map(|p| p.chars().next()).collect();
                match parts[..] {
                    [a, b] => pairs.push((a, b)),
                    _ => return Err(Error::Config(format!("bad confusion pair line `{line}`"))),
                }
            } else {
                let mut chars = line.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => symbols.push(c),
                    _ => return Err(Error::Config(format!("charset line `{line}` is not one symbol"))),
                }
            }
        }
        Self::new(&symbols, &pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Class indices of `word` followed by EOS up to length `n`.
pub fn encode_labels(word: &str, charset: &Charset, n: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    for c in word.chars() {
        out.push(
            charset
                .index(c)
                .ok_or_else(|| Error::Input(format!("`{c}` in `{word}` is not in the charset")))?,
        );
    }
    if out.len() >= n {
        return Err(Error::Input(format!(
            "`{word}` has {} symbols, at most {} fit with EOS in length {n}",
            out.len(),
            n.saturating_sub(1)
        )));
    }
    out.resize(n, charset.eos());
    Ok(out)
}

/// Symbols up to the first EOS.
pub fn decode_labels(labels: &[usize], charset: &Charset) -> String {
    labels
        .iter()
        .take_while(|&&c| c != charset.eos())
        .filter_map(|&c| charset.symbols.get(c))
        .collect()
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixels scaled to `[0, 1]`, shaped `[H, W, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 1], |i| T::lit(self.pixels[i] as f64 / 255.0))
    }
}

/// Stacks images of equal size into a `[B, H, W, 1]` batch.
pub fn batch_tensor<T: Real>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Input(format!(
                "image of size {}x{} in a batch of {w}x{h}",
                img.width, img.height
            )));
        }
        data.extend(img.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)));
    }
    Tensor::new(vec![images.len(), h, w, 1], data)
}
