use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pgm, render_word, Charset, GrayImage, Lexicon, RenderParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: GrayImage,
    pub word: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Samples over all splits.
    pub count: usize,
    /// Train / val / test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub render: RenderParams,
}

impl DatasetSpec {
    /// Sample indices of each split: train and val take `round(count * r)`,
    /// test takes the rest.
    pub fn range(&self, split: Split) -> Range<usize> {
        let train = (self.count as f64 * self.ratios[0]).round() as usize;
        let val = ((self.count as f64 * self.ratios[1]).round() as usize).min(self.count - train.min(self.count));
        let train = train.min(self.count);
        match split {
            Split::Train => 0..train,
            Split::Val => train..train + val,
            Split::Test => train + val..self.count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be fractions summing to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

/// Render seed of sample `index`: the first draw of stream `index` of a
/// generator keyed by the master seed, so samples can be produced in any
/// order.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Sample `index` shows lexicon word `index mod |lexicon|`, which keeps word
/// frequencies uniform.
fn sample(lexicon: &Lexicon, charset: &Charset, spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let word = lexicon.words()[index % lexicon.len()].clone();
    let image = render_word(&word, charset, sample_seed(spec.seed, index), &spec.render)?;
    Ok(Sample { image, word })
}

/// Renders one split in memory.
pub fn synthesize(lexicon: &Lexicon, charset: &Charset, spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    if lexicon.is_empty() {
        return Err(Error::Input("lexicon is empty".into()));
    }
    spec.range(split).map(|i| sample(lexicon, charset, spec, i)).collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `charset.txt`, `lexicon.txt`, `dataset.txt` and, per split, a
/// directory of PGM images plus a `<split>.tsv` manifest of
/// `<relative path>\t<word>` lines. Returns the per-split sample counts.
pub fn generate_dataset(dir: &Path, lexicon: &Lexicon, charset: &Charset, spec: &DatasetSpec) -> Result<[usize; 3]> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    charset.save(&dir.join("charset.txt"))?;
    lexicon.save(&dir.join("lexicon.txt"))?;
    let r = &spec.render;
    write_file(
        &dir.join("dataset.txt"),
        format!(
            "count={}\nratios={},{},{}\nseed={}\nheight={}\nwidth={}\nnoise={}\nconfusability={}\n",
            spec.count,
            spec.ratios[0],
            spec.ratios[1],
            spec.ratios[2],
            spec.seed,
            r.height,
            r.width,
            r.noise,
            r.confusability
        ),
    )?;
    let mut counts = [0; 3];
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut manifest = String::new();
        for i in spec.range(split) {
            let s = sample(lexicon, charset, spec, i)?;
            let rel = format!("{}/{i:06}.pgm", split.name());
            pgm::write(&dir.join(&rel), &s.image)?;
            manifest.push_str(&format!("{rel}\t{}\n", s.word));
            counts[k] += 1;
        }
        write_file(&dir.join(format!("{}.tsv", split.name())), manifest)?;
    }
    Ok(counts)
}

/// Reads a split written by [`generate_dataset`].
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let path = dir.join(format!("{}.tsv", split.name()));
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    manifest
        .lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (rel, word) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("manifest line without tab: `{line}`")))?;
            Ok(Sample {
                image: pgm::read(&dir.join(rel))?,
                word: word.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_labels, generate_lexicon};
    use std::collections::BTreeMap;

    fn spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            ratios: [0.8, 0.1, 0.1],
            seed: 7,
            render: RenderParams::default(),
        }
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let s = spec(100);
        assert_eq!(s.range(Split::Train), 0..80);
        assert_eq!(s.range(Split::Val), 80..90);
        assert_eq!(s.range(Split::Test), 90..100);
        let s = DatasetSpec {
            ratios: [0.5, 0.6, -0.1],
            ..s
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn word_frequencies_are_uniform() {
        let cs = Charset::desk();
        let lex = generate_lexicon(&cs, 50, 3, 7, 3).unwrap();
        let s = spec(10_000);
        let mut counts = BTreeMap::new();
        for i in s.range(Split::Train) {
            *counts.entry(&lex.words()[i % lex.len()]).or_insert(0usize) += 1;
        }
        let expected = 8000.0 / 50.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() <= 0.2 * expected);
        }
        assert_eq!(counts.len(), 50);
    }

    #[test]
    fn samples_satisfy_eos_padding() {
        let cs = Charset::desk();
        let lex = generate_lexicon(&cs, 20, 3, 7, 4).unwrap();
        for s in synthesize(&lex, &cs, &spec(60), Split::Val).unwrap() {
            let labels = encode_labels(&s.word, &cs, 8).unwrap();
            assert!(labels[s.word.len()..].iter().all(|&c| c == cs.eos()));
        }
    }

    #[test]
    fn seeds_are_order_free_and_distinct() {
        let seeds: Vec<u64> = (0..200).map(|i| sample_seed(5, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 200);
        assert_eq!(sample_seed(5, 123), seeds[123]);
    }

    #[test]
    fn disk_round_trip_is_byte_identical() {
        let cs = Charset::desk();
        let lex = generate_lexicon(&cs, 10, 3, 7, 5).unwrap();
        let s = spec(40);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(generate_dataset(a.path(), &lex, &cs, &s).unwrap(), [32, 4, 4]);
        generate_dataset(b.path(), &lex, &cs, &s).unwrap();
        for rel in [
            "train.tsv",
            "test.tsv",
            "charset.txt",
            "lexicon.txt",
            "dataset.txt",
            "val/000035.pgm",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
        let loaded = load_split(a.path(), Split::Test).unwrap();
        let memory = synthesize(&lex, &cs, &s, Split::Test).unwrap();
        assert_eq!(loaded.len(), 4);
        for (x, y) in loaded.iter().zip(&memory) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.word, y.word);
        }
        assert_eq!(Charset::load(&a.path().join("charset.txt")).unwrap(), cs);
        assert_eq!(Lexicon::load(&a.path().join("lexicon.txt")).unwrap(), lex);
    }
}
