use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Charset;
use crate::error::{Error, Result};

/// Valid words, in generation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
}

impl Lexicon {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Input("lexicon is empty".into()));
        }
        let unique: BTreeSet<&String> = words.iter().collect();
        if unique.len() != words.len() {
            return Err(Error::Input("lexicon has duplicate words".into()));
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.words.iter().map(|w| format!("{w}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Every single-position look-alike swap of `word`.
fn swaps<'a>(word: &'a str, charset: &'a Charset) -> impl Iterator<Item = (usize, String)> + 'a {
    let chars: Vec<char> = word.chars().collect();
    (0..chars.len()).filter_map(move |p| {
        let partner = charset.partner(chars[p])?;
        let mut swapped = chars.clone();
        swapped[p] = partner;
        Some((p, swapped.into_iter().collect()))
    })
}

/// Confirms that for every confusion pair some word uses one of its symbols
/// at a position where swapping to the partner leaves the lexicon, so the
/// word context alone decides between the two glyphs.
pub fn check_disambiguation(lexicon: &Lexicon, charset: &Charset) -> Result<()> {
    for &(a, b) in charset.pairs() {
        let witnessed = lexicon.words().iter().any(|w| {
            swaps(w, charset).any(|(p, s)| {
                let c = w.chars().nth(p);
                (c == Some(a) || c == Some(b)) && !lexicon.contains(&s)
            })
        });
        if !witnessed {
            return Err(Error::Input(format!("no word lets context separate `{a}` from `{b}`")));
        }
    }
    Ok(())
}

/// Draws `size` distinct random words with lengths in `min_len..=max_len`.
/// A candidate is rejected when a single look-alike swap would turn it into
/// a word already drawn, since no context could separate such twins.
pub fn generate_lexicon(charset: &Charset, size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Lexicon> {
    if size == 0 {
        return Err(Error::Input("lexicon size must be positive".into()));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("bad word length range {min_len}..={max_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = charset.symbols();
    let mut words: Vec<String> = Vec::with_capacity(size);
    let mut seen = BTreeSet::new();
    let mut attempts = 0usize;
    while words.len() < size {
        attempts += 1;
        if attempts > 1000 * size {
            return Err(Error::Config(format!(
                "could not draw {size} separable words from {} symbols",
                symbols.len()
            )));
        }
        let len = rng.random_range(min_len..=max_len);
        let word: String = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
        if seen.contains(&word) || swaps(&word, charset).any(|(_, s)| seen.contains(&s)) {
            continue;
        }
        seen.insert(word.clone());
        words.push(word);
    }
    let lexicon = Lexicon::new(words)?;
    check_disambiguation(&lexicon, charset)?;
    Ok(lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_lexicon_respects_contract() {
        let cs = Charset::desk();
        let lex = generate_lexicon(&cs, 50, 3, 7, 1).unwrap();
        assert_eq!(lex.len(), 50);
        for w in lex.words() {
            assert!((3..=7).contains(&w.chars().count()));
            for (_, s) in swaps(w, &cs) {
                assert!(!lex.contains(&s), "{w} has look-alike twin {s}");
            }
        }
        assert_eq!(lex, generate_lexicon(&cs, 50, 3, 7, 1).unwrap());
        assert_ne!(lex, generate_lexicon(&cs, 50, 3, 7, 2).unwrap());
    }

    #[test]
    fn checker_rejects_unseparable_lexicon() {
        let cs = Charset::new("ceab", &[('c', 'e')]).unwrap();
        // Every c/e occurrence swaps into another listed word.
        let lex = Lexicon::new(vec!["ab".into(), "ca".into(), "ea".into()]).unwrap();
        assert!(check_disambiguation(&lex, &cs).is_err());
        let lex = Lexicon::new(vec!["ab".into(), "ca".into()]).unwrap();
        assert!(check_disambiguation(&lex, &cs).is_ok());
    }

    #[test]
    fn empty_or_duplicate_words_rejected() {
        assert!(Lexicon::new(vec![]).is_err());
        assert!(Lexicon::new(vec!["a".into(), "a".into()]).is_err());
        assert!(generate_lexicon(&Charset::desk(), 0, 3, 7, 0).is_err());
    }
}
