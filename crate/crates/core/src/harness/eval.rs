use super::model::Model;
use crate::data::{batch_tensor, decode_labels, Charset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Fraction of exact word matches.
    pub word_accuracy: f64,
    /// Mean of `1 - edit_distance / max(len)` over samples.
    pub char_accuracy: f64,
    pub samples: usize,
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)`; two empty strings score 1.
pub fn char_similarity(predicted: &str, truth: &str) -> f64 {
    let (p, t): (Vec<char>, Vec<char>) = (predicted.chars().collect(), truth.chars().collect());
    let longest = p.len().max(t.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::generic_levenshtein(&p, &t) as f64 / longest as f64
}

/// Scores predicted strings against ground truth.
pub fn score(predictions: &[String], truths: &[String]) -> Metrics {
    let n = predictions.len().min(truths.len());
    if n == 0 {
        return Metrics::default();
    }
    let exact = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    let chars: f64 = predictions.iter().zip(truths).map(|(p, t)| char_similarity(p, t)).sum();
    Metrics {
        word_accuracy: exact as f64 / n as f64,
        char_accuracy: chars / n as f64,
        samples: n,
    }
}

/// Decoded strings for `samples`, in order.
pub fn predict_words(model: &Model, samples: &[Sample], charset: &Charset, batch_size: usize) -> Result<Vec<String>> {
    if charset.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "charset has {} classes, model was built for {}",
            charset.num_classes(),
            model.config.num_classes
        )));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let decoded = model.decode(&batch_tensor(&images)?)?;
        out.extend(decoded.sequences.iter().map(|seq| decode_labels(seq, charset)));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[Sample], charset: &Charset, batch_size: usize) -> Result<Metrics> {
    let predictions = predict_words(model, samples, charset, batch_size)?;
    let truths: Vec<String> = samples.iter().map(|s| s.word.clone()).collect();
    Ok(score(&predictions, &truths))
}
