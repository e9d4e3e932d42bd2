//! Shared fixtures for the criterion benchmarks.

use srn_core::data::{batch_tensor, generate_lexicon, render_word, Charset, RenderParams};
use srn_core::harness::{Config, DecoderKind, Model};
use srn_core::Tensor;

/// Desk-scale model of the given decoder, default dimensions.
pub fn model(decoder: DecoderKind) -> Model {
    let mut cfg = Config::default().model;
    cfg.decoder = decoder;
    Model::init(&cfg, 0).expect("default config is valid")
}

/// `count` rendered words as one `[count, 16, 64, 1]` batch.
pub fn images(count: usize) -> Tensor<f32> {
    let cs = Charset::desk();
    let lex = generate_lexicon(&cs, 50, 3, 7, 0).expect("desk lexicon");
    let imgs: Vec<_> = (0..count)
        .map(|i| render_word(&lex.words()[i % lex.len()], &cs, i as u64, &RenderParams::default()).expect("fits"))
        .collect();
    batch_tensor(&imgs.iter().collect::<Vec<_>>()).expect("uniform sizes")
}
