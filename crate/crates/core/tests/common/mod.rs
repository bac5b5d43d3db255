#![allow(dead_code)]

use loopformer_core::data::{Batch, RESERVED};
use loopformer_core::nn::AttentionScale;
use loopformer_core::rng::Rng;
use loopformer_core::{ModelConfig, ShareMode, StackConfig};

pub fn stack(mode: ShareMode, layers: usize, loops: usize) -> StackConfig {
    StackConfig::new(mode, layers, loops)
}

pub fn tiny(enc: StackConfig, dec: StackConfig) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        encoder: enc,
        decoder: dec,
        dropout: 0.0,
        reinjection: true,
        attention_scale: AttentionScale::HeadDim,
        ln_eps: 1e-5,
    }
}

pub fn random_sentence(rng: &mut Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| RESERVED + rng.below(vocab - RESERVED))
        .collect()
}

/// Sentences of different lengths so both sides carry padding.
pub fn random_batch(rng: &mut Rng, vocab: usize, n: usize) -> Batch {
    let pairs: Vec<_> = (0..n)
        .map(|_| {
            let s = 1 + rng.below(5);
            let t = 1 + rng.below(5);
            (
                random_sentence(rng, vocab, s),
                random_sentence(rng, vocab, t),
            )
        })
        .collect();
    Batch::from_pairs(&pairs).unwrap()
}

pub const MODES: [ShareMode; 3] = [
    ShareMode::Stacked,
    ShareMode::SharedLoop,
    ShareMode::ClosedChain,
];

/// A random small configuration; closed-chain gets at least two layers.
pub fn random_config(rng: &mut Rng) -> ModelConfig {
    let side = |rng: &mut Rng| {
        let mode = MODES[rng.below(3)];
        let min = if mode == ShareMode::ClosedChain { 2 } else { 1 };
        stack(mode, min + rng.below(3), 1 + rng.below(3))
    };
    let enc = side(rng);
    let dec = side(rng);
    let mut cfg = tiny(enc, dec);
    cfg.heads = [1, 2, 4][rng.below(3)];
    cfg.reinjection = rng.below(4) != 0;
    if rng.below(2) == 0 {
        cfg.attention_scale = AttentionScale::ModelDim;
    }
    cfg
}
