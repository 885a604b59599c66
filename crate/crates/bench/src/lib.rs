//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use typhoon_core::embeddings::{build_vocab, EmbeddingTable};
use typhoon_core::text::{Token, TokenSeq};
use typhoon_core::trainer::{LabeledSeq, Slot};
use typhoon_core::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `words` random tokens with `d`-dimensional vectors.
pub fn random_table(words: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = TokenSeq {
        source_id: String::new(),
        tokens: (0..words).map(|i| Token::word(format!("w{i}"))).collect(),
    };
    let vocab = build_vocab(&[seq], 1).unwrap();
    let vectors = random_tensor(&mut rng, &[vocab.len(), d]);
    EmbeddingTable {
        vocab,
        vectors,
        d,
        entity_marks: Default::default(),
    }
}

/// Slots with `tweets` tweets of length `s` each, plus a labeled sentiment sample.
pub fn random_batch(n: usize, tweets: usize, s: usize, vocab: usize, seed: u64) -> (Vec<Slot>, Vec<LabeledSeq>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = |rng: &mut ChaCha8Rng| (0..s).map(|_| rng.random_range(1..vocab)).collect::<Vec<usize>>();
    let slots = (0..n)
        .map(|i| Slot {
            static_features: (0..6).map(|_| rng.random()).collect(),
            tweets: (0..tweets).map(|_| tokens(&mut rng)).collect(),
            label: i % 4,
        })
        .collect();
    let labeled = (0..n)
        .map(|i| LabeledSeq {
            tokens: tokens(&mut rng),
            label: i % 2,
        })
        .collect();
    (slots, labeled)
}
