//! Seeded fixtures shared by the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zdc_core::corpus::{self, Corpus, CorpusSpec};
use zdc_core::model::{FoldedModel, ModelDims, ToyModel};
use zdc_core::pipeline::{
    collect_activations, compute_rotations, fold_parameters, ActivationBank,
};
use zdc_core::tensor::Matrix;

pub fn dense(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub struct Fixture {
    pub model: ToyModel,
    pub folded: FoldedModel,
    pub corpus: Corpus,
    pub bank: ActivationBank,
    pub tokens: Vec<u32>,
}

/// One mid-sized model with everything the benches need derived from it.
pub fn fixture() -> Fixture {
    let dims = ModelDims { n_layers: 2, n_heads: 4, head_dim: 16, d_mlp: 32, vocab: 32 };
    let spec = CorpusSpec { vocab: 32, n_topics: 2, sequences_per_topic: 6, seq_len: 32 };
    let model = ToyModel::generate(dims, 77).unwrap();
    let corpus = corpus::generate(&spec, 78).unwrap();
    let bank = collect_activations(&model, &corpus).unwrap();
    let rotations = compute_rotations(&model, &bank, 24, 10, 79).unwrap();
    let folded = fold_parameters(&model, &rotations).unwrap();
    let tokens = corpus.all_sequences()[0].to_vec();
    Fixture { model, folded, corpus, bank, tokens }
}
