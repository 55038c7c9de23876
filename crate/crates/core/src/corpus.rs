//! Synthetic calibration corpus: a handful of topics, each a first-order
//! Markov chain over a shared vocabulary, biased so topics have
//! distinguishable bigram statistics. Pruning removes a fixed fraction of
//! sequences per topic uniformly at random under the run seed.

use crate::error::Error;
use crate::formats;
use crate::rng;
use crate::tensor::Matrix;
use crate::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: String,
    pub vocab: usize,
    pub topics: Vec<Topic>,
}

pub const CORPUS_SCHEMA: &str = "zdc-corpus/1";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub n_topics: usize,
    pub sequences_per_topic: usize,
    pub seq_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { vocab: 256, n_topics: 8, sequences_per_topic: 32, seq_len: 64 }
    }
}

/// Per-topic transition table. Each topic gets a preferred vocabulary block
/// whose transitions are upweighted, so bigram counts separate topics.
fn topic_transitions(spec: &CorpusSpec, topic: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream_n(seed, "corpus-transitions", topic as u64);
    let block = spec.vocab / spec.n_topics.max(1);
    let lo = topic * block;
    let hi = if topic + 1 == spec.n_topics { spec.vocab } else { lo + block };
    (0..spec.vocab)
        .map(|_| {
            let mut row: Vec<f64> = (0..spec.vocab)
                .map(|j| {
                    let base: f64 = r.gen_range(0.05..1.0);
                    if j >= lo && j < hi {
                        base * 8.0
                    } else {
                        base
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            for v in &mut row {
                *v /= total;
            }
            row
        })
        .collect()
}

fn sample_from(weights: &[f64], r: &mut impl Rng) -> u32 {
    let x: f64 = r.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// Draws the full corpus for a spec and seed.
pub fn generate(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.vocab == 0 || spec.n_topics == 0 || spec.seq_len == 0 {
        return Err(Error::EmptyCorpus { context: "zero-sized corpus spec".into() });
    }
    let mut topics = Vec::with_capacity(spec.n_topics);
    for t in 0..spec.n_topics {
        let table = topic_transitions(spec, t, seed);
        let block = spec.vocab / spec.n_topics;
        let lo = t * block;
        let mut sequences = Vec::with_capacity(spec.sequences_per_topic);
        for s in 0..spec.sequences_per_topic {
            let mut r = rng::stream_n(seed, "corpus-seq", (t * spec.sequences_per_topic + s) as u64);
            let mut tok = (lo + r.gen_range(0..block.max(1))).min(spec.vocab - 1) as u32;
            let mut seq = Vec::with_capacity(spec.seq_len);
            seq.push(tok);
            for _ in 1..spec.seq_len {
                tok = sample_from(&table[tok as usize], &mut r);
                seq.push(tok);
            }
            sequences.push(seq);
        }
        topics.push(Topic { name: format!("topic-{t}"), sequences });
    }
    Ok(Corpus { schema: CORPUS_SCHEMA.into(), vocab: spec.vocab, topics })
}

/// Removes `floor(drop_ratio * n)` sequences per topic, chosen uniformly at
/// random under the seed, keeping at least one sequence per topic and
/// preserving topic and sequence order.
pub fn prune_corpus(corpus: &Corpus, drop_ratio: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::BadDropRatio { value: drop_ratio });
    }
    let mut topics = Vec::with_capacity(corpus.topics.len());
    for (t, topic) in corpus.topics.iter().enumerate() {
        let n = topic.sequences.len();
        if n == 0 {
            return Err(Error::EmptyCorpus { context: format!("topic {} has no sequences", topic.name) });
        }
        // Guarded floor: bare f64 products like 0.3 * 10 land just below the
        // integer and would under-remove.
        let drop = (((drop_ratio * n as f64) + 1e-9).floor() as usize).min(n - 1);
        let mut indices: Vec<usize> = (0..n).collect();
        let mut r = rng::stream_n(seed, "corpus-prune", t as u64);
        indices.shuffle(&mut r);
        let mut removed: Vec<bool> = vec![false; n];
        for &i in indices.iter().take(drop) {
            removed[i] = true;
        }
        let sequences: Vec<Vec<u32>> = topic
            .sequences
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed[*i])
            .map(|(_, s)| s.clone())
            .collect();
        topics.push(Topic { name: topic.name.clone(), sequences });
    }
    Ok(Corpus { schema: corpus.schema.clone(), vocab: corpus.vocab, topics })
}

/// Additive-smoothed log transition probabilities pooled over the whole
/// corpus: row `x`, column `y` holds `ln p(y | x)` estimated from every
/// adjacent pair. The result is a vocab x vocab matrix with rows summing
/// to one in probability space.
pub fn bigram_log_probs(corpus: &Corpus, smoothing: f64) -> Result<Matrix> {
    if !(smoothing > 0.0) {
        return Err(Error::Invalid("bigram smoothing must be positive".into()));
    }
    let v = corpus.vocab;
    if v == 0 {
        return Err(Error::EmptyCorpus { context: "bigram table over an empty vocabulary".into() });
    }
    let mut counts = vec![0.0f64; v * v];
    for seq in corpus.all_sequences() {
        for w in seq.windows(2) {
            let (x, y) = (w[0] as usize, w[1] as usize);
            if x >= v || y >= v {
                return Err(Error::TokenOutOfRange { token: w[0].max(w[1]), vocab: v });
            }
            counts[x * v + y] += 1.0;
        }
    }
    Ok(Matrix::from_fn(v, v, |x, y| {
        let row_total: f64 = counts[x * v..(x + 1) * v].iter().sum();
        ((counts[x * v + y] + smoothing) / (row_total + smoothing * v as f64)).ln()
    }))
}

impl Corpus {
    pub fn total_sequences(&self) -> usize {
        self.topics.iter().map(|t| t.sequences.len()).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.topics
            .iter()
            .map(|t| t.sequences.iter().map(|s| s.len()).sum::<usize>())
            .sum()
    }

    /// All sequences flattened in topic order.
    pub fn all_sequences(&self) -> Vec<&[u32]> {
        self.topics
            .iter()
            .flat_map(|t| t.sequences.iter().map(|s| s.as_slice()))
            .collect()
    }
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    formats::save_json(corpus, path)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let corpus: Corpus = formats::load_json(path)?;
    if corpus.schema != CORPUS_SCHEMA {
        return Err(Error::BadArtifact {
            path: path.display().to_string(),
            reason: format!("unexpected schema {}", corpus.schema),
        });
    }
    for topic in &corpus.topics {
        for seq in &topic.sequences {
            for &tok in seq {
                if tok as usize >= corpus.vocab {
                    return Err(Error::TokenOutOfRange { token: tok, vocab: corpus.vocab });
                }
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_spec() -> CorpusSpec {
        CorpusSpec { vocab: 24, n_topics: 3, sequences_per_topic: 30, seq_len: 40 }
    }

    fn bigram_counts(seqs: &[Vec<u32>], vocab: usize) -> Vec<f64> {
        let mut counts = vec![0.0; vocab * vocab];
        for s in seqs {
            for w in s.windows(2) {
                counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
            }
        }
        counts
    }

    /// Chi-square statistic of observed counts against the smoothed
    /// frequency profile of a reference sample.
    fn chi_square(obs: &[f64], reference: &[f64]) -> f64 {
        let total_obs: f64 = obs.iter().sum();
        let total_ref: f64 = reference.iter().sum::<f64>() + reference.len() as f64;
        let mut stat = 0.0;
        for (o, r) in obs.iter().zip(reference) {
            let expected = total_obs * (r + 1.0) / total_ref;
            stat += (o - expected) * (o - expected) / expected;
        }
        stat
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&test_spec(), 5).unwrap();
        let b = generate(&test_spec(), 5).unwrap();
        assert_eq!(a.topics[2].sequences, b.topics[2].sequences);
        let c = generate(&test_spec(), 6).unwrap();
        assert_ne!(a.topics[0].sequences, c.topics[0].sequences);
    }

    #[test]
    fn topics_have_distinguishable_bigrams() {
        let corpus = generate(&test_spec(), 5).unwrap();
        let v = corpus.vocab;
        let a = &corpus.topics[0].sequences;
        let b = &corpus.topics[1].sequences;
        let a1 = bigram_counts(&a[..15], v);
        let a2 = bigram_counts(&a[15..], v);
        let bb = bigram_counts(b, v);
        let within = chi_square(&a1, &a2);
        let cross = chi_square(&a1, &bb);
        assert!(
            cross > 5.0 * within,
            "cross-topic chi-square {cross} not separated from within-topic {within}"
        );
    }

    #[test]
    fn prune_removes_floor_fraction_per_topic() {
        let corpus = generate(&test_spec(), 5).unwrap();
        let pruned = prune_corpus(&corpus, 0.5, 17).unwrap();
        for (orig, kept) in corpus.topics.iter().zip(&pruned.topics) {
            let n = orig.sequences.len();
            assert_eq!(kept.sequences.len(), n - n / 2);
        }
        // Odd count: floor semantics.
        let mut odd = corpus.clone();
        odd.topics[0].sequences.truncate(7);
        let pruned_odd = prune_corpus(&odd, 0.5, 17).unwrap();
        assert_eq!(pruned_odd.topics[0].sequences.len(), 4);
    }

    #[test]
    fn prune_is_deterministic_and_seed_sensitive() {
        let corpus = generate(&test_spec(), 5).unwrap();
        let a = prune_corpus(&corpus, 0.5, 17).unwrap();
        let b = prune_corpus(&corpus, 0.5, 17).unwrap();
        assert_eq!(a.topics[1].sequences, b.topics[1].sequences);
        let c = prune_corpus(&corpus, 0.5, 18).unwrap();
        assert_ne!(a.topics[1].sequences, c.topics[1].sequences);
    }

    #[test]
    fn prune_preserves_order_and_membership() {
        let corpus = generate(&test_spec(), 5).unwrap();
        let pruned = prune_corpus(&corpus, 0.3, 9).unwrap();
        for (orig, kept) in corpus.topics.iter().zip(&pruned.topics) {
            let mut cursor = 0;
            for seq in &kept.sequences {
                let pos = orig.sequences[cursor..]
                    .iter()
                    .position(|s| s == seq)
                    .expect("surviving sequence must come from the original topic in order");
                cursor += pos + 1;
            }
        }
    }

    #[test]
    fn prune_keeps_at_least_one_sequence() {
        let mut corpus = generate(&test_spec(), 5).unwrap();
        corpus.topics[0].sequences.truncate(1);
        let pruned = prune_corpus(&corpus, 0.9, 3).unwrap();
        assert_eq!(pruned.topics[0].sequences.len(), 1);
    }

    #[test]
    fn prune_rejects_ratio_of_one() {
        let corpus = generate(&test_spec(), 5).unwrap();
        assert!(prune_corpus(&corpus, 1.0, 3).is_err());
    }

    #[test]
    fn corpus_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&test_spec(), 5).unwrap();
        let path = dir.path().join("corpus.json");
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(corpus.topics[2].sequences, back.topics[2].sequences);
    }

    #[test]
    fn bigram_table_matches_hand_count() {
        let corpus = Corpus {
            schema: CORPUS_SCHEMA.into(),
            vocab: 3,
            topics: vec![Topic {
                name: "t0".into(),
                sequences: vec![vec![0, 1, 0, 2], vec![1, 0]],
            }],
        };
        // Pairs: (0,1) (1,0) (0,2) (1,0). Row totals: 2, 2, 0. Smoothing 1:
        //   p(1|0) = 2/5, p(2|0) = 2/5, p(0|0) = 1/5, p(0|1) = 3/5, row 2 uniform.
        let table = bigram_log_probs(&corpus, 1.0).unwrap();
        let p = |x: usize, y: usize| table.get(x, y).exp();
        assert!((p(0, 1) - 0.4).abs() < 1e-12);
        assert!((p(0, 0) - 0.2).abs() < 1e-12);
        assert!((p(1, 0) - 0.6).abs() < 1e-12);
        assert!((p(2, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bigram_rows_are_distributions() {
        let corpus = generate(&test_spec(), 5).unwrap();
        let table = bigram_log_probs(&corpus, 0.05).unwrap();
        for x in 0..corpus.vocab {
            let total: f64 = (0..corpus.vocab).map(|y| table.get(x, y).exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "row {x} sums to {total}");
        }
    }

    #[test]
    fn bigram_rejects_nonpositive_smoothing() {
        let corpus = generate(&test_spec(), 5).unwrap();
        assert!(bigram_log_probs(&corpus, 0.0).is_err());
        assert!(bigram_log_probs(&corpus, -1.0).is_err());
    }
}
