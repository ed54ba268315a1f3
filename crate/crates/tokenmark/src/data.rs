//! Synthetic token-classification data.
//!
//! Class `c` owns a disjoint slice of the vocabulary; a sample of class `c`
//! draws each position from that slice with probability `bias` and uniformly
//! from the whole vocabulary otherwise. The mapping is learnable by a small
//! model in seconds, which is all the downstream task needs to be. Labels are
//! balanced to within ±1 per class.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Probability of drawing from the class-owned token slice.
    pub bias: f32,
}

impl DatasetConfig {
    pub fn toy() -> Self {
        DatasetConfig { classes: 10, vocab_size: 64, seq_len: 16, bias: 0.75 }
    }

    pub fn tokens_per_class(&self) -> usize {
        self.vocab_size / self.classes
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.classes == 0 || self.vocab_size < self.classes {
            return Err(format!(
                "vocab_size {} must cover {} classes",
                self.vocab_size, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(format!("bias {} outside [0,1]", self.bias));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: Vec<u16>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    /// `n` samples with balanced labels (round-robin, then shuffled).
    pub fn generate(config: DatasetConfig, n: usize, rng: &mut impl Rng) -> Self {
        config.validate().expect("valid dataset config");
        let mut labels: Vec<usize> = (0..n).map(|i| i % config.classes).collect();
        labels.shuffle(rng);
        let samples = labels
            .into_iter()
            .map(|label| Sample { tokens: sample_tokens(&config, label, rng), label })
            .collect();
        SyntheticDataset { config, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Cycle through the dataset in fixed order yielding index batches.
    pub fn batch_indices(&self, batch: usize, step: usize) -> Vec<usize> {
        (0..batch).map(|i| (step * batch + i) % self.samples.len()).collect()
    }
}

fn sample_tokens(config: &DatasetConfig, label: usize, rng: &mut impl Rng) -> Vec<u16> {
    let per = config.tokens_per_class();
    let lo = label * per;
    (0..config.seq_len)
        .map(|_| {
            if rng.random::<f32>() < config.bias {
                (lo + rng.random_range(0..per)) as u16
            } else {
                rng.random_range(0..config.vocab_size) as u16
            }
        })
        .collect()
}

/// Unstructured sequences drawn uniformly from the vocabulary; the default
/// extraction set (watermark verification has no distribution requirement).
pub fn random_sequences(
    n: usize,
    seq_len: usize,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<u16>> {
    (0..n)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..vocab_size) as u16).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;

    #[test]
    fn labels_balanced_within_one() {
        let hub = SeedHub::new(60);
        let ds = SyntheticDataset::generate(DatasetConfig::toy(), 205, &mut hub.stream("ds"));
        let mut counts = vec![0usize; 10];
        for s in &ds.samples {
            counts[s.label] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn class_bias_shows_in_token_histogram() {
        let hub = SeedHub::new(61);
        let cfg = DatasetConfig::toy();
        let ds = SyntheticDataset::generate(cfg, 500, &mut hub.stream("ds"));
        let per = cfg.tokens_per_class();
        let mut in_slice = 0usize;
        let mut total = 0usize;
        for s in &ds.samples {
            let lo = (s.label * per) as u16;
            let hi = lo + per as u16;
            for &t in &s.tokens {
                if t >= lo && t < hi {
                    in_slice += 1;
                }
                total += 1;
            }
        }
        let frac = in_slice as f64 / total as f64;
        // bias + uniform leakage back into the slice
        let expect = 0.75 + 0.25 * (per as f64 / cfg.vocab_size as f64);
        assert!((frac - expect).abs() < 0.02, "fraction {frac}, expected ≈ {expect}");
    }

    #[test]
    fn generation_is_deterministic() {
        let hub = SeedHub::new(62);
        let a = SyntheticDataset::generate(DatasetConfig::toy(), 50, &mut hub.stream("x"));
        let b = SyntheticDataset::generate(DatasetConfig::toy(), 50, &mut hub.stream("x"));
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.tokens, sb.tokens);
            assert_eq!(sa.label, sb.label);
        }
    }

    #[test]
    fn random_sequences_respect_vocab() {
        let hub = SeedHub::new(63);
        let seqs = random_sequences(20, 16, 64, &mut hub.stream("r"));
        assert_eq!(seqs.len(), 20);
        for s in &seqs {
            assert_eq!(s.len(), 16);
            assert!(s.iter().all(|&t| t < 64));
        }
    }
}
