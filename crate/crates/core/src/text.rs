//! Toy text handling: word tokenizer, hashed closed vocabulary and a frozen
//! random bag-of-words embedder for retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Default size of the hashed vocabulary; id 0 is reserved for padding.
pub const VOCAB_SIZE: usize = 512;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace token count, the length measure used by the data filters.
pub fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn token_id(word: &str, vocab: usize) -> usize {
    1 + (fnv1a(word.as_bytes()) % (vocab as u64 - 1)) as usize
}

/// Vocabulary ids of `s`; an empty prompt maps to the single padding id.
pub fn token_ids(s: &str, vocab: usize) -> Vec<usize> {
    let ids: Vec<usize> = words(s).iter().map(|w| token_id(w, vocab)).collect();
    if ids.is_empty() {
        vec![0]
    } else {
        ids
    }
}

/// Sum of fixed per-word Gaussian vectors, L2-normalized.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn word_vector(&self, w: &str) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
        Tensor::randn(&[self.dim], 1.0, &mut rng)
    }

    /// Unit vector for `s`, or all zeros when `s` has no words.
    pub fn embed(&self, s: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for w in words(s) {
            for (a, v) in acc.iter_mut().zip(self.word_vector(&w).data()) {
                *a += v;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            acc.iter_mut().for_each(|v| *v /= n);
        }
        acc
    }
}
