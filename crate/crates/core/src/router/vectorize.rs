use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Bag of hashed character n-grams, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashVectorizer {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
}

impl Default for HashVectorizer {
    fn default() -> Self {
        Self {
            dim: 1024,
            ngram_min: 2,
            ngram_max: 4,
            hash_seed: 0,
        }
    }
}

impl HashVectorizer {
    pub fn new(dim: usize, ngram_min: usize, ngram_max: usize, hash_seed: u64) -> Result<Self> {
        let v = Self {
            dim,
            ngram_min,
            ngram_max,
            hash_seed,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 64 {
            return Err(Error::Config(format!("vectorizer dim {} is below 64", self.dim)));
        }
        if !(1 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 5) {
            return Err(Error::Config(format!(
                "n-gram range {}..={} must satisfy 1 <= min <= max <= 5",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }

    fn bucket(&self, gram: &[char]) -> usize {
        let mut h = FNV_OFFSET ^ self.hash_seed.wrapping_mul(FNV_PRIME);
        let mut buf = [0u8; 4];
        for c in gram {
            for &byte in c.encode_utf8(&mut buf).as_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(FNV_PRIME);
            }
        }
        (h % self.dim as u64) as usize
    }

    /// Unnormalized n-gram counts added into `out`. Each whitespace-separated
    /// word is padded with one space on both sides, so grams never span words.
    fn accumulate(&self, text: &str, out: &mut [f32]) {
        let mut chars: Vec<char> = Vec::with_capacity(16);
        for word in text.split_whitespace() {
            chars.clear();
            chars.push(' ');
            chars.extend(word.chars().flat_map(char::to_lowercase));
            chars.push(' ');
            for n in self.ngram_min..=self.ngram_max {
                for gram in chars.windows(n) {
                    out[self.bucket(gram)] += 1.0;
                }
            }
        }
    }

    /// Feature vector of length `dim`; all zeros for text without words.
    pub fn vectorize(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        self.accumulate(text, &mut v);
        l2_normalize(&mut v);
        v
    }

    /// `normalize(v(sentence) + history_weight · v(history))`, each part
    /// normalized first so a long history cannot drown a short sentence.
    pub fn vectorize_with_history(&self, sentence: &str, history: &str, history_weight: f32) -> Vec<f32> {
        let mut v = self.vectorize(sentence);
        if history_weight > 0.0 {
            let h = self.vectorize(history);
            for (o, x) in v.iter_mut().zip(h) {
                *o += history_weight * x;
            }
            l2_normalize(&mut v);
        }
        v
    }
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let v = HashVectorizer::default();
        assert!(v.vectorize("").iter().all(|&x| x == 0.0));
        assert!(v.vectorize("   ").iter().all(|&x| x == 0.0));
        assert_eq!(v.vectorize("solve it"), v.vectorize("solve it"));
        assert_ne!(v.vectorize("translate to english"), v.vectorize("solve the equation"));
        let n: f32 = v.vectorize("translate to english").iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn seed_changes_buckets() {
        let a = HashVectorizer::new(256, 1, 3, 1).unwrap();
        let b = HashVectorizer::new(256, 1, 3, 2).unwrap();
        assert_ne!(a.vectorize("orbit comet"), b.vectorize("orbit comet"));
    }

    #[test]
    fn config_bounds() {
        assert!(HashVectorizer::new(63, 1, 3, 0).is_err());
        assert!(HashVectorizer::new(64, 0, 3, 0).is_err());
        assert!(HashVectorizer::new(64, 3, 2, 0).is_err());
        assert!(HashVectorizer::new(64, 1, 6, 0).is_err());
        assert!(HashVectorizer::new(64, 5, 5, 0).is_ok());
    }

    #[test]
    fn history_weight_zero_ignores_history() {
        let v = HashVectorizer::default();
        assert_eq!(v.vectorize_with_history("orbit", "flour sugar", 0.0), v.vectorize("orbit"));
        assert_ne!(v.vectorize_with_history("orbit", "flour sugar", 0.5), v.vectorize("orbit"));
    }
}
