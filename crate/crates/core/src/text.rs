//! Caption conditioning.
//!
//! The default encoder is a frozen hashing encoder standing in for a
//! pretrained language model: each lower-cased word maps to a fixed Gaussian
//! vector derived from its SHA-256 digest, plus a sinusoidal position code so
//! word order matters. The null condition `∅` is a learned vector owned by
//! the model and is therefore represented here only as a marker.

use sha2::{Digest, Sha256};

use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum TextEmbedding {
    /// The unconditional `∅`; resolved to the model's learned null vector.
    Null,
    /// `[words, text_dim]`.
    Tokens(Tensor),
}

impl TextEmbedding {
    pub fn is_null(&self) -> bool {
        matches!(self, TextEmbedding::Null)
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Empty or absent captions encode to [`TextEmbedding::Null`].
    fn encode(&self, caption: Option<&str>) -> TextEmbedding;
}

#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn word_vector(&self, word: &str, position: usize) -> Vec<f64> {
        let digest = Sha256::digest(word.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = Rng::new(seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|i| {
                let freq = 1.0 / 100f64.powf((i / 2) as f64 * 2.0 / self.dim as f64);
                let angle = position as f64 * freq;
                let pos = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                rng.normal() * scale + 0.1 * pos
            })
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, caption: Option<&str>) -> TextEmbedding {
        let Some(caption) = caption else {
            return TextEmbedding::Null;
        };
        let words: Vec<String> = caption
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return TextEmbedding::Null;
        }
        let data = words
            .iter()
            .enumerate()
            .flat_map(|(i, w)| self.word_vector(w, i))
            .collect();
        TextEmbedding::Tokens(Tensor::matrix(words.len(), self.dim, data).expect("sized"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_null_for_empty() {
        let enc = HashTextEncoder::new(8);
        assert_eq!(
            enc.encode(Some("calm piano")),
            enc.encode(Some("calm piano"))
        );
        assert_eq!(enc.encode(None), TextEmbedding::Null);
        assert_eq!(enc.encode(Some("  ")), TextEmbedding::Null);
    }

    #[test]
    fn word_order_matters() {
        let enc = HashTextEncoder::new(8);
        assert_ne!(
            enc.encode(Some("piano calm")),
            enc.encode(Some("calm piano"))
        );
    }

    #[test]
    fn distinct_captions_give_distinct_embeddings() {
        let enc = HashTextEncoder::new(16);
        let moods = [
            "calm", "dark", "bright", "tense", "warm", "dreamy", "gritty", "upbeat", "sad", "epic",
        ];
        let instruments = [
            "piano", "guitar", "synth", "strings", "drums", "flute", "bass", "organ", "choir",
            "brass",
        ];
        let tempos = [
            "slow",
            "steady",
            "fast",
            "driving",
            "laid-back",
            "frantic",
            "swinging",
            "halting",
            "rolling",
            "pulsing",
        ];
        let mut seen = std::collections::HashSet::new();
        let mut count = 0;
        for m in moods {
            for i in instruments {
                for t in tempos {
                    let TextEmbedding::Tokens(e) =
                        enc.encode(Some(&format!("{m} {i} with a {t} groove")))
                    else {
                        panic!("non-empty caption encoded as null");
                    };
                    let bits: Vec<u64> = e.data().iter().map(|v| v.to_bits()).collect();
                    assert!(seen.insert(bits));
                    count += 1;
                }
            }
        }
        assert_eq!(count, 1000);
    }
}
