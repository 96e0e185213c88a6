use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding has zero or non-finite norm")]
    Degenerate,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Normalizes `values` onto the unit sphere.
    pub fn from_raw(values: Vec<T>) -> Result<Self, EmbeddingError> {
        let norm = values.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !norm.is_finite() || norm <= T::zero() {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    /// Cosine similarity; for unit vectors this is the dot product.
    pub fn cosine(&self, other: &Self) -> T {
        self.try_cosine(other).unwrap_or_else(|_| T::zero())
    }

    pub fn try_cosine(&self, other: &Self) -> Result<T, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| *a * *b).sum())
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        let raw = self.values.iter().map(|v| U::of(v.to_f64_lossy())).collect();
        EmbeddingVector::from_raw(raw).expect("cast of a unit vector stays non-degenerate")
    }
}

/// Case-folds and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Deterministic embedding: a seeded hash of the normalized text expanded
/// into a Gaussian vector. Equal text gives equal vectors; unrelated texts are
/// nearly orthogonal.
///
/// `aliases` lets scripts declare near-synonyms: an aliased text embeds close
/// to its anchor (cosine well above 0.9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0, aliases: BTreeMap::new() }
    }
}

impl HashEmbedder {
    pub fn with_alias(mut self, text: &str, anchor: &str) -> Self {
        self.aliases.insert(normalize_text(text), normalize_text(anchor));
        self
    }

    fn hashed(&self, normalized: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(normalized.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let normalized = normalize_text(text);
        let own = unit(self.hashed(&normalized));
        match self.aliases.get(&normalized) {
            Some(anchor) => {
                let anchor = unit(self.hashed(anchor));
                anchor.iter().zip(&own).map(|(a, o)| 0.95 * a + 0.05 * o).collect()
            }
            None => own,
        }
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
