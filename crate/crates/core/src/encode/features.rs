use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Sparse non-negative feature vector, entries sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    dim: usize,
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> FeatureVector<T> {
    /// Builds from raw entries; duplicate indices are summed.
    pub fn from_entries(dim: usize, entries: Vec<(u32, T)>) -> Result<Self> {
        let mut acc: BTreeMap<u32, T> = BTreeMap::new();
        for (k, w) in entries {
            if k as usize >= dim {
                return Err(Error::Dimension { expected: dim, actual: k as usize + 1 });
            }
            *acc.entry(k).or_insert_with(T::zero) += w;
        }
        Ok(Self {
            dim,
            entries: acc.into_iter().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> T {
        self.entries.iter().map(|&(_, w)| w * w).sum::<T>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for &(k, w) in &self.entries {
            out[k as usize] = w;
        }
        out
    }
}

/// Hashed bag of words with `1 + ln(tf)` weights, L2-normalized.
///
/// Each token maps to `fnv1a64(token) % d_feat`; colliding tokens add their
/// weights. An empty token stream yields the zero vector.
pub fn featurize<T: Scalar>(text: &str, d_feat: usize) -> FeatureVector<T> {
    assert!(d_feat >= 1, "d_feat must be positive");
    let mut tf: BTreeMap<String, u32> = BTreeMap::new();
    for tok in tokenize(text) {
        *tf.entry(tok).or_default() += 1;
    }
    let mut weights: BTreeMap<u32, f64> = BTreeMap::new();
    for (tok, count) in &tf {
        let k = (fnv1a64(tok.as_bytes()) % d_feat as u64) as u32;
        *weights.entry(k).or_default() += 1.0 + f64::from(*count).ln();
    }
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    let entries = weights
        .into_iter()
        .map(|(k, w)| (k, T::of(w / norm)))
        .collect();
    FeatureVector { dim: d_feat, entries }
}
