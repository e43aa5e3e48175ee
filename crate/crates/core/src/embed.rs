//! Generic sentence embedder: signed feature hashing of unigrams and bigrams.
//!
//! Stands in for a pretrained sentence encoder at desk scale. It knows nothing
//! about any task, is deterministic, and produces L2-normalized vectors.

use serde::{Deserialize, Serialize};

use crate::util::fnv1a64;

/// Sparse vector as sorted `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| dense[i] * v).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashingEmbedder {
    pub dim: usize,
    #[serde(default = "yes")]
    pub bigrams: bool,
}

fn yes() -> bool {
    true
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dim: 384,
            bigrams: true,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '[' || c == ']'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim, bigrams: true }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let h = fnv1a64(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    pub fn embed_sparse(&self, text: &str) -> SparseVec {
        let toks = tokenize(text);
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(toks.len() * 2);
        for t in &toks {
            acc.push(self.bucket(&format!("u:{t}")));
        }
        if self.bigrams {
            for w in toks.windows(2) {
                acc.push(self.bucket(&format!("b:{} {}", w[0], w[1])));
            }
        }
        acc.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
        for (i, v) in acc {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        let norm = entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        SparseVec { entries }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.embed_sparse(text).to_dense(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_and_fixed_dim() {
        let e = HashingEmbedder::default();
        let v = e.embed("The movie was great");
        assert_eq!(v.len(), 384);
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_text_identical_vector() {
        let e = HashingEmbedder::new(64);
        assert_eq!(e.embed("a b c"), e.embed("a b c"));
        assert_eq!(e.embed("A  b, c"), e.embed("a b c"));
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashingEmbedder::new(16);
        assert!(e.embed("").iter().all(|&x| x == 0.0));
    }
}
