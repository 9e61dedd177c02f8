//! TF-IDF vectors and cosine similarity for retrieval-ordered exemplars.
//!
//! Recipe: lowercase, split on runs of non-alphanumeric characters, raw term
//! counts, smoothed idf `ln((1 + N) / (1 + df)) + 1`, L2 normalization. The
//! vocabulary and document frequencies come from the fitted corpus only;
//! queries are transformed with those statistics and unseen terms are
//! ignored. Pause phrases tokenize to `short`/`medium`/`long` + `pause`, and
//! `xxx` is an ordinary term.

use std::collections::{BTreeMap, HashMap};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Sparse L2-normalized vector, sorted by term index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec(Vec<(usize, f64)>);

impl SparseVec {
    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.0.len() && j < other.0.len() {
            let (a, b) = (self.0[i], other.0[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TfIdf {
    vocab: HashMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Self {
        let n = docs.len() as f64;
        let mut vocab: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        for doc in docs {
            let mut seen: Vec<usize> = tokenize(doc.as_ref())
                .into_iter()
                .map(|t| {
                    let next = vocab.len();
                    let idx = *vocab.entry(t).or_insert(next);
                    if idx == df.len() {
                        df.push(0);
                    }
                    idx
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for idx in seen {
                df[idx] += 1;
            }
        }
        let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        TfIdf { vocab, idf }
    }

    pub fn transform(&self, text: &str) -> SparseVec {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(&idx) = self.vocab.get(&tok) {
                *counts.entry(idx).or_insert(0.0) += 1.0;
            }
        }
        let mut weights: Vec<(usize, f64)> = counts.into_iter().map(|(idx, tf)| (idx, tf * self.idf[idx])).collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut weights {
                *w /= norm;
            }
        } else {
            weights.clear();
        }
        SparseVec(weights)
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }
}

/// Cosine of two L2-normalized vectors; zero vectors give 0.
pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    if a.is_zero() || b.is_zero() {
        0.0
    } else {
        a.dot(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_on_non_alphanumeric() {
        assert_eq!(
            tokenize("The boy's (short pause) xxx, COOKIE-jar."),
            ["the", "boy", "s", "short", "pause", "xxx", "cookie", "jar"]
        );
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn idf_is_smoothed() {
        let m = TfIdf::fit(&["a b", "a", "a c"]);
        let a = m.vocab["a"];
        let b = m.vocab["b"];
        assert!((m.idf[a] - 1.0).abs() < 1e-15);
        assert!((m.idf[b] - (2f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn identical_text_has_cosine_one() {
        let m = TfIdf::fit(&["boy falls off stool", "mother dries dishes"]);
        let v = m.transform("boy falls off stool");
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v, &m.transform("zebra")), 0.0);
    }
}
