//! Exact cosine nearest-neighbour search over caption embeddings.

use std::cmp::Ordering;

use crate::error::{dim_err, Result};
use crate::text::HashEmbedder;

pub struct RetrievalIndex {
    embedder: HashEmbedder,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl RetrievalIndex {
    /// Indexes `(id, caption)` pairs with the toy embedder of width `dim`.
    pub fn build<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>, dim: usize) -> Self {
        let embedder = HashEmbedder::new(dim);
        let (ids, vectors) = items.into_iter().map(|(id, cap)| (id.to_string(), embedder.embed(cap))).unzip();
        Self { embedder, ids, vectors }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.embedder.embed(text)
    }

    /// Top `k` by cosine similarity, ties broken by ascending id. A `k`
    /// beyond the corpus size returns the whole corpus ranked.
    pub fn query_vector(&self, q: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if q.len() != self.embedder.dim {
            return dim_err("retrieval_query", format!("query width {} vs index {}", q.len(), self.embedder.dim));
        }
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (i, if qn > 0.0 && vn > 0.0 { dot / (qn * vn) } else { 0.0 })
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored.into_iter().take(k).map(|(i, s)| (self.ids[i].clone(), s)).collect())
    }

    pub fn query(&self, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
        self.query_vector(&self.embed(text), k)
    }

    /// Fraction of indexed captions within cosine `radius` of `text`.
    pub fn density(&self, text: &str, radius: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let q = self.embed(text);
        let hits = self.vectors.iter().filter(|v| v.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() >= radius).count();
        hits as f64 / self.len() as f64
    }
}
