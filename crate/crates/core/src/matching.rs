//! Inner-product scoring and exact top-N retrieval.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{dot, Tensor};
use crate::vocab::{FeatureVocab, OOV};

/// Rows scored per rayon task.
const SCORE_CHUNK: usize = 4096;

/// Item output vectors (one row per id index) with the reverse id map.
#[derive(Clone, Debug)]
pub struct ItemIndex {
    vectors: Arc<Tensor>,
    ids: FeatureVocab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

impl ItemIndex {
    pub fn new(vectors: Arc<Tensor>, ids: FeatureVocab) -> Result<ItemIndex> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.size() {
            return Err(Error::shape("item index", vectors.shape(), &[ids.size()]));
        }
        Ok(ItemIndex { vectors, ids })
    }

    pub fn from_model(model: &Model) -> ItemIndex {
        ItemIndex {
            vectors: model.params().shared(model.output_slot()),
            ids: model.vocab().ids().clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of rows, including the unknown-item row.
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 1
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        self.ids.value(index)
    }

    pub fn index_of(&self, item_id: &str) -> usize {
        self.ids.lookup(Some(item_id))
    }

    /// `z_i = o · v_i` for every row.
    pub fn score_all(&self, o: &[f64]) -> Result<Vec<f64>> {
        score_all(o, &self.vectors)
    }

    /// Top `n` known items for behavior vector `o`, never returning the
    /// unknown row or anything in `exclude`.
    pub fn retrieve(&self, o: &[f64], n: usize, exclude: &HashSet<usize>) -> Result<Vec<ScoredItem>> {
        let scores = self.score_all(o)?;
        let mut skip = exclude.clone();
        skip.insert(OOV);
        Ok(top_n(&scores, n, &skip)
            .into_iter()
            .map(|(i, score)| ScoredItem {
                item_id: self.ids.value(i).expect("known index").to_string(),
                score,
            })
            .collect())
    }
}

/// Scores of `o` against every row of `vectors` (`[|I| × d]`).
pub fn score_all(o: &[f64], vectors: &Tensor) -> Result<Vec<f64>> {
    let d = vectors.cols();
    if o.len() != d {
        return Err(Error::shape("score_all", &[o.len()], vectors.shape()));
    }
    let mut scores = vec![0.0; vectors.rows()];
    if d == 0 {
        return Ok(scores);
    }
    scores
        .par_chunks_mut(SCORE_CHUNK)
        .zip(vectors.data().par_chunks(SCORE_CHUNK * d))
        .for_each(|(out, rows)| {
            for (z, v) in out.iter_mut().zip(rows.chunks_exact(d)) {
                *z = dot(o, v);
            }
        });
    Ok(scores)
}

/// Descending score, then ascending index.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `min(n, eligible)` best `(index, score)` pairs in exact ranking
/// order. Ties go to the lower index.
pub fn top_n(scores: &[f64], n: usize, exclude: &HashSet<usize>) -> Vec<(usize, f64)> {
    let mut eligible: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .collect();
    if n == 0 {
        return Vec::new();
    }
    if n < eligible.len() {
        eligible.select_nth_unstable_by(n - 1, rank_order);
        eligible.truncate(n);
    }
    eligible.sort_unstable_by(rank_order);
    eligible
}
