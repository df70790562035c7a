use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine-similarity retrieval over pooled trajectory vectors.
#[derive(Clone, Debug)]
pub struct StsIndex<T> {
    ids: Vec<String>,
    unit: Array2<T>,
}

fn unit_rows<T: Scalar>(m: &Array2<T>) -> Array2<T> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > T::zero() {
            r.mapv_inplace(|x| x / n);
        }
    }
    out
}

impl<T: Scalar> StsIndex<T> {
    pub fn new(ids: Vec<String>, vectors: &Array2<T>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::usage("cannot index an empty trajectory database"));
        }
        if ids.len() != vectors.nrows() {
            return Err(Error::usage("one vector per indexed trajectory is required"));
        }
        Ok(Self { ids, unit: unit_rows(vectors) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Database ids ranked by descending cosine similarity, ties by smaller id.
    pub fn query(&self, q: &[T]) -> Vec<(String, T)> {
        let q = Array2::from_shape_vec((1, q.len()), q.to_vec()).expect("row vector");
        let q = unit_rows(&q);
        let sims = self.unit.dot(&q.t());
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| {
            sims[[b, 0]]
                .partial_cmp(&sims[[a, 0]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        order.into_iter().map(|i| (self.ids[i].clone(), sims[[i, 0]])).collect()
    }
}
