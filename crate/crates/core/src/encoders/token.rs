use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Group, ParamId, ParamStore, Stage, Tape, Var};
use crate::scalar::Scalar;

/// One embedding table per feature, concatenated and projected to `dim`.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    widths: Vec<usize>,
    dim: usize,
    tables: Vec<ParamId>,
    projection: ParamId,
}

impl TokenEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, widths: &[usize], dim: usize, rng: &mut R) -> Self {
        let group = Group::Encoder(Stage::Token);
        let tables = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| store.add_embedding(format!("token.table{k}"), group.clone(), w, dim, rng))
            .collect();
        let projection = store.add_glorot("token.projection", group, widths.len() * dim, dim, rng);
        Self { widths: widths.to_vec(), dim, tables, projection }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn projection(&self) -> ParamId {
        self.projection
    }

    /// Learnable scalars: every table plus the K*d x d projection.
    pub fn param_count(widths: &[usize], dim: usize) -> usize {
        widths.iter().map(|w| w * dim).sum::<usize>() + widths.len() * dim * dim
    }

    /// Row-wise concatenation of the selected embedding rows, `rows[i][k]`
    /// being the hot index of feature `k` for item `i`. Output is B x (K*d).
    pub fn concat<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rows: &[Vec<usize>]) -> Var {
        let parts: Vec<Var> = self
            .tables
            .iter()
            .enumerate()
            .map(|(k, &table)| {
                let idx: Vec<usize> = rows.iter().map(|r| r[k]).collect();
                tape.param_rows(store, table, &idx)
            })
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)
        }
    }

    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, concat: Var) -> Var {
        let w = tape.param(store, self.projection);
        tape.matmul(concat, w)
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rows: &[Vec<usize>]) -> Var {
        let c = self.concat(tape, store, rows);
        self.project(tape, store, c)
    }

    /// Same as [`encode`](Self::encode) with whole feature blocks zeroed where
    /// `keep[i][k]` is false.
    pub fn encode_masked<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        rows: &[Vec<usize>],
        keep: &[Vec<bool>],
    ) -> Var {
        let c = self.concat(tape, store, rows);
        let mask = Array2::from_shape_fn((rows.len(), self.widths.len() * self.dim), |(i, j)| {
            if keep[i][j / self.dim] {
                T::one()
            } else {
                T::zero()
            }
        });
        let m = tape.constant(mask);
        let masked = tape.mul(c, m);
        self.project(tape, store, masked)
    }
}
