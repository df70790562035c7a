use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamId, ParamStore, Stage, Tape, Var};
use crate::data::RelationNetwork;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// D^-1/2 (A + I) D^-1/2 where A_ij = max(w_ij, w_ji).
pub fn normalized_adjacency<T: Scalar>(net: &RelationNetwork) -> Array2<T> {
    let n = net.n_vertices();
    let mut a = Array2::<f64>::eye(n);
    for (&(i, j), &w) in &net.edges {
        if i == j {
            a[[i, i]] = 1.0 + w;
        } else {
            let sym = w.max(net.weight(j, i).unwrap_or(0.0));
            a[[i, j]] = sym;
            a[[j, i]] = sym;
        }
    }
    let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| T::of(a[[i, j]] * inv_sqrt[i] * inv_sqrt[j]))
}

/// Symmetric-normalised GCN: hidden layers apply the activation, the last
/// layer is linear.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    weights: Vec<ParamId>,
    activation: Activation,
}

impl GraphEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        layers: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weights = (0..layers)
            .map(|l| store.add_glorot(format!("graph.w{l}"), Group::Encoder(Stage::Graph), dim, dim, rng))
            .collect();
        Self { weights, activation }
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, r: Var, adj: Var) -> Var {
        let mut h = r;
        for (l, &w) in self.weights.iter().enumerate() {
            let wv = tape.param(store, w);
            let agg = tape.matmul(adj, h);
            h = tape.matmul(agg, wv);
            if l + 1 < self.weights.len() {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }
}
