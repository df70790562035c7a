//! Small dense layers used by pretraining and downstream heads.

use rand::Rng;

use crate::autodiff::{Group, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &Group,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), group.clone(), inputs, outputs, rng);
        let b = store.add_zeros(format!("{name}.b"), group.clone(), 1, outputs);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.w).fill(T::zero());
        store.value_mut(self.b).fill(T::zero());
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &Group,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), group, dims[0], dims[1], rng),
            out: Linear::new(store, &format!("{name}.1"), group, dims[1], dims[2], rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.hidden.forward(tape, store, x);
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    /// Scores a batch of pairs from the concatenation `[a | b]`.
    pub fn pair<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var, b: Var) -> Var {
        let x = tape.concat_cols(&[a, b]);
        self.forward(tape, store, x)
    }
}
