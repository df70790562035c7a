use chrono::{DateTime, Timelike, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamId, ParamStore, Stage, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqArch {
    Attention,
    Recurrent,
}

/// Slot of the day a timestamp falls into, with `slots` equal slots per day.
pub fn time_slot(t: &DateTime<Utc>, slots: usize) -> usize {
    let secs = t.num_seconds_from_midnight() as usize;
    (secs * slots / 86_400).min(slots - 1)
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct RecurrentLayer {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum Layers {
    Attention { heads: usize, layers: Vec<AttentionLayer> },
    Recurrent(Vec<RecurrentLayer>),
}

/// Post-norm transformer encoder or stacked LSTM over one trajectory.
///
/// Position and time-slot embeddings are added to the inputs before the first
/// layer. The recurrent variant is always causal; the attention variant is
/// causal only when asked.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    dim: usize,
    max_len: usize,
    slots: usize,
    positions: ParamId,
    times: ParamId,
    layers: Layers,
}

pub struct SequenceShape {
    pub arch: SeqArch,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub slots: usize,
}

impl SequenceEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, shape: &SequenceShape, rng: &mut R) -> Result<Self> {
        let g = || Group::Encoder(Stage::Sequence);
        let d = shape.dim;
        if shape.arch == SeqArch::Attention && (shape.heads == 0 || d % shape.heads != 0) {
            return Err(Error::usage(format!("dimension {d} is not divisible by {} heads", shape.heads)));
        }
        if shape.slots == 0 || shape.max_len == 0 {
            return Err(Error::usage("sequence encoder needs at least one time slot and position"));
        }
        let positions = store.add_embedding("seq.positions", g(), shape.max_len, d, rng);
        let times = store.add_embedding("seq.times", g(), shape.slots, d, rng);
        let layers = match shape.arch {
            SeqArch::Attention => Layers::Attention {
                heads: shape.heads,
                layers: (0..shape.layers)
                    .map(|l| AttentionLayer {
                        wq: store.add_glorot(format!("seq.l{l}.wq"), g(), d, d, rng),
                        wk: store.add_glorot(format!("seq.l{l}.wk"), g(), d, d, rng),
                        wv: store.add_glorot(format!("seq.l{l}.wv"), g(), d, d, rng),
                        wo: store.add_glorot(format!("seq.l{l}.wo"), g(), d, d, rng),
                        w1: store.add_glorot(format!("seq.l{l}.w1"), g(), d, shape.hidden, rng),
                        b1: store.add_zeros(format!("seq.l{l}.b1"), g(), 1, shape.hidden),
                        w2: store.add_glorot(format!("seq.l{l}.w2"), g(), shape.hidden, d, rng),
                        b2: store.add_zeros(format!("seq.l{l}.b2"), g(), 1, d),
                    })
                    .collect(),
            },
            SeqArch::Recurrent => Layers::Recurrent(
                (0..shape.layers)
                    .map(|l| RecurrentLayer {
                        w: store.add_glorot(format!("seq.l{l}.w"), g(), d, 4 * d, rng),
                        u: store.add_glorot(format!("seq.l{l}.u"), g(), d, 4 * d, rng),
                        b: store.add_zeros(format!("seq.l{l}.b"), g(), 1, 4 * d),
                    })
                    .collect(),
            ),
        };
        Ok(Self { dim: d, max_len: shape.max_len, slots: shape.slots, positions, times, layers })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn positions(&self) -> ParamId {
        self.positions
    }

    pub fn times(&self) -> ParamId {
        self.times
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.layers, Layers::Recurrent(_))
    }

    /// Learnable time-slot row for a timestamp.
    pub fn time_embed<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, t: &DateTime<Utc>) -> Var {
        tape.param_rows(store, self.times, &[time_slot(t, self.slots)])
    }

    /// Encodes a K x d input sequence into K x d outputs.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: Var,
        slots: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let (k, d) = tape.shape(inputs);
        if k == 0 || k > self.max_len {
            return Err(Error::usage(format!("sequence length {k} outside 1..={}", self.max_len)));
        }
        if d != self.dim || slots.len() != k {
            return Err(Error::usage("sequence inputs and time slots do not line up"));
        }
        let pos_idx: Vec<usize> = (0..k).collect();
        let pos = tape.param_rows(store, self.positions, &pos_idx);
        let time = tape.param_rows(store, self.times, slots);
        let mut x = tape.add(inputs, pos);
        x = tape.add(x, time);
        match &self.layers {
            Layers::Attention { heads, layers } => {
                for layer in layers {
                    x = self.attention_block(tape, store, layer, *heads, x, causal);
                }
            }
            Layers::Recurrent(layers) => {
                for layer in layers {
                    x = self.lstm(tape, store, layer, x);
                }
            }
        }
        Ok(x)
    }

    fn attention_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: &AttentionLayer,
        heads: usize,
        x: Var,
        causal: bool,
    ) -> Var {
        let dh = self.dim / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (wq, wk, wv, wo) = (tape.param(store, p.wq), tape.param(store, p.wk), tape.param(store, p.wv), tape.param(store, p.wo));
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, causal);
            outs.push(tape.matmul(attn, vh));
        }
        let heads_out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let attended = tape.matmul(heads_out, wo);
        let res = tape.add(x, attended);
        let x = tape.layer_norm(res);

        let (w1, b1, w2, b2) = (tape.param(store, p.w1), tape.param(store, p.b1), tape.param(store, p.w2), tape.param(store, p.b2));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        let h = tape.add_row(h, b2);
        let res = tape.add(x, h);
        tape.layer_norm(res)
    }

    fn lstm<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, p: &RecurrentLayer, x: Var) -> Var {
        let d = self.dim;
        let (w, u, b) = (tape.param(store, p.w), tape.param(store, p.u), tape.param(store, p.b));
        let k = tape.shape(x).0;
        let projected = tape.matmul(x, w);
        let mut h = tape.constant(ndarray::Array2::zeros((1, d)));
        let mut c = tape.constant(ndarray::Array2::zeros((1, d)));
        let mut outs = Vec::with_capacity(k);
        for t in 0..k {
            let xt = tape.slice_rows(projected, t, 1);
            let rec = tape.matmul(h, u);
            let z = tape.add(xt, rec);
            let z = tape.add_row(z, b);
            let zi = tape.slice_cols(z, 0, d);
            let zf = tape.slice_cols(z, d, d);
            let zg = tape.slice_cols(z, 2 * d, d);
            let zo = tape.slice_cols(z, 3 * d, d);
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, c);
            let write = tape.mul(i, g);
            c = tape.add(keep, write);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            outs.push(h);
        }
        tape.concat_rows(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at(h: u32, m: u32, s: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, h, m, s).unwrap()
    }

    #[test]
    fn time_slots() {
        assert_eq!(time_slot(&at(0, 0, 0), 48), 0);
        assert_eq!(time_slot(&at(12, 15, 0), 48), 24);
        assert_eq!(time_slot(&at(23, 59, 59), 48), 47);
        assert_eq!(time_slot(&at(23, 59, 59), 24), 23);
    }

    fn shape(arch: SeqArch) -> SequenceShape {
        SequenceShape { arch, dim: 8, layers: 2, heads: 2, hidden: 16, max_len: 6, slots: 4 }
    }

    fn encoder(arch: SeqArch) -> (ParamStore<f64>, SequenceEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, &shape(arch), &mut rng).unwrap();
        (store, enc)
    }

    fn random_input(k: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, 8), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_position_shape() {
        let (store, enc) = encoder(SeqArch::Attention);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(1, 1));
        let y = enc.encode(&mut tape, &store, x, &[0], false).unwrap();
        assert_eq!(tape.shape(y), (1, 8));
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let (mut store, enc) = encoder(SeqArch::Attention);
        store.value_mut(enc.positions()).fill(0.0);
        store.value_mut(enc.times()).fill(0.0);
        let row = random_input(1, 2);
        let x = Array2::from_shape_fn((5, 8), |(_, j)| row[[0, j]]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = enc.encode(&mut tape, &store, xv, &[0, 1, 2, 3, 0], false).unwrap();
        let out = tape.value(y);
        for i in 1..5 {
            for j in 0..8 {
                assert!((out[[i, j]] - out[[0, j]]).abs() < 1e-12);
            }
        }
    }

    fn causal_holds(arch: SeqArch, causal: bool) -> bool {
        let (store, enc) = encoder(arch);
        let base = random_input(6, 3);
        let slots = [0, 1, 2, 3, 0, 1];
        let run = |x: Array2<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = enc.encode(&mut tape, &store, xv, &slots, causal).unwrap();
            tape.value(y).clone()
        };
        let reference = run(base.clone());
        (0..6).all(|k| {
            let mut pert = base.clone();
            pert.row_mut(k).mapv_inplace(|v| v + 0.7);
            let out = run(pert);
            (0..k).all(|i| (0..8).all(|j| (out[[i, j]] - reference[[i, j]]).abs() < 1e-12))
        })
    }

    #[test]
    fn causal_outputs_ignore_the_future() {
        assert!(causal_holds(SeqArch::Attention, true));
        assert!(causal_holds(SeqArch::Recurrent, false));
        assert!(!causal_holds(SeqArch::Attention, false));
    }

    #[test]
    fn over_length_is_rejected() {
        let (store, enc) = encoder(SeqArch::Recurrent);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(7, 1));
        assert!(enc.encode(&mut tape, &store, x, &[0; 7], false).is_err());
    }
}
