use crate::autodiff::{ParamId, ParamStore, Tape, Var};

/// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `loss` with central finite differences on up
/// to `per_param` evenly spaced coordinates of each parameter in `params`.
/// Returns the maximum relative error.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    eps: f64,
    per_param: usize,
) -> f64 {
    let eval = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store);
        tape.scalar(l)
    };
    let grads = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store);
        tape.backward(l)
    };
    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.value(id).len();
        let cols = store.value(id).ncols();
        let step = (n / per_param.max(1)).max(1);
        for flat in (0..n).step_by(step).take(per_param.max(1)) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + eps;
            let up = eval(store);
            store.value_mut(id)[[r, c]] = orig - eps;
            let down = eval(store);
            store.value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.param(id).map(|g| g[[r, c]]).unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
