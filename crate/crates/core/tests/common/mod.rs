#![allow(dead_code)]

pub mod datagen;
pub mod oracles;

use maprl::autodiff::{Stage, Tape, Var};
use maprl::data::*;
use maprl::encoders::*;
use maprl::scalar::Scalar;

/// 2x3 grid: 8 POIs, 7 segments, 6 parcels.
pub fn tiny_spec() -> SyntheticCitySpec {
    SyntheticCitySpec { grid_rows: 2, grid_cols: 3, n_pois: 8, n_users: 3, n_trajectories: 40, n_categories: 3, seed: 5 }
}

pub fn tiny_city() -> Dataset {
    generate_synthetic_city(&tiny_spec()).unwrap()
}

pub fn city() -> Dataset {
    generate_synthetic_city(&SyntheticCitySpec::default()).unwrap()
}

pub fn encoder_config(dim: usize) -> EncoderConfig {
    let mut cfg = EncoderConfig { dim, hidden: 2 * dim, heads: 2, max_len: 32, ..Default::default() };
    cfg.codec.exclude = LABEL_FEATURES.iter().map(|s| s.to_string()).collect();
    cfg
}

pub fn pipeline<T: Scalar>(d: &Dataset, kind: EntityKind, stages: &[Stage], dim: usize) -> EncoderPipeline<T> {
    let ents = d.entities_of(kind);
    let geo = d.network(RelationKind::Geographical);
    EncoderPipeline::build(&encoder_config(dim), stages, Paradigm::Joint, &ents, geo, 7).unwrap()
}

pub fn trajectories<T: Scalar>(d: &Dataset, kind: EntityKind, p: &EncoderPipeline<T>) -> Vec<EncodedTraj> {
    let raw: Vec<Trajectory> = d.trajectories_over(kind).into_iter().cloned().collect();
    preprocess_checkin(&raw, 2, 1, 32).unwrap().iter().map(|t| p.encode_traj(t).unwrap()).collect()
}

pub const ALL_STAGES: [Stage; 3] = [Stage::Token, Stage::Graph, Stage::Sequence];

/// Central finite differences against the tape gradient of `loss` for every
/// parameter: the coordinates with the largest analytic gradient plus a
/// spread of others. Returns the worst relative error.
pub fn finite_difference_error(
    p: &mut EncoderPipeline<f64>,
    loss: impl Fn(&mut Tape<f64>, &EncoderPipeline<f64>) -> Var,
    per_param: usize,
) -> f64 {
    let eps = 1e-6;
    let value = |p: &EncoderPipeline<f64>| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, p);
        tape.scalar(l)
    };
    let grads = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, p);
        tape.backward(l)
    };
    let ids: Vec<_> = p.store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let Some(g) = grads.param(id).cloned() else { continue };
        let cols = g.ncols();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[[b / cols, b % cols]].abs().total_cmp(&g[[a / cols, a % cols]].abs()));
        let mut picks: Vec<usize> = order.iter().take(per_param).copied().collect();
        let stride = (g.len() / per_param.max(1)).max(1);
        picks.extend((0..g.len()).step_by(stride).take(per_param));
        picks.sort_unstable();
        picks.dedup();
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let orig = p.store.value(id)[[r, c]];
            p.store.value_mut(id)[[r, c]] = orig + eps;
            let up = value(p);
            p.store.value_mut(id)[[r, c]] = orig - eps;
            let down = value(p);
            p.store.value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g[[r, c]];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}

/// Finite-difference error of every pretraining loss on the tiny city,
/// through token, graph and sequence stages of a segment pipeline.
pub fn pretrain_gradient_errors() -> Vec<(String, f64)> {
    use maprl::pretrain::*;
    let d = tiny_city();
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        let mut p = pipeline::<f64>(&d, EntityKind::Segment, &ALL_STAGES, 8);
        let trajs = trajectories(&d, EntityKind::Segment, &p);
        let ctx = PretrainContext::new(&p, trajs);
        let opts = PretrainOptions { k_neg: 4, ..Default::default() };
        let mut rng = maprl::rng::rng_for(&[3]);
        let head = PretrainHead::new(task, &mut p, &mut rng);
        let err = finite_difference_error(
            &mut p,
            |tape, p| task_step_loss(tape, p, &head, &ctx, &opts, 8, 3, 0).unwrap().expect("loss on tiny city"),
            6,
        );
        out.push((task.name().to_string(), err));
    }
    out
}

/// Finite-difference error of every downstream loss on the tiny city, with
/// all encoder stages trainable.
pub fn downstream_gradient_errors() -> Vec<(String, f64)> {
    use maprl::downstream::*;
    let d = tiny_city();
    let mut out = Vec::new();
    for kind in DownstreamKind::ALL {
        let ek = kind.entity_kind();
        let mut p = pipeline::<f64>(&d, ek, &ALL_STAGES, 8);
        let trajs = trajectories(&d, ek, &p);
        let space = label_space(kind, &p, &d, &trajs).unwrap();
        let examples = if kind.uses_trajectories() {
            traj_examples(&space, &p, &trajs, 3).unwrap()
        } else {
            entity_examples(&space, &p, &d).unwrap()
        };
        let batch: Vec<&Example> = examples.iter().take(8).collect();
        assert!(batch.len() >= 2, "{kind} has too few examples");
        let head = DownstreamHead::new(&mut p, &space, &examples, 3).unwrap();
        let err = finite_difference_error(&mut p, |tape, p| downstream_loss(tape, p, &head, &batch, None, 0.07).unwrap(), 6);
        out.push((kind.name().to_string(), err));
    }
    out
}
