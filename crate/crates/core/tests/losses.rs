mod common;

use approx::assert_abs_diff_eq;
use maprl::autodiff::{Stage, Tape};
use maprl::data::EntityKind;
use maprl::downstream::*;
use maprl::pretrain::*;
use ndarray::Array2;

#[test]
fn bce_at_half_is_ln2() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Array2::zeros((4, 1)));
    let y = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let l = tape.bce_with_logits(z, y);
    assert_abs_diff_eq!(tape.scalar(l), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn info_nce_equal_similarities_is_ln_k_plus_1() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Array2::from_elem((1, 4), 0.5));
    let c = tape.constant(Array2::from_shape_fn((16, 4), |(_, j)| (j + 1) as f64));
    let l = info_nce(&mut tape, a, c, 15, 0.07).unwrap();
    assert_abs_diff_eq!(tape.scalar(l), 16f64.ln(), epsilon = 1e-9);
}

#[test]
fn uniform_cross_entropy_is_ln_v() {
    for v in [1usize, 2, 7, 200] {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Array2::from_elem((3, v), 1.25));
        let l = tape.cross_entropy(z, &[0, v - 1, v / 2]);
        assert_abs_diff_eq!(tape.scalar(l), (v as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn zero_vectors_are_rejected_by_contrastive_losses() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Array2::zeros((2, 3)));
    let c = tape.constant(Array2::ones((4, 3)));
    assert!(info_nce(&mut tape, a, c, 1, 0.1).is_err());
    assert!(in_batch_nce(&mut tape, c, a, 0.1).is_err());
    let one = tape.constant(Array2::ones((1, 3)));
    assert!(in_batch_nce(&mut tape, one, one, 0.1).is_err());
}

#[test]
fn zeroed_classifier_gives_ln_c() {
    let d = common::tiny_city();
    for kind in [DownstreamKind::POIC, DownstreamKind::NPP, DownstreamKind::TUL, DownstreamKind::LPC] {
        let ek = kind.entity_kind();
        let mut p = common::pipeline::<f64>(&d, ek, &[Stage::Token, Stage::Sequence], 8);
        let trajs = common::trajectories(&d, ek, &p);
        let space = label_space(kind, &p, &d, &trajs).unwrap();
        let ex = if kind.uses_trajectories() {
            traj_examples(&space, &p, &trajs, 1).unwrap()
        } else {
            entity_examples(&space, &p, &d).unwrap()
        };
        let head = DownstreamHead::new(&mut p, &space, &ex, 1).unwrap();
        let HeadNet::Classifier(m) = &head.net else { panic!("classifier") };
        m.out.zero(&mut p.store);
        let batch: Vec<&Example> = ex.iter().take(5).collect();
        let mut tape = Tape::new();
        let l = downstream_loss(&mut tape, &p, &head, &batch, None, 0.07).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), (space.classes.len() as f64).ln(), epsilon = 1e-9);
    }
}

#[test]
fn pretraining_losses_match_finite_differences() {
    for (task, err) in common::pretrain_gradient_errors() {
        assert!(err <= 1e-3, "{task}: relative error {err:.3e}");
    }
}

#[test]
fn downstream_losses_match_finite_differences() {
    for (task, err) in common::downstream_gradient_errors() {
        assert!(err <= 1e-3, "{task}: relative error {err:.3e}");
    }
}

#[test]
fn tasks_need_their_stage() {
    let d = common::tiny_city();
    let p = common::pipeline::<f32>(&d, EntityKind::Poi, &[Stage::Token], 8);
    assert!(check_tasks(&p, &[TaskKind::TokRI]).is_ok());
    assert!(check_tasks(&p, &[TaskKind::MTR]).is_err());
    assert!(check_tasks(&p, &[TaskKind::GAu]).is_err());
}

#[test]
fn trajp_split_is_first_half_rounded_up() {
    assert_eq!(trajp_split(2), 1);
    assert_eq!(trajp_split(5), 3);
    assert_eq!(trajp_split(32), 16);
}

#[test]
fn mask_positions_cover_ratio() {
    let mut rng = maprl::rng::rng_for(&[1]);
    let m = mask_positions(20, 0.15, MaskMode::Random, &mut rng).unwrap();
    assert_eq!(m.len(), 3);
    let c = mask_positions(20, 0.15, MaskMode::Contiguous, &mut rng).unwrap();
    assert_eq!(c.len(), 3);
    assert!(c.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(mask_positions(1, 0.15, MaskMode::Random, &mut rng).unwrap(), vec![0]);
}
