mod common;

use std::collections::BTreeMap;

use maprl::autodiff::{OptimizerKind, Stage};
use maprl::bench::*;
use maprl::data::*;
use maprl::downstream::DownstreamKind;
use maprl::encoders::{encoder_checkpoint, read_checkpoint};
use maprl::pipeline::*;
use maprl::pretrain::TaskKind;
use maprl::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn row(combo: &str, metric: &str, value: f64) -> ResultRow {
    ResultRow {
        fingerprint: format!("{combo}-{metric}"),
        combo: combo.into(),
        dataset: "city".into(),
        task: "POIC".into(),
        metric: metric.into(),
        seed: 1,
        value,
        status: "ok".into(),
    }
}

#[test]
fn enumeration_counts() {
    assert_eq!(enumerate_combinations(EntityKind::Poi).len(), 6);
    assert_eq!(enumerate_combinations(EntityKind::Segment).len(), 18);
    assert_eq!(enumerate_combinations(EntityKind::Parcel).len(), 9);
    for kind in EntityKind::ALL {
        let combos = enumerate_combinations(kind);
        let (t, g, s) = availability(kind);
        for c in &combos {
            assert!(t.contains(&c.token));
            assert_eq!(c.graph.is_some(), !g.is_empty());
            assert_eq!(c.sequence.is_some(), !s.is_empty());
        }
        let mut names: Vec<String> = combos.iter().map(|c| c.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), combos.len());
    }
    assert!(enumerate_combinations(EntityKind::Poi).iter().any(|c| c.name() == "TRCL+ATrCL"));
    assert!(enumerate_combinations(EntityKind::Parcel).iter().any(|c| c.name() == "AToCL+NCL"));
}

#[test]
fn avg_rank_hand_example() {
    let rows = vec![
        row("A", "Acc@1", 0.9),
        row("B", "Acc@1", 0.8),
        row("A", "Acc@5", 0.95),
        row("B", "Acc@5", 0.9),
        row("A", "MAE", 1.0),
        row("B", "MAE", 2.0),
        row("A", "F1", 0.3),
        row("B", "F1", 0.5),
    ];
    let r = avg_rank(&rows, Orientation::Overall).unwrap();
    assert_eq!(r["overall"]["A"], 1.25);
    assert_eq!(r["overall"]["B"], 1.75);
    assert_eq!(avg_rank(&rows, Orientation::Task).unwrap()["POIC"], r["overall"]);
    assert_eq!(avg_rank(&rows, Orientation::Dataset).unwrap()["city"], r["overall"]);
    assert_eq!(dense_ranks(&[3.0, 3.0, 1.0], true), vec![1, 1, 2]);
    assert_eq!(dense_ranks(&[3.0, 3.0, 1.0], false), vec![2, 2, 1]);
}

#[test]
fn incomplete_tables_are_refused() {
    let mut rows = vec![row("A", "Acc@1", 0.9), row("B", "Acc@1", 0.8), row("A", "MAE", 1.0)];
    let e = avg_rank(&rows, Orientation::Overall).unwrap_err();
    assert!(matches!(&e, Error::Usage(m) if m.contains("B @ city/POIC/MAE")), "{e}");
    // a failed cell does not complete the table
    let mut failed = row("B", "MAE", f64::NAN);
    failed.status = "failed: boom".into();
    rows.push(failed);
    assert!(avg_rank(&rows, Orientation::Overall).is_err());
}

proptest! {
    #[test]
    fn ranks_ignore_monotone_rescaling(seed in any::<u64>(), e in -3i32..4, b in -100i32..100) {
        // exact in binary, so seed means keep their ties
        let (a, b) = (2f64.powi(e), b as f64);
        let rows = common::oracles::random_rank_rows(&mut ChaCha8Rng::seed_from_u64(seed));
        let shifted: Vec<ResultRow> = rows.iter().map(|r| ResultRow { value: a * r.value + b, ..r.clone() }).collect();
        for o in [Orientation::Task, Orientation::Dataset, Orientation::Overall] {
            prop_assert_eq!(avg_rank(&rows, o).unwrap(), avg_rank(&shifted, o).unwrap());
        }
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(avg_rank(&rows, Orientation::Overall).unwrap(), avg_rank(&shuffled, Orientation::Overall).unwrap());
    }
}

fn base() -> PipelineConfig {
    let mut c = PipelineConfig::new(EntityKind::Poi, DownstreamKind::POIC);
    let h = &mut c.hparams;
    h.dim = 8;
    h.hidden = 16;
    h.heads = 2;
    h.batch = 16;
    h.pretrain_steps = 10;
    h.finetune_steps = 10;
    h.eval_every = 5;
    h.optimizer = OptimizerKind::Adam;
    c
}

fn tiny_ds() -> GridDataset {
    GridDataset { name: "tiny".into(), dataset: None, synthetic_spec: Some(common::tiny_spec()) }
}

#[test]
fn grid_appends_skips_and_retries() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("results.csv");
    let combos: Vec<CombinationSpec> = enumerate_combinations(EntityKind::Poi).into_iter().take(2).collect();
    let seeds = [1, 13];
    let bad = combos[1].name();
    let s = run_grid_with(&combos, &[tiny_ds()], &seeds, &base(), &store, |c, d| {
        if c.pretrain_tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+") == bad && c.seeds == [13] {
            Err(Error::Resource("injected".into()))
        } else {
            run_pipeline_on(c, d)
        }
    })
    .unwrap();
    assert_eq!(s, GridSummary { ran: 3, skipped: 0, failed: 1 });
    let rows = read_store(&store).unwrap();
    let failed: Vec<&ResultRow> = rows.iter().filter(|r| !r.is_ok()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].combo, bad);
    assert!(failed[0].value.is_nan() && failed[0].status.contains("injected"));
    // one ok row per metric for each of the two seeds of the first combo
    let first: Vec<&ResultRow> = rows.iter().filter(|r| r.combo == combos[0].name() && r.metric == "Acc@1").collect();
    assert_eq!(first.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len(), 2);

    let s = run_grid(&combos, &[tiny_ds()], &seeds, &base(), &store).unwrap();
    assert_eq!(s, GridSummary { ran: 1, skipped: 3, failed: 0 });
    let s = run_grid(&combos, &[tiny_ds()], &seeds, &base(), &store).unwrap();
    assert_eq!(s, GridSummary { ran: 0, skipped: 4, failed: 0 });

    let before = read_store(&store).unwrap().len();
    compact_store(&store).unwrap();
    let after = read_store(&store).unwrap();
    assert_eq!(after.len(), before - 1);
    assert!(after.iter().all(|r| r.is_ok()));
    avg_rank(&after, Orientation::Overall).unwrap();
}

#[test]
fn grid_rejects_foreign_combos() {
    let dir = tempfile::tempdir().unwrap();
    let combos = enumerate_combinations(EntityKind::Parcel);
    let e = run_grid(&combos[..1], &[tiny_ds()], &[1], &base(), &dir.path().join("r.csv")).unwrap_err();
    assert!(matches!(e, Error::Usage(_)));
}

#[test]
fn store_order_does_not_change_reports() {
    let rows = common::oracles::random_rank_rows(&mut ChaCha8Rng::seed_from_u64(9));
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    append_store(&a, &rows).unwrap();
    let mut shuffled = rows.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let (half1, half2) = shuffled.split_at(shuffled.len() / 2);
    append_store(&b, half1).unwrap();
    append_store(&b, half2).unwrap();
    let (ra, rb) = (read_store(&a).unwrap(), read_store(&b).unwrap());
    assert_eq!(ra, rb);
    let (oa, ob) = (dir.path().join("ra"), dir.path().join("rb"));
    let fa = emit_report(&ra, &oa).unwrap();
    let fb = emit_report(&rb, &ob).unwrap();
    assert_eq!(std::fs::read(&fa.markdown).unwrap(), std::fs::read(&fb.markdown).unwrap());
    assert_eq!(std::fs::read(&fa.csv).unwrap(), std::fs::read(&fb.csv).unwrap());
    let again = emit_report(&ra, &oa).unwrap();
    assert_eq!(std::fs::read(&again.csv).unwrap(), std::fs::read(&fb.csv).unwrap());
}

#[test]
fn report_marks_best_and_ranks() {
    let rows = vec![row("A", "Acc@1", 0.9), row("B", "Acc@1", 0.8), row("A", "MAE", 3.0), row("B", "MAE", 2.0)];
    let dir = tempfile::tempdir().unwrap();
    let f = emit_report(&rows, dir.path()).unwrap();
    let md = std::fs::read_to_string(f.markdown).unwrap();
    assert!(md.contains("| POIC | Acc@1 | **0.9000 ± 0.0000** | 0.8000 ± 0.0000 |"), "{md}");
    assert!(md.contains("| POIC | MAE | 3.0000 ± 0.0000 | **2.0000 ± 0.0000** |"), "{md}");
    assert!(md.contains("| Per Avg Rank | | 1.5000 | 1.5000 |"), "{md}");
    let csv = std::fs::read_to_string(f.csv).unwrap();
    assert!(csv.starts_with("dataset,task,metric,combo,mean,std,n_seeds\n"));
}

#[test]
fn param_count_matches_the_checkpoint_manifest() {
    let d = common::tiny_city();
    for (entity, task, stages, tasks) in [
        (EntityKind::Poi, DownstreamKind::POIC, vec![Stage::Token], vec![TaskKind::TokRI]),
        (EntityKind::Parcel, DownstreamKind::LPC, vec![Stage::Token, Stage::Graph], vec![TaskKind::TokRI, TaskKind::GAu]),
        (EntityKind::Segment, DownstreamKind::TTE, vec![Stage::Token, Stage::Graph, Stage::Sequence], vec![TaskKind::TRCL, TaskKind::NFI, TaskKind::MTR]),
    ] {
        let mut c = base();
        c.entity = entity;
        c.downstream = task;
        c.stages = stages.clone();
        c.pretrain_tasks = tasks;
        c.seeds = vec![1];
        c.synthetic_spec = Some(common::tiny_spec());
        let p = build_pipeline::<f32>(&c, &d, 1).unwrap();
        let (manifest, tensors) = read_checkpoint(&encoder_checkpoint(&p).unwrap()).unwrap();
        let by_tensors: usize = tensors.iter().map(|t| t.len()).sum();
        assert_eq!(manifest.scalar_count(), by_tensors);
        let exact = param_count_exact(&c, &d).unwrap();
        assert_eq!(exact, manifest.scalar_count(), "{stages:?}");
        let prof = profile(&c, &d, 1, 2).unwrap();
        assert_eq!((prof.param_count * 1e6).round() as usize, exact);
        assert!(prof.epoch_time > 0.0 && prof.inference_time > 0.0, "{prof:?}");
        let r = run_pipeline_on(&c, &d).unwrap();
        assert_eq!(r.seeds[0].efficiency.param_count, prof.param_count);
    }
}

#[test]
fn seed_means_average_seeds() {
    let mut rows = vec![row("A", "Acc@1", 0.5), row("A", "Acc@1", 1.0)];
    rows[1].seed = 2;
    let m = seed_means(&rows);
    let want: BTreeMap<String, f64> = [("A".to_string(), 0.75)].into();
    assert_eq!(m[&("city".into(), "POIC".into(), "Acc@1".into())], want);
    assert!(!higher_is_better("MAE") && higher_is_better("Acc@1") && !higher_is_better("MR"));
}
