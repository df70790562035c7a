//! Brute-force reference implementations and per-instance comparisons.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{TimeZone, Utc};
use maprl::bench::{avg_rank, Orientation, ResultRow};
use maprl::data::{build_od_network, split_dataset, split_sizes, Sample, Trajectory};
use maprl::downstream::StsIndex;
use maprl::metrics::{classification_metrics, regression_metrics, sts_metrics};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn close(name: &str, got: f64, want: f64) -> Check {
    if (got - want).abs() <= 1e-12 * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, oracle {want}"))
    }
}

pub fn regression(preds: &[f64], truths: &[f64]) -> Check {
    let m = regression_metrics(preds, truths).map_err(|e| e.to_string())?;
    let n = preds.len() as f64;
    let errs: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p - t).collect();
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n;
    close("MAE", m.mae, mae)?;
    close("MSE", m.mse, mse)?;
    close("RMSE", m.rmse, mse.sqrt())?;
    let mean = truths.iter().sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    match (m.r2, ss_tot > 0.0) {
        (Some(r2), true) => close("R2", r2, 1.0 - errs.iter().map(|e| e * e).sum::<f64>() / ss_tot)?,
        (None, false) => {}
        (got, _) => return Err(format!("R2 definedness: got {got:?} with SS_tot {ss_tot}")),
    }
    let nz: Vec<(f64, f64)> = preds.iter().zip(truths).filter(|(_, t)| **t != 0.0).map(|(p, t)| (*p, *t)).collect();
    if m.mape_excluded != preds.len() - nz.len() {
        return Err("MAPE exclusion count".into());
    }
    match (m.mape, nz.is_empty()) {
        (Some(v), false) => close("MAPE", v, 100.0 * nz.iter().map(|(p, t)| ((p - t) / t).abs()).sum::<f64>() / nz.len() as f64),
        (None, true) => Ok(()),
        (got, _) => Err(format!("MAPE definedness: {got:?}")),
    }
}

/// Position of `truth` after a full sort by (score desc, index asc).
fn brute_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.iter().position(|&(_, i)| i == truth).unwrap() + 1
}

pub fn classification(scores: &[Vec<f64>], truths: &[usize], ks: &[usize]) -> Check {
    let m = classification_metrics(scores, truths, ks).map_err(|e| e.to_string())?;
    let n = truths.len();
    let ranks: Vec<usize> = scores.iter().zip(truths).map(|(s, &t)| brute_rank(s, t)).collect();
    let top1: Vec<usize> = scores.iter().map(|s| (0..s.len()).find(|&j| brute_rank(s, j) == 1).unwrap()).collect();
    for &k in ks {
        close(&format!("Acc@{k}"), m.acc[&k], ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)?;
        let classes: BTreeSet<usize> = truths.iter().copied().collect();
        let mut rec = 0.0;
        for &c in &classes {
            let (mut hit, mut tot) = (0, 0);
            for i in 0..n {
                if truths[i] == c {
                    tot += 1;
                    if ranks[i] <= k {
                        hit += 1;
                    }
                }
            }
            rec += hit as f64 / tot as f64;
        }
        close(&format!("Recall@{k}"), m.recall[&k], rec / classes.len() as f64)?;
    }
    let u = scores[0].len();
    let mut conf = vec![vec![0usize; u]; u];
    for i in 0..n {
        conf[truths[i]][top1[i]] += 1;
    }
    let classes: BTreeSet<usize> = truths.iter().copied().collect();
    let mut f1 = 0.0;
    for &c in &classes {
        let tp = conf[c][c] as f64;
        let pred: usize = (0..u).map(|t| conf[t][c]).sum();
        let act: usize = conf[c].iter().sum();
        f1 += if tp == 0.0 { 0.0 } else { 2.0 * tp / (pred + act) as f64 };
    }
    close("F1", m.f1, f1 / classes.len() as f64)?;
    close("MR", m.mean_rank, ranks.iter().sum::<usize>() as f64 / n as f64)
}

pub fn sts(ranked: &[Vec<usize>], truths: &[usize], ks: &[usize]) -> Check {
    let m = sts_metrics(ranked, truths, ks).map_err(|e| e.to_string())?;
    let mut ranks = Vec::new();
    for (list, t) in ranked.iter().zip(truths) {
        let mut r = 0;
        for (i, x) in list.iter().enumerate() {
            if x == t {
                r = i + 1;
                break;
            }
        }
        ranks.push(r);
    }
    let n = ranks.len() as f64;
    for &k in ks {
        close(&format!("Acc@{k}"), m.acc[&k], ranks.iter().filter(|&&r| r <= k).count() as f64 / n)?;
    }
    close("MR", m.mean_rank, ranks.iter().sum::<usize>() as f64 / n)
}

pub fn od_histogram(trajs: &[Trajectory], vertices: &[String]) -> Check {
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let net = build_od_network(&refs, vertices);
    let mut total = 0.0;
    for (a, va) in vertices.iter().enumerate() {
        for (b, vb) in vertices.iter().enumerate() {
            let count = trajs
                .iter()
                .filter(|t| {
                    t.samples.first().and_then(|s| s.entity_id()) == Some(va.as_str())
                        && t.samples.last().and_then(|s| s.entity_id()) == Some(vb.as_str())
                })
                .count() as f64;
            total += count;
            let got = net.weight(a, b).unwrap_or(0.0);
            if got != count {
                return Err(format!("OD {va}->{vb}: got {got}, oracle {count}"));
            }
        }
    }
    let edge_sum: f64 = net.edges.values().sum();
    close("OD total", edge_sum, total)
}

pub fn split(n: usize, ratios: [u32; 3], seed: u64) -> Check {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let largest = |r: u32| (0..=n).filter(|&t| t as u64 * total <= n as u64 * r as u64).max().unwrap();
    let want = [largest(ratios[0]), largest(ratios[1]), n - largest(ratios[0]) - largest(ratios[1])];
    let got = split_sizes(n, ratios).map_err(|e| e.to_string())?;
    if got != want {
        return Err(format!("sizes {got:?}, oracle {want:?}"));
    }
    if n == 0 {
        return Ok(());
    }
    let items: Vec<usize> = (0..n).collect();
    let s = split_dataset(&items, ratios, seed).map_err(|e| e.to_string())?;
    if [s.train.len(), s.val.len(), s.test.len()] != want {
        return Err("partition sizes differ from split_sizes".into());
    }
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    if all != items {
        return Err("partitions are not a disjoint cover".into());
    }
    Ok(())
}

/// Exhaustive cosine ranking, ties by smaller id.
pub fn sts_ranking(ids: &[String], vectors: &Array2<f64>, q: &[f64]) -> Check {
    let index = StsIndex::new(ids.to_vec(), vectors).map_err(|e| e.to_string())?;
    let got: Vec<String> = index.query(q).into_iter().map(|(id, _)| id).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &String)> = vectors
        .rows()
        .into_iter()
        .zip(ids)
        .map(|(v, id)| {
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(q).map(|(a, b)| (a / vn) * (b / qn)).sum();
            (if vn == 0.0 { 0.0 } else { dot }, id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    let want: Vec<String> = scored.into_iter().map(|(_, id)| id.clone()).collect();
    if got != want {
        return Err(format!("ranking {got:?}, oracle {want:?}"));
    }
    Ok(())
}

pub fn dense_rank(rows: &[ResultRow]) -> Check {
    let mut sums: BTreeMap<(String, String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        sums.entry((r.dataset.clone(), r.task.clone(), r.metric.clone())).or_default().entry(r.combo.clone()).or_default().push(r.value);
    }
    let mut per_task: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut per_ds: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut overall: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((ds, task, metric), combos) in &sums {
        let means: BTreeMap<&String, f64> = combos.iter().map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64)).collect();
        let higher = !matches!(metric.as_str(), "MAE" | "MSE" | "RMSE" | "MAPE" | "MR");
        for (c, &m) in &means {
            let better: BTreeSet<u64> =
                means.values().filter(|&&o| if higher { o > m } else { o < m }).map(|o| o.to_bits()).collect();
            let rank = 1.0 + better.len() as f64;
            per_task.entry(task.clone()).or_default().entry((*c).clone()).or_default().push(rank);
            per_ds.entry(ds.clone()).or_default().entry((*c).clone()).or_default().push(rank);
            overall.entry((*c).clone()).or_default().push(rank);
        }
    }
    let avg = |m: &BTreeMap<String, Vec<f64>>| -> BTreeMap<String, f64> {
        m.iter().map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64)).collect()
    };
    let want_task: BTreeMap<String, BTreeMap<String, f64>> = per_task.iter().map(|(k, v)| (k.clone(), avg(v))).collect();
    let want_ds: BTreeMap<String, BTreeMap<String, f64>> = per_ds.iter().map(|(k, v)| (k.clone(), avg(v))).collect();
    let want_all = BTreeMap::from([("overall".to_string(), avg(&overall))]);
    for (o, want) in [(Orientation::Task, want_task), (Orientation::Dataset, want_ds), (Orientation::Overall, want_all)] {
        let got = avg_rank(rows, o).map_err(|e| e.to_string())?;
        if got.keys().collect::<Vec<_>>() != want.keys().collect::<Vec<_>>() {
            return Err(format!("{o:?} groups differ"));
        }
        for (g, m) in &want {
            for (c, v) in m {
                close(&format!("{o:?} {g} {c}"), got[g][c], *v)?;
            }
        }
    }
    Ok(())
}

// Random instance generators, shared by the acceptance runner.

pub fn random_regression(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..60);
    let preds = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    let truths = (0..n).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-10.0..10.0) }).collect();
    (preds, truths)
}

pub fn random_classification(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let u = rng.random_range(1..12);
    let n = rng.random_range(1..80);
    let scores = (0..n).map(|_| (0..u).map(|_| rng.random_range(0..4) as f64).collect()).collect();
    let truths = (0..n).map(|_| rng.random_range(0..u)).collect();
    let ks = (1..=u).filter(|k| [1, 3, 5, 10].contains(k)).collect();
    (scores, truths, ks)
}

pub fn random_sts(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let m = rng.random_range(1..30);
    let n = rng.random_range(1..40);
    let mut lists = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..n {
        let mut l: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(l.as_mut_slice(), rng);
        truths.push(rng.random_range(0..m));
        lists.push(l);
    }
    let ks = (1..=m).filter(|k| [1, 5, 10].contains(k)).collect();
    (lists, truths, ks)
}

pub fn random_trajectories(rng: &mut ChaCha8Rng) -> (Vec<Trajectory>, Vec<String>) {
    let v = rng.random_range(1..10);
    let vertices: Vec<String> = (0..v).map(|i| format!("e{i}")).collect();
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let trajs = (0..rng.random_range(0..50))
        .map(|i| {
            let len = rng.random_range(1..6);
            let samples = (0..len)
                .map(|j| {
                    // occasionally visit an entity outside the vertex list
                    let id = if rng.random_bool(0.05) { "ghost".to_string() } else { vertices[rng.random_range(0..v)].clone() };
                    Sample::entity(id, t0 + chrono::Duration::minutes(j as i64))
                })
                .collect();
            Trajectory::new(format!("t{i}"), None, samples)
        })
        .collect();
    (trajs, vertices)
}

pub fn random_split(rng: &mut ChaCha8Rng) -> (usize, [u32; 3], u64) {
    let n = rng.random_range(0..500);
    let ratios = [rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10)];
    (n, if rng.random_bool(0.3) { [6, 2, 2] } else { ratios }, rng.random())
}

/// Continuous random vectors, some exact duplicates and some decoys exactly
/// orthogonal to the query, which is itself stored.
pub fn random_sts_database(rng: &mut ChaCha8Rng) -> (Vec<String>, Array2<f64>, Vec<f64>) {
    let d = 6;
    let n = rng.random_range(1..500);
    let mut q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    q[4] = 0.0;
    q[5] = 0.0;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let r = match rng.random_range(0..10) {
            0 if i > 0 => rows[rng.random_range(0..i)].clone(),
            1 => {
                let mut v = vec![0.0; d];
                v[4] = rng.random_range(-1.0..1.0);
                v[5] = rng.random_range(-1.0..1.0);
                v
            }
            2 => q.clone(),
            _ => (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        rows.push(r);
    }
    let ids: Vec<String> = {
        let mut ids: Vec<String> = (0..n).map(|i| format!("traj_{:04}", (i * 7919) % 10007)).collect();
        ids.dedup();
        ids
    };
    let m = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    (ids, m, q)
}

pub fn random_rank_rows(rng: &mut ChaCha8Rng) -> Vec<ResultRow> {
    let combos = rng.random_range(1..6);
    let datasets = rng.random_range(1..4);
    let tasks = rng.random_range(1..3);
    let metrics = ["Acc@1", "MAE", "MR", "F1"];
    let n_metrics = rng.random_range(1..=metrics.len());
    let seeds = rng.random_range(1..4);
    let mut rows = Vec::new();
    for c in 0..combos {
        for ds in 0..datasets {
            for t in 0..tasks {
                for m in metrics.iter().take(n_metrics) {
                    for s in 0..seeds {
                        rows.push(ResultRow {
                            fingerprint: format!("{c}-{ds}-{s}"),
                            combo: format!("combo{c}"),
                            dataset: format!("city{ds}"),
                            task: format!("task{t}"),
                            metric: m.to_string(),
                            seed: s as u64,
                            value: rng.random_range(0..4) as f64,
                            status: "ok".into(),
                        });
                    }
                }
            }
        }
    }
    rows
}

/// Runs every oracle family on `cases` random instances each.
pub fn run_all(cases: usize, seed: u64) -> Vec<(&'static str, Check)> {
    let mut rng = maprl::rng::rng_for(&[seed]);
    let mut out: Vec<(&'static str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Check| {
        let r = (0..cases).try_for_each(|_| f(&mut rng));
        out.push((name, r));
    };
    run("regression metrics", &mut |r| {
        let (p, t) = random_regression(r);
        regression(&p, &t)
    });
    run("classification metrics", &mut |r| {
        let (s, t, k) = random_classification(r);
        classification(&s, &t, &k)
    });
    run("STS metrics", &mut |r| {
        let (l, t, k) = random_sts(r);
        sts(&l, &t, &k)
    });
    run("OD histograms", &mut |r| {
        let (t, v) = random_trajectories(r);
        od_histogram(&t, &v)
    });
    run("split sizes", &mut |r| {
        let (n, ratios, s) = random_split(r);
        split(n, ratios, s)
    });
    run("STS rankings", &mut |r| {
        let (ids, m, q) = random_sts_database(r);
        sts_ranking(&ids, &m, &q)
    });
    run("dense-rank aggregation", &mut |r| dense_rank(&random_rank_rows(r)));
    out
}
