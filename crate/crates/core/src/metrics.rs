//! Evaluation metrics for regression, classification and similarity search,
//! plus seed aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the truths are constant.
    pub r2: Option<f64>,
    /// Percent; `None` when every truth is zero.
    pub mape: Option<f64>,
    /// Rows left out of MAPE because their truth is zero.
    pub mape_excluded: usize,
}

pub fn regression_metrics<T: Scalar>(preds: &[T], truths: &[T]) -> Result<RegressionMetrics> {
    if preds.len() != truths.len() {
        return Err(Error::usage(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::usage("regression metrics need at least one item"));
    }
    let n = preds.len() as f64;
    let (mut abs, mut sq, mut pct, mut pct_n) = (0.0, 0.0, 0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (p.as_f64(), t.as_f64());
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t != 0.0 {
            pct += (e / t).abs();
            pct_n += 1;
        }
    }
    let mean_t = truths.iter().map(|t| t.as_f64()).sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|t| (t.as_f64() - mean_t).powi(2)).sum();
    let mse = sq / n;
    Ok(RegressionMetrics {
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
        r2: (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot),
        mape: (pct_n > 0).then(|| 100.0 * pct / pct_n as f64),
        mape_excluded: preds.len() - pct_n,
    })
}

impl RegressionMetrics {
    /// Named values, skipping the undefined ones.
    pub fn named(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::from([
            ("MAE".to_string(), self.mae),
            ("MSE".to_string(), self.mse),
            ("RMSE".to_string(), self.rmse),
        ]);
        if let Some(r2) = self.r2 {
            m.insert("R2".into(), r2);
        }
        if let Some(mape) = self.mape {
            m.insert("MAPE".into(), mape);
        }
        m
    }
}

/// 1-based rank of `truth` when candidates are sorted by descending score,
/// ties going to the smaller candidate index.
pub fn rank_of<T: Scalar>(scores: &[T], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < truth)).count()
}

/// Candidate indices sorted by descending score, ties by index.
pub fn ranking<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub acc: BTreeMap<usize, f64>,
    /// Macro-averaged over the classes present in the truths.
    pub recall: BTreeMap<usize, f64>,
    /// Macro F1 of the top-1 predictions.
    pub f1: f64,
    pub mean_rank: f64,
}

impl ClassificationMetrics {
    pub fn named(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (k, v) in &self.acc {
            m.insert(format!("Acc@{k}"), *v);
        }
        for (k, v) in &self.recall {
            m.insert(format!("Recall@{k}"), *v);
        }
        m.insert("F1".into(), self.f1);
        m.insert("MR".into(), self.mean_rank);
        m
    }
}

fn check_items<T>(scores: &[Vec<T>], truths: &[usize], ks: &[usize]) -> Result<()> {
    if scores.len() != truths.len() {
        return Err(Error::usage(format!("{} score rows for {} truths", scores.len(), truths.len())));
    }
    if scores.is_empty() {
        return Err(Error::usage("classification metrics need at least one item"));
    }
    for (row, &t) in scores.iter().zip(truths) {
        if t >= row.len() {
            return Err(Error::usage(format!("truth {t} outside a universe of {} candidates", row.len())));
        }
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > row.len()) {
            return Err(Error::usage(format!("k = {k} is invalid for {} candidates", row.len())));
        }
    }
    Ok(())
}

pub fn classification_metrics<T: Scalar>(
    scores: &[Vec<T>],
    truths: &[usize],
    ks: &[usize],
) -> Result<ClassificationMetrics> {
    check_items(scores, truths, ks)?;
    let ranks: Vec<usize> = scores.iter().zip(truths).map(|(s, &t)| rank_of(s, t)).collect();
    let top1: Vec<usize> = scores.iter().map(|s| ranking(s)[0]).collect();
    let n = truths.len() as f64;
    let classes: BTreeSet<usize> = truths.iter().copied().collect();

    let mut acc = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &k in ks {
        acc.insert(k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
        let per_class: f64 = classes
            .iter()
            .map(|&c| {
                let members: Vec<usize> = (0..truths.len()).filter(|&i| truths[i] == c).collect();
                members.iter().filter(|&&i| ranks[i] <= k).count() as f64 / members.len() as f64
            })
            .sum();
        recall.insert(k, per_class / classes.len() as f64);
    }
    let f1 = classes
        .iter()
        .map(|&c| {
            let tp = truths.iter().zip(&top1).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let predicted = top1.iter().filter(|&&p| p == c).count() as f64;
            let actual = truths.iter().filter(|&&t| t == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                let (p, r) = (tp / predicted, tp / actual);
                2.0 * p * r / (p + r)
            }
        })
        .sum::<f64>()
        / classes.len() as f64;
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    Ok(ClassificationMetrics { acc, recall, f1, mean_rank })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StsMetrics {
    pub acc: BTreeMap<usize, f64>,
    pub mean_rank: f64,
}

impl StsMetrics {
    pub fn named(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self.acc.iter().map(|(k, v)| (format!("Acc@{k}"), *v)).collect();
        m.insert("MR".into(), self.mean_rank);
        m
    }
}

/// Accuracy@k and mean rank of each truth within its ranked list.
pub fn sts_metrics<I: PartialEq + std::fmt::Debug>(ranked: &[Vec<I>], truths: &[I], ks: &[usize]) -> Result<StsMetrics> {
    if ranked.len() != truths.len() || ranked.is_empty() {
        return Err(Error::usage("need one non-empty truth per ranked list"));
    }
    let mut ranks = Vec::with_capacity(truths.len());
    for (list, t) in ranked.iter().zip(truths) {
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > list.len()) {
            return Err(Error::usage(format!("k = {k} is invalid for a list of {}", list.len())));
        }
        let pos = list
            .iter()
            .position(|x| x == t)
            .ok_or_else(|| Error::usage(format!("truth {t:?} missing from its ranked list")))?;
        ranks.push(pos + 1);
    }
    let n = ranks.len() as f64;
    let acc = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n)).collect();
    Ok(StsMetrics { acc, mean_rank: ranks.iter().sum::<usize>() as f64 / n })
}

/// Named metric values for one task and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub values: BTreeMap<String, f64>,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, values: BTreeMap<String, f64>, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("a metric report needs at least one sample"));
        }
        if let Some((k, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::usage(format!("metric {k} is not finite ({v})")));
        }
        Ok(Self { task: task.into(), values, n, seed })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Mean and population standard deviation of every metric across seeds.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<Vec<AggregateRow>> {
    let first = reports.first().ok_or_else(|| Error::usage("no reports to aggregate"))?;
    let keys: Vec<&String> = first.values.keys().collect();
    for r in reports {
        if r.task != first.task || r.values.keys().collect::<Vec<_>>() != keys {
            return Err(Error::usage(format!("report for seed {} has different metric keys", r.seed)));
        }
    }
    let n = reports.len() as f64;
    Ok(keys
        .into_iter()
        .map(|k| {
            let xs: Vec<f64> = reports.iter().map(|r| r.values[k]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            AggregateRow { task: first.task.clone(), metric: k.clone(), mean, std: var.sqrt(), n_seeds: reports.len() }
        })
        .collect())
}

/// Writes `task,metric,mean,std,n_seeds`.
pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "metric", "mean", "std", "n_seeds"])?;
    for r in rows {
        w.write_record([r.task.clone(), r.metric.clone(), r.mean.to_string(), r.std.to_string(), r.n_seeds.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<aggregate csv>", e))?;
    Ok(())
}

/// Writes one `task,metric,seed,value` row per metric of every report.
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "metric", "seed", "value", "n"])?;
    for r in reports {
        for (k, v) in &r.values {
            w.write_record([r.task.clone(), k.clone(), r.seed.to_string(), v.to_string(), r.n.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<result csv>", e))?;
    Ok(())
}

/// Inverse of [`write_reports_csv`], reports ordered by first appearance.
pub fn read_reports_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<MetricReport> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::format("result.csv", row + 2, m.to_string());
        if rec.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let seed: u64 = rec[2].parse().map_err(|_| bad("bad seed"))?;
        let value: f64 = rec[3].parse().map_err(|_| bad("bad value"))?;
        let n: usize = rec[4].parse().map_err(|_| bad("bad sample count"))?;
        match out.iter_mut().find(|r| r.task == rec[0] && r.seed == seed) {
            Some(r) => {
                r.values.insert(rec[1].to_string(), value);
            }
            None => out.push(MetricReport {
                task: rec[0].to_string(),
                values: BTreeMap::from([(rec[1].to_string(), value)]),
                n,
                seed,
            }),
        }
    }
    Ok(out)
}
