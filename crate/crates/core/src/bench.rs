//! Pretraining-combination grids, average rankings, efficiency profiling and
//! report tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, Stage, Tape};
use crate::data::{load_dataset, validate_dataset, Dataset, EntityKind, SyntheticCitySpec, generate_synthetic_city};
use crate::downstream::{evaluate, label_space, DownstreamHead};
use crate::error::{Error, Result};
use crate::pipeline::{
    build_pipeline, prepared_trajectories, run_pipeline_on, task_examples, ExperimentResult, PipelineConfig, Precision,
};
use crate::pretrain::{joint_step_loss, PretrainContext, PretrainHead, TaskKind, TrainingRun};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// One pretraining task per available category.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CombinationSpec {
    pub entity: EntityKind,
    pub token: TaskKind,
    pub graph: Option<TaskKind>,
    pub sequence: Option<TaskKind>,
}

impl CombinationSpec {
    pub fn tasks(&self) -> Vec<TaskKind> {
        std::iter::once(self.token).chain(self.graph).chain(self.sequence).collect()
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.tasks().iter().map(|t| t.stage()).collect()
    }

    /// `TokRI+GAu+MTR` style label.
    pub fn name(&self) -> String {
        self.tasks().iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    }
}

/// Pretraining tasks available per category for each entity kind.
pub fn availability(kind: EntityKind) -> (Vec<TaskKind>, Vec<TaskKind>, Vec<TaskKind>) {
    use TaskKind::*;
    match kind {
        EntityKind::Poi => (vec![TokRI, TRCL], vec![], vec![TrajP, MTR, ATrCL]),
        EntityKind::Segment => (vec![TokRI, TRCL], vec![NFI, GAu, AGCL], vec![TrajP, MTR, ATrCL]),
        EntityKind::Parcel => (vec![TokRI, TRCL, AToCL], vec![NFI, GAu, NCL], vec![]),
    }
}

/// Cartesian product over the available categories, token-major.
pub fn enumerate_combinations(kind: EntityKind) -> Vec<CombinationSpec> {
    let (token, graph, seq) = availability(kind);
    let opt = |v: Vec<TaskKind>| if v.is_empty() { vec![None] } else { v.into_iter().map(Some).collect() };
    let (graph, seq) = (opt(graph), opt(seq));
    let mut out = Vec::new();
    for &t in &token {
        for &g in &graph {
            for &s in &seq {
                out.push(CombinationSpec { entity: kind, token: t, graph: g, sequence: s });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fingerprint: String,
    pub combo: String,
    pub dataset: String,
    pub task: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const STORE_HEADER: [&str; 8] = ["fingerprint", "combo", "dataset", "task", "metric", "seed", "value", "status"];

/// Reads a results store in canonical order (fingerprint first, then every other column).
pub fn read_store(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != STORE_HEADER {
        return Err(Error::format(path.display().to_string(), 0, "not a results store header"));
    }
    let mut rows: Vec<ResultRow> = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    rows.sort_by(|a, b| {
        (&a.fingerprint, &a.dataset, &a.task, &a.metric, a.seed, &a.combo, &a.status)
            .cmp(&(&b.fingerprint, &b.dataset, &b.task, &b.metric, b.seed, &b.combo, &b.status))
            .then(a.value.total_cmp(&b.value))
    });
    Ok(rows)
}

/// Appends rows, writing the header for a new store.
pub fn append_store(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(STORE_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rewrites the store in canonical order, keeping only the latest outcome of
/// each cell: ok rows win over failures.
pub fn compact_store(path: &Path) -> Result<()> {
    let rows = read_store(path)?;
    let done: BTreeSet<&str> = rows.iter().filter(|r| r.is_ok()).map(|r| r.fingerprint.as_str()).collect();
    let mut seen_failed = BTreeSet::new();
    let kept: Vec<ResultRow> = rows
        .iter()
        .filter(|r| if done.contains(r.fingerprint.as_str()) { r.is_ok() } else { seen_failed.insert(r.fingerprint.clone()) })
        .cloned()
        .collect();
    let tmp = path.with_extension("tmp");
    let _ = fs::remove_file(&tmp);
    append_store(&tmp, &kept)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A named grid dataset: a directory of atomic files or a synthetic city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDataset {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_spec: Option<SyntheticCitySpec>,
}

impl GridDataset {
    pub fn load(&self) -> Result<Dataset> {
        let d = match (&self.dataset, &self.synthetic_spec) {
            (Some(dir), None) => load_dataset(dir)?,
            (None, Some(s)) => generate_synthetic_city(s)?,
            _ => return Err(Error::Config(format!("grid dataset `{}` needs exactly one of dataset or synthetic_spec", self.name))),
        };
        let v = validate_dataset(&d);
        if !v.is_empty() {
            return Err(Error::Validation(v));
        }
        Ok(d)
    }
}

/// Config of one grid cell.
pub fn cell_config(base: &PipelineConfig, combo: &CombinationSpec, ds: &GridDataset, seed: u64) -> PipelineConfig {
    let mut c = base.clone();
    c.dataset = ds.dataset.clone();
    c.synthetic_spec = ds.synthetic_spec.clone();
    c.stages = combo.stages();
    c.pretrain_tasks = combo.tasks();
    c.task_weights.retain(|t, _| combo.tasks().contains(t));
    c.seeds = vec![seed];
    c.out = None;
    c
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GridSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
}

pub fn run_grid(
    combos: &[CombinationSpec],
    datasets: &[GridDataset],
    seeds: &[u64],
    base: &PipelineConfig,
    store: &Path,
) -> Result<GridSummary> {
    run_grid_with(combos, datasets, seeds, base, store, run_pipeline_on)
}

/// Grid runner with an injectable cell runner. Cells whose fingerprint already
/// has ok rows are skipped; failures are recorded and the grid continues.
pub fn run_grid_with(
    combos: &[CombinationSpec],
    datasets: &[GridDataset],
    seeds: &[u64],
    base: &PipelineConfig,
    store: &Path,
    mut runner: impl FnMut(&PipelineConfig, &Dataset) -> Result<ExperimentResult>,
) -> Result<GridSummary> {
    if let Some(c) = combos.iter().find(|c| c.entity != base.entity) {
        return Err(Error::usage(format!("combination {} is for {} entities, the base config for {}", c.name(), c.entity.name(), base.entity.name())));
    }
    let done: BTreeSet<String> = read_store(store)?.into_iter().filter(|r| r.is_ok()).map(|r| r.fingerprint).collect();
    let mut summary = GridSummary::default();
    let mut loaded: HashMap<String, Result<Dataset>> = HashMap::new();
    for ds in datasets {
        for combo in combos {
            for &seed in seeds {
                let cfg = cell_config(base, combo, ds, seed);
                let fp = cfg.fingerprint();
                if done.contains(&fp) {
                    summary.skipped += 1;
                    continue;
                }
                let data = loaded.entry(ds.name.clone()).or_insert_with(|| ds.load());
                let outcome = cfg.validate().and_then(|_| match data {
                    Ok(d) => runner(&cfg, d),
                    Err(e) => Err(Error::usage(format!("dataset `{}` unavailable: {e}", ds.name))),
                });
                let row = |metric: &str, value: f64, status: String| ResultRow {
                    fingerprint: fp.clone(),
                    combo: combo.name(),
                    dataset: ds.name.clone(),
                    task: base.downstream.name().to_string(),
                    metric: metric.to_string(),
                    seed,
                    value,
                    status,
                };
                let rows: Vec<ResultRow> = match outcome {
                    Ok(r) => {
                        summary.ran += 1;
                        r.seeds.iter().flat_map(|s| s.report.values.iter()).map(|(m, v)| row(m, *v, "ok".into())).collect()
                    }
                    Err(e) => {
                        summary.failed += 1;
                        let msg = e.to_string().replace(['\n', '\r'], " ");
                        vec![row("-", f64::NAN, format!("failed: {msg}"))]
                    }
                };
                append_store(store, &rows)?;
            }
        }
    }
    Ok(summary)
}

/// True when larger values of the metric are better.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "MAE" | "MSE" | "RMSE" | "MAPE" | "MR")
}

/// Dense 1-based ranks with ties sharing the minimum rank.
pub fn dense_ranks(values: &[f64], higher_better: bool) -> Vec<usize> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| if higher_better { b.total_cmp(a) } else { a.total_cmp(b) });
    distinct.dedup();
    values.iter().map(|v| distinct.iter().position(|d| d == v).expect("present") + 1).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Task,
    Dataset,
    Overall,
}

/// (dataset, task, metric).
pub type Cell = (String, String, String);

/// Seed-averaged values of ok rows: cell -> combo -> mean.
pub fn seed_means(rows: &[ResultRow]) -> BTreeMap<Cell, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<Cell, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let e = acc
            .entry((r.dataset.clone(), r.task.clone(), r.metric.clone()))
            .or_default()
            .entry(r.combo.clone())
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(c, m)| (c, m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())).collect()
}

/// Average dense ranks per group: task name, dataset name, or `overall`.
pub fn avg_rank(rows: &[ResultRow], orientation: Orientation) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let means = seed_means(rows);
    if means.is_empty() {
        return Err(Error::usage("no completed results to rank"));
    }
    let combos: BTreeSet<&String> = means.values().flat_map(|m| m.keys()).collect();
    let mut missing = Vec::new();
    for (cell, m) in &means {
        for c in &combos {
            if !m.contains_key(*c) {
                missing.push(format!("{c} @ {}/{}/{}", cell.0, cell.1, cell.2));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::usage(format!("incomplete rank table, missing: {}", missing.join(", "))));
    }
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for (cell, m) in &means {
        let names: Vec<&String> = m.keys().collect();
        let vals: Vec<f64> = m.values().copied().collect();
        let ranks = dense_ranks(&vals, higher_is_better(&cell.2));
        let group = match orientation {
            Orientation::Task => cell.1.clone(),
            Orientation::Dataset => cell.0.clone(),
            Orientation::Overall => "overall".to_string(),
        };
        for (n, r) in names.into_iter().zip(ranks) {
            let e = sums.entry(group.clone()).or_default().entry(n.clone()).or_insert((0.0, 0));
            e.0 += r as f64;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(g, m)| (g, m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Learnable encoder scalars, in millions.
    pub param_count: f64,
    pub epoch_time: f64,
    pub inference_time: f64,
}

/// Exact learnable encoder scalar count of the configured pipeline.
pub fn param_count_exact(c: &PipelineConfig, d: &Dataset) -> Result<usize> {
    Ok(build_pipeline::<f32>(c, d, c.seeds.first().copied().unwrap_or(0))?.encoder_param_count())
}

/// Parameter count, mean wall-clock of `epochs` pretraining epochs after one
/// discarded warm-up epoch, and wall-clock of one test-partition evaluation.
pub fn profile(c: &PipelineConfig, d: &Dataset, seed: u64, epochs: usize) -> Result<Profile> {
    match c.hparams.precision {
        Precision::F32 => profile_as::<f32>(c, d, seed, epochs),
        Precision::F64 => profile_as::<f64>(c, d, seed, epochs),
    }
}

fn profile_as<T: Scalar>(c: &PipelineConfig, d: &Dataset, seed: u64, epochs: usize) -> Result<Profile> {
    c.validate()?;
    let h = &c.hparams;
    let mut p = build_pipeline::<T>(c, d, seed)?;
    let param_count = p.encoder_param_count() as f64 / 1e6;
    let trajs = prepared_trajectories(c, d, &p)?;
    let tsplit = if trajs.is_empty() {
        crate::data::Split { train: Vec::new(), val: Vec::new(), test: Vec::new() }
    } else {
        crate::data::split_dataset(&trajs, crate::data::DEFAULT_RATIOS, seed)?
    };

    let mut epoch_time = 0.0;
    if !c.pretrain_tasks.is_empty() {
        let ctx = PretrainContext::new(&p, tsplit.train.clone());
        let mut rng = rng_for(&[seed, 0x4EAD]);
        let heads: Vec<PretrainHead> = c.pretrain_tasks.iter().map(|&t| PretrainHead::new(t, &mut p, &mut rng)).collect();
        let refs: Vec<&PretrainHead> = heads.iter().collect();
        let mut run = TrainingRun::new(c.paradigm, 0, seed);
        run.batch = h.batch;
        run.weights = c.task_weights.clone();
        let mut opt = Optimizer::new(h.optimizer.clone(), h.lr);
        let epoch_steps = tsplit.train.len().max(p.n_entities()).div_ceil(h.batch).max(1);
        let mut times = Vec::new();
        let mut step = 0u64;
        for e in 0..=epochs.max(1) {
            let t0 = Instant::now();
            for _ in 0..epoch_steps {
                let mut tape = Tape::new();
                let (loss, _) = joint_step_loss(&mut tape, &p, &refs, &ctx, &h.pretrain, &run, step)?;
                if let Some(l) = loss {
                    let g = tape.backward(l);
                    opt.step(&mut p.store, &g);
                }
                step += 1;
            }
            if e > 0 {
                times.push(t0.elapsed().as_secs_f64());
            }
        }
        epoch_time = times.iter().sum::<f64>() / times.len() as f64;
    }

    let space = label_space(c.downstream, &p, d, &trajs)?;
    let examples = task_examples(&space, &p, d, &tsplit, seed)?;
    let head = DownstreamHead::new(&mut p, &space, &examples.train, seed)?;
    let t0 = Instant::now();
    evaluate(&p, &head, &examples.test, &h.ks)?;
    let inference_time = t0.elapsed().as_secs_f64();
    Ok(Profile { param_count, epoch_time, inference_time })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub csv: PathBuf,
}

fn fmt_value(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders seed-aggregated tables, one per dataset, with the best combination
/// per metric in bold and a "Per Avg Rank" row; writes report.md and report.csv.
pub fn emit_report(rows: &[ResultRow], out: &Path) -> Result<ReportFiles> {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::usage("no completed results to report"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut stats: BTreeMap<Cell, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &ok {
        stats
            .entry((r.dataset.clone(), r.task.clone(), r.metric.clone()))
            .or_default()
            .entry(r.combo.clone())
            .or_default()
            .push(r.value);
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).map(|r| &r.fingerprint).collect::<BTreeSet<_>>().len();
    let datasets: BTreeSet<&String> = stats.keys().map(|c| &c.0).collect();
    let mut md = String::from("# Results\n");
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out.write_record(["dataset", "task", "metric", "combo", "mean", "std", "n_seeds"])?;
    for ds in datasets {
        let cells: Vec<(&Cell, &BTreeMap<String, Vec<f64>>)> = stats.iter().filter(|(c, _)| &c.0 == ds).collect();
        let combos: BTreeSet<&String> = cells.iter().flat_map(|(_, m)| m.keys()).collect();
        let combos: Vec<&String> = combos.into_iter().collect();
        let _ = writeln!(md, "\n## {ds}\n");
        let _ = writeln!(md, "| Task | Metric | {} |", combos.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(md, "|---|---|{}", "---|".repeat(combos.len()));
        for (cell, m) in &cells {
            let means: Vec<Option<(f64, f64, usize)>> = combos
                .iter()
                .map(|c| {
                    m.get(*c).map(|v| {
                        let n = v.len() as f64;
                        let mean = v.iter().sum::<f64>() / n;
                        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                        (mean, std, v.len())
                    })
                })
                .collect();
            let hb = higher_is_better(&cell.2);
            let best = means
                .iter()
                .flatten()
                .map(|s| s.0)
                .reduce(|a, b| if (hb && b > a) || (!hb && b < a) { b } else { a });
            let mut line = format!("| {} | {} |", cell.1, cell.2);
            for (c, s) in combos.iter().zip(&means) {
                match s {
                    Some((mean, std, n)) => {
                        let text = format!("{} ± {}", fmt_value(*mean), fmt_value(*std));
                        if Some(*mean) == best {
                            let _ = write!(line, " **{text}** |");
                        } else {
                            let _ = write!(line, " {text} |");
                        }
                        csv_out.write_record([ds.as_str(), &cell.1, &cell.2, c.as_str(), &fmt_value(*mean), &fmt_value(*std), &n.to_string()])?;
                    }
                    None => line.push_str(" - |"),
                }
            }
            let _ = writeln!(md, "{line}");
        }
        let ds_rows: Vec<ResultRow> = ok.iter().filter(|r| &r.dataset == ds).map(|r| (*r).clone()).collect();
        let ranks = avg_rank(&ds_rows, Orientation::Dataset).ok().and_then(|m| m.get(ds.as_str()).cloned());
        let mut line = String::from("| Per Avg Rank | |");
        for c in &combos {
            let r = ranks.as_ref().and_then(|m| m.get(*c)).copied();
            match r {
                Some(r) => {
                    let _ = write!(line, " {} |", fmt_value(r));
                    csv_out.write_record([ds.as_str(), "Per Avg Rank", "", c.as_str(), &fmt_value(r), "", ""])?;
                }
                None => line.push_str(" n/a |"),
            }
        }
        let _ = writeln!(md, "{line}");
    }
    if failed > 0 {
        let _ = writeln!(md, "\n{failed} failed cell(s) excluded.");
    }
    let markdown = out.join("report.md");
    let csv_path = out.join("report.csv");
    fs::write(&markdown, md).map_err(|e| Error::io(&markdown, e))?;
    let bytes = csv_out.into_inner().map_err(|e| Error::usage(e.to_string()))?;
    let mut f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&csv_path, e))?;
    Ok(ReportFiles { markdown, csv: csv_path })
}
