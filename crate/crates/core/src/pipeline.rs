//! Config-driven pretrain, fine-tune and evaluate runs over a seed list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{OptimizerKind, Stage};
use crate::data::{
    generate_synthetic_city, load_dataset, preprocess_checkin, split_dataset, validate_dataset, Dataset, EntityKind,
    RelationKind, Split, SyntheticCitySpec, Trajectory, DEFAULT_RATIOS, LABEL_FEATURES,
};
use crate::downstream::{
    entity_examples, finetune, label_space, traj_examples, write_predictions_csv, AccessLog, DownstreamKind, Example,
    FinetuneConfig, FinetuneStrategy, Prediction, TaskSpace,
};
use crate::encoders::{
    compose_pipeline, encoder_checkpoint, Activation, CodecOptions, EncodedTraj, EncoderConfig, EncoderPipeline,
    Paradigm, SeqArch,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_seeds, write_aggregate_csv, write_reports_csv, AggregateRow, MetricReport};
use crate::pretrain::{pretrain, PretrainContext, PretrainOptions, StepRecord, TaskKind, TrainingRun, MIN_BATCH};
use crate::scalar::Scalar;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 13, 31, 42, 131];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hparams {
    pub dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
    pub ks: Vec<usize>,
    pub graph_layers: usize,
    pub activation: Activation,
    pub seq_arch: SeqArch,
    pub seq_layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub time_slots: usize,
    pub bins: usize,
    /// Features withheld from the encoders.
    pub exclude_features: Vec<String>,
    pub min_len: usize,
    pub min_user_trajs: usize,
    pub pretrain: PretrainOptions,
    /// Budget for the batch-size probe; `None` always passes.
    pub memory_limit_mb: Option<f64>,
    pub precision: Precision,
}

impl Default for Hparams {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            dim: enc.dim,
            hidden: enc.hidden,
            lr: 1e-3,
            batch: 64,
            pretrain_steps: 500,
            finetune_steps: 500,
            optimizer: OptimizerKind::Sgd,
            eval_every: 50,
            ks: vec![1, 5, 10],
            graph_layers: enc.graph_layers,
            activation: enc.activation,
            seq_arch: enc.seq_arch,
            seq_layers: enc.seq_layers,
            heads: enc.heads,
            max_len: enc.max_len,
            time_slots: enc.time_slots,
            bins: enc.codec.bins,
            exclude_features: LABEL_FEATURES.iter().map(|s| s.to_string()).collect(),
            min_len: 3,
            min_user_trajs: 3,
            pretrain: PretrainOptions::default(),
            memory_limit_mb: None,
            precision: Precision::F32,
        }
    }
}

impl Hparams {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            graph_layers: self.graph_layers,
            activation: self.activation,
            seq_arch: self.seq_arch,
            seq_layers: self.seq_layers,
            heads: self.heads,
            hidden: self.hidden,
            max_len: self.max_len,
            time_slots: self.time_slots,
            codec: CodecOptions { bins: self.bins, exclude: self.exclude_features.clone(), ..CodecOptions::default() },
        }
    }

    pub fn finetune_config(&self, batch: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune_steps,
            batch,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
            eval_every: self.eval_every,
            ks: self.ks.clone(),
            tau: self.pretrain.tau,
        }
    }
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Token]
}

fn default_paradigm() -> Paradigm {
    Paradigm::Joint
}

fn default_strategy() -> FinetuneStrategy {
    FinetuneStrategy::EndToEnd
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of atomic files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_spec: Option<SyntheticCitySpec>,
    pub entity: EntityKind,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub pretrain_tasks: Vec<TaskKind>,
    #[serde(default)]
    pub task_weights: BTreeMap<TaskKind, f64>,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    pub downstream: DownstreamKind,
    #[serde(default = "default_strategy")]
    pub finetune: FinetuneStrategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hparams: Hparams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(entity: EntityKind, downstream: DownstreamKind) -> Self {
        Self {
            dataset: None,
            synthetic_spec: None,
            entity,
            stages: default_stages(),
            pretrain_tasks: Vec::new(),
            task_weights: BTreeMap::new(),
            paradigm: default_paradigm(),
            downstream,
            finetune: default_strategy(),
            seeds: default_seeds(),
            hparams: Hparams::default(),
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        match (&self.dataset, &self.synthetic_spec) {
            (None, None) => return cfg("one of `dataset` or `synthetic_spec` is required".into()),
            (Some(_), Some(_)) => return cfg("`dataset` and `synthetic_spec` are mutually exclusive".into()),
            (None, Some(s)) => s.check().map_err(|e| Error::Config(format!("synthetic_spec: {e}")))?,
            _ => {}
        }
        let canonical = compose_pipeline(&self.stages).map_err(|e| Error::Config(format!("stages: {e}")))?;
        if canonical != self.stages {
            return cfg("stages must be listed in token, graph, sequence order".into());
        }
        for t in &self.pretrain_tasks {
            if !self.stages.contains(&t.stage()) {
                return cfg(format!("pretrain task {t} needs the {} stage", t.stage().name()));
            }
        }
        for (t, w) in &self.task_weights {
            if !self.pretrain_tasks.contains(t) {
                return cfg(format!("task_weights names {t}, which is not a pretrain task"));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return cfg(format!("task_weights.{t} must be a non-negative number"));
            }
        }
        if self.downstream.entity_kind() != self.entity {
            return cfg(format!("downstream task {} applies to {} entities, not {}", self.downstream, self.downstream.entity_kind().name(), self.entity.name()));
        }
        if self.seeds.is_empty() {
            return cfg("seeds must not be empty".into());
        }
        let h = &self.hparams;
        if h.dim == 0 || h.hidden == 0 || h.max_len == 0 || h.heads == 0 || h.dim % h.heads != 0 {
            return cfg("hparams: dim, hidden, max_len and heads must be positive and heads must divide dim".into());
        }
        if h.batch < MIN_BATCH {
            return cfg(format!("hparams.batch must be at least {MIN_BATCH}"));
        }
        if !(h.lr > 0.0) {
            return cfg("hparams.lr must be positive".into());
        }
        if h.ks.is_empty() || h.ks.contains(&0) {
            return cfg("hparams.ks must be non-empty positive cutoffs".into());
        }
        h.pretrain.check().map_err(|e| Error::Config(format!("hparams.pretrain: {e}")))?;
        Ok(())
    }

    /// Content hash of the resolved config; the output directory is not part of it.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let c: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn save_config(path: impl AsRef<Path>, c: &PipelineConfig) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(c)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Halves `requested` until `fits` accepts it. Failing at the minimum batch
/// size is a resource error.
pub fn resolve_batch(requested: usize, mut fits: impl FnMut(usize) -> bool) -> Result<usize> {
    if requested < MIN_BATCH {
        return Err(Error::usage(format!("batch size {requested} is below the minimum of {MIN_BATCH}")));
    }
    let mut b = requested;
    loop {
        if fits(b) {
            return Ok(b);
        }
        if b / 2 < MIN_BATCH {
            return Err(Error::Resource(format!("no batch size down to {MIN_BATCH} fits the memory budget")));
        }
        b /= 2;
    }
}

/// Rough activation footprint of one training step, in MiB.
pub fn batch_footprint_mb(h: &Hparams, batch: usize) -> f64 {
    let width = h.dim.max(h.hidden) as f64;
    let layers = (h.graph_layers + h.seq_layers + 2) as f64;
    let bytes = match h.precision {
        Precision::F32 => 4.0,
        Precision::F64 => 8.0,
    };
    batch as f64 * h.max_len as f64 * width * layers * bytes * 8.0 / (1024.0 * 1024.0)
}

pub fn load_or_synthesize(c: &PipelineConfig) -> Result<Dataset> {
    let d = match (&c.dataset, &c.synthetic_spec) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(spec)) => generate_synthetic_city(spec)?,
        (None, None) => return Err(Error::Config("one of `dataset` or `synthetic_spec` is required".into())),
    };
    let violations = validate_dataset(&d);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub seed: u64,
    /// Learnable encoder scalars, in millions.
    pub param_count: f64,
    pub epoch_time: f64,
    pub inference_time: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub report: MetricReport,
    pub efficiency: EfficiencyRecord,
    pub history: Vec<StepRecord>,
    pub predictions: Vec<Prediction>,
    pub best_step: usize,
    pub batch: usize,
    pub checkpoint: Vec<u8>,
    pub access: AccessLog,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub seeds: Vec<SeedOutcome>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentResult {
    pub fn reports(&self) -> Vec<MetricReport> {
        self.seeds.iter().map(|s| s.report.clone()).collect()
    }

    /// Hash over everything except wall-clock timings.
    pub fn result_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        for s in &self.seeds {
            h.update(s.report.seed.to_le_bytes());
            for (k, v) in &s.report.values {
                h.update(k.as_bytes());
                h.update(v.to_le_bytes());
            }
            h.update((s.report.n as u64).to_le_bytes());
            h.update(s.efficiency.param_count.to_le_bytes());
            for r in &s.history {
                for (t, l) in &r.losses {
                    h.update(t.name().as_bytes());
                    h.update(l.to_le_bytes());
                }
            }
            for p in &s.predictions {
                h.update(p.item_id.as_bytes());
                h.update(p.prediction.as_bytes());
                h.update(p.rank.unwrap_or(0).to_le_bytes());
            }
            h.update((s.best_step as u64).to_le_bytes());
            h.update(&s.checkpoint);
        }
        hex::encode(h.finalize())
    }
}

/// Pipeline over the configured entity kind, with the geographical network when present.
pub fn build_pipeline<T: Scalar>(c: &PipelineConfig, d: &Dataset, seed: u64) -> Result<EncoderPipeline<T>> {
    let entities = d.entities_of(c.entity);
    let geo = d.network(RelationKind::Geographical);
    EncoderPipeline::build(&c.hparams.encoder_config(), &c.stages, c.paradigm, &entities, geo, seed)
}

/// Preprocessed trajectories over the configured entity kind.
pub fn prepared_trajectories<T: Scalar>(c: &PipelineConfig, d: &Dataset, p: &EncoderPipeline<T>) -> Result<Vec<EncodedTraj>> {
    let raw: Vec<Trajectory> = d.trajectories_over(c.entity).into_iter().cloned().collect();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let h = &c.hparams;
    let kept = preprocess_checkin(&raw, h.min_len, h.min_user_trajs, h.max_len)?;
    kept.iter().map(|t| p.encode_traj(t)).collect()
}

/// Downstream examples split 6:2:2. Trajectory tasks follow the trajectory split.
pub fn task_examples<T: Scalar>(
    space: &TaskSpace,
    p: &EncoderPipeline<T>,
    d: &Dataset,
    trajs: &Split<EncodedTraj>,
    seed: u64,
) -> Result<Split<Example>> {
    if space.kind.uses_trajectories() {
        let part = |v: &[EncodedTraj]| traj_examples(space, p, v, seed);
        Ok(Split { train: part(&trajs.train)?, val: part(&trajs.val)?, test: part(&trajs.test)? })
    } else {
        split_dataset(&entity_examples(space, p, d)?, DEFAULT_RATIOS, seed)
    }
}

fn split_trajs(trajs: &[EncodedTraj], seed: u64) -> Result<Split<EncodedTraj>> {
    if trajs.is_empty() {
        return Ok(Split { train: Vec::new(), val: Vec::new(), test: Vec::new() });
    }
    split_dataset(trajs, DEFAULT_RATIOS, seed)
}

/// One seed of the protocol: split, pretrain on train, fine-tune with
/// validation-based selection, evaluate on test.
pub fn run_seed<T: Scalar>(c: &PipelineConfig, d: &Dataset, seed: u64) -> Result<SeedOutcome> {
    let h = &c.hparams;
    let batch = resolve_batch(h.batch, |b| h.memory_limit_mb.is_none_or(|m| batch_footprint_mb(h, b) <= m))?;
    let mut p = build_pipeline::<T>(c, d, seed)?;
    let trajs = prepared_trajectories(c, d, &p)?;
    let tsplit = split_trajs(&trajs, seed)?;

    let mut run = TrainingRun::new(c.paradigm, h.pretrain_steps, seed);
    run.batch = batch;
    run.lr = h.lr;
    run.optimizer = h.optimizer.clone();
    run.weights = c.task_weights.clone();
    let mut epoch_time = 0.0;
    if !c.pretrain_tasks.is_empty() {
        let ctx = PretrainContext::new(&p, tsplit.train.clone());
        let t0 = Instant::now();
        pretrain(&mut p, &c.pretrain_tasks, &mut run, &ctx, &h.pretrain)?;
        let secs = t0.elapsed().as_secs_f64();
        let epoch_steps = tsplit.train.len().max(p.n_entities()).div_ceil(batch).max(1);
        let epochs = (run.history.len() as f64 / epoch_steps as f64).max(1.0);
        epoch_time = secs / epochs;
    }

    let space = label_space(c.downstream, &p, d, &trajs)?;
    let examples = task_examples(&space, &p, d, &tsplit, seed)?;
    let mut log = AccessLog::default();
    let t0 = Instant::now();
    let out = finetune(&mut p, &space, &examples, c.finetune, &h.finetune_config(batch), seed, &mut log)?;
    let finetune_secs = t0.elapsed().as_secs_f64();
    if c.pretrain_tasks.is_empty() {
        let epoch_steps = examples.train.len().div_ceil(batch).max(1);
        epoch_time = finetune_secs / (h.finetune_steps.max(1) as f64 / epoch_steps as f64).max(1.0);
    }
    let t0 = Instant::now();
    crate::downstream::evaluate(&p, &out.head, &examples.test, &h.ks)?;
    let inference_time = t0.elapsed().as_secs_f64();

    let report = MetricReport::new(c.downstream.name(), out.test.metrics.clone(), out.test.n, seed)?;
    let param_count = p.encoder_param_count() as f64 / 1e6;
    Ok(SeedOutcome {
        report,
        efficiency: EfficiencyRecord { seed, param_count, epoch_time, inference_time },
        history: run.history,
        predictions: out.test.predictions,
        best_step: out.best_step,
        batch,
        checkpoint: encoder_checkpoint(&p)?,
        access: log,
    })
}

pub fn run_pipeline(c: &PipelineConfig) -> Result<ExperimentResult> {
    c.validate()?;
    let d = load_or_synthesize(c)?;
    run_pipeline_on(c, &d)
}

/// As `run_pipeline`, over an already loaded dataset.
pub fn run_pipeline_on(c: &PipelineConfig, d: &Dataset) -> Result<ExperimentResult> {
    c.validate()?;
    let mut seeds = Vec::with_capacity(c.seeds.len());
    for &s in &c.seeds {
        seeds.push(match c.hparams.precision {
            Precision::F32 => run_seed::<f32>(c, d, s)?,
            Precision::F64 => run_seed::<f64>(c, d, s)?,
        });
    }
    let reports: Vec<MetricReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let aggregate = aggregate_seeds(&reports)?;
    Ok(ExperimentResult { fingerprint: c.fingerprint(), config: c.clone(), seeds, aggregate })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes result.csv, aggregate.csv, efficiency.csv, loss_history.csv,
/// predictions, checkpoints, the resolved config and a summary.
pub fn write_outputs(r: &ExperimentResult, out: &Path) -> Result<()> {
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    fs::create_dir_all(out.join("predictions")).map_err(|e| Error::io(out, e))?;
    write_reports_csv(&r.reports(), create(&out.join("result.csv"))?)?;
    write_aggregate_csv(&r.aggregate, create(&out.join("aggregate.csv"))?)?;

    let mut w = csv::Writer::from_writer(create(&out.join("efficiency.csv"))?);
    w.write_record(["seed", "param_count", "epoch_time", "inference_time"])?;
    for s in &r.seeds {
        let e = &s.efficiency;
        w.write_record([e.seed.to_string(), e.param_count.to_string(), e.epoch_time.to_string(), e.inference_time.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out.join("efficiency.csv"), e))?;

    let mut w = csv::Writer::from_writer(create(&out.join("loss_history.csv"))?);
    w.write_record(["seed", "step", "task", "loss"])?;
    for s in &r.seeds {
        for rec in &s.history {
            for (t, l) in &rec.losses {
                w.write_record([s.report.seed.to_string(), rec.step.to_string(), t.name().to_string(), l.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(out.join("loss_history.csv"), e))?;

    for s in &r.seeds {
        let seed = s.report.seed;
        write_predictions_csv(&s.predictions, create(&out.join(format!("predictions/seed_{seed}.csv")))?)?;
        let path = out.join(format!("checkpoints/seed_{seed}.ckpt"));
        fs::write(&path, &s.checkpoint).map_err(|e| Error::io(&path, e))?;
    }
    save_config(out.join("config.json"), &r.config)?;
    let summary = serde_json::json!({
        "fingerprint": r.fingerprint,
        "result_hash": r.result_hash(),
        "seeds": r.seeds.iter().map(|s| serde_json::json!({
            "seed": s.report.seed,
            "batch": s.batch,
            "best_step": s.best_step,
        })).collect::<Vec<_>>(),
    });
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))
}
