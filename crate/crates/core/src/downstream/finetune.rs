use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sts::StsIndex;
use super::{check_compatible, Example, Input, Target, TaskFamily, TaskSpace};
use crate::autodiff::{Group, OptimizerKind, Optimizer, ParamStore, Stage, Tape, Var};
use crate::data::Split;
use crate::encoders::EncoderPipeline;
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, rank_of, ranking, regression_metrics, sts_metrics};
use crate::nn::{Linear, Mlp};
use crate::pretrain::{in_batch_nce, pooled_view};
use crate::rng::rng_for;
use crate::scalar::Scalar;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneStrategy {
    /// Encoders frozen, only the task head learns.
    DownstreamOnly,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Validation interval for model selection.
    pub eval_every: usize,
    pub ks: Vec<usize>,
    pub tau: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            eval_every: 50,
            ks: vec![1, 5, 10],
            tau: 0.07,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Record of which partitions fine-tuning read, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    pub events: Vec<(Partition, &'static str)>,
}

impl AccessLog {
    pub fn record(&mut self, p: Partition, purpose: &'static str) {
        self.events.push((p, purpose));
    }

    /// Test data was read only for final evaluation, after every other access.
    pub fn test_isolated(&self) -> bool {
        let first_test = self.events.iter().position(|(p, _)| *p == Partition::Test);
        match first_test {
            None => true,
            Some(i) => self.events[i..].iter().all(|&(p, why)| p == Partition::Test && why == "evaluate"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum HeadNet {
    Classifier(Mlp),
    Regressor(Linear),
    Pair(Mlp),
    Projection(Linear),
}

/// Task head plus target standardisation for regression.
#[derive(Clone, Debug)]
pub struct DownstreamHead {
    pub space: TaskSpace,
    pub net: HeadNet,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DownstreamHead {
    pub fn group(space: &TaskSpace) -> Group {
        Group::Head(format!("downstream.{}", space.kind.name()))
    }

    pub fn new<T: Scalar>(p: &mut EncoderPipeline<T>, space: &TaskSpace, train: &[Example], seed: u64) -> Result<Self> {
        let group = Self::group(space);
        let d = p.dim();
        let mut rng = rng_for(&[seed, 0x4EAD, space.kind as u64]);
        let net = match space.kind.family() {
            TaskFamily::Classification => {
                if space.classes.is_empty() {
                    return Err(Error::usage(format!("{} has no classes", space.kind)));
                }
                HeadNet::Classifier(Mlp::new(&mut p.store, "cls", &group, [d, d, space.classes.len()], &mut rng))
            }
            TaskFamily::Regression if space.kind == super::DownstreamKind::MI => {
                HeadNet::Pair(Mlp::new(&mut p.store, "pair", &group, [2 * d, d, 1], &mut rng))
            }
            TaskFamily::Regression => HeadNet::Regressor(Linear::new(&mut p.store, "reg", &group, d, space.outputs, &mut rng)),
            TaskFamily::Similarity => HeadNet::Projection(Linear::new(&mut p.store, "proj", &group, d, d, &mut rng)),
        };
        let (mut mean, mut std) = (vec![0.0; space.outputs], vec![1.0; space.outputs]);
        if space.kind.family() == TaskFamily::Regression {
            let rows: Vec<&Vec<f64>> = train
                .iter()
                .filter_map(|e| match &e.target {
                    Target::Values(v) => Some(v),
                    _ => None,
                })
                .collect();
            if rows.is_empty() {
                return Err(Error::usage(format!("{} has no training targets", space.kind)));
            }
            let n = rows.len() as f64;
            for k in 0..space.outputs {
                let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
                let v = rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n;
                mean[k] = m;
                std[k] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
            }
        }
        Ok(Self { space: space.clone(), net, mean, std })
    }
}

fn encoder_groups() -> [Group; 3] {
    [Group::Encoder(Stage::Token), Group::Encoder(Stage::Graph), Group::Encoder(Stage::Sequence)]
}

/// Representation rows (B x d, or B x 2d halves for pairs) of a batch.
fn represent<T: Scalar>(tape: &mut Tape<T>, p: &EncoderPipeline<T>, table: Var, batch: &[&Example]) -> Result<Vec<Var>> {
    let first = batch.first().ok_or_else(|| Error::usage("empty batch"))?;
    match &first.input {
        Input::Entity(_) => {
            let rows: Vec<usize> = batch
                .iter()
                .map(|e| match e.input {
                    Input::Entity(r) => r,
                    _ => unreachable!("homogeneous batch"),
                })
                .collect();
            Ok(vec![tape.gather(table, &rows)])
        }
        Input::Pair(..) => {
            let (a, b): (Vec<usize>, Vec<usize>) = batch
                .iter()
                .map(|e| match e.input {
                    Input::Pair(a, b) => (a, b),
                    _ => unreachable!("homogeneous batch"),
                })
                .unzip();
            Ok(vec![tape.gather(table, &a), tape.gather(table, &b)])
        }
        Input::Traj(_) | Input::Prefix(_) => {
            let mut rows = Vec::with_capacity(batch.len());
            for e in batch {
                rows.push(match &e.input {
                    Input::Traj(t) => pooled_view(tape, p, table, t, None)?,
                    Input::Prefix(t) => {
                        let s = p.trajectory(tape, table, t, true)?;
                        tape.slice_rows(s, t.len() - 1, 1)
                    }
                    _ => unreachable!("homogeneous batch"),
                });
            }
            Ok(vec![tape.concat_rows(&rows)])
        }
    }
}

fn head_forward<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, head: &DownstreamHead, reps: &[Var]) -> Var {
    match &head.net {
        HeadNet::Classifier(m) => m.forward(tape, store, reps[0]),
        HeadNet::Regressor(l) | HeadNet::Projection(l) => l.forward(tape, store, reps[0]),
        HeadNet::Pair(m) => m.pair(tape, store, reps[0], reps[1]),
    }
}

fn detour_batch<T: Scalar>(tape: &mut Tape<T>, p: &EncoderPipeline<T>, table: Var, batch: &[&Example]) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for e in batch {
        match &e.target {
            Target::Detour(d) => rows.push(pooled_view(tape, p, table, d, None)?),
            _ => return Err(Error::usage("STS examples need detour targets")),
        }
    }
    Ok(tape.concat_rows(&rows))
}

fn entity_table<T: Scalar>(tape: &mut Tape<T>, p: &EncoderPipeline<T>, frozen: Option<&Array2<T>>) -> Var {
    match frozen {
        Some(t) => tape.constant(t.clone()),
        None => p.entity_table(tape),
    }
}

/// Training loss of the head on one batch.
pub fn downstream_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    head: &DownstreamHead,
    batch: &[&Example],
    frozen_table: Option<&Array2<T>>,
    tau: f64,
) -> Result<Var> {
    let table = entity_table(tape, p, frozen_table);
    let reps = represent(tape, p, table, batch)?;
    let out = head_forward(tape, &p.store, head, &reps);
    match head.space.kind.family() {
        TaskFamily::Classification => {
            let targets: Vec<usize> = batch
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => Ok(c),
                    _ => Err(Error::usage("classification examples need class targets")),
                })
                .collect::<Result<_>>()?;
            Ok(tape.cross_entropy(out, &targets))
        }
        TaskFamily::Regression => {
            let m = head.space.outputs;
            let mut y = Array2::zeros((batch.len(), m));
            for (i, e) in batch.iter().enumerate() {
                let Target::Values(v) = &e.target else {
                    return Err(Error::usage("regression examples need value targets"));
                };
                for k in 0..m {
                    y[[i, k]] = T::of((v[k] - head.mean[k]) / head.std[k]);
                }
            }
            Ok(tape.mse(out, y))
        }
        TaskFamily::Similarity => {
            let d = detour_batch(tape, p, table, batch)?;
            let HeadNet::Projection(l) = &head.net else { unreachable!("similarity head") };
            let dproj = l.forward(tape, &p.store, d);
            in_batch_nce(tape, out, dproj, tau)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub prediction: String,
    /// Rank of the truth, for ranking tasks.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, f64>,
    pub n: usize,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    /// Model-selection score; larger is better.
    pub fn selection_score(&self, family: TaskFamily) -> f64 {
        match family {
            TaskFamily::Classification => self.metrics["Acc@1"],
            TaskFamily::Regression => -self.metrics["MAE"],
            TaskFamily::Similarity => -self.metrics["MR"],
        }
    }
}

/// Head outputs (and pooled detours for STS) for every example, in chunks.
fn outputs<T: Scalar>(p: &EncoderPipeline<T>, head: &DownstreamHead, examples: &[Example]) -> Result<(Array2<T>, Option<Array2<T>>)> {
    let mut tape = Tape::new();
    let table_value = {
        let t = p.entity_table(&mut tape);
        tape.value(t).clone()
    };
    let mut outs = Vec::new();
    let mut detours = Vec::new();
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let table = tape.constant(table_value.clone());
        let refs: Vec<&Example> = chunk.iter().collect();
        let reps = represent(&mut tape, p, table, &refs)?;
        let out = head_forward(&mut tape, &p.store, head, &reps);
        outs.push(tape.value(out).clone());
        if let HeadNet::Projection(l) = &head.net {
            let d = detour_batch(&mut tape, p, table, &refs)?;
            let d = l.forward(&mut tape, &p.store, d);
            detours.push(tape.value(d).clone());
        }
    }
    let cat = |parts: &[Array2<T>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    Ok((cat(&outs), (!detours.is_empty()).then(|| cat(&detours))))
}

/// Metrics and predictions of the head on `examples`.
pub fn evaluate<T: Scalar>(p: &EncoderPipeline<T>, head: &DownstreamHead, examples: &[Example], ks: &[usize]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::usage(format!("no examples to evaluate {}", head.space.kind)));
    }
    let (out, detours) = outputs(p, head, examples)?;
    let mut predictions = Vec::with_capacity(examples.len());
    let metrics = match head.space.kind.family() {
        TaskFamily::Classification => {
            let scores: Vec<Vec<T>> = out.rows().into_iter().map(|r| r.to_vec()).collect();
            let truths: Vec<usize> = examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    _ => unreachable!("class targets"),
                })
                .collect();
            let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= head.space.classes.len()).collect();
            for ((e, s), &t) in examples.iter().zip(&scores).zip(&truths) {
                predictions.push(Prediction {
                    item_id: e.id.clone(),
                    prediction: head.space.classes[ranking(s)[0]].clone(),
                    rank: Some(rank_of(s, t)),
                });
            }
            classification_metrics(&scores, &truths, &ks)?.named()
        }
        TaskFamily::Regression => {
            let (mut preds, mut truths) = (Vec::new(), Vec::new());
            for (e, row) in examples.iter().zip(out.rows()) {
                let Target::Values(v) = &e.target else { unreachable!("value targets") };
                let vals: Vec<f64> = (0..head.space.outputs).map(|k| row[k].as_f64() * head.std[k] + head.mean[k]).collect();
                preds.extend(vals.iter().copied());
                truths.extend(v.iter().copied());
                let text: Vec<String> = vals.iter().map(|x| x.to_string()).collect();
                predictions.push(Prediction { item_id: e.id.clone(), prediction: text.join(";"), rank: None });
            }
            regression_metrics(&preds, &truths)?.named()
        }
        TaskFamily::Similarity => {
            let detours = detours.expect("similarity outputs");
            let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
            let index = StsIndex::new(ids.clone(), &detours)?;
            let mut ranked = Vec::with_capacity(examples.len());
            for (e, q) in examples.iter().zip(out.rows()) {
                let list: Vec<String> = index.query(&q.to_vec()).into_iter().map(|(id, _)| id).collect();
                let rank = list.iter().position(|x| *x == e.id).expect("indexed") + 1;
                predictions.push(Prediction { item_id: e.id.clone(), prediction: list[0].clone(), rank: Some(rank) });
                ranked.push(list);
            }
            let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= index.len()).collect();
            sts_metrics(&ranked, &ids, &ks)?.named()
        }
    };
    Ok(Evaluation { metrics, n: examples.len(), predictions })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub head: DownstreamHead,
    /// Step whose parameters were kept (0 = before any update).
    pub best_step: usize,
    pub val_history: Vec<(usize, f64)>,
    pub test: Evaluation,
}

/// Trains a task head (and, end-to-end, the encoders) on `split.train`,
/// keeps the parameters with the best validation score and evaluates them on
/// `split.test`.
pub fn finetune<T: Scalar>(
    p: &mut EncoderPipeline<T>,
    space: &TaskSpace,
    split: &Split<Example>,
    strategy: FinetuneStrategy,
    cfg: &FinetuneConfig,
    seed: u64,
    log: &mut AccessLog,
) -> Result<FinetuneOutcome> {
    check_compatible(space.kind, p)?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::usage(format!("{} needs non-empty train, val and test partitions", space.kind)));
    }
    if space.kind.family() == TaskFamily::Similarity && split.train.len() < 2 {
        return Err(Error::usage("STS fine-tuning needs at least 2 training trajectories"));
    }
    let saved_frozen = p.store.frozen_groups().clone();
    for g in encoder_groups() {
        match strategy {
            FinetuneStrategy::DownstreamOnly => p.store.freeze(g),
            FinetuneStrategy::EndToEnd => p.store.unfreeze(&g),
        }
    }
    let result = run_finetune(p, space, split, strategy, cfg, seed, log);
    for g in encoder_groups() {
        if saved_frozen.contains(&g) {
            p.store.freeze(g);
        } else {
            p.store.unfreeze(&g);
        }
    }
    result
}

fn run_finetune<T: Scalar>(
    p: &mut EncoderPipeline<T>,
    space: &TaskSpace,
    split: &Split<Example>,
    strategy: FinetuneStrategy,
    cfg: &FinetuneConfig,
    seed: u64,
    log: &mut AccessLog,
) -> Result<FinetuneOutcome> {
    log.record(Partition::Train, "fit-head");
    let head = DownstreamHead::new(p, space, &split.train, seed)?;
    let frozen_table = match strategy {
        FinetuneStrategy::DownstreamOnly => Some(p.embed_entities()),
        FinetuneStrategy::EndToEnd => None,
    };
    let family = space.kind.family();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.lr);
    let mut val_history = Vec::new();

    log.record(Partition::Val, "select");
    let score = evaluate(p, &head, &split.val, &cfg.ks)?.selection_score(family);
    val_history.push((0, score));
    let mut best = (score, 0usize, p.store.clone());

    let every = cfg.eval_every.max(1);
    for step in 1..=cfg.steps {
        let mut rng = rng_for(&[seed, step as u64, 0xF17E]);
        let picks = rand::seq::index::sample(&mut rng, split.train.len(), cfg.batch.min(split.train.len()));
        let batch: Vec<&Example> = picks.iter().map(|i| &split.train[i]).collect();
        log.record(Partition::Train, "train");
        let mut tape = Tape::new();
        let loss = downstream_loss(&mut tape, p, &head, &batch, frozen_table.as_ref(), cfg.tau)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::usage(format!("{} fine-tuning diverged at step {step}", space.kind)));
        }
        let grads = tape.backward(loss);
        opt.step(&mut p.store, &grads);
        if step % every == 0 || step == cfg.steps {
            log.record(Partition::Val, "select");
            let score = evaluate(p, &head, &split.val, &cfg.ks)?.selection_score(family);
            val_history.push((step, score));
            if score > best.0 {
                best = (score, step, p.store.clone());
            }
        }
    }
    let (_, best_step, store) = best;
    p.store = store;
    log.record(Partition::Test, "evaluate");
    let test = evaluate(p, &head, &split.test, &cfg.ks)?;
    Ok(FinetuneOutcome { head, best_step, val_history, test })
}

/// Writes `item_id,prediction,rank`.
pub fn write_predictions_csv<W: Write>(preds: &[Prediction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["item_id", "prediction", "rank"])?;
    for p in preds {
        w.write_record([p.item_id.clone(), p.prediction.clone(), p.rank.map(|r| r.to_string()).unwrap_or_default()])?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}
