use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::losses::{task_loss, Batch, PretrainContext};
use super::{PretrainHead, PretrainOptions, TaskKind};
use crate::autodiff::{Group, OptimizerKind, Optimizer, Stage, Tape, Var};
use crate::encoders::{EncoderPipeline, Paradigm};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;

pub const DEFAULT_BATCH: usize = 64;
pub const MIN_BATCH: usize = 8;
pub const DEFAULT_LR: f64 = 1e-3;

const BATCH_STREAM: u64 = 0xBA7C;
const PROBE_STEP: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Unweighted loss of every task that produced one this step.
    pub losses: Vec<(TaskKind, f64)>,
    pub total: f64,
}

/// Optimisation settings and the resulting loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub paradigm: Paradigm,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Missing tasks weigh 1.
    pub weights: BTreeMap<TaskKind, f64>,
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

impl TrainingRun {
    pub fn new(paradigm: Paradigm, steps: usize, seed: u64) -> Self {
        Self {
            paradigm,
            steps,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            optimizer: OptimizerKind::Sgd,
            weights: BTreeMap::new(),
            seed,
            history: Vec::new(),
        }
    }

    pub fn weight(&self, task: TaskKind) -> f64 {
        self.weights.get(&task).copied().unwrap_or(1.0)
    }

    pub fn check(&self) -> Result<()> {
        if self.batch < MIN_BATCH {
            return Err(Error::usage(format!("batch size {} is below the minimum of {MIN_BATCH}", self.batch)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::usage("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Every task must train a stage the pipeline has.
pub fn check_tasks<T: Scalar>(p: &EncoderPipeline<T>, tasks: &[TaskKind]) -> Result<()> {
    for &t in tasks {
        if !p.has(t.stage()) {
            return Err(Error::usage(format!("{t} needs the {} stage, which the pipeline lacks", t.stage().name())));
        }
    }
    Ok(())
}

pub fn step_batch<T: Scalar>(p: &EncoderPipeline<T>, ctx: &PretrainContext, size: usize, seed: u64, step: u64) -> Batch {
    let mut rng = rng_for(&[seed, step, BATCH_STREAM]);
    Batch::sample(p.n_entities(), ctx.trajectories.len(), size, &mut rng)
}

/// Loss of one task at `step`, using the same batch and random stream the
/// training loop uses.
pub fn task_step_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    head: &PretrainHead,
    ctx: &PretrainContext,
    opts: &PretrainOptions,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Option<Var>> {
    let batch = step_batch(p, ctx, batch_size, seed, step);
    let policy_seed = match head.task {
        TaskKind::AToCL => opts.atocl.seed,
        TaskKind::AGCL => opts.agcl.seed,
        TaskKind::ATrCL => opts.atrcl.seed,
        _ => 0,
    };
    let mut rng = rng_for(&[seed, step, head.task.index(), policy_seed]);
    task_loss(tape, p, head, ctx, opts, &batch, &mut rng)
}

/// Weighted sum of the task losses at `step`, with the unweighted parts.
pub fn joint_step_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    heads: &[&PretrainHead],
    ctx: &PretrainContext,
    opts: &PretrainOptions,
    run: &TrainingRun,
    step: u64,
) -> Result<(Option<Var>, Vec<(TaskKind, f64)>)> {
    let mut total: Option<Var> = None;
    let mut parts = Vec::new();
    for head in heads {
        if let Some(l) = task_step_loss(tape, p, head, ctx, opts, run.batch, run.seed, step)? {
            parts.push((head.task, tape.scalar(l).as_f64()));
            let w = tape.scale(l, T::of(run.weight(head.task)));
            total = Some(match total {
                Some(t) => tape.add(t, w),
                None => w,
            });
        }
    }
    Ok((total, parts))
}

/// Loss on a fixed probe batch, independent of the training steps.
pub fn probe_loss<T: Scalar>(
    p: &EncoderPipeline<T>,
    head: &PretrainHead,
    ctx: &PretrainContext,
    opts: &PretrainOptions,
    batch_size: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    Ok(task_step_loss(&mut tape, p, head, ctx, opts, batch_size, seed, PROBE_STEP)?.map(|l| tape.scalar(l).as_f64()))
}

/// Creates one head per task and trains the pipeline with them.
///
/// Joint: every step minimises the weighted task sum. Sequential: tasks are
/// grouped by stage; each group runs `run.steps` steps in token, graph,
/// sequence order and its stage is frozen afterwards.
pub fn pretrain<T: Scalar>(
    p: &mut EncoderPipeline<T>,
    tasks: &[TaskKind],
    run: &mut TrainingRun,
    ctx: &PretrainContext,
    opts: &PretrainOptions,
) -> Result<Vec<PretrainHead>> {
    run.check()?;
    opts.check()?;
    check_tasks(p, tasks)?;
    let mut head_rng = rng_for(&[run.seed, 0x4EAD]);
    let heads: Vec<PretrainHead> = tasks.iter().map(|&t| PretrainHead::new(t, p, &mut head_rng)).collect();
    let groups: Vec<(Option<Stage>, Vec<&PretrainHead>)> = match run.paradigm {
        Paradigm::Joint => vec![(None, heads.iter().collect())],
        Paradigm::Sequential => [Stage::Token, Stage::Graph, Stage::Sequence]
            .into_iter()
            .map(|s| (Some(s), heads.iter().filter(|h| h.task.stage() == s).collect::<Vec<_>>()))
            .filter(|(_, hs)| !hs.is_empty())
            .collect(),
    };
    let mut step = run.history.len();
    for (stage, group) in groups {
        let mut opt = Optimizer::new(run.optimizer.clone(), run.lr);
        for _ in 0..run.steps {
            let mut tape = Tape::new();
            let (total, parts) = joint_step_loss(&mut tape, p, &group, ctx, opts, run, step as u64)?;
            let total_value = match total {
                Some(l) => {
                    let v = tape.scalar(l).as_f64();
                    if !v.is_finite() {
                        return Err(Error::usage(format!("loss diverged at step {step}")));
                    }
                    let grads = tape.backward(l);
                    opt.step(&mut p.store, &grads);
                    v
                }
                None => f64::NAN,
            };
            run.history.push(StepRecord { step, losses: parts, total: total_value });
            step += 1;
        }
        if let Some(s) = stage {
            p.store.freeze(Group::Encoder(s));
        }
    }
    Ok(heads)
}

/// Writes `step,task,loss`, one row per task per step.
pub fn write_history_csv<W: Write>(history: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "task", "loss"])?;
    for r in history {
        for (t, l) in &r.losses {
            w.write_record([r.step.to_string(), t.name().to_string(), l.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<loss history>", e))?;
    Ok(())
}
