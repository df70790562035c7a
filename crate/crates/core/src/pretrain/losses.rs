//! Differentiable pretraining losses.
//!
//! The low-level functions (`info_nce`, `in_batch_nce`, `tokri_loss`, ...)
//! operate on tape nodes and are exact closed forms; [`task_loss`] samples the
//! pairs, negatives, masks and augmented views for one batch and dispatches to
//! them.

use ndarray::Array2;
use rand::Rng;

use super::augment::{self, AugmentKind};
use super::{MaskMode, PretrainHead, PretrainOptions, TaskKind};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoders::{normalized_adjacency, EncodedTraj, EncoderPipeline, FeatureCodec, FeatureScheme};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;

use super::NfiBlock;

/// Mean BCE of `phi([r_i | r_j])` against 0/1 relation labels.
pub fn tokri_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    phi: &Mlp,
    ri: Var,
    rj: Var,
    labels: &[f64],
) -> Var {
    let logits = phi.pair(tape, store, ri, rj);
    let y = Array2::from_shape_fn((labels.len(), 1), |(i, _)| T::of(labels[i]));
    tape.bce_with_logits(logits, y)
}

fn check_nonzero<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<()> {
    if tape.value(v).rows().into_iter().any(|r| r.iter().all(|x| x.is_zero())) {
        return Err(Error::usage("cosine similarity of a zero vector is undefined"));
    }
    Ok(())
}

/// InfoNCE with cosine similarity. `anchors` is B x d; `candidates` holds
/// `1 + k` rows per anchor, the positive first.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, anchors: Var, candidates: Var, k: usize, tau: f64) -> Result<Var> {
    let b = tape.shape(anchors).0;
    if tape.shape(candidates).0 != b * (1 + k) {
        return Err(Error::usage("expected one positive and k negatives per anchor"));
    }
    check_nonzero(tape, anchors)?;
    check_nonzero(tape, candidates)?;
    let a = tape.normalize_rows(anchors);
    let c = tape.normalize_rows(candidates);
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, 1 + k)).collect();
    let a = tape.gather(a, &rep);
    let sims = tape.row_dots(a, c);
    let logits = tape.reshape(sims, b, 1 + k);
    let logits = tape.scale(logits, T::of(1.0 / tau));
    Ok(tape.cross_entropy(logits, &vec![0; b]))
}

/// InfoNCE between two views of a batch: row i of `v1` is positive with row
/// i of `v2`, the other rows of `v2` are its negatives.
pub fn in_batch_nce<T: Scalar>(tape: &mut Tape<T>, v1: Var, v2: Var, tau: f64) -> Result<Var> {
    let b = tape.shape(v1).0;
    if b < 2 {
        return Err(Error::usage("in-batch contrast needs a batch of at least 2"));
    }
    check_nonzero(tape, v1)?;
    check_nonzero(tape, v2)?;
    let a = tape.normalize_rows(v1);
    let c = tape.normalize_rows(v2);
    let sims = tape.matmul_t(a, c);
    let logits = tape.scale(sims, T::of(1.0 / tau));
    Ok(tape.cross_entropy(logits, &(0..b).collect::<Vec<_>>()))
}

/// Sum over features of cross-entropy (categorical) or squared error on the
/// normalised bin centre (continuous), each averaged over the batch.
pub fn nfi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    blocks: &[NfiBlock],
    codec: &FeatureCodec,
    h: Var,
    rows: &[Vec<usize>],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for block in blocks {
        let (name, scheme) = codec
            .features
            .get(block.feature)
            .ok_or_else(|| Error::usage(format!("feature #{} is not in the codec", block.feature)))?;
        let mut idx = Vec::with_capacity(rows.len());
        for r in rows {
            idx.push(*r.get(block.feature).ok_or_else(|| Error::usage(format!("target lacks feature `{name}`")))?);
        }
        let pred = block.linear.forward(tape, store, h);
        let term = match scheme {
            FeatureScheme::Categorical { .. } => tape.cross_entropy(pred, &idx),
            FeatureScheme::Continuous { .. } => {
                let target = Array2::from_shape_fn((idx.len(), 1), |(i, _)| {
                    T::of(scheme.normalized_center(idx[i]).expect("continuous scheme"))
                });
                tape.mse(pred, target)
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::usage("no features to infer"))
}

/// Mean BCE of `sigmoid(h_i . h_j)` on the given entries.
pub fn gau_loss<T: Scalar>(tape: &mut Tape<T>, h: Var, pairs: &[(usize, usize)], labels: &[f64]) -> Var {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let hi = tape.gather(h, &is);
    let hj = tape.gather(h, &js);
    let logits = tape.row_dots(hi, hj);
    let y = Array2::from_shape_fn((labels.len(), 1), |(i, _)| T::of(labels[i]));
    tape.bce_with_logits(logits, y)
}

/// Cross-entropy of `rows . table^T` against entity indices.
pub fn decode_ce<T: Scalar>(tape: &mut Tape<T>, rows: Var, table: Var, targets: &[usize]) -> Var {
    let logits = tape.matmul_t(rows, table);
    tape.cross_entropy(logits, targets)
}

/// Split index of a length-K trajectory: the first `ceil(K/2)` points are the prefix.
pub fn trajp_split(k: usize) -> usize {
    k.div_ceil(2)
}

/// Teacher-forced next-entity prediction of the suffix from causal outputs.
pub fn trajp_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    table: Var,
    traj: &EncodedTraj,
) -> Result<Var> {
    let k_all = traj.len();
    if k_all < 2 {
        return Err(Error::usage(format!("trajectory `{}` is too short to predict (K = {k_all})", traj.id)));
    }
    let k = trajp_split(k_all);
    let s = p.trajectory(tape, table, traj, true)?;
    let rows = tape.slice_rows(s, k - 1, k_all - k);
    Ok(decode_ce(tape, rows, table, &traj.entities[k..]))
}

/// Positions to mask: `ceil(ratio * K)` of them, scattered or as one run.
pub fn mask_positions<R: Rng + ?Sized>(k: usize, ratio: f64, mode: MaskMode, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0) {
        return Err(Error::usage("mask ratio must be positive"));
    }
    if k == 0 {
        return Err(Error::usage("cannot mask an empty trajectory"));
    }
    let m = ((ratio * k as f64).ceil() as usize).clamp(1, k);
    let mut pos = match mode {
        MaskMode::Random => rand::seq::index::sample(rng, k, m).into_vec(),
        MaskMode::Contiguous => {
            let start = rng.random_range(0..=k - m);
            (start..start + m).collect()
        }
    };
    pos.sort_unstable();
    Ok(pos)
}

/// Reconstruction cross-entropy at `masked` positions, whose inputs are
/// replaced by the learned mask row.
pub fn mtr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    table: Var,
    mask_row: Var,
    traj: &EncodedTraj,
    masked: &[usize],
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::usage("at least one position must be masked"));
    }
    let n = tape.shape(table).0;
    let ext = tape.concat_rows(&[table, mask_row]);
    let mut idx = traj.entities.clone();
    for &m in masked {
        idx[m] = n;
    }
    let x = tape.gather(ext, &idx);
    let s = p.sequence(tape, x, &traj.slots, false)?;
    let rows = tape.gather(s, masked);
    let targets: Vec<usize> = masked.iter().map(|&m| traj.entities[m]).collect();
    Ok(decode_ce(tape, rows, table, &targets))
}

/// Mean-pooled sequence representation, optionally with noise added to the inputs.
pub fn pooled_view<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    table: Var,
    traj: &EncodedTraj,
    noise: Option<Array2<T>>,
) -> Result<Var> {
    if traj.is_empty() {
        return Err(Error::usage(format!("trajectory `{}` is empty", traj.id)));
    }
    let mut x = tape.gather(table, &traj.entities);
    if let Some(n) = noise {
        let n = tape.constant(n);
        x = tape.add(x, n);
    }
    let s = p.sequence(tape, x, &traj.slots, false)?;
    Ok(tape.mean_rows(s))
}

/// Neighbour structure of the pipeline's relation network.
#[derive(Clone, Debug, Default)]
pub struct Neighbourhood {
    pub out: Vec<Vec<usize>>,
    /// Sorted, direction-free, without self.
    pub sym: Vec<Vec<usize>>,
}

impl Neighbourhood {
    pub fn of<T: Scalar>(p: &EncoderPipeline<T>) -> Option<Self> {
        let net = p.network.as_ref()?;
        let mut out = net.out_neighbors();
        for (i, l) in out.iter_mut().enumerate() {
            l.retain(|&j| j != i);
        }
        let mut sym = net.undirected_neighbors();
        for l in &mut sym {
            l.sort_unstable();
            l.dedup();
        }
        Some(Self { out, sym })
    }

    pub fn n_edges(&self) -> usize {
        self.sym.iter().map(Vec::len).sum()
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.sym[i].binary_search(&j).is_ok()
    }

    /// Uniform vertex that is neither `i` nor adjacent to it.
    pub fn non_neighbor<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Option<usize> {
        let n = self.sym.len();
        if n < 2 + self.sym[i].len() {
            return None;
        }
        // rejection sampling is fast on sparse graphs; fall back to enumeration
        for _ in 0..32 {
            let j = rng.random_range(0..n);
            if j != i && !self.is_neighbor(i, j) {
                return Some(j);
            }
        }
        let pool: Vec<usize> = (0..n).filter(|&j| j != i && !self.is_neighbor(i, j)).collect();
        Some(pool[rng.random_range(0..pool.len())])
    }
}

/// Inputs shared by every task of one pretraining run.
#[derive(Clone, Debug, Default)]
pub struct PretrainContext {
    pub trajectories: Vec<EncodedTraj>,
    pub graph: Option<Neighbourhood>,
}

impl PretrainContext {
    pub fn new<T: Scalar>(p: &EncoderPipeline<T>, trajectories: Vec<EncodedTraj>) -> Self {
        Self { trajectories, graph: Neighbourhood::of(p) }
    }

    fn graph(&self, task: TaskKind) -> Result<&Neighbourhood> {
        self.graph.as_ref().ok_or_else(|| Error::usage(format!("{task} needs a relation network")))
    }
}

/// Entity rows and trajectory indices drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub trajs: Vec<usize>,
}

impl Batch {
    pub fn sample<R: Rng + ?Sized>(n_entities: usize, n_trajs: usize, size: usize, rng: &mut R) -> Self {
        let mut rows = rand::seq::index::sample(rng, n_entities, size.min(n_entities)).into_vec();
        let mut trajs = rand::seq::index::sample(rng, n_trajs, size.min(n_trajs)).into_vec();
        rows.sort_unstable();
        trajs.sort_unstable();
        Self { rows, trajs }
    }
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: Vec<Var>) -> Option<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |acc, t| tape.add(acc, t));
    Some(tape.scale(sum, T::of(1.0 / n as f64)))
}

/// Loss of one task on one batch. `Ok(None)` means the batch offers no valid
/// sample for the task (e.g. only isolated anchors) and the step is skipped.
pub fn task_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &EncoderPipeline<T>,
    head: &PretrainHead,
    ctx: &PretrainContext,
    opts: &PretrainOptions,
    batch: &Batch,
    rng: &mut R,
) -> Result<Option<Var>> {
    let task = head.task;
    if !p.has(task.stage()) {
        return Err(Error::usage(format!("{task} needs the {} stage", task.stage().name())));
    }
    let rows = &batch.rows;
    match task {
        TaskKind::TokRI => {
            let g = ctx.graph(task)?;
            if g.n_edges() == 0 {
                return Err(Error::usage("TokRI needs a relation network with edges"));
            }
            let (mut is, mut js, mut ys) = (Vec::new(), Vec::new(), Vec::new());
            for &i in rows {
                if g.sym[i].is_empty() {
                    continue;
                }
                let j = g.sym[i][rng.random_range(0..g.sym[i].len())];
                let Some(k) = g.non_neighbor(i, rng) else { continue };
                is.extend([i, i]);
                js.extend([j, k]);
                ys.extend([1.0, 0.0]);
            }
            if is.is_empty() {
                return Ok(None);
            }
            let ri = p.token_reprs(tape, &is);
            let rj = p.token_reprs(tape, &js);
            let phi = head.phi.as_ref().expect("TokRI head");
            Ok(Some(tokri_loss(tape, &p.store, phi, ri, rj, &ys)))
        }
        TaskKind::TRCL | TaskKind::NCL => {
            let g = ctx.graph(task)?;
            let (mut anchors, mut cands) = (Vec::new(), Vec::new());
            for &i in rows {
                let pos_pool = if task == TaskKind::NCL { &g.out[i] } else { &g.sym[i] };
                if pos_pool.is_empty() {
                    continue;
                }
                let pos = pos_pool[rng.random_range(0..pos_pool.len())];
                let negs: Option<Vec<usize>> = (0..opts.k_neg).map(|_| g.non_neighbor(i, rng)).collect();
                let Some(negs) = negs else { continue };
                anchors.push(i);
                cands.push(pos);
                cands.extend(negs);
            }
            if anchors.is_empty() {
                return Ok(None);
            }
            let (a, c) = if task == TaskKind::TRCL {
                (p.token_reprs(tape, &anchors), p.token_reprs(tape, &cands))
            } else {
                let h = p.entity_table(tape);
                (tape.gather(h, &anchors), tape.gather(h, &cands))
            };
            info_nce(tape, a, c, opts.k_neg, opts.tau).map(Some)
        }
        TaskKind::AToCL => {
            if rows.len() < 2 {
                return Err(Error::usage("AToCL needs a batch of at least 2 entities"));
            }
            let feats: Vec<Vec<usize>> = rows.iter().map(|&r| p.feature_rows[r].clone()).collect();
            let policy = &opts.atocl;
            let view = |tape: &mut Tape<T>, rng: &mut R| match policy.kind {
                AugmentKind::FeatureDropout => {
                    let keep = augment::feature_keep_mask(feats.len(), p.codec.n_features(), policy.rate, rng);
                    p.token.encode_masked(tape, &p.store, &feats, &keep)
                }
                AugmentKind::FeatureReplace => {
                    let f = augment::feature_replace(&feats, &p.codec.widths(), policy.rate, rng);
                    p.token.encode(tape, &p.store, &f)
                }
                _ => {
                    let r = p.token.encode(tape, &p.store, &feats);
                    let n = tape.constant(augment::gaussian_noise((feats.len(), p.dim()), policy.rate, rng));
                    tape.add(r, n)
                }
            };
            let v1 = view(tape, rng);
            let v2 = view(tape, rng);
            in_batch_nce(tape, v1, v2, opts.tau).map(Some)
        }
        TaskKind::NFI => {
            let h = p.entity_table(tape);
            let h = tape.gather(h, rows);
            let feats: Vec<Vec<usize>> = rows.iter().map(|&r| p.feature_rows[r].clone()).collect();
            nfi_loss(tape, &p.store, &head.nfi, &p.codec, h, &feats).map(Some)
        }
        TaskKind::GAu => {
            let g = ctx.graph(task)?;
            if g.n_edges() == 0 {
                return Err(Error::usage("GAu needs a relation network with edges"));
            }
            let (mut pairs, mut ys) = (Vec::new(), Vec::new());
            for &i in rows {
                for &j in &g.sym[i] {
                    pairs.push((i, j));
                    ys.push(1.0);
                    if let Some(k) = g.non_neighbor(i, rng) {
                        pairs.push((i, k));
                        ys.push(0.0);
                    }
                }
            }
            if pairs.is_empty() {
                return Ok(None);
            }
            let h = p.entity_table(tape);
            Ok(Some(gau_loss(tape, h, &pairs, &ys)))
        }
        TaskKind::AGCL => {
            if rows.len() < 2 {
                return Err(Error::usage("AGCL needs a batch of at least 2 entities"));
            }
            let net = p.network.as_ref().ok_or_else(|| Error::usage("AGCL needs a relation network"))?;
            let all: Vec<usize> = (0..p.n_entities()).collect();
            let r = p.token_reprs(tape, &all);
            let mut views = Vec::with_capacity(2);
            for _ in 0..2 {
                let g = augment::edge_drop(net, opts.agcl.rate, rng);
                let adj = normalized_adjacency::<T>(&g);
                let h = p.graph_refine(tape, r, Some(&adj));
                views.push(tape.gather(h, rows));
            }
            in_batch_nce(tape, views[0], views[1], opts.tau).map(Some)
        }
        TaskKind::TrajP | TaskKind::MTR | TaskKind::ATrCL => {
            let trajs: Vec<&EncodedTraj> = batch.trajs.iter().map(|&t| &ctx.trajectories[t]).collect();
            if trajs.is_empty() {
                return Err(Error::usage(format!("{task} needs trajectories")));
            }
            let table = p.entity_table(tape);
            match task {
                TaskKind::TrajP => {
                    let mut terms = Vec::new();
                    for t in trajs.iter().filter(|t| t.len() >= 2) {
                        terms.push(trajp_loss(tape, p, table, t)?);
                    }
                    Ok(mean_of(tape, terms))
                }
                TaskKind::MTR => {
                    let mask = tape.param(&p.store, head.mask.expect("MTR head"));
                    let mut terms = Vec::new();
                    for t in &trajs {
                        let m = mask_positions(t.len(), opts.mask_ratio, opts.mask_mode, rng)?;
                        terms.push(mtr_loss(tape, p, table, mask, t, &m)?);
                    }
                    Ok(mean_of(tape, terms))
                }
                _ => {
                    if trajs.len() < 2 {
                        return Err(Error::usage("ATrCL needs a batch of at least 2 trajectories"));
                    }
                    let policy = &opts.atrcl;
                    let n = p.n_entities();
                    let mut views = [Vec::new(), Vec::new()];
                    for t in &trajs {
                        for v in &mut views {
                            let (aug, noise) = match policy.kind {
                                AugmentKind::PointDelete => (augment::point_delete(t, policy.rate, rng), None),
                                AugmentKind::PointReplace => (augment::point_replace(t, policy.rate, n, rng), None),
                                AugmentKind::SubseqReplace => (augment::subseq_replace(t, policy.rate, n, rng), None),
                                _ => ((*t).clone(), Some(augment::gaussian_noise((t.len(), p.dim()), policy.rate, rng))),
                            };
                            v.push(pooled_view(tape, p, table, &aug, noise)?);
                        }
                    }
                    let v1 = tape.concat_rows(&views[0]);
                    let v2 = tape.concat_rows(&views[1]);
                    in_batch_nce(tape, v1, v2, opts.tau).map(Some)
                }
            }
        }
    }
}
