use std::collections::HashMap;

use chrono::{DateTime, Utc};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{fit_feature_codec, FeatureCodec};
use super::graph::{normalized_adjacency, GraphEncoder};
use super::sequence::{time_slot, SequenceEncoder, SequenceShape};
use super::token::TokenEncoder;
use super::EncoderConfig;
use crate::autodiff::{Group, ParamStore, Stage, Tape, Var};
use crate::data::{EntityKind, MapEntity, RelationNetwork, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Sequential,
    Joint,
}

/// Checks that `stages` is a token-first prefix-free subsequence of
/// token → graph → sequence.
pub fn compose_pipeline(stages: &[Stage]) -> Result<Vec<Stage>> {
    if stages.first() != Some(&Stage::Token) {
        return Err(Error::usage("the token stage is required and must come first"));
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::usage(format!(
            "stages {:?} are not in token -> graph -> sequence order",
            stages.iter().map(|s| s.name()).collect::<Vec<_>>()
        )));
    }
    Ok(stages.to_vec())
}

/// A check-in trajectory resolved to pipeline entity rows and time slots.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTraj {
    pub id: String,
    pub user: Option<String>,
    pub entities: Vec<usize>,
    pub slots: Vec<usize>,
    pub times: Vec<DateTime<Utc>>,
}

impl EncodedTraj {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Copy restricted to the given sample positions.
    pub fn select(&self, keep: &[usize]) -> EncodedTraj {
        EncodedTraj {
            id: self.id.clone(),
            user: self.user.clone(),
            entities: keep.iter().map(|&i| self.entities[i]).collect(),
            slots: keep.iter().map(|&i| self.slots[i]).collect(),
            times: keep.iter().map(|&i| self.times[i]).collect(),
        }
    }
}

/// Composed token → graph → sequence encoders over one entity set, owning all
/// encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderPipeline<T> {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
    pub paradigm: Paradigm,
    pub codec: FeatureCodec,
    pub store: ParamStore<T>,
    pub token: TokenEncoder,
    pub graph: Option<GraphEncoder>,
    pub seq: Option<SequenceEncoder>,
    pub entity_ids: Vec<String>,
    /// Shared kind of all entities, if they have one.
    pub kind: Option<EntityKind>,
    pub feature_rows: Vec<Vec<usize>>,
    /// Relation network over `entity_ids` driving the graph stage.
    pub network: Option<RelationNetwork>,
    pub adjacency: Option<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EncoderPipeline<T> {
    /// Builds the stages over `entities`. The graph stage needs `network`; it
    /// is re-keyed onto the entity order.
    pub fn build(
        config: &EncoderConfig,
        stages: &[Stage],
        paradigm: Paradigm,
        entities: &[&MapEntity],
        network: Option<&RelationNetwork>,
        seed: u64,
    ) -> Result<Self> {
        let stages = compose_pipeline(stages)?;
        if entities.is_empty() {
            return Err(Error::usage("pipeline needs at least one entity"));
        }
        let codec = fit_feature_codec(entities, &config.codec)?;
        let feature_rows = entities.iter().map(|e| codec.indices(e)).collect::<Result<Vec<_>>>()?;
        let entity_ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
        let kind = Some(entities[0].kind).filter(|k| entities.iter().all(|e| e.kind == *k));
        let index = entity_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let token = TokenEncoder::new(&mut store, &codec.widths(), config.dim, &mut rng);
        let (graph, net, adjacency) = if stages.contains(&Stage::Graph) {
            let net = network.ok_or_else(|| Error::usage("the graph stage needs a relation network"))?;
            let net = net.induced(&entity_ids);
            let adj = normalized_adjacency(&net);
            let enc = GraphEncoder::new(&mut store, config.dim, config.graph_layers, config.activation, &mut rng);
            (Some(enc), Some(net), Some(adj))
        } else {
            (None, network.map(|n| n.induced(&entity_ids)), None)
        };
        let seq = if stages.contains(&Stage::Sequence) {
            let shape = SequenceShape {
                arch: config.seq_arch,
                dim: config.dim,
                layers: config.seq_layers,
                heads: config.heads,
                hidden: config.hidden,
                max_len: config.max_len,
                slots: config.time_slots,
            };
            Some(SequenceEncoder::new(&mut store, &shape, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            stages,
            paradigm,
            codec,
            store,
            token,
            graph,
            seq,
            entity_ids,
            kind,
            feature_rows,
            network: net,
            adjacency,
            index,
        })
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn entity_row(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Number of learnable encoder scalars.
    pub fn encoder_param_count(&self) -> usize {
        self.store.scalar_count(Group::is_encoder)
    }

    /// Token-stage representations of the given entity rows.
    pub fn token_reprs(&self, tape: &mut Tape<T>, rows: &[usize]) -> Var {
        let feats: Vec<Vec<usize>> = rows.iter().map(|&r| self.feature_rows[r].clone()).collect();
        self.token.encode(tape, &self.store, &feats)
    }

    /// Runs the graph stage (if present) on token representations of every entity.
    pub fn graph_refine(&self, tape: &mut Tape<T>, token_all: Var, adjacency: Option<&Array2<T>>) -> Var {
        match (&self.graph, adjacency.or(self.adjacency.as_ref())) {
            (Some(g), Some(adj)) => {
                let a = tape.constant(adj.clone());
                g.encode(tape, &self.store, token_all, a)
            }
            _ => token_all,
        }
    }

    /// Representations of every entity after the token and graph stages.
    pub fn entity_table(&self, tape: &mut Tape<T>) -> Var {
        let all: Vec<usize> = (0..self.n_entities()).collect();
        let r = self.token_reprs(tape, &all);
        self.graph_refine(tape, r, None)
    }

    /// Runs the sequence stage over a K x d input; identity when absent.
    pub fn sequence(&self, tape: &mut Tape<T>, inputs: Var, slots: &[usize], causal: bool) -> Result<Var> {
        match &self.seq {
            Some(s) => s.encode(tape, &self.store, inputs, slots, causal),
            None => Ok(inputs),
        }
    }

    /// Per-position outputs for a trajectory, reading entity vectors from `table`.
    pub fn trajectory(&self, tape: &mut Tape<T>, table: Var, traj: &EncodedTraj, causal: bool) -> Result<Var> {
        if traj.is_empty() {
            return Err(Error::usage(format!("trajectory `{}` is empty", traj.id)));
        }
        let x = tape.gather(table, &traj.entities);
        self.sequence(tape, x, &traj.slots, causal)
    }

    /// Mean-pooled trajectory representation (1 x d).
    pub fn pooled(&self, tape: &mut Tape<T>, table: Var, traj: &EncodedTraj) -> Result<Var> {
        let s = self.trajectory(tape, table, traj, false)?;
        Ok(tape.mean_rows(s))
    }

    /// Resolves a check-in trajectory. Unknown entities and over-length input
    /// are usage errors.
    pub fn encode_traj(&self, t: &Trajectory) -> Result<EncodedTraj> {
        let max = self.seq.as_ref().map(|s| s.max_len()).unwrap_or(usize::MAX);
        if t.len() > max {
            return Err(Error::usage(format!("trajectory `{}` has {} samples, maximum is {max}", t.id, t.len())));
        }
        let mut entities = Vec::with_capacity(t.len());
        for s in &t.samples {
            let id = s
                .entity_id()
                .ok_or_else(|| Error::usage(format!("trajectory `{}` is not a check-in trajectory", t.id)))?;
            entities.push(
                self.entity_row(id)
                    .ok_or_else(|| Error::usage(format!("trajectory `{}` visits unknown entity `{id}`", t.id)))?,
            );
        }
        let slots = t.samples.iter().map(|s| time_slot(&s.time, self.config.time_slots)).collect();
        Ok(EncodedTraj {
            id: t.id.clone(),
            user: t.user.clone(),
            entities,
            slots,
            times: t.samples.iter().map(|s| s.time).collect(),
        })
    }

    /// Evaluation-mode entity representations.
    pub fn embed_entities(&self) -> Array2<T> {
        let mut tape = Tape::new();
        let v = self.entity_table(&mut tape);
        tape.value(v).clone()
    }
}
