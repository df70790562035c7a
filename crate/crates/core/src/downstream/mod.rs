//! Downstream tasks, their labelled examples and fine-tuning.

pub mod detour;
pub mod finetune;
pub mod sts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityKind, RelationKind};
use crate::encoders::{EncodedTraj, EncoderPipeline};
use crate::error::{Error, Result};
use crate::pretrain::trajp_split;
use crate::rng::rng_for;
use crate::scalar::Scalar;

pub use detour::{detour_candidates, generate_detour, shortest_path};
pub use finetune::*;
pub use sts::StsIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DownstreamKind {
    POIC,
    NPP,
    TUL,
    ASI,
    TTE,
    STS,
    LPC,
    FI,
    MI,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    Classification,
    Regression,
    Similarity,
}

impl DownstreamKind {
    pub const ALL: [DownstreamKind; 9] = [
        DownstreamKind::POIC,
        DownstreamKind::NPP,
        DownstreamKind::TUL,
        DownstreamKind::ASI,
        DownstreamKind::TTE,
        DownstreamKind::STS,
        DownstreamKind::LPC,
        DownstreamKind::FI,
        DownstreamKind::MI,
    ];

    pub fn name(self) -> &'static str {
        use DownstreamKind::*;
        match self {
            POIC => "POIC",
            NPP => "NPP",
            TUL => "TUL",
            ASI => "ASI",
            TTE => "TTE",
            STS => "STS",
            LPC => "LPC",
            FI => "FI",
            MI => "MI",
        }
    }

    pub fn entity_kind(self) -> EntityKind {
        use DownstreamKind::*;
        match self {
            POIC | NPP | TUL => EntityKind::Poi,
            ASI | TTE | STS => EntityKind::Segment,
            LPC | FI | MI => EntityKind::Parcel,
        }
    }

    pub fn family(self) -> TaskFamily {
        use DownstreamKind::*;
        match self {
            POIC | NPP | TUL | LPC => TaskFamily::Classification,
            ASI | TTE | FI | MI => TaskFamily::Regression,
            STS => TaskFamily::Similarity,
        }
    }

    /// Entity feature holding the label, for entity-labelled tasks.
    pub fn label_feature(self) -> Option<&'static str> {
        match self {
            DownstreamKind::POIC => Some("category"),
            DownstreamKind::ASI => Some("speed"),
            DownstreamKind::LPC => Some("function"),
            _ => None,
        }
    }

    pub fn uses_trajectories(self) -> bool {
        matches!(self, DownstreamKind::NPP | DownstreamKind::TUL | DownstreamKind::TTE | DownstreamKind::STS)
    }
}

impl fmt::Display for DownstreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DownstreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown downstream task `{s}`")))
    }
}

impl TryFrom<String> for DownstreamKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DownstreamKind> for String {
    fn from(t: DownstreamKind) -> String {
        t.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Entity(usize),
    Pair(usize, usize),
    /// Pooled over the whole trajectory.
    Traj(EncodedTraj),
    /// Causally encoded; the last output predicts the next entity.
    Prefix(EncodedTraj),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
    Detour(EncodedTraj),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: Input,
    pub target: Target,
}

/// Label universe of a task on one pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpace {
    pub kind: DownstreamKind,
    /// Class names for classification tasks.
    pub classes: Vec<String>,
    /// Output width for regression tasks.
    pub outputs: usize,
}

/// Refuses tasks whose label is one of the encoder's input features.
pub fn check_leakage<T: Scalar>(kind: DownstreamKind, p: &EncoderPipeline<T>) -> Result<()> {
    match kind.label_feature() {
        Some(f) if p.codec.contains(f) => Err(Error::Leakage(f.to_string())),
        _ => Ok(()),
    }
}

pub fn check_compatible<T: Scalar>(kind: DownstreamKind, p: &EncoderPipeline<T>) -> Result<()> {
    if p.kind != Some(kind.entity_kind()) {
        return Err(Error::usage(format!(
            "{kind} applies to {} entities, the pipeline encodes {}",
            kind.entity_kind().name(),
            p.kind.map(|k| k.name()).unwrap_or("mixed")
        )));
    }
    check_leakage(kind, p)
}

fn entity_label<'a>(d: &'a Dataset, idx: &BTreeMap<&str, usize>, id: &str, feature: &str) -> Result<&'a crate::data::FeatureValue> {
    let e = &d.entities[*idx.get(id).ok_or_else(|| Error::usage(format!("entity `{id}` is not in the dataset")))?];
    e.features.get(feature).ok_or_else(|| Error::usage(format!("entity `{id}` has no `{feature}` label")))
}

pub fn label_space<T: Scalar>(
    kind: DownstreamKind,
    p: &EncoderPipeline<T>,
    dataset: &Dataset,
    trajectories: &[EncodedTraj],
) -> Result<TaskSpace> {
    check_compatible(kind, p)?;
    let mut space = TaskSpace { kind, classes: Vec::new(), outputs: 0 };
    match kind {
        DownstreamKind::POIC | DownstreamKind::LPC => {
            let f = kind.label_feature().expect("entity label");
            let idx: BTreeMap<&str, usize> = dataset.entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
            let mut set = BTreeSet::new();
            for id in &p.entity_ids {
                set.insert(entity_label(dataset, &idx, id, f)?.to_string());
            }
            space.classes = set.into_iter().collect();
        }
        DownstreamKind::NPP => space.classes = p.entity_ids.clone(),
        DownstreamKind::TUL => {
            let users: BTreeSet<String> = trajectories.iter().filter_map(|t| t.user.clone()).collect();
            if users.is_empty() {
                return Err(Error::usage("TUL needs trajectories with users"));
            }
            space.classes = users.into_iter().collect();
        }
        DownstreamKind::ASI | DownstreamKind::TTE | DownstreamKind::MI => space.outputs = 1,
        DownstreamKind::FI => space.outputs = 2,
        DownstreamKind::STS => {}
    }
    Ok(space)
}

fn od_network<T: Scalar>(p: &EncoderPipeline<T>, dataset: &Dataset) -> Result<crate::data::RelationNetwork> {
    let od = dataset
        .network(RelationKind::Social)
        .ok_or_else(|| Error::usage("flow tasks need a social (OD) relation network"))?;
    Ok(od.induced(&p.entity_ids))
}

/// In/out flow per entity from the OD network: (sum of incoming, sum of outgoing).
pub fn flow_labels(od: &crate::data::RelationNetwork) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); od.n_vertices()];
    for (&(a, b), &w) in &od.edges {
        out[b].0 += w;
        out[a].1 += w;
    }
    out
}

/// Labelled examples of an entity or entity-pair task, in entity order.
pub fn entity_examples<T: Scalar>(space: &TaskSpace, p: &EncoderPipeline<T>, dataset: &Dataset) -> Result<Vec<Example>> {
    let idx: BTreeMap<&str, usize> = dataset.entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut out = Vec::new();
    match space.kind {
        DownstreamKind::POIC | DownstreamKind::LPC => {
            let f = space.kind.label_feature().expect("entity label");
            for (r, id) in p.entity_ids.iter().enumerate() {
                let name = entity_label(dataset, &idx, id, f)?.to_string();
                let c = space.classes.binary_search(&name).map_err(|_| Error::usage(format!("unknown class `{name}`")))?;
                out.push(Example { id: id.clone(), input: Input::Entity(r), target: Target::Class(c) });
            }
        }
        DownstreamKind::ASI => {
            for (r, id) in p.entity_ids.iter().enumerate() {
                let v = entity_label(dataset, &idx, id, "speed")?
                    .as_number()
                    .ok_or_else(|| Error::usage(format!("speed of `{id}` is not a number")))?;
                out.push(Example { id: id.clone(), input: Input::Entity(r), target: Target::Values(vec![v]) });
            }
        }
        DownstreamKind::FI => {
            let flows = flow_labels(&od_network(p, dataset)?);
            for (r, id) in p.entity_ids.iter().enumerate() {
                let (i, o) = flows[r];
                out.push(Example { id: id.clone(), input: Input::Entity(r), target: Target::Values(vec![i, o]) });
            }
        }
        DownstreamKind::MI => {
            let od = od_network(p, dataset)?;
            let n = p.n_entities();
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        let w = od.weight(a, b).unwrap_or(0.0);
                        let id = format!("{}>{}", p.entity_ids[a], p.entity_ids[b]);
                        out.push(Example { id, input: Input::Pair(a, b), target: Target::Values(vec![w]) });
                    }
                }
            }
        }
        k => return Err(Error::usage(format!("{k} is a trajectory task"))),
    }
    Ok(out)
}

/// Travel time in seconds between the first and last samples.
pub fn travel_time(t: &EncodedTraj) -> Result<f64> {
    match (t.times.first(), t.times.last()) {
        (Some(a), Some(b)) => Ok((*b - *a).num_milliseconds() as f64 / 1000.0),
        _ => Err(Error::usage(format!("trajectory `{}` is empty", t.id))),
    }
}

/// Labelled examples of a trajectory task. STS examples whose trajectory
/// admits no detour are skipped, as are NPP examples shorter than 2.
pub fn traj_examples<T: Scalar>(
    space: &TaskSpace,
    p: &EncoderPipeline<T>,
    trajectories: &[EncodedTraj],
    seed: u64,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, t) in trajectories.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::usage(format!("trajectory `{}` is empty", t.id)));
        }
        let ex = match space.kind {
            DownstreamKind::NPP => {
                if t.len() < 2 {
                    continue;
                }
                let k = trajp_split(t.len());
                let prefix = t.select(&(0..k).collect::<Vec<_>>());
                Example { id: t.id.clone(), input: Input::Prefix(prefix), target: Target::Class(t.entities[k]) }
            }
            DownstreamKind::TUL => {
                let user = t.user.clone().ok_or_else(|| Error::usage(format!("trajectory `{}` has no user", t.id)))?;
                let c = space.classes.binary_search(&user).map_err(|_| Error::usage(format!("unknown user `{user}`")))?;
                Example { id: t.id.clone(), input: Input::Traj(t.clone()), target: Target::Class(c) }
            }
            DownstreamKind::TTE => {
                Example { id: t.id.clone(), input: Input::Traj(t.clone()), target: Target::Values(vec![travel_time(t)?]) }
            }
            DownstreamKind::STS => {
                let net = p.network.as_ref().ok_or_else(|| Error::usage("STS needs a geographical network"))?;
                let mut rng = rng_for(&[seed, n as u64, 0xDE70]);
                let max = p.seq.as_ref().map(|s| s.max_len()).unwrap_or(usize::MAX);
                match generate_detour(t, net, &mut rng) {
                    Some(d) if d.len() <= max => {
                        Example { id: t.id.clone(), input: Input::Traj(t.clone()), target: Target::Detour(d) }
                    }
                    _ => continue,
                }
            }
            k => return Err(Error::usage(format!("{k} is not a trajectory task"))),
        };
        out.push(ex);
    }
    Ok(out)
}
