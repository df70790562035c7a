use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::model::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DuplicateId,
    InvalidGeometry,
    MissingFeature,
    InvalidTrajectory,
    DanglingReference,
    NegativeWeight,
    CrsMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

/// Feature names declared for each entity kind: the union over entities of that kind.
pub fn feature_schema(entities: &[MapEntity]) -> BTreeMap<EntityKind, BTreeSet<String>> {
    let mut schema: BTreeMap<EntityKind, BTreeSet<String>> = BTreeMap::new();
    for e in entities {
        schema.entry(e.kind).or_default().extend(e.features.keys().cloned());
    }
    schema
}

/// Collects every cross-file inconsistency instead of stopping at the first.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, detail: String| out.push(Violation { kind, detail });

    let mut ids = HashSet::new();
    for e in &d.entities {
        if !ids.insert(e.id.as_str()) {
            push(ViolationKind::DuplicateId, format!("entity id `{}` repeats", e.id));
        }
        if let Err(m) = e.check_geometry() {
            push(ViolationKind::InvalidGeometry, m);
        }
    }

    let schema = feature_schema(&d.entities);
    for e in &d.entities {
        for name in &schema[&e.kind] {
            if !e.features.contains_key(name) {
                push(ViolationKind::MissingFeature, format!("entity `{}` lacks feature `{name}`", e.id));
            }
        }
    }

    for t in &d.trajectories {
        if let Err(m) = t.check() {
            push(ViolationKind::InvalidTrajectory, m);
        }
        for id in t.entity_ids() {
            if !ids.contains(id) {
                push(ViolationKind::DanglingReference, format!("trajectory `{}` references unknown entity `{id}`", t.id));
            }
        }
    }

    for n in &d.networks {
        for v in &n.vertices {
            if !ids.contains(v.as_str()) {
                push(ViolationKind::DanglingReference, format!("{:?} network vertex `{v}` is not an entity", n.kind));
            }
        }
        for (&(a, b), &w) in &n.edges {
            if a >= n.vertices.len() || b >= n.vertices.len() {
                push(ViolationKind::DanglingReference, format!("{:?} network edge ({a}, {b}) is out of range", n.kind));
            } else if !(w >= 0.0) {
                push(ViolationKind::NegativeWeight, format!("edge {} -> {} has weight {w}", n.vertices[a], n.vertices[b]));
            }
        }
    }

    for (source, crs) in &d.meta.source_crs {
        if crs != &d.meta.crs {
            push(ViolationKind::CrsMismatch, format!("`{source}` declares {crs}, dataset uses {}", d.meta.crs));
        }
    }
    out
}
