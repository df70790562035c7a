use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lon/lat pair in WGS84 degrees.
pub type Coord = [f64; 2];

/// The three map entity types. Files spell them with their GeoJSON geometry
/// names; configs use the domain names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    /// Point of interest.
    Poi,
    /// Road segment.
    Segment,
    /// Land parcel.
    Parcel,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Poi, EntityKind::Segment, EntityKind::Parcel];

    pub fn geo_type(self) -> &'static str {
        match self {
            EntityKind::Poi => "Point",
            EntityKind::Segment => "LineString",
            EntityKind::Parcel => "Polygon",
        }
    }

    pub fn from_geo_type(s: &str) -> Option<Self> {
        match s {
            "Point" => Some(EntityKind::Poi),
            "LineString" => Some(EntityKind::Segment),
            "Polygon" => Some(EntityKind::Parcel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Poi => "poi",
            EntityKind::Segment => "segment",
            EntityKind::Parcel => "parcel",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poi" => Ok(EntityKind::Poi),
            "segment" => Ok(EntityKind::Segment),
            "parcel" => Ok(EntityKind::Parcel),
            other => Err(Error::usage(format!("unknown entity kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Category(String),
}

impl FeatureValue {
    /// Parses a file cell: anything that reads as a finite number is continuous.
    pub fn parse(cell: &str) -> Self {
        match cell.parse::<f64>() {
            Ok(x) if x.is_finite() => FeatureValue::Number(x),
            _ => FeatureValue::Category(cell.to_string()),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(x) => Some(*x),
            FeatureValue::Category(_) => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            FeatureValue::Category(s) => Some(s),
            FeatureValue::Number(_) => None,
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Number(x) => write!(f, "{x}"),
            FeatureValue::Category(s) => f.write_str(s),
        }
    }
}

/// One map object with its geometry and typed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntity {
    pub id: String,
    pub kind: EntityKind,
    pub geometry: Vec<Coord>,
    pub features: BTreeMap<String, FeatureValue>,
}

impl MapEntity {
    pub fn new(id: impl Into<String>, kind: EntityKind, geometry: Vec<Coord>) -> Self {
        Self { id: id.into(), kind, geometry, features: BTreeMap::new() }
    }

    pub fn with_feature(mut self, name: impl Into<String>, value: FeatureValue) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    /// Checks geometry arity, ring closure and coordinate ranges.
    pub fn check_geometry(&self) -> Result<(), String> {
        let n = self.geometry.len();
        match self.kind {
            EntityKind::Poi if n != 1 => return Err(format!("point `{}` needs exactly one coordinate pair, got {n}", self.id)),
            EntityKind::Segment if n < 2 => return Err(format!("polyline `{}` needs at least 2 pairs, got {n}", self.id)),
            EntityKind::Parcel if n < 4 => return Err(format!("polygon `{}` needs a ring of at least 4 pairs, got {n}", self.id)),
            EntityKind::Parcel if self.geometry[0] != self.geometry[n - 1] => {
                return Err(format!("polygon `{}` ring is not closed", self.id))
            }
            _ => {}
        }
        for &[lon, lat] in &self.geometry {
            if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                return Err(format!("entity `{}` has out-of-range coordinate [{lon}, {lat}]", self.id));
            }
        }
        Ok(())
    }

    /// Representative location used for distances: the point itself, the
    /// polyline midpoint vertex average, or the ring centroid (vertex mean
    /// without the closing pair).
    pub fn anchor(&self) -> Coord {
        let pts: &[Coord] = match self.kind {
            EntityKind::Parcel => &self.geometry[..self.geometry.len() - 1],
            _ => &self.geometry,
        };
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Location {
    Entity(String),
    Coord(Coord),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajVariant {
    Checkin,
    Coordinate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub location: Location,
    pub time: DateTime<Utc>,
}

impl Sample {
    pub fn entity(id: impl Into<String>, time: DateTime<Utc>) -> Self {
        Self { location: Location::Entity(id.into()), time }
    }

    pub fn coord(c: Coord, time: DateTime<Utc>) -> Self {
        Self { location: Location::Coord(c), time }
    }

    pub fn entity_id(&self) -> Option<&str> {
        match &self.location {
            Location::Entity(id) => Some(id),
            Location::Coord(_) => None,
        }
    }
}

/// Ordered (location, timestamp) samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub user: Option<String>,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, user: Option<String>, samples: Vec<Sample>) -> Self {
        Self { id: id.into(), user, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Variant of the first sample; `None` for an empty trajectory.
    pub fn variant(&self) -> Option<TrajVariant> {
        self.samples.first().map(|s| match s.location {
            Location::Entity(_) => TrajVariant::Checkin,
            Location::Coord(_) => TrajVariant::Coordinate,
        })
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().filter_map(Sample::entity_id)
    }

    /// Checks length, time order and variant homogeneity.
    pub fn check(&self) -> Result<(), String> {
        let Some(variant) = self.variant() else {
            return Err(format!("trajectory `{}` is empty", self.id));
        };
        for w in self.samples.windows(2) {
            if w[1].time < w[0].time {
                return Err(format!("trajectory `{}` has decreasing timestamps", self.id));
            }
        }
        let mixed = self.samples.iter().any(|s| {
            matches!(
                (&s.location, variant),
                (Location::Entity(_), TrajVariant::Coordinate) | (Location::Coord(_), TrajVariant::Checkin)
            )
        });
        if mixed {
            return Err(format!("trajectory `{}` mixes entity-id and coordinate samples", self.id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Geographical,
    Social,
}

impl RelationKind {
    /// Spelling used in the `rel_type` column.
    pub fn rel_type(self) -> &'static str {
        match self {
            RelationKind::Geographical => "geo",
            RelationKind::Social => "social",
        }
    }

    pub fn from_rel_type(s: &str) -> Option<Self> {
        match s {
            "geo" => Some(RelationKind::Geographical),
            "social" => Some(RelationKind::Social),
            _ => None,
        }
    }
}

/// Directed weighted graph over entity ids. Edges are keyed by vertex
/// positions in `vertices`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationNetwork {
    pub vertices: Vec<String>,
    pub edges: BTreeMap<(usize, usize), f64>,
    pub kind: RelationKind,
}

impl RelationNetwork {
    pub fn new(vertices: Vec<String>, kind: RelationKind) -> Self {
        Self { vertices, edges: BTreeMap::new(), kind }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.vertices.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect()
    }

    /// Inserts or overwrites an edge.
    pub fn set_edge(&mut self, from: usize, to: usize, weight: f64) -> Result<()> {
        if from >= self.vertices.len() || to >= self.vertices.len() {
            return Err(Error::integrity(format!("edge ({from}, {to}) references a missing vertex")));
        }
        if !(weight >= 0.0) {
            return Err(Error::integrity(format!("edge ({from}, {to}) has negative weight {weight}")));
        }
        self.edges.insert((from, to), weight);
        Ok(())
    }

    pub fn weight(&self, from: usize, to: usize) -> Option<f64> {
        self.edges.get(&(from, to)).copied()
    }

    /// Out-neighbour lists, one per vertex, in ascending order.
    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in self.edges.keys() {
            adj[a].push(b);
        }
        adj
    }

    /// Neighbour lists ignoring direction.
    pub fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in self.edges.keys() {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Sub-network induced by `ids`, with vertices in the given order.
    /// Ids that are not vertices are skipped.
    pub fn induced(&self, ids: &[String]) -> RelationNetwork {
        let old = self.index();
        let map: HashMap<usize, usize> = ids
            .iter()
            .enumerate()
            .filter_map(|(new, id)| old.get(id.as_str()).map(|&o| (o, new)))
            .collect();
        let mut out = RelationNetwork::new(ids.to_vec(), self.kind);
        for (&(a, b), &w) in &self.edges {
            if let (Some(&na), Some(&nb)) = (map.get(&a), map.get(&b)) {
                out.edges.insert((na, nb), w);
            }
        }
        out
    }

    /// Re-keys this network onto a larger vertex list that contains all of its vertices.
    pub fn lift(&self, vertices: &[String]) -> Result<RelationNetwork> {
        let idx: HashMap<&str, usize> = vertices.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let mut out = RelationNetwork::new(vertices.to_vec(), self.kind);
        for (&(a, b), &w) in &self.edges {
            let na = idx.get(self.vertices[a].as_str());
            let nb = idx.get(self.vertices[b].as_str());
            match (na, nb) {
                (Some(&na), Some(&nb)) => {
                    out.edges.insert((na, nb), w);
                }
                _ => return Err(Error::integrity("network vertex missing from the target vertex list")),
            }
        }
        Ok(out)
    }
}

/// Dataset-level metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub city: String,
    pub crs: String,
    pub entity_kind: EntityKind,
    /// CRS tags declared by individual source files, keyed by source name.
    #[serde(default)]
    pub source_crs: BTreeMap<String, String>,
}

pub const DEFAULT_CRS: &str = "EPSG:4326";

/// The three atomic collections of one city.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: Metadata,
    pub entities: Vec<MapEntity>,
    pub trajectories: Vec<Trajectory>,
    pub networks: Vec<RelationNetwork>,
}

impl Dataset {
    pub fn entity_index(&self) -> HashMap<&str, usize> {
        self.entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect()
    }

    pub fn entities_of(&self, kind: EntityKind) -> Vec<&MapEntity> {
        self.entities.iter().filter(|e| e.kind == kind).collect()
    }

    pub fn ids_of(&self, kind: EntityKind) -> Vec<String> {
        self.entities.iter().filter(|e| e.kind == kind).map(|e| e.id.clone()).collect()
    }

    pub fn network(&self, kind: RelationKind) -> Option<&RelationNetwork> {
        self.networks.iter().find(|n| n.kind == kind)
    }

    /// Check-in trajectories whose every sample references an entity of `kind`.
    pub fn trajectories_over(&self, kind: EntityKind) -> Vec<&Trajectory> {
        let idx = self.entity_index();
        self.trajectories
            .iter()
            .filter(|t| {
                !t.is_empty()
                    && t.samples.iter().all(|s| {
                        s.entity_id().and_then(|id| idx.get(id)).is_some_and(|&i| self.entities[i].kind == kind)
                    })
            })
            .collect()
    }
}
