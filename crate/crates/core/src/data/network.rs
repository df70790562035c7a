//! Construction of geographical and OD relation networks.

use std::collections::HashMap;

use super::model::*;
use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in metres between two lon/lat pairs.
pub fn haversine(a: Coord, b: Coord) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Counts trajectories per (first entity, last entity) pair. Only the
/// endpoints count; single-sample trajectories become self-loops.
pub fn build_od_network(trajectories: &[&Trajectory], vertices: &[String]) -> RelationNetwork {
    let index: HashMap<&str, usize> = vertices.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let mut net = RelationNetwork::new(vertices.to_vec(), RelationKind::Social);
    for t in trajectories {
        let first = t.samples.first().and_then(Sample::entity_id).and_then(|id| index.get(id));
        let last = t.samples.last().and_then(Sample::entity_id).and_then(|id| index.get(id));
        if let (Some(&o), Some(&d)) = (first, last) {
            *net.edges.entry((o, d)).or_insert(0.0) += 1.0;
        }
    }
    net
}

/// Neighbourhood rule for geographical networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Proximity {
    /// Symmetric unit edges between entities closer than this many metres.
    Threshold(f64),
    /// Edges from each entity to its k nearest others.
    Nearest(usize),
}

impl Proximity {
    /// Resolves the CLI/config pair where exactly one selector must be set.
    pub fn from_options(threshold: Option<f64>, k: Option<usize>) -> Result<Self> {
        match (threshold, k) {
            (Some(t), None) => Ok(Proximity::Threshold(t)),
            (None, Some(k)) => Ok(Proximity::Nearest(k)),
            _ => Err(Error::usage("supply exactly one of a distance threshold or a neighbour count")),
        }
    }
}

pub fn build_geo_network(entities: &[&MapEntity], rule: Proximity) -> RelationNetwork {
    let vertices: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    let anchors: Vec<Coord> = entities.iter().map(|e| e.anchor()).collect();
    let mut net = RelationNetwork::new(vertices, RelationKind::Geographical);
    let n = entities.len();
    match rule {
        Proximity::Threshold(limit) => {
            for i in 0..n {
                for j in i + 1..n {
                    if haversine(anchors[i], anchors[j]) < limit {
                        net.edges.insert((i, j), 1.0);
                        net.edges.insert((j, i), 1.0);
                    }
                }
            }
        }
        Proximity::Nearest(k) => {
            for i in 0..n {
                let mut others: Vec<(f64, &str, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (haversine(anchors[i], anchors[j]), entities[j].id.as_str(), j))
                    .collect();
                others.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
                for &(_, _, j) in others.iter().take(k) {
                    net.edges.insert((i, j), 1.0);
                }
            }
        }
    }
    net
}
