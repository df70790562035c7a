use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RelationNetwork;
use crate::encoders::EncodedTraj;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    FeatureDropout,
    FeatureReplace,
    EdgeDrop,
    PointDelete,
    PointReplace,
    SubseqReplace,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub rate: f64,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn new(kind: AugmentKind, rate: f64, seed: u64) -> Result<Self> {
        let p = Self { kind, rate, seed };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::usage(format!("augmentation rate {} must lie in (0, 1)", self.rate)));
        }
        Ok(())
    }

    pub fn expect(&self, allowed: &[AugmentKind], task: &str) -> Result<()> {
        if allowed.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::usage(format!("{task} does not support the {:?} augmentation", self.kind)))
        }
    }
}

/// Per-row feature-block keep flags; each block drops with probability
/// `rate`, but every row keeps at least one block.
pub fn feature_keep_mask<R: Rng + ?Sized>(rows: usize, features: usize, rate: f64, rng: &mut R) -> Vec<Vec<bool>> {
    (0..rows)
        .map(|_| {
            let mut keep: Vec<bool> = (0..features).map(|_| !rng.random_bool(rate)).collect();
            if !keep.iter().any(|&k| k) {
                keep[rng.random_range(0..features)] = true;
            }
            keep
        })
        .collect()
}

/// Replaces each feature index with a uniform index of the same feature with
/// probability `rate`.
pub fn feature_replace<R: Rng + ?Sized>(rows: &[Vec<usize>], widths: &[usize], rate: f64, rng: &mut R) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .zip(widths)
                .map(|(&i, &w)| if rng.random_bool(rate) { rng.random_range(0..w) } else { i })
                .collect()
        })
        .collect()
}

pub fn gaussian_noise<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<T> {
    if std <= 0.0 {
        return Array2::zeros(shape);
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || T::of(normal.sample(rng)))
}

/// Drop probability of every edge: `rate * (1 - w_norm)` with weights
/// min-max normalised over the network (0 when all weights are equal).
pub fn edge_drop_probabilities(net: &RelationNetwork, rate: f64) -> Vec<((usize, usize), f64)> {
    let (lo, hi) = net
        .edges
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    net.edges
        .iter()
        .map(|(&e, &w)| {
            let norm = if hi > lo { (w - lo) / (hi - lo) } else { 0.0 };
            (e, rate * (1.0 - norm))
        })
        .collect()
}

pub fn edge_drop<R: Rng + ?Sized>(net: &RelationNetwork, rate: f64, rng: &mut R) -> RelationNetwork {
    let mut out = RelationNetwork::new(net.vertices.clone(), net.kind);
    for (e, p) in edge_drop_probabilities(net, rate) {
        if !rng.random_bool(p.clamp(0.0, 1.0)) {
            out.edges.insert(e, net.edges[&e]);
        }
    }
    out
}

/// Deletes each point with probability `rate`, keeping at least one.
pub fn point_delete<R: Rng + ?Sized>(t: &EncodedTraj, rate: f64, rng: &mut R) -> EncodedTraj {
    let mut keep: Vec<usize> = (0..t.len()).filter(|_| !rng.random_bool(rate)).collect();
    if keep.is_empty() {
        keep.push(rng.random_range(0..t.len()));
    }
    t.select(&keep)
}

/// Replaces each point's entity with a uniform entity with probability `rate`.
pub fn point_replace<R: Rng + ?Sized>(t: &EncodedTraj, rate: f64, n_entities: usize, rng: &mut R) -> EncodedTraj {
    let mut out = t.clone();
    for e in &mut out.entities {
        if rng.random_bool(rate) {
            *e = rng.random_range(0..n_entities);
        }
    }
    out
}

/// Replaces one contiguous run of `ceil(rate * K)` points with uniform entities.
pub fn subseq_replace<R: Rng + ?Sized>(t: &EncodedTraj, rate: f64, n_entities: usize, rng: &mut R) -> EncodedTraj {
    let k = t.len();
    let run = ((rate * k as f64).ceil() as usize).clamp(1, k);
    let start = rng.random_range(0..=k - run);
    let mut out = t.clone();
    for e in &mut out.entities[start..start + run] {
        *e = rng.random_range(0..n_entities);
    }
    out
}
