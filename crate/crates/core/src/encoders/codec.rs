//! Tokenisation of entity features into one-hot blocks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{FeatureValue, MapEntity};
use crate::error::{Error, Result};

/// Name of the pseudo-feature that embeds the entity identity itself.
pub const ID_FEATURE: &str = "geo_id";
pub const DEFAULT_BINS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum FeatureScheme {
    Categorical { vocab: Vec<String>, oov: bool },
    /// Equal-width bins over the observed range. A constant feature has one bin.
    Continuous { min: f64, max: f64, bins: usize },
}

impl FeatureScheme {
    /// Block width F_k.
    pub fn width(&self) -> usize {
        match self {
            FeatureScheme::Categorical { vocab, oov } => vocab.len() + usize::from(*oov),
            FeatureScheme::Continuous { bins, .. } => *bins,
        }
    }

    pub fn bin_width(&self) -> Option<f64> {
        match self {
            FeatureScheme::Continuous { min, max, bins } => Some(if *bins > 1 { (max - min) / *bins as f64 } else { 1.0 }),
            _ => None,
        }
    }

    /// Bin boundaries, `bins + 1` strictly increasing values.
    pub fn edges(&self) -> Option<Vec<f64>> {
        let w = self.bin_width()?;
        let FeatureScheme::Continuous { min, bins, .. } = self else { return None };
        Some((0..=*bins).map(|i| min + w * i as f64).collect())
    }

    /// Centre of bin `i`, used as the regression target for continuous features.
    pub fn bin_center(&self, i: usize) -> Option<f64> {
        let w = self.bin_width()?;
        let FeatureScheme::Continuous { min, .. } = self else { return None };
        Some(min + w * (i as f64 + 0.5))
    }

    /// Bin centre rescaled so that the observed range maps onto [0, 1].
    pub fn normalized_center(&self, i: usize) -> Option<f64> {
        let FeatureScheme::Continuous { min, max, bins } = self else { return None };
        if *bins <= 1 || max <= min {
            return Some(0.5);
        }
        Some((self.bin_center(i)? - min) / (max - min))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecOptions {
    pub bins: usize,
    pub oov: bool,
    /// Embed the entity id as an extra categorical feature.
    pub include_id: bool,
    /// Feature names that must never be encoded (labels).
    pub exclude: Vec<String>,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, oov: true, include_id: true, exclude: Vec::new() }
    }
}

/// Per-feature vocabularies and bin layouts, in lexicographic feature order
/// with the id pseudo-feature first when enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub features: Vec<(String, FeatureScheme)>,
}

pub fn fit_feature_codec(entities: &[&MapEntity], opts: &CodecOptions) -> Result<FeatureCodec> {
    let excluded: BTreeSet<&str> = opts.exclude.iter().map(String::as_str).collect();
    let names = |e: &MapEntity| -> BTreeSet<String> {
        e.features.keys().filter(|k| !excluded.contains(k.as_str())).cloned().collect()
    };
    let reference = entities.first().map(|e| names(e)).unwrap_or_default();
    for (row, e) in entities.iter().enumerate() {
        if names(e) != reference {
            return Err(Error::usage(format!(
                "entity `{}` (#{row}) has a different feature set than `{}`",
                e.id, entities[0].id
            )));
        }
    }
    let mut features = Vec::new();
    if opts.include_id {
        let mut ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
        ids.sort();
        ids.dedup();
        features.push((ID_FEATURE.to_string(), FeatureScheme::Categorical { vocab: ids, oov: opts.oov }));
    }
    for name in &reference {
        let mut cats = BTreeSet::new();
        let mut nums: Vec<f64> = Vec::new();
        for e in entities {
            match &e.features[name] {
                FeatureValue::Category(s) => {
                    cats.insert(s.clone());
                }
                FeatureValue::Number(x) => nums.push(*x),
            }
        }
        let scheme = match (cats.is_empty(), nums.is_empty()) {
            (false, true) => FeatureScheme::Categorical { vocab: cats.into_iter().collect(), oov: opts.oov },
            (true, false) => {
                let min = nums.iter().copied().fold(f64::INFINITY, f64::min);
                let max = nums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let bins = if max > min { opts.bins.max(1) } else { 1 };
                FeatureScheme::Continuous { min, max, bins }
            }
            (false, false) => {
                return Err(Error::format("features", 0, format!("feature `{name}` mixes categorical and continuous values")))
            }
            (true, true) => continue,
        };
        features.push((name.clone(), scheme));
    }
    Ok(FeatureCodec { features })
}

impl FeatureCodec {
    pub fn widths(&self) -> Vec<usize> {
        self.features.iter().map(|(_, s)| s.width()).collect()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn total_width(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.features.iter().any(|(n, _)| n == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|(n, _)| n == name)
    }

    /// Index of the hot entry of every block.
    pub fn indices(&self, entity: &MapEntity) -> Result<Vec<usize>> {
        self.features
            .iter()
            .map(|(name, scheme)| {
                let value = if name == ID_FEATURE {
                    Some(FeatureValue::Category(entity.id.clone()))
                } else {
                    entity.features.get(name).cloned()
                };
                let value = value
                    .ok_or_else(|| Error::usage(format!("entity `{}` lacks feature `{name}`", entity.id)))?;
                encode_value(scheme, &value)
                    .ok_or_else(|| Error::usage(format!("value `{value}` of `{name}` is outside the vocabulary")))
            })
            .collect()
    }

    /// Dense one-hot encoding, blocks concatenated in feature order.
    pub fn encode_feature(&self, entity: &MapEntity) -> Result<Vec<f64>> {
        let idx = self.indices(entity)?;
        let mut out = vec![0.0; self.total_width()];
        let mut offset = 0;
        for ((_, scheme), i) in self.features.iter().zip(idx) {
            out[offset + i] = 1.0;
            offset += scheme.width();
        }
        Ok(out)
    }

    pub fn summary(&self) -> BTreeMap<String, usize> {
        self.features.iter().map(|(n, s)| (n.clone(), s.width())).collect()
    }
}

fn encode_value(scheme: &FeatureScheme, value: &FeatureValue) -> Option<usize> {
    match (scheme, value) {
        (FeatureScheme::Categorical { vocab, oov }, v) => {
            let key = v.to_string();
            match vocab.binary_search(&key) {
                Ok(i) => Some(i),
                Err(_) if *oov => Some(vocab.len()),
                Err(_) => None,
            }
        }
        (s @ FeatureScheme::Continuous { min, bins, .. }, FeatureValue::Number(x)) => {
            let w = s.bin_width()?;
            let raw = ((x - min) / w).floor();
            Some(raw.clamp(0.0, (*bins - 1) as f64) as usize)
        }
        (FeatureScheme::Continuous { .. }, FeatureValue::Category(_)) => None,
    }
}
