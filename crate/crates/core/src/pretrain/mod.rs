//! Self-supervised pretraining tasks and the sequential / joint training loops.

pub mod augment;
pub mod losses;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamId, Stage};
use crate::encoders::{EncoderPipeline, FeatureScheme, ID_FEATURE};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::scalar::Scalar;

pub use augment::{AugmentKind, AugmentationPolicy};
pub use losses::*;
pub use train::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskKind {
    TokRI,
    TRCL,
    AToCL,
    NFI,
    GAu,
    NCL,
    AGCL,
    TrajP,
    MTR,
    ATrCL,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::TokRI,
        TaskKind::TRCL,
        TaskKind::AToCL,
        TaskKind::NFI,
        TaskKind::GAu,
        TaskKind::NCL,
        TaskKind::AGCL,
        TaskKind::TrajP,
        TaskKind::MTR,
        TaskKind::ATrCL,
    ];

    pub fn stage(self) -> Stage {
        use TaskKind::*;
        match self {
            TokRI | TRCL | AToCL => Stage::Token,
            NFI | GAu | NCL | AGCL => Stage::Graph,
            TrajP | MTR | ATrCL => Stage::Sequence,
        }
    }

    pub fn name(self) -> &'static str {
        use TaskKind::*;
        match self {
            TokRI => "TokRI",
            TRCL => "TRCL",
            AToCL => "AToCL",
            NFI => "NFI",
            GAu => "GAu",
            NCL => "NCL",
            AGCL => "AGCL",
            TrajP => "TrajP",
            MTR => "MTR",
            ATrCL => "ATrCL",
        }
    }

    pub(crate) fn index(self) -> u64 {
        Self::ALL.iter().position(|&t| t == self).expect("listed") as u64
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown pretraining task `{s}`")))
    }
}

impl TryFrom<String> for TaskKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskKind> for String {
    fn from(t: TaskKind) -> String {
        t.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Random,
    Contiguous,
}

/// Loss-side hyperparameters shared by all heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub tau: f64,
    pub k_neg: usize,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub atocl: AugmentationPolicy,
    pub agcl: AugmentationPolicy,
    pub atrcl: AugmentationPolicy,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            tau: 0.07,
            k_neg: 16,
            mask_ratio: 0.15,
            mask_mode: MaskMode::Random,
            atocl: AugmentationPolicy { kind: AugmentKind::FeatureDropout, rate: 0.2, seed: 0 },
            agcl: AugmentationPolicy { kind: AugmentKind::EdgeDrop, rate: 0.2, seed: 0 },
            atrcl: AugmentationPolicy { kind: AugmentKind::PointDelete, rate: 0.2, seed: 0 },
        }
    }
}

impl PretrainOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::usage("temperature must be positive"));
        }
        if self.k_neg == 0 {
            return Err(Error::usage("at least one negative is required"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::usage("mask ratio must lie in (0, 1]"));
        }
        self.atocl.check()?;
        self.atocl.expect(&[AugmentKind::FeatureDropout, AugmentKind::FeatureReplace, AugmentKind::Noise], "AToCL")?;
        self.agcl.check()?;
        self.agcl.expect(&[AugmentKind::EdgeDrop], "AGCL")?;
        self.atrcl.check()?;
        self.atrcl.expect(
            &[AugmentKind::PointDelete, AugmentKind::PointReplace, AugmentKind::SubseqReplace, AugmentKind::Noise],
            "ATrCL",
        )
    }
}

/// One linear output block of the NFI head.
#[derive(Clone, Debug)]
pub struct NfiBlock {
    /// Position of the feature in the codec.
    pub feature: usize,
    pub categorical: bool,
    pub linear: Linear,
}

/// Task-specific parameters. Contrastive, GAu and TrajP heads are
/// parameter-free (TrajP decodes against the entity table).
#[derive(Clone, Debug)]
pub struct PretrainHead {
    pub task: TaskKind,
    pub phi: Option<Mlp>,
    pub nfi: Vec<NfiBlock>,
    pub mask: Option<ParamId>,
}

impl PretrainHead {
    pub fn group(task: TaskKind) -> Group {
        Group::Head(format!("pretrain.{}", task.name()))
    }

    pub fn new<T: Scalar, R: Rng + ?Sized>(task: TaskKind, p: &mut EncoderPipeline<T>, rng: &mut R) -> Self {
        let group = Self::group(task);
        let d = p.dim();
        let mut head = PretrainHead { task, phi: None, nfi: Vec::new(), mask: None };
        match task {
            TaskKind::TokRI => head.phi = Some(Mlp::new(&mut p.store, "tokri.phi", &group, [2 * d, d, 1], rng)),
            TaskKind::NFI => {
                for (k, (name, scheme)) in p.codec.features.iter().enumerate() {
                    if name == ID_FEATURE {
                        continue;
                    }
                    let (categorical, out) = match scheme {
                        FeatureScheme::Categorical { .. } => (true, scheme.width()),
                        FeatureScheme::Continuous { .. } => (false, 1),
                    };
                    let linear = Linear::new(&mut p.store, &format!("nfi.{name}"), &group, d, out, rng);
                    head.nfi.push(NfiBlock { feature: k, categorical, linear });
                }
            }
            TaskKind::MTR => head.mask = Some(p.store.add_embedding("mtr.mask", group, 1, d, rng)),
            _ => {}
        }
        head
    }
}
