use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dit::PoseFlags;
use crate::error::Error;
use crate::se3::{
    assemble_control, cumulative_head_variant, head_rows_to_control, per_joint_delta_variant, ControlTensor,
    PoseSequence, ROW_PELVIS,
};

/// Which pose information reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseVariant {
    FullBody,
    HeadOnly,
    None,
    CumulativeHead,
    PerJointDelta,
}

/// Which pathway carries the pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Adaln,
    CrossAttn,
    Both,
}

impl PoseVariant {
    pub const ALL: [PoseVariant; 5] = [
        PoseVariant::FullBody,
        PoseVariant::HeadOnly,
        PoseVariant::None,
        PoseVariant::CumulativeHead,
        PoseVariant::PerJointDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoseVariant::FullBody => "full_body",
            PoseVariant::HeadOnly => "head_only",
            PoseVariant::None => "none",
            PoseVariant::CumulativeHead => "cumulative_head",
            PoseVariant::PerJointDelta => "per_joint_delta",
        }
    }

    /// Control tensor for a window of `M + 1` pose frames. Variants with less
    /// information zero the unused rows so every variant shares one shape.
    pub fn control(self, window: &PoseSequence) -> ControlTensor {
        match self {
            PoseVariant::FullBody => assemble_control(window),
            PoseVariant::HeadOnly => {
                let mut c = assemble_control(window);
                c.keep_rows_below(ROW_PELVIS);
                c
            }
            PoseVariant::None => ControlTensor::zeros(window.num_targets()),
            PoseVariant::CumulativeHead => head_rows_to_control(&cumulative_head_variant(window)),
            PoseVariant::PerJointDelta => per_joint_delta_variant(window),
        }
    }

    pub fn flags(self, mechanism: Mechanism) -> PoseFlags {
        if self == PoseVariant::None {
            return PoseFlags {
                adaln: false,
                cross_attn: false,
            };
        }
        mechanism.flags()
    }
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Adaln, Mechanism::CrossAttn, Mechanism::Both];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Adaln => "adaln",
            Mechanism::CrossAttn => "cross_attn",
            Mechanism::Both => "both",
        }
    }

    pub fn flags(self) -> PoseFlags {
        PoseFlags {
            adaln: self != Mechanism::CrossAttn,
            cross_attn: self != Mechanism::Adaln,
        }
    }
}

impl fmt::Display for PoseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PoseVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pose variant `{s}`")))
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Mechanism::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown control mechanism `{s}`")))
    }
}
