use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Degradations a prior can be requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationType {
    Haze,
    Rain,
    LowLight,
    Raindrop,
    Reflection,
    Underwater,
    Snow,
    MotionBlur,
    DefocusBlur,
    Noise,
}

impl DegradationType {
    pub const ALL: [DegradationType; 10] = [
        Self::Haze,
        Self::Rain,
        Self::LowLight,
        Self::Raindrop,
        Self::Reflection,
        Self::Underwater,
        Self::Snow,
        Self::MotionBlur,
        Self::DefocusBlur,
        Self::Noise,
    ];

    /// Lowercase phrase substituted into the editing prompt.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::LowLight => "low-light degradation",
            Self::Raindrop => "raindrops",
            Self::Reflection => "reflection",
            Self::Underwater => "underwater color cast",
            Self::Snow => "snow",
            Self::MotionBlur => "motion blur",
            Self::DefocusBlur => "defocus blur",
            Self::Noise => "noise",
        }
    }

    /// Identifier used in manifests and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::LowLight => "low_light",
            Self::Raindrop => "raindrop",
            Self::Reflection => "reflection",
            Self::Underwater => "underwater",
            Self::Snow => "snow",
            Self::MotionBlur => "motion_blur",
            Self::DefocusBlur => "defocus_blur",
            Self::Noise => "noise",
        }
    }
}

impl fmt::Display for DegradationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown degradation `{0}`")]
pub struct UnknownDegradation(pub String);

impl FromStr for DegradationType {
    type Err = UnknownDegradation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|d| d.key() == s).ok_or_else(|| UnknownDegradation(s.to_string()))
    }
}
