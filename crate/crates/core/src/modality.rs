use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three modalities, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }

    /// The two modalities left when `self` is missing, in canonical order.
    pub fn available_when_missing(self) -> [Modality; 2] {
        match self {
            Modality::Image => [Modality::Text, Modality::Audio],
            Modality::Text => [Modality::Image, Modality::Audio],
            Modality::Audio => [Modality::Image, Modality::Text],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" | "img" => Ok(Modality::Image),
            "text" | "txt" => Ok(Modality::Text),
            "audio" | "aud" => Ok(Modality::Audio),
            other => Err(Error::Config(format!("unknown modality '{other}' (expected image, text or audio)"))),
        }
    }
}
