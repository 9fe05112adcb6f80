use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary fertility class. Fertile is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fertile,
    Infertile,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Fertile, Label::Infertile];

    /// Output-unit index of the class in every classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::Fertile => 0,
            Label::Infertile => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Fertile => "fertile",
            Label::Infertile => "infertile",
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Fertile
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class label {0:?} (expected \"fertile\" or \"infertile\")")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fertile" => Ok(Label::Fertile),
            "infertile" => Ok(Label::Infertile),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}
