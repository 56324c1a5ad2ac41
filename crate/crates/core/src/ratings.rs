//! Quality ratings attached to requests and retrieved examples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Weak,
    Moderate,
    Strong,
}

impl Rating {
    pub fn as_str(self) -> &'static str {
        match self {
            Rating::Weak => "weak",
            Rating::Moderate => "moderate",
            Rating::Strong => "strong",
        }
    }

    /// One step toward `Strong`.
    pub fn up(self) -> Rating {
        match self {
            Rating::Weak => Rating::Moderate,
            _ => Rating::Strong,
        }
    }

    /// One step toward `Weak`.
    pub fn down(self) -> Rating {
        match self {
            Rating::Strong => Rating::Moderate,
            _ => Rating::Weak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRating {
    /// Position among body sentences, starting at 0.
    pub index: usize,
    pub text: String,
    pub rating: Rating,
}

/// Ratings for one request: overall, title and each body sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub overall: Rating,
    pub title: Rating,
    pub sentences: Vec<SentenceRating>,
}
