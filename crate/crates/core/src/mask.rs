//! The closed mask-token vocabulary.
//!
//! Masked text may only contain bracketed tokens from [`MaskToken::ALL`]. A
//! "bracketed token" is any `[...]` run without nested brackets; anything
//! else in brackets is out of vocabulary and must never reach the model,
//! the prompts or a stored revision.

use std::borrow::Cow;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

static BRACKETED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[[^\[\]]*\]").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskToken {
    Role,
    Location,
    FirmName,
    Salary,
    Yoe,
    Seniority,
}

impl MaskToken {
    pub const ALL: [MaskToken; 6] = [
        MaskToken::Role,
        MaskToken::Location,
        MaskToken::FirmName,
        MaskToken::Salary,
        MaskToken::Yoe,
        MaskToken::Seniority,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskToken::Role => "[ROLE]",
            MaskToken::Location => "[LOCATION]",
            MaskToken::FirmName => "[FIRM_NAME]",
            MaskToken::Salary => "[SALARY]",
            MaskToken::Yoe => "[YOE]",
            MaskToken::Seniority => "[SENIORITY]",
        }
    }

    /// Parses the bracketed form, e.g. `"[ROLE]"`. Case-sensitive.
    pub fn parse(s: &str) -> Option<MaskToken> {
        MaskToken::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for MaskToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for MaskToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MaskToken {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        MaskToken::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown mask token {s:?}")))
    }
}

/// Every bracketed run in `text`, in order.
pub fn bracketed_tokens(text: &str) -> impl Iterator<Item = &str> {
    BRACKETED.find_iter(text).map(|m| m.as_str())
}

/// Bracketed runs that are not in the mask vocabulary.
pub fn out_of_vocabulary(text: &str) -> Vec<&str> {
    bracketed_tokens(text)
        .filter(|t| MaskToken::parse(t).is_none())
        .collect()
}

pub fn is_clean(text: &str) -> bool {
    bracketed_tokens(text).all(|t| MaskToken::parse(t).is_some())
}

/// Rewrites out-of-vocabulary `[x]` as `(x)`. Vocabulary tokens are kept.
pub fn neutralize_unknown(text: &str) -> Cow<'_, str> {
    BRACKETED.replace_all(text, |caps: &regex::Captures<'_>| {
        let tok = &caps[0];
        if MaskToken::parse(tok).is_some() {
            tok.to_string()
        } else {
            format!("({})", &tok[1..tok.len() - 1])
        }
    })
}
