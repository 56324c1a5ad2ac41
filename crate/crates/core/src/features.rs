//! Featurized encoder inputs: binary semantic attributes plus linguistic
//! properties (lexical diversity, length, readability, spelling errors).

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::ReferralRequest;
use crate::io::{read_json, ArtifactError};
use crate::text::{request_text, tokenize};

const DEFAULT_SCHEMA: &str = include_str!("../data/feature_schema.json");
const DEFAULT_DICTIONARY: &str = include_str!("../data/dictionary.txt");

/// Attributes every schema must define: nine platform attributes followed by
/// twelve from the effective-request literature.
pub const REQUIRED_ATTRIBUTES: [&str; 21] = [
    "mentions_layoff",
    "mentions_pip",
    "mentions_company",
    "mentions_job_title",
    "years_of_experience",
    "mentions_salary",
    "reason_for_search",
    "past_experience",
    "mentions_skills",
    "urgency",
    "gratitude",
    "politeness",
    "familiarity",
    "desperation",
    "inclusive_exclusive",
    "contentment",
    "readiness",
    "evidentiality",
    "reciprocity",
    "high_status",
    "gain_loss_framing",
];

pub const NUMERIC_FEATURES: [&str; 4] = ["type_token_ratio", "word_count", "readability_score", "spelling_errors"];

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("attribute {name:?} pattern {index} does not compile: {source}")]
    InvalidPattern {
        name: String,
        index: usize,
        #[source]
        source: regex::Error,
    },
    #[error("schema {version} is missing required attribute {name:?}")]
    MissingAttribute { version: String, name: String },
    #[error("schema defines attribute {0:?} twice")]
    DuplicateAttribute(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Platform,
    Literature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub label: String,
    pub source: AttributeSource,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchemaConfig {
    pub version: String,
    pub attributes: Vec<AttributeDef>,
}

impl Default for FeatureSchemaConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_SCHEMA).expect("bundled feature schema is valid")
    }
}

/// Compiled schema: one case-insensitive, multi-line regex per attribute.
#[derive(Debug, Clone)]
pub struct FeatureSchema {
    config: FeatureSchemaConfig,
    compiled: Vec<(String, Regex)>,
}

impl FeatureSchema {
    pub fn new(config: FeatureSchemaConfig) -> Result<Self, FeatureError> {
        let mut seen = HashSet::new();
        let mut compiled = Vec::with_capacity(config.attributes.len());
        for attr in &config.attributes {
            if !seen.insert(attr.name.as_str()) {
                return Err(FeatureError::DuplicateAttribute(attr.name.clone()));
            }
            for (index, p) in attr.patterns.iter().enumerate() {
                Regex::new(p).map_err(|source| FeatureError::InvalidPattern {
                    name: attr.name.clone(),
                    index,
                    source,
                })?;
            }
            let joined = attr
                .patterns
                .iter()
                .map(|p| format!("(?:{p})"))
                .collect::<Vec<_>>()
                .join("|");
            // An attribute without patterns never fires.
            let re = if joined.is_empty() {
                Regex::new(r"[^\s\S]")
            } else {
                Regex::new(&format!("(?im){joined}"))
            }
            .map_err(|source| FeatureError::InvalidPattern {
                name: attr.name.clone(),
                index: 0,
                source,
            })?;
            compiled.push((attr.name.clone(), re));
        }
        for name in REQUIRED_ATTRIBUTES {
            if !seen.contains(name) {
                return Err(FeatureError::MissingAttribute {
                    version: config.version.clone(),
                    name: name.to_string(),
                });
            }
        }
        Ok(FeatureSchema { config, compiled })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        FeatureSchema::new(read_json(path)?)
    }

    pub fn version(&self) -> &str {
        &self.config.version
    }

    pub fn config(&self) -> &FeatureSchemaConfig {
        &self.config
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.compiled.iter().map(|(n, _)| n.as_str())
    }

    /// Flags plus numeric features.
    pub fn dimension(&self) -> usize {
        self.compiled.len() + NUMERIC_FEATURES.len()
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema::new(FeatureSchemaConfig::default()).expect("bundled schema compiles")
    }
}

/// Lowercase word list used for spelling-error counts.
#[derive(Debug, Clone)]
pub struct Dictionary {
    words: HashSet<String>,
}

impl Dictionary {
    pub fn from_wordlist(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Dictionary { words }
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let text = std::fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
        Ok(Dictionary::from_wordlist(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for Dictionary {
    fn default() -> Self {
        Dictionary::from_wordlist(DEFAULT_DICTIONARY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinguisticProperties {
    pub type_token_ratio: f64,
    pub word_count: usize,
    pub readability_score: f64,
    pub spelling_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub flags: IndexMap<String, u8>,
    pub numeric: LinguisticProperties,
}

impl FeatureVector {
    /// Flags in schema order, then the numeric features.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.flags.values().map(|&f| f64::from(f)).collect();
        v.push(self.numeric.type_token_ratio);
        v.push(self.numeric.word_count as f64);
        v.push(self.numeric.readability_score);
        v.push(self.numeric.spelling_errors as f64);
        v
    }

    pub fn len(&self) -> usize {
        self.flags.len() + NUMERIC_FEATURES.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn extract_semantic(text: &str, schema: &FeatureSchema) -> IndexMap<String, u8> {
    schema
        .compiled
        .iter()
        .map(|(name, re)| (name.clone(), u8::from(re.is_match(text))))
        .collect()
}

/// Vowel-group syllable heuristic: each run of vowels is one syllable, a
/// silent trailing `e` is dropped, and every word has at least one.
pub fn count_syllables(word: &str) -> usize {
    let lower: Vec<char> = word.to_lowercase().chars().collect();
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut groups = 0;
    let mut prev = false;
    for &c in &lower {
        let v = is_vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = lower.len();
    if groups > 1 && n >= 2 && lower[n - 1] == 'e' && !is_vowel(lower[n - 2]) {
        groups -= 1;
    }
    groups.max(1)
}

fn count_sentences(text: &str) -> usize {
    text.split(['.', '!', '?', '\n'])
        .filter(|s| !tokenize(s).is_empty())
        .count()
}

/// Flesch Reading Ease: 206.835 − 1.015·(words/sentences) − 84.6·(syllables/words).
pub fn flesch_reading_ease(words: usize, sentences: usize, syllables: usize) -> f64 {
    if words == 0 {
        return 0.0;
    }
    let sentences = sentences.max(1) as f64;
    let words_f = words as f64;
    206.835 - 1.015 * (words_f / sentences) - 84.6 * (syllables as f64 / words_f)
}

pub fn linguistic_properties(text: &str, dictionary: &Dictionary) -> LinguisticProperties {
    let tokens = tokenize(text);
    let lowered: Vec<String> = tokens
        .iter()
        .map(|t| {
            if t.is_mask() {
                t.text.to_string()
            } else {
                t.text.to_lowercase()
            }
        })
        .collect();
    let word_count = tokens.len();
    let distinct: HashSet<&str> = lowered.iter().map(String::as_str).collect();
    let type_token_ratio = if word_count == 0 {
        1.0
    } else {
        distinct.len() as f64 / word_count as f64
    };
    let syllables: usize = tokens
        .iter()
        .map(|t| if t.is_mask() { 1 } else { count_syllables(t.text) })
        .sum();
    let spelling_errors = tokens
        .iter()
        .zip(&lowered)
        .filter(|(t, w)| !t.is_mask() && !dictionary.contains(w))
        .count();
    LinguisticProperties {
        type_token_ratio,
        word_count,
        readability_score: flesch_reading_ease(word_count, count_sentences(text), syllables),
        spelling_errors,
    }
}

pub fn featurize(request: &ReferralRequest, schema: &FeatureSchema, dictionary: &Dictionary) -> FeatureVector {
    featurize_text(&request.masked_title, &request.masked_body, schema, dictionary)
}

pub fn featurize_text(title: &str, body: &str, schema: &FeatureSchema, dictionary: &Dictionary) -> FeatureVector {
    let text = request_text(title, body);
    FeatureVector {
        flags: extract_semantic(&text, schema),
        numeric: linguistic_properties(&text, dictionary),
    }
}
