//! Unigram + bigram TF-IDF with smoothed idf and L2 row normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::stem::stem;
use super::EncodeError;
use crate::text::tokenize;

const STOPWORDS_EN: &str = include_str!("../../data/stopwords_en.txt");

static ENGLISH: LazyLock<HashSet<&'static str>> =
    LazyLock::new(|| STOPWORDS_EN.lines().map(str::trim).filter(|l| !l.is_empty()).collect());

pub const VOCAB_FORMAT: &str = "referral-forge/tfidf/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopwordList {
    #[default]
    English,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StemmerKind {
    #[default]
    Suffix,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    pub stopwords: StopwordList,
    pub stemmer: StemmerKind,
    pub min_df: usize,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        TfidfConfig {
            stopwords: StopwordList::English,
            stemmer: StemmerKind::Suffix,
            min_df: 2,
        }
    }
}

/// Sparse row: `(index, weight)` pairs sorted by index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot_dense(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * w[i as usize]).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfVocabulary {
    pub format: String,
    pub config: TfidfConfig,
    pub n_docs: usize,
    /// Terms in index order; bigrams are two stems joined by a space.
    pub terms: Vec<String>,
    pub idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for TfidfVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.n_docs == other.n_docs && self.terms == other.terms && self.idf == other.idf
    }
}

/// Analyzed unigrams followed by bigrams of adjacent kept tokens.
pub fn analyze(text: &str, config: &TfidfConfig) -> Vec<String> {
    let unigrams: Vec<String> = tokenize(text)
        .into_iter()
        .filter_map(|t| {
            if t.is_mask() {
                return Some(t.text.to_string());
            }
            let lower = t.text.to_lowercase();
            if config.stopwords == StopwordList::English && ENGLISH.contains(lower.as_str()) {
                return None;
            }
            Some(match config.stemmer {
                StemmerKind::Suffix => stem(&lower),
                StemmerKind::None => lower,
            })
        })
        .collect();
    let bigrams: Vec<String> = unigrams.windows(2).map(|w| format!("{} {}", w[0], w[1])).collect();
    let mut out = unigrams;
    out.extend(bigrams);
    out
}

pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl TfidfVocabulary {
    pub fn fit<S: AsRef<str>>(docs: &[S], config: TfidfConfig) -> Result<Self, EncodeError> {
        if docs.is_empty() {
            return Err(EncodeError::EmptyCorpus);
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in docs {
            let unique: HashSet<String> = analyze(doc.as_ref(), &config).into_iter().collect();
            for term in unique {
                *df.entry(term).or_default() += 1;
            }
        }
        let (terms, idf): (Vec<String>, Vec<f64>) = df
            .into_iter()
            .filter(|(_, d)| *d >= config.min_df.max(1))
            .map(|(t, d)| {
                let w = smoothed_idf(docs.len(), d);
                (t, w)
            })
            .unzip();
        let mut vocab = TfidfVocabulary {
            format: VOCAB_FORMAT.to_string(),
            config,
            n_docs: docs.len(),
            terms,
            idf,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        Ok(vocab)
    }

    /// Restores the term lookup after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).map(|&i| i as usize)
    }

    /// Raw in-vocabulary term counts, sorted by index.
    pub fn counts(&self, text: &str) -> Vec<(u32, usize)> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for term in analyze(text, &self.config) {
            if let Some(&i) = self.index.get(&term) {
                *counts.entry(i).or_default() += 1;
            }
        }
        counts.into_iter().collect()
    }

    /// count × idf, L2-normalized; out-of-vocabulary terms are dropped.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut entries: Vec<(u32, f64)> = self
            .counts(text)
            .into_iter()
            .map(|(i, c)| (i, c as f64 * self.idf[i as usize]))
            .collect();
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut entries {
                *v /= norm;
            }
        }
        SparseVector {
            dim: self.len(),
            entries,
        }
    }
}
