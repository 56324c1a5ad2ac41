//! Corpus ingestion: request/offer identification, credential masking,
//! labeling and the temporal train/test split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::{NoExpand, Regex};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, ArtifactError};
use crate::mask::{self, MaskToken};
use crate::text::normalize;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

/// Upper bound on mask passes; each pass is a no-op once a fixpoint is hit.
const MAX_MASK_PASSES: usize = 8;

static VOCAB_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    let alts: Vec<String> = MaskToken::ALL.iter().map(|t| regex::escape(t.as_str())).collect();
    Regex::new(&alts.join("|")).unwrap()
});

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("mask rule {index} does not compile: {source}")]
    InvalidPattern {
        index: usize,
        #[source]
        source: regex::Error,
    },
    #[error("duplicate post id {0:?}")]
    DuplicatePostId(String),
    #[error("date split leaves the {side} set empty (threshold {threshold})")]
    EmptySplit { side: &'static str, threshold: NaiveDate },
    #[error("no requests to split")]
    NoRequests,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub date: NaiveDate,
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affiliation: Option<String>,
    #[serde(default)]
    pub views: u64,
    #[serde(default)]
    pub likes: u64,
    #[serde(default)]
    pub comment_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub post_id: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affiliation: Option<String>,
    #[serde(default)]
    pub likes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralRequest {
    pub id: String,
    pub date: NaiveDate,
    pub masked_title: String,
    pub masked_body: String,
    pub label: bool,
}

impl ReferralRequest {
    pub fn text(&self) -> String {
        crate::text::request_text(&self.masked_title, &self.masked_body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub threshold_date: NaiveDate,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Share of positive labels among training requests.
    pub train_base_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRule {
    pub pattern: String,
    pub token: MaskToken,
}

/// Lexicon file contents. Mask tokens are validated on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconConfig {
    pub version: String,
    pub request_terms: Vec<String>,
    pub request_phrases: Vec<String>,
    pub offer_phrases: Vec<String>,
    pub offer_exclusions: Vec<String>,
    pub mask_rules: Vec<MaskRule>,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

/// A compiled lexicon, ready for matching.
#[derive(Debug, Clone)]
pub struct Lexicon {
    config: LexiconConfig,
    request_terms: Vec<String>,
    request_phrases: Vec<String>,
    offer_phrases: Vec<String>,
    offer_exclusions: Vec<String>,
    rules: Vec<(Regex, MaskToken)>,
}

fn normalized_all(list: &[String]) -> Vec<String> {
    list.iter().map(|s| normalize(s)).filter(|s| !s.is_empty()).collect()
}

impl Lexicon {
    pub fn new(config: LexiconConfig) -> Result<Self, CorpusError> {
        let rules = config
            .mask_rules
            .iter()
            .enumerate()
            .map(|(index, rule)| {
                Regex::new(&format!("(?i){}", rule.pattern))
                    .map(|re| (re, rule.token))
                    .map_err(|source| CorpusError::InvalidPattern { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Lexicon {
            request_terms: normalized_all(&config.request_terms),
            request_phrases: normalized_all(&config.request_phrases),
            offer_phrases: normalized_all(&config.offer_phrases),
            offer_exclusions: normalized_all(&config.offer_exclusions),
            rules,
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Lexicon::new(read_json(path)?)
    }

    pub fn config(&self) -> &LexiconConfig {
        &self.config
    }

    pub fn version(&self) -> &str {
        &self.config.version
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::new(LexiconConfig::default()).expect("bundled lexicon compiles")
    }
}

fn contains_any(haystack: &str, needles: &[String]) -> bool {
    needles.iter().any(|n| haystack.contains(n.as_str()))
}

/// True iff title-or-body carries a generic referral term and an explicit
/// request phrase.
pub fn identify_request(post: &Post, lexicon: &Lexicon) -> bool {
    let text = normalize(&format!("{} {}", post.title, post.body));
    !text.is_empty() && contains_any(&text, &lexicon.request_terms) && contains_any(&text, &lexicon.request_phrases)
}

/// True iff an offer phrase matches and no exclusion phrase does.
pub fn identify_offer(comment: &Comment, lexicon: &Lexicon) -> bool {
    let text = normalize(&comment.body);
    contains_any(&text, &lexicon.offer_phrases) && !contains_any(&text, &lexicon.offer_exclusions)
}

/// Applies `f` to the stretches of `text` between vocabulary mask tokens.
fn map_unmasked(text: &str, mut f: impl FnMut(&str) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in VOCAB_TOKEN.find_iter(text) {
        out.push_str(&f(&text[last..m.start()]));
        out.push_str(m.as_str());
        last = m.end();
    }
    out.push_str(&f(&text[last..]));
    out
}

fn mask_pass(text: &str, lexicon: &Lexicon) -> String {
    let mut current = mask::neutralize_unknown(text).into_owned();
    for (re, token) in &lexicon.rules {
        current = map_unmasked(&current, |seg| {
            re.replace_all(seg, NoExpand(token.as_str())).into_owned()
        });
    }
    mask::neutralize_unknown(&current).into_owned()
}

/// Replaces every credential match with its mask token and rewrites
/// out-of-vocabulary bracketed runs. Idempotent.
pub fn mask_credentials(text: &str, lexicon: &Lexicon) -> String {
    let mut current = text.to_string();
    for _ in 0..MAX_MASK_PASSES {
        let next = mask_pass(&current, lexicon);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Whether masking would change `text`, i.e. it still carries a credential
/// pattern or a stray bracketed token.
pub fn has_unmasked_credentials(text: &str, lexicon: &Lexicon) -> bool {
    mask_credentials(text, lexicon) != text
}

#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub requests: Vec<ReferralRequest>,
    pub dangling_comments: usize,
    pub warnings: Vec<String>,
}

/// One labeled, masked request per identified post, in post order.
pub fn label_and_assemble(posts: &[Post], comments: &[Comment], lexicon: &Lexicon) -> Result<Assembled, CorpusError> {
    let mut seen = HashSet::with_capacity(posts.len());
    for post in posts {
        if !seen.insert(post.id.as_str()) {
            return Err(CorpusError::DuplicatePostId(post.id.clone()));
        }
    }

    let mut offered: HashMap<&str, bool> = HashMap::new();
    let mut out = Assembled::default();
    for c in comments {
        if !seen.contains(c.post_id.as_str()) {
            out.dangling_comments += 1;
            let msg = format!("comment {} references unknown post {}", c.id, c.post_id);
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let hit = identify_offer(c, lexicon);
        *offered.entry(c.post_id.as_str()).or_default() |= hit;
    }

    for post in posts {
        if post.title.trim().is_empty() {
            let msg = format!("post {} has an empty title; skipped", post.id);
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        if !identify_request(post, lexicon) {
            continue;
        }
        out.requests.push(ReferralRequest {
            id: post.id.clone(),
            date: post.date,
            masked_title: mask_credentials(&post.title, lexicon),
            masked_body: mask_credentials(&post.body, lexicon),
            label: offered.get(post.id.as_str()).copied().unwrap_or(false),
        });
    }
    Ok(out)
}

/// Partitions by date: train strictly before `threshold`, test on or after.
pub fn split_by_date(requests: &[ReferralRequest], threshold: NaiveDate) -> Result<DatasetSplit, CorpusError> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    let mut positives = 0usize;
    for r in requests {
        if r.date < threshold {
            train.insert(r.id.clone());
            positives += usize::from(r.label);
        } else {
            test.insert(r.id.clone());
        }
    }
    if train.is_empty() {
        return Err(CorpusError::EmptySplit {
            side: "train",
            threshold,
        });
    }
    if test.is_empty() {
        return Err(CorpusError::EmptySplit {
            side: "test",
            threshold,
        });
    }
    Ok(DatasetSplit {
        threshold_date: threshold,
        train_base_rate: positives as f64 / train.len() as f64,
        train_ids: train.into_iter().collect(),
        test_ids: test.into_iter().collect(),
    })
}

/// The date at the `train_fraction` quantile of request dates, for callers
/// that want an approximate 80/20 split without picking a date by hand.
pub fn threshold_for_fraction(requests: &[ReferralRequest], train_fraction: f64) -> Result<NaiveDate, CorpusError> {
    let mut dates: Vec<NaiveDate> = requests.iter().map(|r| r.date).collect();
    if dates.is_empty() {
        return Err(CorpusError::NoRequests);
    }
    dates.sort_unstable();
    let idx = ((dates.len() as f64 * train_fraction).floor() as usize).min(dates.len() - 1);
    Ok(dates[idx])
}

impl DatasetSplit {
    /// Requests split into (train, test) in input order.
    pub fn partition<'a>(
        &self,
        requests: &'a [ReferralRequest],
    ) -> (Vec<&'a ReferralRequest>, Vec<&'a ReferralRequest>) {
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        let tr = requests.iter().filter(|r| train.contains(r.id.as_str())).collect();
        let te = requests.iter().filter(|r| test.contains(r.id.as_str())).collect();
        (tr, te)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, title: &str, body: &str) -> Post {
        Post {
            id: id.into(),
            date: NaiveDate::from_ymd_opt(2024, 5, 1).unwrap(),
            title: title.into(),
            body: body.into(),
            author: "a".into(),
            affiliation: None,
            views: 0,
            likes: 0,
            comment_count: 0,
        }
    }

    fn comment(id: &str, post_id: &str, body: &str) -> Comment {
        Comment {
            id: id.into(),
            post_id: post_id.into(),
            body: body.into(),
            author: "b".into(),
            affiliation: None,
            likes: 0,
        }
    }

    #[test]
    fn request_identification() {
        let lx = Lexicon::default();
        assert!(identify_request(&post("1", "Need a referral for [FIRM_NAME]", ""), &lx));
        assert!(!identify_request(
            &post("2", "Discussion about referral bonuses in tech", ""),
            &lx
        ));
        assert!(!identify_request(&post("3", "", ""), &lx));
        assert!(identify_request(
            &post("4", "Hi all", "Can anyone   REFER me to [FIRM_NAME]?"),
            &lx
        ));
    }

    #[test]
    fn offer_identification() {
        let lx = Lexicon::default();
        assert!(identify_offer(&comment("c", "p", "DM me for Google"), &lx));
        assert!(!identify_offer(&comment("c", "p", "Can I also DM for Google?"), &lx));
        assert!(!identify_offer(&comment("c", "p", ""), &lx));
        assert!(!identify_offer(
            &comment("c", "p", "happy to help! can I also DM you?"),
            &lx
        ));
    }

    #[test]
    fn masks_credentials() {
        let lx = Lexicon::default();
        assert_eq!(
            mask_credentials("I am a software engineer in Seattle", &lx),
            "I am a [ROLE] in [LOCATION]"
        );
        assert_eq!(mask_credentials("nothing to see here", &lx), "nothing to see here");
        assert_eq!(
            mask_credentials("Senior SWE with 7 years of experience, TC $250k at Google", &lx),
            "[SENIORITY] [ROLE] with [YOE], TC [SALARY] at [FIRM_NAME]"
        );
        let once = mask_credentials("[SECRET] data scientist, 5 yoe", &lx);
        assert_eq!(once, "(SECRET) [ROLE], [YOE]");
        assert_eq!(mask_credentials(&once, &lx), once);
    }

    #[test]
    fn labels_from_comments() {
        let lx = Lexicon::default();
        let posts = vec![
            post("p1", "Need a referral for [FIRM_NAME]", "thanks"),
            post("p2", "Seeking a referral", "anything helps"),
            post("p3", "Referral bonus talk", "no ask here"),
        ];
        let comments = vec![
            comment("c1", "p1", "happy to help, DM me"),
            comment("c2", "p2", "Can I also DM for Google?"),
            comment("c3", "p2", "me too, happy to help if someone refers"),
            comment("c4", "missing", "DM me"),
        ];
        let out = label_and_assemble(&posts, &comments, &lx).unwrap();
        assert_eq!(out.requests.len(), 2);
        assert!(out.requests[0].label);
        assert!(!out.requests[1].label);
        assert_eq!(out.dangling_comments, 1);
    }

    #[test]
    fn duplicate_post_ids_rejected() {
        let lx = Lexicon::default();
        let posts = vec![post("p", "Need a referral", ""), post("p", "Need a referral", "")];
        assert!(matches!(
            label_and_assemble(&posts, &[], &lx),
            Err(CorpusError::DuplicatePostId(_))
        ));
    }

    fn req(id: &str, ymd: (i32, u32, u32), label: bool) -> ReferralRequest {
        ReferralRequest {
            id: id.into(),
            date: NaiveDate::from_ymd_opt(ymd.0, ymd.1, ymd.2).unwrap(),
            masked_title: "t".into(),
            masked_body: String::new(),
            label,
        }
    }

    #[test]
    fn split_rejects_empty_side() {
        let reqs = vec![req("a", (2024, 1, 1), true), req("b", (2024, 2, 1), false)];
        let t = NaiveDate::from_ymd_opt(2024, 9, 24).unwrap();
        assert!(matches!(
            split_by_date(&reqs, t),
            Err(CorpusError::EmptySplit { side: "test", .. })
        ));
        let early = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        assert!(matches!(
            split_by_date(&reqs, early),
            Err(CorpusError::EmptySplit { side: "train", .. })
        ));
    }

    #[test]
    fn split_reports_base_rate() {
        // 1000 train requests, 462 positive; 10 test requests after the threshold.
        let mut reqs: Vec<_> = (0..1000)
            .map(|i| req(&format!("r{i:04}"), (2024, 3, 1), i < 462))
            .collect();
        reqs.extend((0..10).map(|i| req(&format!("t{i}"), (2024, 10, 1), true)));
        let t = NaiveDate::from_ymd_opt(2024, 9, 24).unwrap();
        let split = split_by_date(&reqs, t).unwrap();
        assert_eq!(split.train_ids.len(), 1000);
        assert_eq!(split.test_ids.len(), 10);
        assert!((split.train_base_rate - 0.462).abs() < 1e-12);
    }

    #[test]
    fn threshold_fraction_gives_both_sides() {
        let reqs: Vec<_> = (1..=10).map(|d| req(&d.to_string(), (2024, 1, d), false)).collect();
        let t = threshold_for_fraction(&reqs, 0.8).unwrap();
        let split = split_by_date(&reqs, t).unwrap();
        assert_eq!(split.train_ids.len(), 8);
        assert_eq!(split.test_ids.len(), 2);
    }
}
