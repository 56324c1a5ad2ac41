//! Prompt assembly, completion providers and parsing/validation of revised
//! requests.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{has_unmasked_credentials, Lexicon};
use crate::limit::InFlightLimiter;
use crate::mask;
use crate::ratings::RatingSummary;

pub const TEMPLATES_VERSION: &str = "prompts-v1";
pub const MAX_EXAMPLES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {template:?} uses unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("rag prompts need at least one example")]
    NoExamples,
    #[error("at most {MAX_EXAMPLES} examples are allowed, got {0}")]
    TooManyExamples(usize),
    #[error("request contains unmasked credentials; refusing to send it")]
    UnmaskedCredentials,
    #[error("request contains bracketed tokens outside the mask vocabulary: {0:?}")]
    OutOfVocabulary(Vec<String>),
    #[error("cannot read prompt template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Basic,
    Rag,
}

/// Prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub system: String,
    pub examples: String,
    pub example: String,
    pub ratings_guidance: String,
}

const TEMPLATE_FILES: [&str; 4] = ["system.txt", "examples.txt", "example.txt", "ratings_guidance.txt"];

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            version: TEMPLATES_VERSION.to_string(),
            system: include_str!("../data/prompts/system.txt").to_string(),
            examples: include_str!("../data/prompts/examples.txt").to_string(),
            example: include_str!("../data/prompts/example.txt").to_string(),
            ratings_guidance: include_str!("../data/prompts/ratings_guidance.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Defaults overridden by whichever template files exist in `dir`. A
    /// `VERSION` file, if present, names the set.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = PromptTemplates::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(PromptError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        if !dir.is_dir() {
            return Err(PromptError::Io {
                path: dir.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            });
        }
        for (name, slot) in
            TEMPLATE_FILES
                .iter()
                .zip([&mut t.system, &mut t.examples, &mut t.example, &mut t.ratings_guidance])
        {
            if let Some(s) = read(name)? {
                *slot = s;
            }
        }
        if let Some(v) = read("VERSION")? {
            t.version = v.trim().to_string();
        }
        Ok(t)
    }

    /// Writes the templates to `dir`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in
            TEMPLATE_FILES
                .iter()
                .zip([&self.system, &self.examples, &self.example, &self.ratings_guidance])
        {
            std::fs::write(dir.join(name), body)?;
        }
        std::fs::write(dir.join("VERSION"), format!("{}\n", self.version))
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{(\w+)\}\}").unwrap());

/// Single-pass substitution; substituted values are never rescanned.
pub fn render(template_name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    if let Some(c) = PLACEHOLDER
        .captures_iter(template)
        .find(|c| !values.iter().any(|(k, _)| *k == &c[1]))
    {
        return Err(PromptError::UnknownPlaceholder {
            template: template_name.into(),
            name: c[1].to_string(),
        });
    }
    Ok(PLACEHOLDER
        .replace_all(template, |c: &regex::Captures<'_>| {
            values
                .iter()
                .find(|(k, _)| *k == &c[1])
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        })
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub id: String,
    pub title: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingSummary>,
}

fn ratings_block(r: &RatingSummary) -> String {
    let mut out = format!("Ratings: overall {}, title {}\n", r.overall.as_str(), r.title.as_str());
    for s in &r.sentences {
        out.push_str(&format!(
            "Sentence {} ({}): {}\n",
            s.index + 1,
            s.rating.as_str(),
            s.text
        ));
    }
    out
}

/// The system prompt: guidelines, plus retrieved examples in rag mode and
/// rating guidance when `include_ratings` is set.
pub fn build_system_prompt(
    templates: &PromptTemplates,
    examples: &[PromptExample],
    include_ratings: bool,
    mode: PromptMode,
) -> Result<String, PromptError> {
    let mut out = render("system.txt", &templates.system, &[])?;
    if mode == PromptMode::Basic {
        return Ok(out);
    }
    if examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    if examples.len() > MAX_EXAMPLES {
        return Err(PromptError::TooManyExamples(examples.len()));
    }
    if include_ratings {
        out.push_str(&render("ratings_guidance.txt", &templates.ratings_guidance, &[])?);
    }
    let mut blocks = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let ratings = match (&e.ratings, include_ratings) {
            (Some(r), true) => ratings_block(r),
            _ => String::new(),
        };
        let id = (i + 1).to_string();
        blocks.push(render(
            "example.txt",
            &templates.example,
            &[
                ("id", &id),
                ("title", &e.title),
                ("content", &e.content),
                ("ratings", &ratings),
            ],
        )?);
    }
    let count = examples.len().to_string();
    out.push_str(&render(
        "examples.txt",
        &templates.examples,
        &[("count", &count), ("examples", &blocks.join("\n"))],
    )?);
    Ok(out)
}

/// The structured user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPayload {
    pub title: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingSummary>,
}

/// Checks that the request is masked and builds the user payload.
pub fn build_user_prompt(
    title: &str,
    content: &str,
    ratings: Option<&RatingSummary>,
    lexicon: &Lexicon,
) -> Result<UserPayload, PromptError> {
    let oov: Vec<String> = mask::out_of_vocabulary(title)
        .into_iter()
        .chain(mask::out_of_vocabulary(content))
        .map(String::from)
        .collect();
    if !oov.is_empty() {
        return Err(PromptError::OutOfVocabulary(oov));
    }
    if has_unmasked_credentials(title, lexicon) || has_unmasked_credentials(content, lexicon) {
        return Err(PromptError::UnmaskedCredentials);
    }
    Ok(UserPayload {
        title: title.to_string(),
        content: content.to_string(),
        ratings: ratings.cloned(),
    })
}

/// Everything sent to a completion provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: UserPayload,
    pub model: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Examples embedded in `system`, in retrieval order.
    #[serde(default)]
    pub examples: Vec<PromptExample>,
    pub templates_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum CompletionError {
    #[error("completion provider unavailable: {0}")]
    Unavailable(String),
    #[error("completion provider rejected the request: {0}")]
    Rejected(String),
}

impl CompletionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CompletionError::Unavailable(_))
    }
}

pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, CompletionError>;

    fn health(&self) -> Result<(), CompletionError> {
        Ok(())
    }
}

/// Renders a revision the way a well-behaved provider would.
pub fn fenced_reply(title: &str, content: &str) -> String {
    let obj = serde_json::json!({ "title": title, "content": content });
    format!(
        "Here is the revised request.\n```json\n{}\n```\n",
        serde_json::to_string_pretty(&obj).expect("strings serialize")
    )
}

/// Returns the user's request unchanged.
#[derive(Debug, Default, Clone)]
pub struct EchoProvider;

impl CompletionProvider for EchoProvider {
    fn name(&self) -> &str {
        "stub:echo"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, CompletionError> {
        Ok(Completion::text(fenced_reply(&bundle.user.title, &bundle.user.content)))
    }
}

/// Returns the first retrieved example, or echoes when there is none.
#[derive(Debug, Default, Clone)]
pub struct TopExampleProvider;

impl CompletionProvider for TopExampleProvider {
    fn name(&self) -> &str {
        "stub:top-example"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, CompletionError> {
        Ok(Completion::text(match bundle.examples.first() {
            Some(e) => fenced_reply(&e.title, &e.content),
            None => fenced_reply(&bundle.user.title, &bundle.user.content),
        }))
    }
}

/// Replays a fixed list of outcomes in order, repeating the last.
#[derive(Debug)]
pub struct ScriptedProvider {
    script: Vec<Result<String, CompletionError>>,
    next: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(script: Vec<Result<String, CompletionError>>) -> Self {
        assert!(!script.is_empty(), "script needs at least one entry");
        ScriptedProvider {
            script,
            next: AtomicUsize::new(0),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        ScriptedProvider::new(vec![Ok(text.into())])
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "stub:scripted"
    }

    fn complete(&self, _bundle: &PromptBundle) -> Result<Completion, CompletionError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst).min(self.script.len() - 1);
        self.script[i].clone().map(Completion::text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpCompletionConfig {
    pub base_url: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    model: &'a str,
    system: &'a str,
    user: &'a UserPayload,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// Client for the `POST /complete` contract.
pub struct HttpCompletionProvider {
    config: HttpCompletionConfig,
    name: String,
    agent: ureq::Agent,
    limiter: InFlightLimiter,
}

impl HttpCompletionProvider {
    pub fn new(config: HttpCompletionConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpCompletionProvider {
            name: format!("http:{}", config.base_url.trim_end_matches('/')),
            limiter: InFlightLimiter::new(config.max_in_flight),
            agent,
            config,
        }
    }
}

impl CompletionProvider for HttpCompletionProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<Completion, CompletionError> {
        let url = format!("{}/complete", self.config.base_url.trim_end_matches('/'));
        let body = CompleteRequest {
            model: &bundle.model,
            system: &bundle.system,
            user: &bundle.user,
            temperature: bundle.temperature,
            seed: bundle.seed,
        };
        let _permit = self.limiter.acquire();
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| CompletionError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(CompletionError::Unavailable(format!("{url}: HTTP {status}")));
        }
        if status >= 400 {
            return Err(CompletionError::Rejected(format!("{url}: HTTP {status}")));
        }
        let parsed: CompleteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| CompletionError::Rejected(format!("{url}: malformed response: {e}")))?;
        Ok(Completion {
            text: parsed.text,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON object with string title and content fields found")]
    NoObject,
    #[error("expected exactly one JSON object, found {0}")]
    MultipleObjects(usize),
}

/// Extracts `{title, content}` from provider output. Prose and code fences
/// around the object are tolerated; more than one top-level object is not.
pub fn parse_revision(raw: &str) -> Result<(String, String), ParseError> {
    let mut objects = Vec::new();
    let mut i = 0;
    while let Some(off) = raw[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(v @ serde_json::Value::Object(_))) => {
                objects.push(v);
                i = start + stream.byte_offset();
            }
            _ => i = start + 1,
        }
    }
    match objects.len() {
        0 => Err(ParseError::NoObject),
        1 => {
            let o = &objects[0];
            match (
                o.get("title").and_then(|v| v.as_str()),
                o.get("content").and_then(|v| v.as_str()),
            ) {
                (Some(t), Some(c)) => Ok((t.to_string(), c.to_string())),
                _ => Err(ParseError::NoObject),
            }
        }
        n => Err(ParseError::MultipleObjects(n)),
    }
}

static SALARY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\$\s?\d[\d,.]*\s?[km]?\b|\b\d[\d,.]*\s?(?:k|usd|dollars)\b").unwrap());
static YOE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b\d+(?:\.\d+)?\s*\+?\s*(?:years?|yrs?|yoe)\b").unwrap());

fn credential_shapes(text: &str) -> Vec<String> {
    SALARY
        .find_iter(text)
        .chain(YOE.find_iter(text))
        .map(|m| {
            m.as_str()
                .chars()
                .filter(|c| !c.is_whitespace())
                .collect::<String>()
                .to_lowercase()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    EmptyTitle,
    EmptyContent,
    OutOfVocabulary { tokens: Vec<String> },
    NewCredential { text: String },
}

/// Checks a revision against the original request.
pub fn validate_revision(original: &UserPayload, title: &str, content: &str) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    if title.trim().is_empty() {
        issues.push(ValidationIssue::EmptyTitle);
    }
    if content.trim().is_empty() {
        issues.push(ValidationIssue::EmptyContent);
    }
    let oov: Vec<String> = mask::out_of_vocabulary(title)
        .into_iter()
        .chain(mask::out_of_vocabulary(content))
        .map(String::from)
        .collect();
    if !oov.is_empty() {
        issues.push(ValidationIssue::OutOfVocabulary { tokens: oov });
    }
    let before = credential_shapes(&format!("{}\n{}", original.title, original.content));
    for shape in credential_shapes(&format!("{title}\n{content}")) {
        if !before.contains(&shape) {
            issues.push(ValidationIssue::NewCredential { text: shape });
        }
    }
    issues
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub title: String,
    pub content: String,
    pub provider: String,
    pub model: String,
    pub latency_ms: u64,
    pub attempts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReviseError {
    #[error("completion provider failed after {attempts} attempts: {message}")]
    Transport { message: String, attempts: usize },
    #[error("could not parse provider output: {reason}")]
    ParseFailure { raw: String, reason: String },
    #[error("provider output failed validation: {issues:?}")]
    Validation { raw: String, issues: Vec<ValidationIssue> },
}

impl ReviseError {
    pub fn raw(&self) -> Option<&str> {
        match self {
            ReviseError::ParseFailure { raw, .. } | ReviseError::Validation { raw, .. } => Some(raw),
            ReviseError::Transport { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after a parse or validation failure.
    pub validation_retries: usize,
    /// Extra attempts after a retryable transport failure.
    pub transport_retries: usize,
    /// First backoff delay; doubles on each transport retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            validation_retries: 2,
            transport_retries: 3,
            backoff_ms: 250,
        }
    }
}

fn complete_with_backoff(
    provider: &dyn CompletionProvider,
    bundle: &PromptBundle,
    policy: &RetryPolicy,
) -> Result<Completion, ReviseError> {
    let mut attempt = 0;
    loop {
        match provider.complete(bundle) {
            Ok(c) => return Ok(c),
            Err(e) if e.is_retryable() && attempt < policy.transport_retries => {
                let delay = policy.backoff_ms.saturating_mul(1 << attempt.min(16));
                log::warn!("{}: {e}; retrying in {delay} ms", provider.name());
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => {
                return Err(ReviseError::Transport {
                    message: e.to_string(),
                    attempts: attempt + 1,
                })
            }
        }
    }
}

/// Asks the provider for a revision of `bundle.user`, retrying failed
/// parses and validations.
pub fn revise(
    provider: &dyn CompletionProvider,
    bundle: &PromptBundle,
    policy: &RetryPolicy,
) -> Result<Revision, ReviseError> {
    let started = Instant::now();
    let mut last = None;
    for attempt in 0..=policy.validation_retries {
        let completion = complete_with_backoff(provider, bundle, policy)?;
        let raw = completion.text;
        let (title, content) = match parse_revision(&raw) {
            Ok(tc) => tc,
            Err(e) => {
                last = Some(ReviseError::ParseFailure {
                    raw,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let issues = validate_revision(&bundle.user, &title, &content);
        if !issues.is_empty() {
            last = Some(ReviseError::Validation { raw, issues });
            continue;
        }
        return Ok(Revision {
            title,
            content,
            provider: provider.name().to_string(),
            model: bundle.model.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: attempt + 1,
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
        });
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::{Rating, SentenceRating};

    fn example(i: usize) -> PromptExample {
        PromptExample {
            id: format!("e{i}"),
            title: format!("Example title {i}"),
            content: format!("Example content {i}."),
            ratings: Some(RatingSummary {
                overall: Rating::Strong,
                title: Rating::Moderate,
                sentences: vec![SentenceRating {
                    index: 0,
                    text: format!("Example content {i}."),
                    rating: Rating::Weak,
                }],
            }),
        }
    }

    fn bundle(user: UserPayload) -> PromptBundle {
        PromptBundle {
            system: String::new(),
            user,
            model: "m".into(),
            temperature: 0.0,
            seed: None,
            examples: vec![],
            templates_version: TEMPLATES_VERSION.into(),
        }
    }

    fn has_rating_words(s: &str) -> bool {
        let lower = s.to_lowercase();
        ["strong", "weak", "moderate"].iter().any(|w| lower.contains(w))
    }

    #[test]
    fn system_prompt_modes() {
        let t = PromptTemplates::default();
        let basic = build_system_prompt(&t, &[], true, PromptMode::Basic).unwrap();
        assert!(!basic.contains("<example"));
        assert!(!has_rating_words(&basic));
        assert!(basic.contains("false facts"));

        let ex: Vec<PromptExample> = (0..5).map(example).collect();
        let rag = build_system_prompt(&t, &ex, true, PromptMode::Rag).unwrap();
        let positions: Vec<usize> = (1..=5)
            .map(|i| rag.find(&format!("<example id=\"{i}\">")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rag.matches("</example>").count(), 5);
        assert!(rag.contains("Ratings: overall strong"));
        assert!(rag.contains("Do not copy"));

        let ablated = build_system_prompt(&t, &ex, false, PromptMode::Rag).unwrap();
        assert!(!has_rating_words(&ablated));
        assert!(matches!(
            build_system_prompt(&t, &[], false, PromptMode::Rag),
            Err(PromptError::NoExamples)
        ));
    }

    #[test]
    fn render_rejects_unknown_placeholders() {
        assert_eq!(render("t", "a {{x}} b", &[("x", "{{y}}")]).unwrap(), "a {{y}} b");
        assert!(render("t", "a {{z}}", &[]).is_err());
    }

    #[test]
    fn user_payload_checks() {
        let lex = Lexicon::new(Default::default()).unwrap();
        let p = build_user_prompt("Referral to [FIRM_NAME]", "I am a [ROLE].", None, &lex).unwrap();
        assert!(!serde_json::to_string(&p).unwrap().contains("ratings"));
        assert!(matches!(
            build_user_prompt("t", "I am a [SECRET]", None, &lex),
            Err(PromptError::OutOfVocabulary(_))
        ));
        assert!(matches!(
            build_user_prompt("t", "I am a software engineer in Seattle", None, &lex),
            Err(PromptError::UnmaskedCredentials)
        ));
        let r = example(0).ratings.unwrap();
        let with = build_user_prompt("t", "Body. More. End.", Some(&r), &lex).unwrap();
        assert_eq!(with.ratings.unwrap().sentences.len(), 1);
    }

    #[test]
    fn parser_tolerates_prose_but_not_two_objects() {
        assert_eq!(
            parse_revision("sure!\n```json\n{\"title\": \"a\", \"content\": \"b {x}\"}\n```\nbye").unwrap(),
            ("a".into(), "b {x}".into())
        );
        assert_eq!(parse_revision("no json here"), Err(ParseError::NoObject));
        assert_eq!(
            parse_revision("{\"title\":\"a\",\"content\":\"b\"} {\"title\":\"c\",\"content\":\"d\"}"),
            Err(ParseError::MultipleObjects(2))
        );
        assert_eq!(parse_revision("{\"title\":\"a\"}"), Err(ParseError::NoObject));
    }

    #[test]
    fn echo_round_trip_is_byte_identical() {
        let user = UserPayload {
            title: "T \"q\" \\ é".into(),
            content: "Line 1\nLine 2 [ROLE]".into(),
            ratings: None,
        };
        let rev = revise(&EchoProvider, &bundle(user.clone()), &RetryPolicy::default()).unwrap();
        assert_eq!((rev.title, rev.content), (user.title, user.content));
        assert_eq!(rev.attempts, 1);
    }

    #[test]
    fn validation_failures_are_typed_and_retried() {
        let user = UserPayload {
            title: "t".into(),
            content: "c".into(),
            ratings: None,
        };
        let stub = ScriptedProvider::fixed(fenced_reply("[SECRET] engineer", "c"));
        let err = revise(&stub, &bundle(user.clone()), &RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, ReviseError::Validation { .. }));
        assert!(err.raw().unwrap().contains("[SECRET]"));
        assert_eq!(stub.calls(), 3);

        let salary = ScriptedProvider::fixed(fenced_reply("t", "My TC is $200k with 8 years"));
        let err = revise(&salary, &bundle(user.clone()), &RetryPolicy::default()).unwrap_err();
        let ReviseError::Validation { issues, .. } = err else {
            panic!("expected validation failure")
        };
        assert_eq!(issues.len(), 2);

        let recovering = ScriptedProvider::new(vec![Ok("garbage".into()), Ok(fenced_reply("fine", "ok"))]);
        let rev = revise(&recovering, &bundle(user), &RetryPolicy::default()).unwrap();
        assert_eq!(rev.attempts, 2);
    }

    #[test]
    fn transport_retries_then_fails() {
        let user = UserPayload {
            title: "t".into(),
            content: "c".into(),
            ratings: None,
        };
        let fast = RetryPolicy {
            backoff_ms: 0,
            ..Default::default()
        };
        let down = ScriptedProvider::new(vec![Err(CompletionError::Unavailable("503".into()))]);
        let err = revise(&down, &bundle(user.clone()), &fast).unwrap_err();
        assert_eq!(
            err,
            ReviseError::Transport {
                message: "completion provider unavailable: 503".into(),
                attempts: 4
            }
        );
        assert_eq!(down.calls(), 4);

        let flaky = ScriptedProvider::new(vec![
            Err(CompletionError::Unavailable("503".into())),
            Ok(fenced_reply("t2", "c2")),
        ]);
        assert_eq!(revise(&flaky, &bundle(user.clone()), &fast).unwrap().title, "t2");
        assert_eq!(flaky.calls(), 2);

        let rejected = ScriptedProvider::new(vec![Err(CompletionError::Rejected("400".into()))]);
        assert!(matches!(
            revise(&rejected, &bundle(user), &fast),
            Err(ReviseError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn templates_load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = PromptTemplates::default();
        t.write_dir(dir.path()).unwrap();
        assert_eq!(PromptTemplates::load_dir(dir.path()).unwrap(), t);
        std::fs::write(dir.path().join("system.txt"), "Custom guidelines.\n").unwrap();
        std::fs::write(dir.path().join("VERSION"), "custom-2\n").unwrap();
        t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.system, "Custom guidelines.\n");
        assert_eq!(t.version, "custom-2");
        assert!(PromptTemplates::load_dir(&dir.path().join("missing")).is_err());
    }
}
