//! Synthetic forum corpus with a planted lexical signal, for tests and demos.
//!
//! Every request post mixes neutral sentences with "good" and "bad" signal
//! sentences. A post attracts an offer comment with probability
//! `sigmoid(base + gain · (good − bad))`, so a text model can recover the
//! signal while labels stay noisy.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Comment, Post};
use crate::io::{write_jsonl, ArtifactError};
use crate::model::sigmoid;

const TITLES: &[&str] = &[
    "Need a referral for Google",
    "Seeking referral at Amazon",
    "Looking for a referral to Meta",
    "Can anyone refer me to Microsoft?",
    "Referral request for Stripe",
    "Need a referral at Netflix",
    "Seeking a referral for Salesforce",
    "Looking for referrals at Uber",
    "Anyone willing to refer me to Airbnb?",
    "Referral for Nvidia please",
];

const ASKS: &[&str] = &[
    "Can anyone refer me for the open backend engineer role?",
    "I need a referral for a senior software engineer opening.",
    "Would anyone be willing to refer me to the data scientist team?",
    "Looking for a referral for the product manager position.",
    "Could someone refer me for a frontend developer role?",
    "Seeking a referral for an SRE position on the platform team.",
];

const BACKGROUND: &[&str] = &[
    "I am a software engineer in Seattle with 5 years of experience.",
    "Currently a junior developer in Austin with 2 years of experience.",
    "I work as a data engineer in New York and my current TC is $180k.",
    "I have 7 yoe mostly in distributed systems.",
    "I am a new grad from a state school based in Chicago.",
    "I have been a QA engineer in Boston for 4 years.",
    "Right now I am an L4 at a mid sized company in Denver.",
];

const NEUTRAL: &[&str] = &[
    "I have been following the team for a while.",
    "The role looks like a good match for my background.",
    "I applied through the careers page last week.",
    "My current team is going through a reorg.",
    "I am open to relocating if needed.",
    "Thanks for reading this post.",
    "I would like to learn more about the culture there.",
];

const GOOD: &[&str] = &[
    "I led the migration of our payments service and shipped it ahead of schedule.",
    "My resume and portfolio are linked in my profile.",
    "I mentored interns and wrote our onboarding guide.",
    "I reduced cloud spend substantially by redesigning our batch pipeline.",
    "Happy to share my resume and answer any questions over chat.",
    "I published an open source library that other teams adopted.",
    "I have tailored my application to the job description and can send it right away.",
];

const BAD: &[&str] = &[
    "Urgent please help!!",
    "Desperate at this point, anything works.",
    "Pls anyone?? been applying forever.",
    "Not sure what I want but any role is fine.",
    "I got rejected everywhere so hoping someone takes pity.",
    "Just refer me, no time to explain.",
];

const OFFERS: &[&str] = &[
    "Happy to help, DM me your resume.",
    "I can refer you, send me your resume.",
    "Feel free to DM, I'll refer you.",
    "Sent you a DM.",
];

const OTHER_COMMENTS: &[&str] = &[
    "Same here, also looking.",
    "Can I also DM for this?",
    "Good luck!",
    "Their hiring is slow right now.",
    "Me too, following.",
];

const CHATTER_TITLES: &[&str] = &[
    "How is the work life balance at Google?",
    "Thoughts on the new return to office policy",
    "Interview prep resources that worked for me",
    "Is it worth switching teams internally?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    /// Request posts; chatter posts are added on top.
    pub requests: usize,
    /// Share of extra posts that are not referral requests.
    pub chatter_fraction: f64,
    pub seed: u64,
    pub start: NaiveDate,
    pub days: i64,
    pub base: f64,
    pub gain: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            requests: 1200,
            chatter_fraction: 0.1,
            seed: 7,
            start: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            days: 730,
            base: -0.3,
            gain: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub id: String,
    pub good: usize,
    pub bad: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fixture {
    pub posts: Vec<Post>,
    pub comments: Vec<Comment>,
    pub truth: Vec<PlantedTruth>,
}

impl Fixture {
    /// Writes `posts.jsonl` and `comments.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<(), ArtifactError> {
        std::fs::create_dir_all(dir).map_err(|e| ArtifactError::io(dir, e))?;
        write_jsonl(&dir.join("posts.jsonl"), &self.posts)?;
        write_jsonl(&dir.join("comments.jsonl"), &self.comments)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn request_post(rng: &mut ChaCha8Rng, id: String, date: NaiveDate, cfg: &FixtureConfig) -> (Post, PlantedTruth) {
    let good = rng.random_range(0..=3usize);
    let bad = rng.random_range(0..=2usize);
    let mut sentences: Vec<&str> = vec![pick(rng, BACKGROUND)];
    for _ in 0..rng.random_range(0..=2usize) {
        sentences.push(pick(rng, NEUTRAL));
    }
    let mut goods: Vec<&str> = GOOD.choose_multiple(rng, good).copied().collect();
    let bads: Vec<&str> = BAD.choose_multiple(rng, bad).copied().collect();
    sentences.append(&mut goods);
    sentences.extend(bads);
    // Keep the background first and shuffle the rest.
    for i in (2..sentences.len()).rev() {
        let j = rng.random_range(1..=i);
        sentences.swap(i, j);
    }
    sentences.insert(0, pick(rng, ASKS));
    let probability = sigmoid(cfg.base + cfg.gain * (good as f64 - bad as f64));
    let post = Post {
        id: id.clone(),
        date,
        title: pick(rng, TITLES).to_string(),
        body: sentences.join(" "),
        author: format!("user{}", rng.random_range(0..100_000u32)),
        affiliation: None,
        views: rng.random_range(50..5000),
        likes: rng.random_range(0..40),
        comment_count: 0,
    };
    (
        post,
        PlantedTruth {
            id,
            good,
            bad,
            probability,
        },
    )
}

/// Deterministic for a given config.
pub fn generate(cfg: &FixtureConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chatter = (cfg.requests as f64 * cfg.chatter_fraction).round() as usize;
    let total = cfg.requests + chatter;
    let mut out = Fixture::default();
    let mut made_requests = 0;
    for i in 0..total {
        let id = format!("p{i:05}");
        let date = cfg.start + Duration::days(cfg.days * i as i64 / total.max(1) as i64);
        let is_request = made_requests < cfg.requests
            && (rng.random::<f64>() >= cfg.chatter_fraction || total - i <= cfg.requests - made_requests);
        let mut post = if is_request {
            made_requests += 1;
            let (post, truth) = request_post(&mut rng, id, date, cfg);
            let offered = rng.random::<f64>() < truth.probability;
            out.truth.push(truth);
            let mut k = 0;
            if offered {
                out.comments.push(Comment {
                    id: format!("{}-c{k}", post.id),
                    post_id: post.id.clone(),
                    body: pick(&mut rng, OFFERS).to_string(),
                    author: "helper".into(),
                    affiliation: None,
                    likes: 0,
                });
                k += 1;
            }
            for _ in 0..rng.random_range(0..=2usize) {
                out.comments.push(Comment {
                    id: format!("{}-c{k}", post.id),
                    post_id: post.id.clone(),
                    body: pick(&mut rng, OTHER_COMMENTS).to_string(),
                    author: "other".into(),
                    affiliation: None,
                    likes: 0,
                });
                k += 1;
            }
            post
        } else {
            Post {
                id,
                date,
                title: pick(&mut rng, CHATTER_TITLES).to_string(),
                body: pick(&mut rng, NEUTRAL).to_string(),
                author: "chatter".into(),
                affiliation: None,
                views: 10,
                likes: 0,
                comment_count: 0,
            }
        };
        post.comment_count = out.comments.iter().rev().take_while(|c| c.post_id == post.id).count() as u64;
        out.posts.push(post);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{label_and_assemble, Lexicon};
    use crate::mask;

    #[test]
    fn fixture_ingests_cleanly() {
        let cfg = FixtureConfig {
            requests: 300,
            ..Default::default()
        };
        let f = generate(&cfg);
        assert_eq!(f, generate(&cfg));
        assert_eq!(f.truth.len(), 300);
        let lex = Lexicon::new(Default::default()).unwrap();
        let a = label_and_assemble(&f.posts, &f.comments, &lex).unwrap();
        assert_eq!(a.requests.len(), 300);
        let positives = a.requests.iter().filter(|r| r.label).count();
        assert!(positives > 60 && positives < 240, "{positives}");
        for r in &a.requests {
            assert!(mask::is_clean(&r.masked_title) && mask::is_clean(&r.masked_body));
            assert!(!r.masked_body.chars().any(|c| c.is_ascii_digit()), "{}", r.masked_body);
            let lower = r.text().to_lowercase();
            assert!(!["strong", "weak", "moderate"].iter().any(|w| lower.contains(w)));
        }
    }
}
