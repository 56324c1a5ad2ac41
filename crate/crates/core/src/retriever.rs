//! Exemplar index over successful requests and the thresholded nearest-
//! neighbour query used to pick rewriting examples.
//!
//! Build: score and embed successful training requests, drop the top and
//! bottom 3% by predicted p, keep the best 10% of the rest, and cluster the
//! unit embeddings with spherical k-means.
//!
//! Query: with the query's own p and the pool maximum `p_max`, only entries
//! with `p ≥ p + (p_max − p)/2` are eligible; the top-k of those by cosine
//! similarity are returned. Clusters are visited nearest first and skipped
//! only when an angular bound proves none of their members can enter the
//! current top-k, so the answer always equals an exhaustive scan.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ReferralRequest;
use crate::encoders::{cosine, EmbedError, EmbeddingProvider};
use crate::io::{read_json, write_json, ArtifactError};
use crate::ratings::RatingSummary;
use crate::reward::{RewardError, RewardModel};
use crate::text::request_text;

pub const INDEX_MAGIC: &[u8; 4] = b"RFIX";
pub const INDEX_VERSION: u32 = 1;
pub const INDEX_META_FORMAT: &str = "referral-forge/index-meta/1";
pub const INDEX_BIN: &str = "index.bin";
pub const INDEX_META: &str = "index_meta.json";

/// Slack added to the pruning bound to absorb rounding in `acos`.
const BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("only {survivors} requests survive trimming; at least {min} are needed")]
    TooFewSurvivors { survivors: usize, min: usize },
    #[error("request {id:?} has a zero or non-finite embedding")]
    BadEmbedding { id: String },
    #[error("embedding dimension {got} differs from the index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Fraction dropped from each end of the p ranking.
    pub trim_fraction: f64,
    /// Fraction of the trimmed pool kept, from the top.
    pub keep_fraction: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub min_entries: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            trim_fraction: 0.03,
            keep_fraction: 0.10,
            seed: 0,
            max_iter: 25,
            min_entries: 5,
        }
    }
}

/// (after trimming, indexed) sizes for `n` candidates.
pub fn index_sizes(n: usize, cfg: &IndexConfig) -> (usize, usize) {
    let trim = (n as f64 * cfg.trim_fraction).round() as usize;
    let remaining = n.saturating_sub(2 * trim);
    let keep = ((remaining as f64 * cfg.keep_fraction).round() as usize).min(remaining);
    (remaining, keep)
}

/// A successful request with its predicted p and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub title: String,
    pub body: String,
    pub p: f64,
    pub embedding: Vec<f64>,
}

/// Scores and embeds the successful requests among `requests`.
pub fn prepare_candidates(
    requests: &[&ReferralRequest],
    reward: &RewardModel,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<Candidate>, RetrieverError> {
    let skipped = requests.iter().filter(|r| !r.label).count();
    if skipped > 0 {
        log::info!("index: skipping {skipped} unsuccessful requests");
    }
    requests
        .par_iter()
        .filter(|r| r.label)
        .map(|r| {
            let p = reward.score(&r.masked_title, &r.masked_body)?;
            let e = embedder.embed(&request_text(&r.masked_title, &r.masked_body))?;
            Ok(Candidate {
                id: r.id.clone(),
                title: r.masked_title.clone(),
                body: r.masked_body.clone(),
                p,
                embedding: e.values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub title: String,
    pub body: String,
    pub p: f64,
    #[serde(skip)]
    pub embedding: Vec<f64>,
    #[serde(skip)]
    pub cluster: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format: String,
    pub config: IndexConfig,
    pub candidates: usize,
    pub after_trim: usize,
    pub clusters: usize,
    pub dim: usize,
    pub p_max: f64,
    pub embedder: String,
    pub encoder_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub meta: IndexMeta,
    pub entries: Vec<IndexEntry>,
    pub centroids: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
    /// Largest angle between a centroid and any of its members.
    radius: Vec<f64>,
    cluster_p_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExample {
    pub id: String,
    pub title: String,
    pub body: String,
    pub p: f64,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQueryResult {
    pub p: f64,
    pub threshold: f64,
    pub p_max: f64,
    pub examples: Vec<RetrievedExample>,
    /// Set when fewer than the requested number of examples were eligible.
    pub insufficient: bool,
    pub clusters_scanned: usize,
}

/// Eligibility threshold `p + (p_max − p)/2`; a query above `p_max` keeps
/// its own p as the threshold.
pub fn eligibility_threshold(p: f64, p_max: f64) -> f64 {
    p + (p_max - p).max(0.0) / 2.0
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

fn angle(c: f64) -> f64 {
    c.clamp(-1.0, 1.0).acos()
}

/// Spherical k-means with k-means++ seeding on cosine distance. Returns the
/// non-empty centroids and each point's cluster.
fn spherical_kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (1.0 - cosine(p, &centroids[0])).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().map(|d| d * d).sum();
        if total <= 1e-12 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in dist.iter().enumerate() {
            r -= d * d;
            if r <= 0.0 && *d > 0.0 {
                pick = i;
                break;
            }
        }
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((1.0 - cosine(p, c)).max(0.0));
        }
    }

    let nearest = |p: &[f64], cs: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, c) in cs.iter().enumerate() {
            let s = cosine(p, c);
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        best
    };
    let mut assign: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        for (p, &a) in points.iter().zip(&assign) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if let Some(u) = unit(s) {
                *c = u;
            }
        }
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    // Drop empty clusters and renumber.
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (j, c) in centroids.into_iter().enumerate() {
        if assign.contains(&j) {
            remap[j] = kept.len();
            kept.push(c);
        }
    }
    let assign = assign.into_iter().map(|a| remap[a]).collect();
    (kept, assign)
}

/// Whether `(sa, ida)` ranks ahead of `(sb, idb)`: higher similarity first,
/// then ascending id.
fn ranks_before(sa: f64, ida: &str, sb: f64, idb: &str) -> bool {
    sa > sb || (sa == sb && ida < idb)
}

struct TopK<'a> {
    k: usize,
    items: Vec<(f64, usize)>,
    entries: &'a [IndexEntry],
}

impl<'a> TopK<'a> {
    fn new(k: usize, entries: &'a [IndexEntry]) -> Self {
        TopK {
            k,
            items: Vec::with_capacity(k + 1),
            entries,
        }
    }

    fn offer(&mut self, score: f64, idx: usize) {
        if self.k == 0 {
            return;
        }
        let id = self.entries[idx].id.as_str();
        let pos = self
            .items
            .iter()
            .position(|&(s, j)| ranks_before(score, id, s, &self.entries[j].id))
            .unwrap_or(self.items.len());
        if pos < self.k {
            self.items.insert(pos, (score, idx));
            self.items.truncate(self.k);
        }
    }

    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }
}

impl RetrievalIndex {
    pub fn build(
        candidates: Vec<Candidate>,
        cfg: &IndexConfig,
        embedder: &str,
        encoder_id: &str,
    ) -> Result<RetrievalIndex, RetrieverError> {
        let n = candidates.len();
        let (after_trim, keep) = index_sizes(n, cfg);
        if keep < cfg.min_entries {
            return Err(RetrieverError::TooFewSurvivors {
                survivors: keep,
                min: cfg.min_entries,
            });
        }
        let mut ranked = candidates;
        ranked.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| a.id.cmp(&b.id)));
        let trim = (n - after_trim) / 2;
        let chosen: Vec<Candidate> = ranked.into_iter().skip(trim).take(keep).collect();

        let dim = chosen[0].embedding.len();
        let mut units = Vec::with_capacity(keep);
        for c in &chosen {
            if c.embedding.len() != dim {
                return Err(RetrieverError::DimensionMismatch {
                    expected: dim,
                    got: c.embedding.len(),
                });
            }
            if c.embedding.iter().any(|v| !v.is_finite()) {
                return Err(RetrieverError::BadEmbedding { id: c.id.clone() });
            }
            units.push(unit(&c.embedding).ok_or_else(|| RetrieverError::BadEmbedding { id: c.id.clone() })?);
        }
        let k = ((keep as f64).sqrt().round() as usize).max(1);
        let (centroids, assign) = spherical_kmeans(&units, k, cfg.seed, cfg.max_iter);

        let entries: Vec<IndexEntry> = chosen
            .into_iter()
            .zip(units)
            .zip(&assign)
            .map(|((c, e), &a)| IndexEntry {
                id: c.id,
                title: c.title,
                body: c.body,
                p: c.p,
                embedding: e,
                cluster: a,
                ratings: None,
            })
            .collect();
        let p_max = entries.iter().map(|e| e.p).fold(f64::NEG_INFINITY, f64::max);
        let meta = IndexMeta {
            format: INDEX_META_FORMAT.to_string(),
            config: *cfg,
            candidates: n,
            after_trim,
            clusters: centroids.len(),
            dim,
            p_max,
            embedder: embedder.to_string(),
            encoder_id: encoder_id.to_string(),
        };
        Ok(Self::assemble(meta, entries, centroids))
    }

    fn assemble(meta: IndexMeta, entries: Vec<IndexEntry>, centroids: Vec<Vec<f64>>) -> RetrievalIndex {
        let k = centroids.len();
        let mut members = vec![Vec::new(); k];
        let mut radius = vec![0.0f64; k];
        let mut cluster_p_max = vec![f64::NEG_INFINITY; k];
        for (i, e) in entries.iter().enumerate() {
            members[e.cluster].push(i);
            radius[e.cluster] = radius[e.cluster].max(angle(cosine(&e.embedding, &centroids[e.cluster])));
            cluster_p_max[e.cluster] = cluster_p_max[e.cluster].max(e.p);
        }
        RetrievalIndex {
            meta,
            entries,
            centroids,
            members,
            radius,
            cluster_p_max,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn p_max(&self) -> f64 {
        self.meta.p_max
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    fn example(&self, score: f64, idx: usize) -> RetrievedExample {
        let e = &self.entries[idx];
        RetrievedExample {
            id: e.id.clone(),
            title: e.title.clone(),
            body: e.body.clone(),
            p: e.p,
            similarity: score,
            ratings: e.ratings.clone(),
        }
    }

    fn finish(&self, p: f64, threshold: f64, k: usize, top: TopK<'_>, scanned: usize) -> RetrievalQueryResult {
        let examples: Vec<RetrievedExample> = top.items.iter().map(|&(s, i)| self.example(s, i)).collect();
        RetrievalQueryResult {
            p,
            threshold,
            p_max: self.meta.p_max,
            insufficient: examples.len() < k,
            examples,
            clusters_scanned: scanned,
        }
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), RetrieverError> {
        if q.len() != self.meta.dim {
            return Err(RetrieverError::DimensionMismatch {
                expected: self.meta.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Top-`k` eligible entries for a query with predicted `p` and
    /// embedding `query`, using cluster pruning.
    pub fn search(&self, p: f64, query: &[f64], k: usize) -> Result<RetrievalQueryResult, RetrieverError> {
        self.check_dim(query)?;
        let q = unit(query).unwrap_or_else(|| vec![0.0; query.len()]);
        let t = eligibility_threshold(p, self.meta.p_max);
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(c, cen)| (cosine(&q, cen), c))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut top = TopK::new(k, &self.entries);
        let mut scanned = 0;
        for (cs, c) in order {
            if self.cluster_p_max[c] < t {
                continue;
            }
            if let Some(worst) = top.worst() {
                let gap = (angle(cs) - self.radius[c]).max(0.0);
                if gap.cos() + BOUND_SLACK < worst {
                    continue;
                }
            }
            scanned += 1;
            for &i in &self.members[c] {
                let e = &self.entries[i];
                if e.p >= t {
                    top.offer(cosine(&q, &e.embedding), i);
                }
            }
        }
        let result = self.finish(p, t, k, top, scanned);
        if result.insufficient {
            log::debug!(
                "retrieval: {} of {k} eligible examples at threshold {t}",
                result.examples.len()
            );
        }
        Ok(result)
    }

    /// Reference answer: scores every eligible entry.
    pub fn search_exhaustive(&self, p: f64, query: &[f64], k: usize) -> Result<RetrievalQueryResult, RetrieverError> {
        self.check_dim(query)?;
        let q = unit(query).unwrap_or_else(|| vec![0.0; query.len()]);
        let t = eligibility_threshold(p, self.meta.p_max);
        let mut top = TopK::new(k, &self.entries);
        for (i, e) in self.entries.iter().enumerate() {
            if e.p >= t {
                top.offer(cosine(&q, &e.embedding), i);
            }
        }
        Ok(self.finish(p, t, k, top, self.centroids.len()))
    }

    /// Scores and embeds a request, then searches.
    pub fn query(
        &self,
        title: &str,
        body: &str,
        reward: &RewardModel,
        embedder: &dyn EmbeddingProvider,
        k: usize,
    ) -> Result<RetrievalQueryResult, RetrieverError> {
        let p = reward.score(title, body)?;
        let e = embedder.embed(&request_text(title, body))?;
        self.search(p, &e.values, k)
    }

    /// Stores ratings on matching entries. Entries without a rating keep
    /// whatever they had; their ids are returned.
    pub fn attach_ratings(&mut self, ratings: &HashMap<String, RatingSummary>) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &mut self.entries {
            match ratings.get(&e.id) {
                Some(r) => e.ratings = Some(r.clone()),
                None => missing.push(e.id.clone()),
            }
        }
        if !missing.is_empty() {
            log::warn!("{} indexed entries have no ratings", missing.len());
        }
        missing
    }

    /// Writes `index.bin` and `index_meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RetrieverError> {
        std::fs::create_dir_all(dir).map_err(|e| ArtifactError::io(dir, e))?;
        let bin = dir.join(INDEX_BIN);
        let mut w = BufWriter::new(File::create(&bin).map_err(|e| ArtifactError::io(&bin, e))?);
        self.write_bin(&mut w).map_err(|e| ArtifactError::io(&bin, e))?;
        w.flush().map_err(|e| ArtifactError::io(&bin, e))?;
        write_json(
            &dir.join(INDEX_META),
            &MetaFile {
                meta: self.meta.clone(),
                entries: self.entries.clone(),
            },
        )?;
        Ok(())
    }

    fn write_bin(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.meta.dim as u32)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        w.write_u32::<LittleEndian>(self.centroids.len() as u32)?;
        w.write_u64::<LittleEndian>(self.meta.config.seed)?;
        w.write_f64::<LittleEndian>(self.meta.p_max)?;
        for c in &self.centroids {
            for &v in c {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for e in &self.entries {
            w.write_f64::<LittleEndian>(e.p)?;
            w.write_u32::<LittleEndian>(e.cluster as u32)?;
            for &v in &e.embedding {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RetrievalIndex, RetrieverError> {
        let MetaFile { meta, mut entries } = read_json(&dir.join(INDEX_META))?;
        if meta.format != INDEX_META_FORMAT {
            return Err(RetrieverError::Corrupt(format!(
                "unsupported metadata format {:?}",
                meta.format
            )));
        }
        let bin = dir.join(INDEX_BIN);
        let mut r = BufReader::new(File::open(&bin).map_err(|e| ArtifactError::io(&bin, e))?);
        let corrupt = |e: std::io::Error| RetrieverError::Corrupt(format!("{}: {e}", bin.display()));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrieverError::Corrupt("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != INDEX_VERSION {
            return Err(RetrieverError::Corrupt(format!("unsupported index version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let n = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let k = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let _seed = r.read_u64::<LittleEndian>().map_err(corrupt)?;
        let p_max = r.read_f64::<LittleEndian>().map_err(corrupt)?;
        if dim != meta.dim || n != entries.len() || k != meta.clusters || p_max.to_bits() != meta.p_max.to_bits() {
            return Err(RetrieverError::Corrupt(
                "index.bin header disagrees with index_meta.json".into(),
            ));
        }
        let read_vec = |r: &mut BufReader<File>| -> Result<Vec<f64>, RetrieverError> {
            let mut v = vec![0.0; dim];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(corrupt)?;
            Ok(v)
        };
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            centroids.push(read_vec(&mut r)?);
        }
        for e in &mut entries {
            e.p = r.read_f64::<LittleEndian>().map_err(corrupt)?;
            e.cluster = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            if e.cluster >= k {
                return Err(RetrieverError::Corrupt(format!(
                    "entry {} has cluster {} of {k}",
                    e.id, e.cluster
                )));
            }
            e.embedding = read_vec(&mut r)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(corrupt)?;
        if !rest.is_empty() {
            return Err(RetrieverError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self::assemble(meta, entries, centroids))
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: IndexMeta,
    entries: Vec<IndexEntry>,
}

/// Example lookup as seen by the workflow.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, p: f64, embedding: &[f64], k: usize) -> Result<RetrievalQueryResult, RetrieverError>;
}

impl Retriever for RetrievalIndex {
    fn retrieve(&self, p: f64, embedding: &[f64], k: usize) -> Result<RetrievalQueryResult, RetrieverError> {
        self.search(p, embedding, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::Rating;

    fn candidates(n: usize, dim: usize, seed: u64) -> Vec<Candidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Candidate {
                id: format!("r{i:05}"),
                title: format!("title {i}"),
                body: String::new(),
                p: rng.random(),
                embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn size_arithmetic() {
        assert_eq!(index_sizes(1000, &IndexConfig::default()), (940, 94));
        let idx = RetrievalIndex::build(candidates(1000, 8, 1), &IndexConfig::default(), "e", "m").unwrap();
        assert_eq!(idx.len(), 94);
        assert_eq!(idx.meta.clusters, 10);
    }

    #[test]
    fn too_few_survivors() {
        let err = RetrievalIndex::build(candidates(40, 4, 1), &IndexConfig::default(), "e", "m").unwrap_err();
        assert!(matches!(err, RetrieverError::TooFewSurvivors { survivors: 4, .. }));
    }

    #[test]
    fn kept_entries_dominate_excluded_remainder() {
        let cands = candidates(500, 6, 2);
        let idx = RetrievalIndex::build(cands.clone(), &IndexConfig::default(), "e", "m").unwrap();
        let kept: std::collections::HashSet<&str> = idx.entries.iter().map(|e| e.id.as_str()).collect();
        let mut sorted = cands.clone();
        sorted.sort_by(|a, b| b.p.total_cmp(&a.p));
        let trim = 15;
        let min_kept = idx.entries.iter().map(|e| e.p).fold(f64::INFINITY, f64::min);
        for c in &sorted[trim..sorted.len() - trim] {
            if !kept.contains(c.id.as_str()) {
                assert!(c.p <= min_kept);
            }
        }
        // The trimmed top never gets in.
        for c in &sorted[..trim] {
            assert!(!kept.contains(c.id.as_str()));
        }
    }

    #[test]
    fn identical_embeddings_share_one_centroid() {
        let mut c = candidates(200, 5, 3);
        for x in &mut c {
            x.embedding = vec![1.0, 2.0, 0.0, 0.0, 1.0];
        }
        let idx = RetrievalIndex::build(c, &IndexConfig::default(), "e", "m").unwrap();
        assert_eq!(idx.centroids.len(), 1);
        assert!(idx.entries.iter().all(|e| e.cluster == 0));
    }

    #[test]
    fn threshold_arithmetic() {
        assert!((eligibility_threshold(0.4, 0.8) - 0.6).abs() < 1e-15);
        assert_eq!(eligibility_threshold(0.8, 0.8), 0.8);
        assert_eq!(eligibility_threshold(0.9, 0.8), 0.9);
    }

    #[test]
    fn pruned_search_matches_exhaustive() {
        let idx = RetrievalIndex::build(candidates(3000, 16, 4), &IndexConfig::default(), "e", "m").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = rng.random::<f64>();
            let a = idx.search(p, &q, 5).unwrap();
            let b = idx.search_exhaustive(p, &q, 5).unwrap();
            assert_eq!(a.examples, b.examples);
            assert!(a.examples.iter().all(|e| e.p >= a.threshold));
        }
    }

    #[test]
    fn query_at_pool_max_gets_only_maximal_entries() {
        let idx = RetrievalIndex::build(candidates(300, 4, 5), &IndexConfig::default(), "e", "m").unwrap();
        let r = idx.search(idx.p_max(), &[1.0, 0.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(r.examples.len(), 1);
        assert_eq!(r.examples[0].p, idx.p_max());
        assert!(r.insufficient);
        let none = idx.search(idx.p_max() + 0.01, &[1.0, 0.0, 0.0, 0.0], 5).unwrap();
        assert!(none.examples.is_empty() && none.insufficient);
    }

    #[test]
    fn ratings_attach_idempotently_and_round_trip() {
        let mut idx = RetrievalIndex::build(candidates(200, 4, 6), &IndexConfig::default(), "e", "m").unwrap();
        let before = idx.clone();
        assert_eq!(idx.attach_ratings(&HashMap::new()).len(), idx.len());
        assert_eq!(idx, before);

        let summary = RatingSummary {
            overall: Rating::Strong,
            title: Rating::Moderate,
            sentences: vec![],
        };
        let map: HashMap<String, RatingSummary> = idx
            .entries
            .iter()
            .take(3)
            .map(|e| (e.id.clone(), summary.clone()))
            .collect();
        idx.attach_ratings(&map);
        let once = idx.clone();
        idx.attach_ratings(&map);
        assert_eq!(idx, once);

        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = RetrievalIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.entries.iter().filter(|e| e.ratings.is_some()).count(), 3);
    }

    #[test]
    fn load_rejects_corruption() {
        let idx = RetrievalIndex::build(candidates(200, 4, 7), &IndexConfig::default(), "e", "m").unwrap();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let bin = dir.path().join(INDEX_BIN);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            RetrievalIndex::load(dir.path()),
            Err(RetrieverError::Corrupt(_))
        ));
        assert!(matches!(
            RetrievalIndex::load(&dir.path().join("nowhere")),
            Err(RetrieverError::Artifact(ArtifactError::NotFound { .. }))
        ));
    }
}
