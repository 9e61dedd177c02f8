//! Exemplar pools and few-shot selection.
//!
//! Two selection strategies produce the same shape of output, an AD-first
//! alternation `a1, h1, a2, h2, ..., ak, hk`:
//!
//! * `nested_random`: each class list (sorted by id) is shuffled with a
//!   stream keyed on `(seed, class)`, then the first `k` of each are
//!   interleaved. Growing `k` only appends, and the choice ignores the test
//!   transcript.
//! * `tfidf`: each class is ranked by TF-IDF cosine to the test transcript
//!   (ties by ascending id) and the top `k` are interleaved.
//!
//! Pool files hold one JSON object per exemplar:
//!
//! ```text
//! {"id":"S001","transcript_text":"...","label":"AD","mmse":18,"probability":0.79,"comment":null,"pool_kind":"mmse_proxy"}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::Transcript;
use crate::exec::Execution;
use crate::manifest::{Manifest, Split};
use crate::mmse::{proxy_probability, round_for_prompt, ClassLabel, MmseScore};
use crate::rng::class_stream;
use crate::tfidf::{cosine, SparseVec, TfIdf};

/// Comment length limit for generated exemplars, in whitespace-delimited tokens.
pub const MAX_COMMENT_TOKENS: usize = 100;

pub fn comment_tokens(comment: &str) -> usize {
    comment.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    MmseProxy,
    NoProxy,
    ReasoningAugmented,
}

impl PoolKind {
    /// Whether `p` sits on the correct side of 0.5 for `label`.
    /// Proxy pools allow exactly 0.5 for AD (MMSE 30); generated pools do not.
    pub fn probability_side_ok(self, label: ClassLabel, p: f64) -> bool {
        if !(0.0..=1.0).contains(&p) {
            return false;
        }
        match (self, label) {
            (_, ClassLabel::Hc) => p < 0.5,
            (PoolKind::ReasoningAugmented, ClassLabel::Ad) => p > 0.5,
            (_, ClassLabel::Ad) => p >= 0.5,
        }
    }

    fn rounds_probabilities(self) -> bool {
        !matches!(self, PoolKind::ReasoningAugmented)
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::MmseProxy => "mmse_proxy",
            PoolKind::NoProxy => "no_proxy",
            PoolKind::ReasoningAugmented => "reasoning_augmented",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub transcript_text: String,
    pub label: ClassLabel,
    #[serde(default)]
    pub mmse: Option<MmseScore>,
    pub probability: f64,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRecord {
    id: String,
    transcript_text: String,
    label: ClassLabel,
    #[serde(default)]
    mmse: Option<MmseScore>,
    probability: f64,
    #[serde(default)]
    comment: Option<String>,
    pool_kind: PoolKind,
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("cannot read pool {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("pool line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("pool line {line}: duplicate exemplar id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("pool line {line}: exemplar {id} ({label}) has probability {probability} on the wrong side of 0.5")]
    ProbabilitySide { line: usize, id: String, label: ClassLabel, probability: f64 },
    #[error("pool line {line}: exemplar {id} is {found}, pool is {expected}")]
    MixedKind { line: usize, id: String, expected: PoolKind, found: PoolKind },
    #[error("exemplar {id} belongs to the test split")]
    TestSplit { id: String },
    #[error("exemplar {id} is not in the manifest")]
    UnknownSubject { id: String },
    #[error("pool file is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("k = {k} exceeds the pool: {ad} AD and {hc} HC exemplars available")]
    KTooLarge { k: usize, ad: usize, hc: usize },
}

/// A validated, immutable pool. Both class lists are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPool {
    ad: Vec<Exemplar>,
    hc: Vec<Exemplar>,
    kind: PoolKind,
}

impl ExemplarPool {
    pub fn new(kind: PoolKind, exemplars: impl IntoIterator<Item = Exemplar>) -> Result<Self, PoolError> {
        let mut seen = HashSet::new();
        let (mut ad, mut hc) = (Vec::new(), Vec::new());
        for (i, e) in exemplars.into_iter().enumerate() {
            check_exemplar(kind, &e, i + 1, &mut seen)?;
            match e.label {
                ClassLabel::Ad => ad.push(e),
                ClassLabel::Hc => hc.push(e),
            }
        }
        ad.sort_by(|a, b| a.id.cmp(&b.id));
        hc.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(ExemplarPool { ad, hc, kind })
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn ad(&self) -> &[Exemplar] {
        &self.ad
    }

    pub fn hc(&self) -> &[Exemplar] {
        &self.hc
    }

    pub fn class(&self, label: ClassLabel) -> &[Exemplar] {
        match label {
            ClassLabel::Ad => &self.ad,
            ClassLabel::Hc => &self.hc,
        }
    }

    pub fn len(&self) -> usize {
        self.ad.len() + self.hc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `k` this pool supports.
    pub fn capacity(&self) -> usize {
        self.ad.len().min(self.hc.len())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ad.iter().chain(&self.hc).map(|e| e.id.as_str())
    }

    /// All exemplars sorted by id.
    pub fn sorted(&self) -> Vec<&Exemplar> {
        let mut all: Vec<&Exemplar> = self.ad.iter().chain(&self.hc).collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    /// The same exemplars retagged, e.g. a proxy pool reused for the no-proxy
    /// ablation.
    pub fn with_kind(&self, kind: PoolKind) -> Result<Self, PoolError> {
        ExemplarPool::new(kind, self.ad.iter().chain(&self.hc).cloned())
    }

    pub fn parse(text: &str) -> Result<Self, PoolError> {
        let mut kind: Option<PoolKind> = None;
        let mut seen = HashSet::new();
        let mut exemplars = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: PoolRecord =
                serde_json::from_str(raw).map_err(|e| PoolError::Schema { line, message: e.to_string() })?;
            let expected = *kind.get_or_insert(rec.pool_kind);
            if rec.pool_kind != expected {
                return Err(PoolError::MixedKind { line, id: rec.id, expected, found: rec.pool_kind });
            }
            let e = Exemplar {
                id: rec.id,
                transcript_text: rec.transcript_text,
                label: rec.label,
                mmse: rec.mmse,
                probability: rec.probability,
                comment: rec.comment,
            };
            check_exemplar(expected, &e, line, &mut seen)?;
            exemplars.push(e);
        }
        let kind = kind.ok_or(PoolError::Empty)?;
        ExemplarPool::new(kind, exemplars)
    }

    /// Serializes sorted by id. Proxy pools store probabilities at two decimals.
    pub fn to_jsonl(&self) -> String {
        self.sorted().into_iter().map(|e| self.record_line(e) + "\n").collect()
    }

    pub(crate) fn record_line(&self, e: &Exemplar) -> String {
        let probability =
            if self.kind.rounds_probabilities() { round_for_prompt(e.label, e.probability) } else { e.probability };
        let rec = PoolRecord {
            id: e.id.clone(),
            transcript_text: e.transcript_text.clone(),
            label: e.label,
            mmse: e.mmse,
            probability,
            comment: e.comment.clone(),
            pool_kind: self.kind,
        };
        serde_json::to_string(&rec).expect("pool record serializes")
    }

    /// Rejects exemplars whose subject is in the test split or missing from
    /// the manifest.
    pub fn check_split(&self, manifest: &Manifest) -> Result<(), PoolError> {
        for id in self.ids() {
            match manifest.get(id) {
                None => return Err(PoolError::UnknownSubject { id: id.to_string() }),
                Some(entry) if entry.split == Split::Test => return Err(PoolError::TestSplit { id: id.to_string() }),
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn tfidf_index(&self) -> TfIdfIndex<'_> {
        TfIdfIndex::new(self)
    }
}

fn check_exemplar(kind: PoolKind, e: &Exemplar, line: usize, seen: &mut HashSet<String>) -> Result<(), PoolError> {
    if e.id.trim().is_empty() {
        return Err(PoolError::Schema { line, message: "empty exemplar id".into() });
    }
    if e.transcript_text.trim().is_empty() {
        return Err(PoolError::Schema { line, message: format!("exemplar {} has an empty transcript", e.id) });
    }
    if !kind.probability_side_ok(e.label, e.probability) {
        return Err(PoolError::ProbabilitySide { line, id: e.id.clone(), label: e.label, probability: e.probability });
    }
    if kind == PoolKind::ReasoningAugmented {
        let n = e.comment.as_deref().map_or(0, comment_tokens);
        if n == 0 || n > MAX_COMMENT_TOKENS {
            return Err(PoolError::Schema {
                line,
                message: format!("exemplar {} needs a comment of 1..={MAX_COMMENT_TOKENS} tokens, has {n}", e.id),
            });
        }
    }
    if !seen.insert(e.id.clone()) {
        return Err(PoolError::DuplicateId { line, id: e.id.clone() });
    }
    Ok(())
}

/// Reads and validates a pool file; with a manifest, also enforces that every
/// exemplar is a train-split subject.
pub fn load_pool(path: impl AsRef<Path>, manifest: Option<&Manifest>) -> Result<ExemplarPool, PoolError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PoolError::Io { path: path.to_path_buf(), source })?;
    let pool = ExemplarPool::parse(&text)?;
    if let Some(m) = manifest {
        pool.check_split(m)?;
    }
    Ok(pool)
}

/// Outcome of building a proxy pool from transcripts.
#[derive(Debug)]
pub struct ProxyPoolBuild {
    pub pool: ExemplarPool,
    /// Train subjects left out because they have no MMSE or no label.
    pub skipped: Vec<String>,
}

/// Builds an `mmse_proxy` pool from the train-split transcripts.
pub fn make_proxy_pool(transcripts: &[Transcript]) -> Result<ProxyPoolBuild, PoolError> {
    let mut skipped = Vec::new();
    let mut exemplars = Vec::new();
    for t in transcripts.iter().filter(|t| t.split == Split::Train) {
        match (t.label, t.mmse) {
            (Some(label), Some(mmse)) if !t.text.trim().is_empty() => exemplars.push(Exemplar {
                id: t.subject_id.clone(),
                transcript_text: t.text.clone(),
                label,
                mmse: Some(mmse),
                probability: proxy_probability(label, mmse),
                comment: None,
            }),
            _ => skipped.push(t.subject_id.clone()),
        }
    }
    Ok(ProxyPoolBuild { pool: ExemplarPool::new(PoolKind::MmseProxy, exemplars)?, skipped })
}

/// Within-class orders for one seed.
pub fn seeded_shuffle(pool: &ExemplarPool, seed: u64) -> (Vec<&Exemplar>, Vec<&Exemplar>) {
    let mut ad: Vec<&Exemplar> = pool.ad.iter().collect();
    let mut hc: Vec<&Exemplar> = pool.hc.iter().collect();
    class_stream(seed, ClassLabel::Ad.as_str()).shuffle(&mut ad);
    class_stream(seed, ClassLabel::Hc.as_str()).shuffle(&mut hc);
    (ad, hc)
}

/// `[a1, h1, ..., ak, hk]` from two ordered class lists.
pub fn nested_interleave<'a>(
    ad: &[&'a Exemplar],
    hc: &[&'a Exemplar],
    k: usize,
) -> Result<Vec<&'a Exemplar>, SelectError> {
    if k > ad.len() || k > hc.len() {
        return Err(SelectError::KTooLarge { k, ad: ad.len(), hc: hc.len() });
    }
    Ok(ad[..k].iter().zip(&hc[..k]).flat_map(|(a, h)| [*a, *h]).collect())
}

/// TF-IDF model fitted on a pool's transcripts, with each exemplar's vector.
#[derive(Debug, Clone)]
pub struct TfIdfIndex<'a> {
    model: TfIdf,
    ad: Vec<(&'a Exemplar, SparseVec)>,
    hc: Vec<(&'a Exemplar, SparseVec)>,
}

/// Exemplars paired with their cosine similarity to a query.
pub type Scored<'a> = Vec<(&'a Exemplar, f64)>;

impl<'a> TfIdfIndex<'a> {
    pub fn new(pool: &'a ExemplarPool) -> Self {
        let docs: Vec<&str> = pool.ad.iter().chain(&pool.hc).map(|e| e.transcript_text.as_str()).collect();
        let model = TfIdf::fit(&docs);
        let vectors = |list: &'a [Exemplar]| -> Vec<(&'a Exemplar, SparseVec)> {
            list.iter().map(|e| (e, model.transform(&e.transcript_text))).collect()
        };
        let ad = vectors(&pool.ad);
        let hc = vectors(&pool.hc);
        TfIdfIndex { model, ad, hc }
    }

    /// Per-class exemplars with their similarity, best first.
    pub fn scored(&self, test_text: &str) -> (Scored<'a>, Scored<'a>) {
        let query = self.model.transform(test_text);
        let rank = |list: &[(&'a Exemplar, SparseVec)]| {
            let mut scored: Vec<(&'a Exemplar, f64)> = list.iter().map(|(e, v)| (*e, cosine(&query, v))).collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.id.cmp(&b.0.id))
            });
            scored
        };
        (rank(&self.ad), rank(&self.hc))
    }

    pub fn rank(&self, test_text: &str) -> (Vec<&'a Exemplar>, Vec<&'a Exemplar>) {
        let (ad, hc) = self.scored(test_text);
        (ad.into_iter().map(|(e, _)| e).collect(), hc.into_iter().map(|(e, _)| e).collect())
    }

    /// Ranks many test transcripts at once.
    pub fn rank_batch(&self, texts: &[&str], exec: Execution) -> Vec<(Vec<&'a Exemplar>, Vec<&'a Exemplar>)> {
        exec.map(texts, |t| self.rank(t))
    }
}

/// Per-class ranking by TF-IDF cosine to `test_text`.
pub fn tfidf_rank<'a>(pool: &'a ExemplarPool, test_text: &str) -> (Vec<&'a Exemplar>, Vec<&'a Exemplar>) {
    TfIdfIndex::new(pool).rank(test_text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NestedRandom,
    Tfidf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    /// Exemplars per class.
    pub k: usize,
    pub seed: u64,
}

pub fn select<'a>(
    pool: &'a ExemplarPool,
    plan: SelectionPlan,
    test_text: &str,
) -> Result<Vec<&'a Exemplar>, SelectError> {
    if plan.k == 0 {
        return Ok(Vec::new());
    }
    let (ad, hc) = match plan.strategy {
        Strategy::NestedRandom => seeded_shuffle(pool, plan.seed),
        Strategy::Tfidf => tfidf_rank(pool, test_text),
    };
    nested_interleave(&ad, &hc, plan.k)
}
