//! One-time construction of the reasoning-augmented pool.
//!
//! Each train subject becomes a [`GenerationTask`]: the picture, the
//! transcript, the MMSE score and the confirmed label go to a multimodal
//! backend, which answers with the three-field verdict. Answers are checked
//! against [`GeneratedExemplarConstraints`]; rejected answers are retried
//! with a note naming the problems, and tasks that never pass are reported
//! as unfilled. Accepted exemplars are frozen to a pool file plus a digest.
//!
//! The picture and MMSE are used here only. Evaluation prompts never see
//! them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::Transcript;
use crate::exec::Execution;
use crate::llm::{sha256_hex, LlmClient, LlmError, SamplingParams};
use crate::manifest::Split;
use crate::mmse::{mmse_band, ClassLabel, MmseBand, MmseScore};
use crate::pool::{comment_tokens, Exemplar, ExemplarPool, PoolError, PoolKind, MAX_COMMENT_TOKENS};
use crate::prompt::{Message, Role};
use crate::verdict::{parse_verdict_with, Prediction, Requirements, Verdict};

/// Generation instruction template, version 1.
pub const GENERATION_V1: &str = include_str!("../resources/generation_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTask {
    pub subject_id: String,
    pub transcript_text: String,
    pub mmse: MmseScore,
    pub label: ClassLabel,
    pub image_path: PathBuf,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("subject {0} is in the test split and cannot seed a pool")]
    TestSplit(String),
    #[error("subject {0} has no MMSE score")]
    MissingMmse(String),
    #[error("subject {0} has no diagnosis label")]
    MissingLabel(String),
    #[error("subject {0} has an empty transcript")]
    EmptyTranscript(String),
    #[error("image {0} does not exist")]
    ImageMissing(PathBuf),
}

impl GenerationTask {
    pub fn from_transcript(t: &Transcript, image_path: &Path) -> Result<Self, TaskError> {
        if t.split != Split::Train {
            return Err(TaskError::TestSplit(t.subject_id.clone()));
        }
        let mmse = t.mmse.ok_or_else(|| TaskError::MissingMmse(t.subject_id.clone()))?;
        let label = t.label.ok_or_else(|| TaskError::MissingLabel(t.subject_id.clone()))?;
        if t.text.trim().is_empty() {
            return Err(TaskError::EmptyTranscript(t.subject_id.clone()));
        }
        Ok(GenerationTask {
            subject_id: t.subject_id.clone(),
            transcript_text: t.text.clone(),
            mmse,
            label,
            image_path: image_path.to_path_buf(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratedExemplarConstraints {
    pub max_comment_tokens: usize,
    pub prediction_must_match_label: bool,
}

impl Default for GeneratedExemplarConstraints {
    fn default() -> Self {
        GeneratedExemplarConstraints { max_comment_tokens: MAX_COMMENT_TOKENS, prediction_must_match_label: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Unparsable { reason: String },
    PredictionMismatch { expected: Prediction, found: Prediction },
    ProbabilitySide { probability: f64 },
    MissingProbability,
    EmptyComment,
    CommentTooLong { tokens: usize, max: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Unparsable { reason } => write!(f, "output is not a valid verdict ({reason})"),
            Violation::PredictionMismatch { expected, found } => {
                write!(f, "alzheimers_prediction must be {expected}, got {found}")
            }
            Violation::ProbabilitySide { probability } => {
                write!(f, "probability_score {probability} is on the wrong side of 0.5")
            }
            Violation::MissingProbability => f.write_str("probability_score is missing"),
            Violation::EmptyComment => f.write_str("comment is empty"),
            Violation::CommentTooLong { tokens, max } => write!(f, "comment has {tokens} words, limit is {max}"),
        }
    }
}

fn prediction_for(label: ClassLabel) -> Prediction {
    match label {
        ClassLabel::Ad => Prediction::Yes,
        ClassLabel::Hc => Prediction::No,
    }
}

/// Messages for one generation request plus the image to attach to the
/// last user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub messages: Vec<Message>,
    pub image_path: PathBuf,
}

fn band_table() -> String {
    MmseBand::ALL
        .iter()
        .map(|b| {
            let (lo, hi) = b.range();
            if lo == hi {
                format!("- {lo}: {}", b.name())
            } else {
                format!("- {lo}-{hi}: {}", b.name())
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generation_instruction(label: ClassLabel, constraints: &GeneratedExemplarConstraints) -> String {
    let side_rule = match label {
        ClassLabel::Ad => "strictly greater than 0.5",
        ClassLabel::Hc => "strictly less than 0.5",
    };
    GENERATION_V1
        .replace("{max_comment_tokens}", &constraints.max_comment_tokens.to_string())
        .replace("{prediction}", prediction_for(label).as_str())
        .replace("{side_rule}", side_rule)
        .replace("{band_table}", &band_table())
}

pub fn build_generation_prompt(
    task: &GenerationTask,
    constraints: &GeneratedExemplarConstraints,
) -> Result<GenerationPrompt, TaskError> {
    if !task.image_path.is_file() {
        return Err(TaskError::ImageMissing(task.image_path.clone()));
    }
    let user = format!(
        "Diagnosis: {}\nMMSE score: {} ({})\n\nTranscript:\n{}",
        task.label,
        task.mmse,
        mmse_band(task.mmse).name(),
        task.transcript_text
    );
    Ok(GenerationPrompt {
        messages: vec![
            Message::new(Role::System, generation_instruction(task.label, constraints)),
            Message::new(Role::User, user),
        ],
        image_path: task.image_path.clone(),
    })
}

/// Checks a parsed verdict against the task. Every violated rule is listed.
pub fn validate_generated(
    verdict: &Verdict,
    task: &GenerationTask,
    constraints: &GeneratedExemplarConstraints,
) -> Result<Exemplar, Vec<Violation>> {
    let mut violations = Vec::new();
    let expected = prediction_for(task.label);
    if constraints.prediction_must_match_label && verdict.prediction != expected {
        violations.push(Violation::PredictionMismatch { expected, found: verdict.prediction });
    }
    match verdict.probability {
        None => violations.push(Violation::MissingProbability),
        Some(p) if !PoolKind::ReasoningAugmented.probability_side_ok(task.label, p) => {
            violations.push(Violation::ProbabilitySide { probability: p })
        }
        Some(_) => {}
    }
    let tokens = comment_tokens(&verdict.comment);
    if tokens == 0 {
        violations.push(Violation::EmptyComment);
    } else if tokens > constraints.max_comment_tokens {
        violations.push(Violation::CommentTooLong { tokens, max: constraints.max_comment_tokens });
    }
    if !violations.is_empty() {
        return Err(violations);
    }
    Ok(Exemplar {
        id: task.subject_id.clone(),
        transcript_text: task.transcript_text.clone(),
        label: task.label,
        mmse: Some(task.mmse),
        probability: verdict.probability.expect("checked above"),
        comment: Some(verdict.comment.trim().to_string()),
    })
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Extra attempts after the first rejected generation.
    pub max_retries: u32,
    pub constraints: GeneratedExemplarConstraints,
    pub sampling: SamplingParams,
    pub exec: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            max_retries: 3,
            constraints: GeneratedExemplarConstraints::default(),
            sampling: SamplingParams::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnfilledTask {
    pub subject_id: String,
    pub attempts: u32,
    pub last_violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolBuildReport {
    /// Sorted by subject id.
    pub accepted: Vec<Exemplar>,
    pub unfilled: Vec<UnfilledTask>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("subject {subject_id}: {source}")]
    Backend {
        subject_id: String,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
}

enum TaskOutcome {
    Accepted(Exemplar),
    Unfilled(UnfilledTask),
}

fn run_task(client: &LlmClient, task: &GenerationTask, opts: &BuildOptions) -> Result<TaskOutcome, BuildError> {
    let base = build_generation_prompt(task, &opts.constraints)?;
    let req = Requirements { probability: true, comment: true };
    let mut last = Vec::new();
    for attempt in 1..=opts.max_retries + 1 {
        let mut messages = base.messages.clone();
        if attempt > 1 {
            // the note changes the request, so a retry is a new cache entry
            let reasons = last.iter().map(Violation::to_string).collect::<Vec<_>>().join("; ");
            let user = messages.last_mut().expect("prompt has a user message");
            user.content.push_str(&format!("\n\nAttempt {attempt}. The previous answer was rejected: {reasons}."));
        }
        let completion = client
            .complete_multimodal(&messages, &base.image_path, &opts.sampling)
            .map_err(|source| BuildError::Backend { subject_id: task.subject_id.clone(), source })?;
        last = match parse_verdict_with(&completion.text, req) {
            Ok(v) => match validate_generated(&v, task, &opts.constraints) {
                Ok(e) => return Ok(TaskOutcome::Accepted(e)),
                Err(vs) => vs,
            },
            Err(f) => vec![Violation::Unparsable { reason: f.reason.to_string() }],
        };
        log::info!("{}: attempt {attempt} rejected ({} problems)", task.subject_id, last.len());
    }
    Ok(TaskOutcome::Unfilled(UnfilledTask {
        subject_id: task.subject_id.clone(),
        attempts: opts.max_retries + 1,
        last_violations: last,
    }))
}

/// Runs every task, in parallel when `opts.exec` allows, and collects the
/// results in subject order. A backend failure aborts the build.
pub fn build_pool(
    client: &LlmClient,
    tasks: &[GenerationTask],
    opts: &BuildOptions,
) -> Result<PoolBuildReport, BuildError> {
    let outcomes = opts.exec.map(tasks, |t| run_task(client, t, opts));
    let mut accepted = Vec::new();
    let mut unfilled = Vec::new();
    for outcome in outcomes {
        match outcome? {
            TaskOutcome::Accepted(e) => accepted.push(e),
            TaskOutcome::Unfilled(u) => unfilled.push(u),
        }
    }
    accepted.sort_by(|a, b| a.id.cmp(&b.id));
    unfilled.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(PoolBuildReport { accepted, unfilled })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarDigest {
    pub id: String,
    pub sha256: String,
}

/// Content hashes of a frozen pool: one per serialized exemplar line and one
/// over the whole file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolDigest {
    pub pool_kind: PoolKind,
    pub n_exemplars: usize,
    pub pool_sha256: String,
    pub exemplars: Vec<ExemplarDigest>,
}

impl PoolDigest {
    pub fn of(pool: &ExemplarPool) -> Self {
        let exemplars = pool
            .sorted()
            .into_iter()
            .map(|e| ExemplarDigest { id: e.id.clone(), sha256: sha256_hex(pool.record_line(e).as_bytes()) })
            .collect();
        PoolDigest {
            pool_kind: pool.kind(),
            n_exemplars: pool.len(),
            pool_sha256: sha256_hex(pool.to_jsonl().as_bytes()),
            exemplars,
        }
    }
}

#[derive(Debug, Error)]
pub enum FreezeError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn digest_path(pool_path: &Path) -> PathBuf {
    let mut name = pool_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".digest.json");
    pool_path.with_file_name(name)
}

/// Writes the pool and `<path>.digest.json`. Duplicate subjects and invalid
/// exemplars are rejected before anything is written.
pub fn freeze_pool(accepted: &[Exemplar], path: &Path) -> Result<PoolDigest, FreezeError> {
    let pool = ExemplarPool::new(PoolKind::ReasoningAugmented, accepted.iter().cloned())?;
    if pool.is_empty() {
        return Err(PoolError::Empty.into());
    }
    let digest = PoolDigest::of(&pool);
    let write =
        |p: &Path, body: &[u8]| fs::write(p, body).map_err(|source| FreezeError::Io { path: p.to_path_buf(), source });
    write(path, pool.to_jsonl().as_bytes())?;
    let mut body = serde_json::to_string_pretty(&digest).expect("digest serializes");
    body.push('\n');
    write(&digest_path(path), body.as_bytes())?;
    Ok(digest)
}
