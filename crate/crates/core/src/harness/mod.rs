//! The k-sweep: every (mode, k, seed) run scores the whole test split.
//!
//! For each run and test subject the harness selects exemplars, assembles
//! the prompt, asks the backend, and parses the answer. Unparsable answers
//! are counted, not imputed. Backend errors abort the sweep; the runs that
//! finished are kept as a partial report.
//!
//! Zero-shot prompts do not depend on the seed, so with a fixed cache their
//! metrics are identical across seeds. The nested shuffle for a seed is the
//! same in every mode that uses it.

pub mod config;
pub mod report;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use config::{CacheConfig, SweepConfig, K_LIMIT};
pub use report::{emit_reports, write_partial, ReportFiles};

use crate::chat::{load_transcripts, Transcript};
use crate::exec::Execution;
use crate::llm::{LlmClient, LlmError};
use crate::manifest::{Manifest, Split};
use crate::metrics::{aggregate, AggregateRow, LabeledOutcome, RunMetrics};
use crate::mmse::ClassLabel;
use crate::pool::{load_pool, nested_interleave, seeded_shuffle, Exemplar, ExemplarPool, PoolKind, Strategy};
use crate::pool_builder::PoolDigest;
use crate::prompt::{Mode, PromptBuilder};
use crate::verdict::{parse_verdict_with, FailureReason, Prediction, Requirements};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_LEAKAGE: i32 = 4;
pub const EXIT_BACKEND: i32 = 5;
pub const EXIT_OUTPUT: i32 = 6;

pub const OFFICIAL_TRAIN: usize = 108;
pub const OFFICIAL_TEST: usize = 48;
pub const OFFICIAL_PER_CLASS: usize = 78;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("split leakage: test-split subjects in pools: {}", subjects.join(", "))]
    Leakage { subjects: Vec<String> },
    #[error("backend failure on {subject_id} ({mode}, k={k}, seed={seed}): {source}")]
    Backend {
        subject_id: String,
        mode: Mode,
        k: usize,
        seed: u64,
        #[source]
        source: LlmError,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Data(_) => EXIT_DATA,
            HarnessError::Leakage { .. } => EXIT_LEAKAGE,
            HarnessError::Backend { .. } => EXIT_BACKEND,
            HarnessError::Output { .. } => EXIT_OUTPUT,
        }
    }
}

/// Everything a sweep reads from disk.
#[derive(Debug, Clone)]
pub struct SweepInputs {
    pub manifest: Manifest,
    /// Test-split transcripts, sorted by subject id.
    pub test: Vec<Transcript>,
    pub proxy_pool: Option<ExemplarPool>,
    pub reasoning_pool: Option<ExemplarPool>,
}

impl SweepInputs {
    pub fn load(config: &SweepConfig) -> Result<Self, HarnessError> {
        let data = |e: &dyn std::fmt::Display| HarnessError::Data(e.to_string());
        let manifest = Manifest::load(&config.manifest).map_err(|e| data(&e))?;
        let transcripts = load_transcripts(config.transcripts_path()).map_err(|e| data(&e))?;
        let pool = |p: &Option<std::path::PathBuf>| -> Result<Option<ExemplarPool>, HarnessError> {
            p.as_ref().map(|p| load_pool(p, None).map_err(|e| data(&format!("{}: {e}", p.display())))).transpose()
        };
        let proxy_pool = pool(&config.proxy_pool)?;
        let reasoning_pool = pool(&config.reasoning_pool)?;
        if let Some(p) = &proxy_pool {
            if p.kind() != PoolKind::MmseProxy {
                return Err(HarnessError::Data(format!("proxy_pool holds a {} pool", p.kind())));
            }
        }
        if let Some(p) = &reasoning_pool {
            if p.kind() != PoolKind::ReasoningAugmented {
                return Err(HarnessError::Data(format!("reasoning_pool holds a {} pool", p.kind())));
            }
        }
        SweepInputs::new(manifest, transcripts, proxy_pool, reasoning_pool)
    }

    /// Checks transcripts against the manifest and keeps the test split.
    pub fn new(
        manifest: Manifest,
        transcripts: Vec<Transcript>,
        proxy_pool: Option<ExemplarPool>,
        reasoning_pool: Option<ExemplarPool>,
    ) -> Result<Self, HarnessError> {
        let mut test = Vec::new();
        for t in transcripts {
            let entry = manifest
                .get(&t.subject_id)
                .ok_or_else(|| HarnessError::Data(format!("transcript {} is not in the manifest", t.subject_id)))?;
            if entry.split != t.split || t.label.is_some_and(|l| l != entry.label) {
                return Err(HarnessError::Data(format!(
                    "transcript {} disagrees with the manifest on split or label",
                    t.subject_id
                )));
            }
            if t.split == Split::Test {
                test.push(Transcript { label: Some(entry.label), ..t });
            }
        }
        test.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let expected = manifest.count(Split::Test);
        if test.len() != expected {
            return Err(HarnessError::Data(format!(
                "manifest lists {expected} test subjects but {} test transcripts were found",
                test.len()
            )));
        }
        if test.is_empty() {
            return Err(HarnessError::Data("no test transcripts".into()));
        }
        Ok(SweepInputs { manifest, test, proxy_pool, reasoning_pool })
    }

    /// The pool a mode draws from, relabelled for no-proxy rendering.
    pub fn pool_for(&self, mode: Mode) -> Result<ExemplarPool, HarnessError> {
        let missing = || HarnessError::Config(format!("no pool configured for {mode}"));
        match mode {
            Mode::Reasoning => self.reasoning_pool.clone().ok_or_else(missing),
            Mode::MmseProxy | Mode::Tfidf => self.proxy_pool.clone().ok_or_else(missing),
            Mode::NoProxy => self
                .proxy_pool
                .as_ref()
                .ok_or_else(missing)?
                .with_kind(PoolKind::NoProxy)
                .map_err(|e| HarnessError::Data(e.to_string())),
        }
    }

    fn pools(&self) -> Vec<&ExemplarPool> {
        self.proxy_pool.iter().chain(&self.reasoning_pool).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub train: usize,
    pub test: usize,
    /// Whether the official split sizes were checked (full dataset only).
    pub counts_checked: bool,
}

/// Confirms the official split sizes when the manifest covers the full
/// dataset, and always confirms that no pool exemplar is a test subject.
pub fn verify_split(manifest: &Manifest, pools: &[&ExemplarPool]) -> Result<SplitReport, HarnessError> {
    let train = manifest.count(Split::Train);
    let test = manifest.count(Split::Test);
    let full = manifest.len() == OFFICIAL_TRAIN + OFFICIAL_TEST;
    if full {
        let ad = manifest.count_label(ClassLabel::Ad);
        let hc = manifest.count_label(ClassLabel::Hc);
        if (train, test, ad, hc) != (OFFICIAL_TRAIN, OFFICIAL_TEST, OFFICIAL_PER_CLASS, OFFICIAL_PER_CLASS) {
            return Err(HarnessError::Data(format!(
                "split sizes {train}/{test} train/test, {ad}/{hc} AD/HC differ from the official \
                 {OFFICIAL_TRAIN}/{OFFICIAL_TEST}, {OFFICIAL_PER_CLASS}/{OFFICIAL_PER_CLASS}"
            )));
        }
    } else {
        log::info!("manifest has {} subjects, not the full dataset; skipping the split-size check", manifest.len());
    }
    let mut leaked = Vec::new();
    let mut unknown = Vec::new();
    for pool in pools {
        for id in pool.ids() {
            match manifest.get(id) {
                Some(e) if e.split == Split::Test => leaked.push(id.to_string()),
                Some(_) => {}
                None => unknown.push(id.to_string()),
            }
        }
    }
    if !leaked.is_empty() {
        leaked.sort();
        leaked.dedup();
        return Err(HarnessError::Leakage { subjects: leaked });
    }
    if !unknown.is_empty() {
        return Err(HarnessError::Data(format!("pool exemplars missing from the manifest: {}", unknown.join(", "))));
    }
    Ok(SplitReport { train, test, counts_checked: full })
}

/// One scored test subject within one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectOutcome {
    pub mode: Mode,
    pub k: usize,
    pub seed: u64,
    pub subject_id: String,
    pub true_label: ClassLabel,
    pub prediction: Option<Prediction>,
    pub probability: Option<f64>,
    pub failure: Option<FailureReason>,
    /// Cache key of the completion; the raw text lives in the cache record.
    pub cache_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: SweepConfig,
    pub split: SplitReport,
    pub pool_digests: BTreeMap<String, PoolDigest>,
    pub runs: Vec<RunMetrics>,
    pub aggregates: Vec<AggregateRow>,
    pub outcomes: Vec<SubjectOutcome>,
    /// False for a partial report written after an aborted sweep.
    pub complete: bool,
}

/// A sweep stopped by a hard error, with the runs that had finished.
#[derive(Debug)]
pub struct SweepAbort {
    pub error: HarnessError,
    pub partial: Box<EvalReport>,
}

fn check_capacity(config: &SweepConfig, inputs: &SweepInputs) -> Result<(), HarnessError> {
    let k_max = config.ks().into_iter().max().unwrap_or(0);
    for &mode in &config.modes {
        let pool = inputs.pool_for(mode)?;
        let cap = pool.capacity();
        if k_max > cap {
            return Err(HarnessError::Config(format!(
                "k = {k_max} exceeds the {mode} pool capacity of {cap} per class"
            )));
        }
    }
    Ok(())
}

/// Runs the whole sweep. Split hygiene and pool capacity are checked before
/// any request is made.
pub fn run_sweep(config: &SweepConfig, inputs: &SweepInputs, client: &LlmClient) -> Result<EvalReport, SweepAbort> {
    let early = |error: HarnessError, split: SplitReport| SweepAbort {
        error,
        partial: Box::new(empty_report(config, split, BTreeMap::new())),
    };
    let blank = SplitReport { train: 0, test: 0, counts_checked: false };
    let split = verify_split(&inputs.manifest, &inputs.pools()).map_err(|e| early(e, blank))?;
    check_capacity(config, inputs).map_err(|e| early(e, split.clone()))?;

    let mut digests = BTreeMap::new();
    if let Some(p) = &inputs.proxy_pool {
        digests.insert("proxy".to_string(), PoolDigest::of(p));
    }
    if let Some(p) = &inputs.reasoning_pool {
        digests.insert("reasoning".to_string(), PoolDigest::of(p));
    }
    let mut report = empty_report(config, split, digests);
    let exec = Execution::with_limit(config.concurrency);
    let ks = config.ks();

    for &mode in &config.modes {
        let pool = match inputs.pool_for(mode) {
            Ok(p) => p,
            Err(error) => return Err(abort(report, error)),
        };
        let builder = PromptBuilder::for_mode(mode);
        let req = Requirements { probability: mode != Mode::NoProxy, comment: mode == Mode::Reasoning };

        // per-seed class orders (nested) or per-subject rankings (tfidf)
        let shuffles: Vec<(Vec<&Exemplar>, Vec<&Exemplar>)> =
            config.seeds.iter().map(|&s| seeded_shuffle(&pool, s)).collect();
        let index = pool.tfidf_index();
        let rankings = match mode.strategy() {
            Strategy::Tfidf => {
                let texts: Vec<&str> = inputs.test.iter().map(|t| t.text.as_str()).collect();
                index.rank_batch(&texts, exec)
            }
            Strategy::NestedRandom => Vec::new(),
        };

        for &k in &ks {
            for (si, &seed) in config.seeds.iter().enumerate() {
                let jobs: Vec<usize> = (0..inputs.test.len()).collect();
                let results = exec.map(&jobs, |&i| {
                    let subject = &inputs.test[i];
                    let (ad, hc) = match mode.strategy() {
                        Strategy::Tfidf => (&rankings[i].0, &rankings[i].1),
                        Strategy::NestedRandom => (&shuffles[si].0, &shuffles[si].1),
                    };
                    let exemplars = nested_interleave(ad, hc, k).expect("capacity checked");
                    let bundle = builder.assemble(&exemplars, &subject.text).map_err(|e| {
                        HarnessError::Data(format!("{}: cannot assemble prompt: {e}", subject.subject_id))
                    })?;
                    let tokens = bundle.estimated_tokens();
                    if tokens > config.context_warn_tokens {
                        log::warn!(
                            "{mode} k={k}: prompt for {} is about {tokens} tokens, above {}",
                            subject.subject_id,
                            config.context_warn_tokens
                        );
                    }
                    let completion = client.complete(&bundle.messages, &config.sampling).map_err(|source| {
                        HarnessError::Backend { subject_id: subject.subject_id.clone(), mode, k, seed, source }
                    })?;
                    Ok((subject, parse_verdict_with(&completion.text, req), completion.cache_key))
                });

                let mut labeled = Vec::with_capacity(results.len());
                let mut outcomes = Vec::with_capacity(results.len());
                for r in results {
                    let (subject, verdict, cache_key) = match r {
                        Ok(x) => x,
                        Err(error) => return Err(abort(report, error)),
                    };
                    let true_label = subject.label.expect("test labels come from the manifest");
                    outcomes.push(SubjectOutcome {
                        mode,
                        k,
                        seed,
                        subject_id: subject.subject_id.clone(),
                        true_label,
                        prediction: verdict.as_ref().ok().map(|v| v.prediction),
                        probability: verdict.as_ref().ok().and_then(|v| v.probability),
                        failure: verdict.as_ref().err().map(|f| f.reason.clone()),
                        cache_key,
                    });
                    labeled.push(LabeledOutcome { subject_id: subject.subject_id.clone(), true_label, verdict });
                }
                let run = RunMetrics::from_outcomes(mode, k, seed, &labeled);
                if run.n_failures > 0 {
                    log::warn!("{mode} k={k} seed={seed}: {} of {} outputs unparsable", run.n_failures, run.n_total);
                }
                report.runs.push(run);
                report.outcomes.extend(outcomes);
            }
        }
    }
    report.aggregates = aggregate(&report.runs);
    report.complete = true;
    Ok(report)
}

fn empty_report(config: &SweepConfig, split: SplitReport, pool_digests: BTreeMap<String, PoolDigest>) -> EvalReport {
    EvalReport {
        config: config.clone(),
        split,
        pool_digests,
        runs: Vec::new(),
        aggregates: Vec::new(),
        outcomes: Vec::new(),
        complete: false,
    }
}

fn abort(mut partial: EvalReport, error: HarnessError) -> SweepAbort {
    partial.aggregates = aggregate(&partial.runs);
    partial.complete = false;
    SweepAbort { error, partial: Box::new(partial) }
}

/// Load, verify, run and write reports. On a hard error after loading, the
/// partial report is written to `partial_report.json` before returning.
pub fn evaluate(config: &SweepConfig, client: &LlmClient) -> Result<(EvalReport, ReportFiles), HarnessError> {
    let inputs = SweepInputs::load(config)?;
    match run_sweep(config, &inputs, client) {
        Ok(report) => {
            let files = emit_reports(&report, &config.output_dir)?;
            Ok((report, files))
        }
        Err(SweepAbort { error, partial }) => {
            if !partial.runs.is_empty() || matches!(error, HarnessError::Backend { .. }) {
                match write_partial(&partial, &config.output_dir) {
                    Ok(path) => log::error!("sweep aborted; partial report at {}", path.display()),
                    Err(e) => log::error!("sweep aborted and the partial report could not be written: {e}"),
                }
            }
            Err(error)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestEntry;
    use crate::mmse::MmseScore;

    fn manifest(train: usize, test: usize) -> Manifest {
        let mut entries = Vec::new();
        for i in 0..train + test {
            entries.push(ManifestEntry {
                subject_id: format!("S{i:03}"),
                split: if i < train { Split::Train } else { Split::Test },
                label: if i % 2 == 0 { ClassLabel::Ad } else { ClassLabel::Hc },
                mmse: MmseScore::new(20).ok(),
            });
        }
        Manifest::from_entries(entries)
    }

    fn pool_of(ids: &[&str]) -> ExemplarPool {
        let items = ids.iter().enumerate().map(|(i, id)| Exemplar {
            id: id.to_string(),
            transcript_text: "text".into(),
            label: if i % 2 == 0 { ClassLabel::Ad } else { ClassLabel::Hc },
            mmse: None,
            probability: if i % 2 == 0 { 0.7 } else { 0.2 },
            comment: None,
        });
        ExemplarPool::new(PoolKind::MmseProxy, items).unwrap()
    }

    #[test]
    fn official_counts_accepted() {
        let m = manifest(108, 48);
        let r = verify_split(&m, &[&pool_of(&["S000", "S001"])]).unwrap();
        assert_eq!(r, SplitReport { train: 108, test: 48, counts_checked: true });
    }

    #[test]
    fn wrong_official_counts_rejected() {
        let m = manifest(110, 46);
        assert!(matches!(verify_split(&m, &[]), Err(HarnessError::Data(_))));
    }

    #[test]
    fn leakage_names_subjects() {
        let m = manifest(4, 2);
        let err = verify_split(&m, &[&pool_of(&["S000", "S005", "S004", "S001"])]).unwrap_err();
        match &err {
            HarnessError::Leakage { subjects } => assert_eq!(subjects, &["S004", "S005"]),
            other => panic!("{other}"),
        }
        assert_eq!(err.exit_code(), EXIT_LEAKAGE);
    }

    #[test]
    fn fixture_manifest_skips_counts() {
        let m = manifest(4, 2);
        let r = verify_split(&m, &[&pool_of(&["S000", "S001"])]).unwrap();
        assert!(!r.counts_checked);
    }

    #[test]
    fn exit_codes_are_distinct() {
        use std::collections::HashSet;
        let codes = [EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_LEAKAGE, EXIT_BACKEND, EXIT_OUTPUT];
        let unique: HashSet<i32> = codes.iter().copied().collect();
        assert_eq!(unique.len(), codes.len());
    }
}
