use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use adprompt::chat::{
    build_transcript, load_transcripts, parse_chat, transcripts_to_jsonl, ChatError, Transcript, TranscriptFileError,
};
use adprompt::harness::{self, HarnessError, SweepConfig, EXIT_BACKEND, EXIT_DATA, EXIT_LEAKAGE, EXIT_OUTPUT};
use adprompt::llm::{BackendConfig, CacheMode, LlmClient, LlmError, ResponseCache};
use adprompt::manifest::{Manifest, ManifestError, Split};
use adprompt::mmse::proxy_table;
use adprompt::pool::{load_pool, make_proxy_pool, select, PoolError, PoolKind, SelectionPlan};
use adprompt::pool_builder::{
    build_pool, freeze_pool, BuildError, BuildOptions, FreezeError, GenerationTask, TaskError,
};
use adprompt::prompt::{Mode, PromptBuilder};
use adprompt::Execution;

#[derive(Parser)]
#[command(name = "adprompt", version, about = "Few-shot Alzheimer's detection from Cookie Theft transcripts")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize CHAT files into participant-only transcripts.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory searched recursively for `.cha` files named by subject id.
        #[arg(long)]
        input: PathBuf,
        /// Receives `<subject>.txt` per subject and `transcripts.jsonl`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build an mmse_proxy pool from the train split.
    MakeProxyPool {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and freeze the reasoning-augmented pool.
    BuildReasoningPool {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `transcripts.jsonl` next to the manifest.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Print the proxy probability for every (label, MMSE) pair.
    ProxyTable {
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
    },
    /// Print the exact prompt for one test subject.
    DumpPrompt {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long, default_value = "mmse_proxy")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PromptFormat::Json)]
        format: PromptFormat,
    },
    /// Run the k-sweep described by a config file.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated seeds replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        concurrency: Option<usize>,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args)]
struct LlmArgs {
    /// TOML file with backend settings (endpoint_url, model_id, ...).
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Serve completions from the cache only; a miss is an error.
    #[arg(long, conflicts_with = "record")]
    replay: bool,
    /// Store every live completion in the cache.
    #[arg(long)]
    record: bool,
    /// Cache directory. Implies --record unless --replay is given.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl LlmArgs {
    fn mode(&self, configured: CacheMode) -> CacheMode {
        if self.replay {
            CacheMode::Replay
        } else if self.record || (self.cache_dir.is_some() && configured == CacheMode::Live) {
            CacheMode::Record
        } else {
            configured
        }
    }

    fn backend(&self, configured: BackendConfig) -> Result<BackendConfig> {
        match &self.backend {
            None => Ok(configured),
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| {
                    HarnessError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())).into()
                })
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptFormat {
    Json,
    Chatml,
}

fn make_client(backend: BackendConfig, mode: CacheMode, cache_dir: Option<&Path>) -> Result<LlmClient> {
    let cache = match (mode, cache_dir) {
        (CacheMode::Live, _) => None,
        (CacheMode::Replay, Some(dir)) => Some(ResponseCache::open_existing(dir)?),
        (CacheMode::Record, Some(dir)) => Some(ResponseCache::open(dir)?),
        (_, None) => return Err(HarnessError::Config("--replay and --record need --cache-dir".into()).into()),
    };
    Ok(LlmClient::http(backend, mode, cache)?)
}

fn normalize(manifest: &Path, input: &Path, out_dir: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let mut transcripts: Vec<Transcript> = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in walkdir::WalkDir::new(input).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", input.display()))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "cha") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if manifest.get(&id).is_none() {
            log::warn!("skipping {}: {id} is not in the manifest", path.display());
            continue;
        }
        if !seen.insert(id.clone()) {
            bail!(HarnessError::Data(format!("two CHAT files for subject {id}")));
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let text =
            String::from_utf8(bytes).map_err(|_| HarnessError::Data(format!("{} is not UTF-8", path.display())))?;
        let doc = parse_chat(&text, &id)?;
        let t = build_transcript(&doc, &manifest)?;
        if t.text.is_empty() {
            log::warn!("{id}: no participant speech after normalization");
        }
        transcripts.push(t);
    }
    for e in manifest.entries().filter(|e| !seen.contains(&e.subject_id)) {
        log::warn!("no CHAT file for manifest subject {}", e.subject_id);
    }
    transcripts.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for t in &transcripts {
        let path = out_dir.join(format!("{}.txt", t.subject_id));
        fs::write(&path, format!("{}\n", t.text)).with_context(|| format!("writing {}", path.display()))?;
    }
    let combined = out_dir.join("transcripts.jsonl");
    fs::write(&combined, transcripts_to_jsonl(&transcripts))
        .with_context(|| format!("writing {}", combined.display()))?;
    println!("normalized {} transcripts into {}", transcripts.len(), out_dir.display());
    Ok(())
}

fn make_proxy(transcripts: &Path, out: &Path) -> Result<()> {
    let transcripts = load_transcripts(transcripts)?;
    let build = make_proxy_pool(&transcripts)?;
    if !build.skipped.is_empty() {
        log::warn!("left out train subjects without MMSE or label: {}", build.skipped.join(", "));
    }
    fs::write(out, build.pool.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} exemplars ({} AD, {} HC) to {}",
        build.pool.len(),
        build.pool.ad().len(),
        build.pool.hc().len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_reasoning(
    image: &Path,
    manifest_path: &Path,
    out: &Path,
    transcripts: Option<PathBuf>,
    max_retries: u32,
    concurrency: usize,
    llm: &LlmArgs,
) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let transcripts_path =
        transcripts.unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new("")).join("transcripts.jsonl"));
    let transcripts = load_transcripts(&transcripts_path)?;
    if !image.is_file() {
        bail!(HarnessError::Data(format!("image {} does not exist", image.display())));
    }
    let backend = llm.backend(BackendConfig::default())?;
    if !backend.supports_images {
        bail!(HarnessError::Config(format!("backend {} is not marked supports_images = true", backend.model_id)));
    }
    let mut tasks = Vec::new();
    for t in &transcripts {
        match manifest.get(&t.subject_id) {
            Some(e) if e.split == Split::Train => {}
            Some(_) => continue,
            None => bail!(HarnessError::Data(format!("transcript {} is not in the manifest", t.subject_id))),
        }
        match GenerationTask::from_transcript(t, image) {
            Ok(task) => tasks.push(task),
            Err(e @ TaskError::MissingMmse(_)) => log::warn!("rejected task: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    let client = make_client(backend, llm.mode(CacheMode::Live), llm.cache_dir.as_deref())?;
    let opts = BuildOptions { max_retries, exec: Execution::with_limit(concurrency), ..BuildOptions::default() };
    let report = build_pool(&client, &tasks, &opts)?;
    for u in &report.unfilled {
        let reasons: Vec<String> = u.last_violations.iter().map(|v| v.to_string()).collect();
        log::warn!("{} unfilled after {} attempts: {}", u.subject_id, u.attempts, reasons.join("; "));
    }
    let digest = freeze_pool(&report.accepted, out)?;
    if !report.unfilled.is_empty() {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".unfilled.json");
        let path = out.with_file_name(name);
        fs::write(&path, serde_json::to_string_pretty(&report.unfilled)?)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("{} tasks unfilled; listed in {}", report.unfilled.len(), path.display());
    }
    println!("froze {} exemplars to {} (sha256 {})", digest.n_exemplars, out.display(), digest.pool_sha256);
    Ok(())
}

fn print_proxy_table(format: TableFormat) -> Result<()> {
    let rows = proxy_table();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record(["label", "mmse", "probability", "rendered", "band"])?;
            for r in rows {
                w.write_record([
                    r.label.to_string(),
                    r.mmse.to_string(),
                    format!("{:.6}", r.probability),
                    format!("{:.2}", r.rendered),
                    r.band.name().to_string(),
                ])?;
            }
            w.flush()?;
        }
        TableFormat::Text => {
            println!("{:<5} {:>4} {:>11} {:>8}  band", "label", "mmse", "probability", "rendered");
            for r in rows {
                println!("{:<5} {:>4} {:>11.6} {:>8.2}  {}", r.label, r.mmse, r.probability, r.rendered, r.band.name());
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dump_prompt(
    transcripts: &Path,
    pool_path: &Path,
    subject: &str,
    mode: Mode,
    k: usize,
    seed: u64,
    format: PromptFormat,
) -> Result<()> {
    let transcripts = load_transcripts(transcripts)?;
    let t = transcripts
        .iter()
        .find(|t| t.subject_id == subject)
        .ok_or_else(|| HarnessError::Data(format!("no transcript for subject {subject}")))?;
    let mut pool = load_pool(pool_path, None)?;
    let wanted = if mode.uses_reasoning_pool() { PoolKind::ReasoningAugmented } else { PoolKind::MmseProxy };
    if pool.kind() != wanted {
        bail!(HarnessError::Config(format!(
            "{mode} needs a {wanted} pool, {} holds {}",
            pool_path.display(),
            pool.kind()
        )));
    }
    if pool.ids().any(|id| id == subject) {
        bail!(HarnessError::Config(format!("subject {subject} is itself an exemplar in {}", pool_path.display())));
    }
    if mode == Mode::NoProxy {
        pool = pool.with_kind(PoolKind::NoProxy)?;
    }
    let plan = SelectionPlan { strategy: mode.strategy(), k, seed };
    let exemplars = select(&pool, plan, &t.text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let bundle = PromptBuilder::for_mode(mode).assemble(&exemplars, &t.text)?;
    match format {
        PromptFormat::Json => println!("{}", serde_json::to_string_pretty(&bundle.messages)?),
        PromptFormat::Chatml => print!("{}", bundle.to_chatml()),
    }
    Ok(())
}

fn evaluate(
    config: &Path,
    output_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    concurrency: Option<usize>,
    llm: &LlmArgs,
) -> Result<()> {
    let mut config = SweepConfig::load(config)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    if let Some(seeds) = seeds {
        config.seeds = seeds;
    }
    if let Some(c) = concurrency {
        config.concurrency = c;
    }
    config.backend = llm.backend(config.backend.clone())?;
    config.cache.mode = llm.mode(config.cache.mode);
    if let Some(dir) = &llm.cache_dir {
        config.cache.dir = Some(dir.clone());
    }
    config.validate()?;
    let client = make_client(config.backend.clone(), config.cache.mode, config.cache.dir.as_deref())?;
    let (report, files) = harness::evaluate(&config, &client)?;
    println!("{:<11} {:>3} {:>17} {:>17} {:>8}", "mode", "k", "accuracy", "auc", "failures");
    let fmt = |m: Option<adprompt::metrics::MeanStd>| {
        m.map_or_else(|| "NA".to_string(), |m| format!("{:.3} ± {:.3}", m.mean, m.std))
    };
    for a in &report.aggregates {
        println!("{:<11} {:>3} {:>17} {:>17} {:>8}", a.mode.as_str(), a.k, fmt(a.accuracy), fmt(a.auc), a.n_failures);
    }
    println!("reports written to {}", files.runs.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return h.exit_code() as u8;
        }
        if let Some(p) = cause.downcast_ref::<PoolError>() {
            return if matches!(p, PoolError::TestSplit { .. }) { EXIT_LEAKAGE } else { EXIT_DATA } as u8;
        }
        if let Some(FreezeError::Io { .. }) = cause.downcast_ref::<FreezeError>() {
            return EXIT_OUTPUT as u8;
        }
        if cause.is::<LlmError>() || cause.is::<BuildError>() {
            return EXIT_BACKEND as u8;
        }
        if cause.is::<ManifestError>()
            || cause.is::<ChatError>()
            || cause.is::<TranscriptFileError>()
            || cause.is::<TaskError>()
            || cause.is::<adprompt::prompt::PromptError>()
        {
            return EXIT_DATA as u8;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Normalize { manifest, input, out_dir } => normalize(&manifest, &input, &out_dir),
        Command::MakeProxyPool { transcripts, out } => make_proxy(&transcripts, &out),
        Command::BuildReasoningPool { image, manifest, out, transcripts, max_retries, concurrency, llm } => {
            build_reasoning(&image, &manifest, &out, transcripts, max_retries, concurrency, &llm)
        }
        Command::ProxyTable { format } => print_proxy_table(format),
        Command::DumpPrompt { transcripts, pool, subject, mode, k, seed, format } => {
            dump_prompt(&transcripts, &pool, &subject, mode, k, seed, format)
        }
        Command::Evaluate { config, output_dir, seeds, concurrency, llm } => {
            evaluate(&config, output_dir, seeds, concurrency, &llm)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
