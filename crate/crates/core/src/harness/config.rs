//! Sweep configuration, read from TOML.
//!
//! ```toml
//! data_dir = "data"                 # holds transcripts.jsonl from `normalize`
//! manifest = "data/manifest.jsonl"
//! proxy_pool = "pools/proxy.jsonl"  # mmse_proxy, no_proxy and tfidf modes
//! reasoning_pool = "pools/reasoning.jsonl"
//! output_dir = "out"
//! modes = ["mmse_proxy", "no_proxy"]
//! k_min = 0                         # or: k_values = [0, 2, 4]
//! k_max = 20
//! seeds = [1, 2, 3]
//! concurrency = 4
//! context_warn_tokens = 30000
//!
//! [backend]
//! endpoint_url = "http://127.0.0.1:8000/v1/chat/completions"
//! model_id = "mistralai/Mistral-7B-Instruct-v0.2"
//!
//! [sampling]
//! temperature = 0.01
//!
//! [cache]
//! mode = "replay"                   # live | record | replay
//! dir = "cache"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::llm::{BackendConfig, CacheMode, SamplingParams};
use crate::prompt::Mode;

/// Largest k the harness accepts.
pub const K_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "default_cache_mode")]
    pub mode: CacheMode,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_cache_mode() -> CacheMode {
    CacheMode::Live
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { mode: CacheMode::Live, dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data_dir: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub proxy_pool: Option<PathBuf>,
    #[serde(default)]
    pub reasoning_pool: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Explicit k list; overrides `k_min..=k_max` when present.
    #[serde(default)]
    pub k_values: Option<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Estimated prompt size above which a warning is logged.
    #[serde(default = "default_context_warn")]
    pub context_warn_tokens: usize,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub cache: CacheConfig,
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::MmseProxy]
}

fn default_k_max() -> usize {
    K_LIMIT
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_concurrency() -> usize {
    4
}

fn default_context_warn() -> usize {
    30_000
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        SweepConfig::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut config: SweepConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string().trim_end().to_string()))?;
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        for p in [&mut self.proxy_pool, &mut self.reasoning_pool, &mut self.cache.dir].into_iter().flatten() {
            fix(p);
        }
    }

    /// The k values to sweep, ascending and without duplicates.
    pub fn ks(&self) -> Vec<usize> {
        let mut ks = match &self.k_values {
            Some(v) => v.clone(),
            None => (self.k_min..=self.k_max).collect(),
        };
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn transcripts_path(&self) -> PathBuf {
        self.data_dir.join("transcripts.jsonl")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.modes.is_empty() {
            return bad("modes is empty".into());
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return bad("modes lists a mode twice".into());
        }
        if self.k_values.is_none() && self.k_min > self.k_max {
            return bad(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max));
        }
        if self.k_max > K_LIMIT {
            return bad(format!("k_max {} exceeds the limit of {K_LIMIT}", self.k_max));
        }
        let ks = self.ks();
        if ks.is_empty() {
            return bad("no k values to sweep".into());
        }
        if let Some(&k) = ks.iter().find(|&&k| k > K_LIMIT) {
            return bad(format!("k = {k} exceeds the limit of {K_LIMIT}"));
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds lists a seed twice".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        let needs_proxy = self.modes.iter().any(|m| !m.uses_reasoning_pool());
        if needs_proxy && self.proxy_pool.is_none() {
            return bad("proxy_pool is required for the selected modes".into());
        }
        if self.modes.contains(&Mode::Reasoning) && self.reasoning_pool.is_none() {
            return bad("reasoning_pool is required for reasoning mode".into());
        }
        if self.cache.mode != CacheMode::Live && self.cache.dir.is_none() {
            return bad("cache.dir is required in record and replay mode".into());
        }
        let s = &self.sampling;
        if !(s.temperature >= 0.0 && (0.0..=1.0).contains(&s.top_p) && s.max_output_tokens > 0) {
            return bad("sampling parameters out of range".into());
        }
        Ok(())
    }
}
