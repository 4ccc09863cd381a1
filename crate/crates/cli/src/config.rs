//! Application configuration: a TOML file, then `APRIL_*` environment
//! overrides, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use april_core::apo::BeamConfig;
use april_core::llm::{
    GenerationParams, HttpBackend, HttpBackendConfig, LlmClient, MockBackend, RetryPolicy,
};
use april_core::oracle::OracleConfig;
use april_core::rlvr::{GRPOConfig, TOY_LOGIT_SCALE};
use april_core::sandbox::SandboxConfig;
use april_core::store::EventSink;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backends: BackendPaths,
    pub sandbox: SandboxConfig,
    pub apo: BeamConfig,
    pub grpo: GRPOConfig,
    pub oracle: OracleConfig,
    /// Sampling parameters for synthesis calls.
    pub generation: GenerationParams,
    pub toy: ToyConfig,
    pub policy: PolicyConfig,
    pub paths: Paths,
    pub seed: u64,
}

/// Backend description files, one per role. Each file is either a JSON mock
/// script or a TOML [`BackendFile`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendPaths {
    pub synthesis: Option<PathBuf>,
    pub critique: Option<PathBuf>,
    pub edit: Option<PathBuf>,
    pub oracle_agent: Option<PathBuf>,
    pub quality_evaluator: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab: Vec<String>,
    pub length: usize,
    pub logit_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: ["a", "b", "c", "d"].map(String::from).to_vec(),
            length: 2,
            logit_scale: TOY_LOGIT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Command line of an external policy host.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tasks_dir: Option<PathBuf>,
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            tasks_dir: None,
            runs_dir: PathBuf::from("runs"),
        }
    }
}

/// Values taken from global flags; `None` leaves the config untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub runs_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub keep_workspaces: bool,
}

impl AppConfig {
    /// Loads `path` (defaults when absent), applies environment overrides
    /// from `env`, then `flags`, and checks referenced files exist.
    pub fn load(
        path: Option<&Path>,
        env: &BTreeMap<String, String>,
        flags: &Overrides,
    ) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                let mut c: AppConfig = toml::from_str(&text)
                    .with_context(|| format!("invalid config {}", p.display()))?;
                c.resolve_relative(p.parent().unwrap_or(Path::new(".")));
                c
            }
            None => AppConfig::default(),
        };
        config.apply_env(env)?;
        config.apply_flags(flags);
        config.check_paths()?;
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let b = &mut self.backends;
        for p in [
            &mut b.synthesis,
            &mut b.critique,
            &mut b.edit,
            &mut b.oracle_agent,
            &mut b.quality_evaluator,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(p) = &mut self.paths.tasks_dir {
            fix(p);
        }
        fix(&mut self.paths.runs_dir);
        if let Some(p) = &mut self.sandbox.library_snapshot {
            fix(p);
        }
        // A relative shim program with a directory part is relative to the
        // config file too; a bare name is looked up on PATH.
        if let Some(program) = self.sandbox.shim.first_mut() {
            let p = Path::new(program.as_str());
            if p.is_relative() && p.components().count() > 1 {
                *program = base.join(p).to_string_lossy().into_owned();
            }
        }
    }

    fn apply_env(&mut self, env: &BTreeMap<String, String>) -> Result<()> {
        let get = |k: &str| env.get(k).filter(|v| !v.is_empty());
        if let Some(v) = get("APRIL_RUNS_DIR") {
            self.paths.runs_dir = v.into();
        }
        if let Some(v) = get("APRIL_TASKS_DIR") {
            self.paths.tasks_dir = Some(v.into());
        }
        if let Some(v) = get("APRIL_SEED") {
            self.seed = v.parse().map_err(|_| anyhow!("APRIL_SEED must be an integer, got `{v}`"))?;
        }
        if let Some(v) = get("APRIL_WORKERS") {
            self.sandbox.workers = v
                .parse()
                .map_err(|_| anyhow!("APRIL_WORKERS must be an integer, got `{v}`"))?;
        }
        if let Some(v) = get("APRIL_KEEP_WORKSPACES") {
            self.sandbox.keep_workspaces = matches!(v.as_str(), "1" | "true" | "yes");
        }
        if let Some(v) = get("APRIL_SHIM") {
            self.sandbox.shim = v.split_whitespace().map(String::from).collect();
        }
        if let Some(v) = get("APRIL_POLICY_CMD") {
            self.policy.command = v.split_whitespace().map(String::from).collect();
        }
        let b = &mut self.backends;
        for (key, slot) in [
            ("APRIL_BACKEND_SYNTHESIS", &mut b.synthesis),
            ("APRIL_BACKEND_CRITIQUE", &mut b.critique),
            ("APRIL_BACKEND_EDIT", &mut b.edit),
            ("APRIL_BACKEND_ORACLE_AGENT", &mut b.oracle_agent),
            ("APRIL_BACKEND_QUALITY_EVALUATOR", &mut b.quality_evaluator),
        ] {
            if let Some(v) = get(key) {
                *slot = Some(v.into());
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, flags: &Overrides) {
        if let Some(d) = &flags.runs_dir {
            self.paths.runs_dir = d.clone();
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(w) = flags.workers {
            self.sandbox.workers = w;
        }
        if flags.keep_workspaces {
            self.sandbox.keep_workspaces = true;
        }
    }

    fn check_paths(&self) -> Result<()> {
        let b = &self.backends;
        for (role, p) in [
            ("synthesis", &b.synthesis),
            ("critique", &b.critique),
            ("edit", &b.edit),
            ("oracle_agent", &b.oracle_agent),
            ("quality_evaluator", &b.quality_evaluator),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    bail!("backend `{role}` file {} does not exist", p.display());
                }
            }
        }
        if let Some(d) = &self.paths.tasks_dir {
            if !d.is_dir() {
                bail!("tasks directory {} does not exist", d.display());
            }
        }
        if let Some(d) = &self.sandbox.library_snapshot {
            if !d.is_dir() {
                bail!("library snapshot {} does not exist", d.display());
            }
        }
        Ok(())
    }

    /// Synthesis parameters with the run seed attached.
    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            seed: Some(self.seed),
            ..self.generation.clone()
        }
    }
}

/// Reads every `APRIL_*` variable from the process environment.
pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with("APRIL_")).collect()
}

/// TOML form of a backend description.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendFile {
    pub kind: BackendKind,
    /// Mock script path (mock backends).
    pub script: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
}

fn default_key_env() -> String {
    "APRIL_LLM_KEY".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Builds a client from a backend file. A file whose content starts with `[`
/// followed by a JSON value is taken as a mock script.
pub fn load_backend(path: &Path, sink: Arc<dyn EventSink>) -> Result<LlmClient> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read backend {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let is_json_script = text.trim_start().starts_with('[')
        && serde_json::from_str::<serde_json::Value>(&text).is_ok();
    let client = if is_json_script {
        let mock = MockBackend::load(path).with_context(|| format!("mock script {}", path.display()))?;
        LlmClient::new(Arc::new(mock.with_id(backend_id(path))))
    } else {
        let file: BackendFile =
            toml::from_str(&text).with_context(|| format!("invalid backend file {}", path.display()))?;
        let client = match file.kind {
            BackendKind::Mock => {
                let script = file
                    .script
                    .as_ref()
                    .ok_or_else(|| anyhow!("mock backend {} lacks `script`", path.display()))?;
                let script = base.join(script);
                let mock = MockBackend::load(&script)
                    .with_context(|| format!("mock script {}", script.display()))?;
                LlmClient::new(Arc::new(mock.with_id(backend_id(&script))))
            }
            BackendKind::Http => {
                let from_env = HttpBackendConfig::from_env();
                let url = file
                    .url
                    .clone()
                    .or_else(|| from_env.as_ref().map(|c| c.url.clone()))
                    .ok_or_else(|| anyhow!("http backend {} has no url and APRIL_LLM_URL is unset", path.display()))?;
                let model = file
                    .model
                    .clone()
                    .or_else(|| from_env.as_ref().map(|c| c.model.clone()))
                    .unwrap_or_else(|| "default".into());
                let backend = HttpBackend::new(HttpBackendConfig {
                    url,
                    model,
                    api_key: std::env::var(&file.api_key_env).ok(),
                    timeout_secs: file.timeout_secs.unwrap_or(300),
                })?;
                LlmClient::new(Arc::new(backend))
            }
        };
        let mut retry = RetryPolicy::default();
        if let Some(n) = file.max_retries {
            retry.max_retries = n;
        }
        let client = client.with_retry(retry);
        match file.max_in_flight {
            Some(n) => client.with_max_in_flight(n),
            None => client,
        }
    };
    Ok(client.with_sink(sink))
}

/// Mock ids use the file name only, so reports do not depend on where the
/// fixtures live.
fn backend_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("mock:{name}")
}
