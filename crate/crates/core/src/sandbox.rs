//! Runs a candidate implementation against a test suite through an external
//! execution shim.
//!
//! The shim reads one JSON request on stdin and writes one JSON response on
//! stdout (see [`ShimRequest`] / [`ShimResponse`]). Each job gets a private
//! temporary workspace: an optional library snapshot is copied in, the
//! candidate is appended to the file for its module path, and the shim runs
//! with that directory as its working directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::process::Command;
use tokio::sync::Semaphore;

use crate::store::{emit, EventKind, EventSink, NullSink};
use crate::task::TestSuite;

/// Cap on captured stdout/stderr, in bytes.
pub const TAIL_LIMIT: usize = 8 * 1024;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("shim protocol error: {0}")]
    ShimProtocol(String),
    #[error("environment error: {0}")]
    Environment(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    BuildError,
    RuntimeError,
    SomeTestsFail,
    AllPass,
}

impl Classification {
    /// The candidate built and ran to completion.
    pub fn is_executable(self) -> bool {
        matches!(self, Classification::SomeTestsFail | Classification::AllPass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub case_id: String,
    pub verdict: Verdict,
    pub message: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResult {
    pub build_ok: bool,
    pub per_test: Vec<TestVerdict>,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub classification: Classification,
    pub wall_time_ms: u64,
}

impl SandboxResult {
    pub fn passed(&self) -> usize {
        self.per_test
            .iter()
            .filter(|t| t.verdict == Verdict::Pass)
            .count()
    }

    /// Short human-readable account of what went wrong: the classification, up
    /// to `max_failures` failing test messages, and the stderr tail.
    pub fn failure_summary(&self, max_failures: usize) -> String {
        let mut out = format!("classification: {:?}\n", self.classification);
        for t in self
            .per_test
            .iter()
            .filter(|t| t.verdict != Verdict::Pass)
            .take(max_failures)
        {
            out.push_str(&format!(
                "- {} [{:?}]: {}\n",
                t.case_id,
                t.verdict,
                t.message.trim()
            ));
        }
        if !self.stderr_tail.trim().is_empty() {
            out.push_str("stderr:\n");
            out.push_str(self.stderr_tail.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Bad-generation penalty: 0 iff every test passed.
pub fn penalty_of(result: &SandboxResult) -> u8 {
    if result.classification == Classification::AllPass {
        0
    } else {
        1
    }
}

/// Binary verifiable reward, the complement of [`penalty_of`].
pub fn reward_of(result: &SandboxResult) -> u8 {
    1 - penalty_of(result)
}

fn classify(build_ok: bool, per_test: &[TestVerdict]) -> Classification {
    if !build_ok {
        Classification::BuildError
    } else if per_test.iter().any(|t| t.verdict == Verdict::Error) {
        Classification::RuntimeError
    } else if per_test.iter().all(|t| t.verdict == Verdict::Pass) {
        Classification::AllPass
    } else {
        Classification::SomeTestsFail
    }
}

// ---------------------------------------------------------------------------
// Wire protocol

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireTest {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShimRequest {
    pub candidate_source: String,
    pub module_path: String,
    pub library_name: String,
    pub tests: Vec<WireTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireVerdict {
    pub id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub message: String,
    #[serde(default)]
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShimResponse {
    pub build_ok: bool,
    #[serde(default)]
    pub tests: Vec<WireVerdict>,
    #[serde(default)]
    pub stdout_tail: String,
    #[serde(default)]
    pub stderr_tail: String,
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SandboxJob {
    pub task_id: String,
    pub candidate_source: String,
    pub module_path: String,
    pub library_name: String,
    pub suite: TestSuite,
    pub timeout: Duration,
    pub env_overrides: BTreeMap<String, String>,
}

impl SandboxJob {
    pub fn new(
        task_id: impl Into<String>,
        candidate_source: impl Into<String>,
        module_path: impl Into<String>,
        library_name: impl Into<String>,
        suite: TestSuite,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            candidate_source: candidate_source.into(),
            module_path: module_path.into(),
            library_name: library_name.into(),
            suite,
            timeout: Duration::from_secs(60),
            env_overrides: BTreeMap::new(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout.is_zero() {
            return Err(SandboxError::InvalidJob("timeout must be positive".into()));
        }
        if self.candidate_source.trim().is_empty() {
            return Err(SandboxError::InvalidJob("candidate source is empty".into()));
        }
        Ok(())
    }

    pub fn request(&self) -> ShimRequest {
        ShimRequest {
            candidate_source: self.candidate_source.clone(),
            module_path: self.module_path.clone(),
            library_name: self.library_name.clone(),
            tests: self
                .suite
                .cases
                .iter()
                .map(|c| WireTest {
                    id: c.id.clone(),
                    source: c.source_code.clone(),
                })
                .collect(),
        }
    }
}

/// Anything that can execute a job. [`Sandbox`] is the subprocess
/// implementation; tests may substitute their own.
#[async_trait]
pub trait Executor: Send + Sync {
    async fn run(&self, job: SandboxJob) -> Result<SandboxResult, SandboxError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    /// Shim command line: program followed by its arguments.
    pub shim: Vec<String>,
    pub workers: usize,
    pub timeout_secs: f64,
    /// Directory copied into every job workspace.
    pub library_snapshot: Option<PathBuf>,
    /// Extension of the module file the candidate is written to.
    pub module_file_ext: String,
    /// Parent directory for job workspaces (system temp dir when unset).
    pub workspace_root: Option<PathBuf>,
    pub keep_workspaces: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            shim: Vec::new(),
            workers: 4,
            timeout_secs: 60.0,
            library_snapshot: None,
            module_file_ext: "py".into(),
            workspace_root: None,
            keep_workspaces: false,
        }
    }
}

impl SandboxConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Checks the shim program can be found.
    pub fn check_shim(&self) -> Result<PathBuf, SandboxError> {
        let program = self
            .shim
            .first()
            .ok_or_else(|| SandboxError::Environment("no shim command configured".into()))?;
        resolve_program(program).ok_or_else(|| {
            SandboxError::Environment(format!("shim `{program}` not found or not executable"))
        })
    }
}

fn resolve_program(program: &str) -> Option<PathBuf> {
    let p = Path::new(program);
    if p.components().count() > 1 || p.is_absolute() {
        return p.is_file().then(|| p.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|c| c.is_file())
}

pub struct Sandbox {
    config: SandboxConfig,
    permits: Arc<Semaphore>,
    sink: Arc<dyn EventSink>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).finish()
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        config.check_shim()?;
        Ok(Self {
            permits: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            sink: Arc::new(NullSink),
        })
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn prepare_workspace(&self, job: &SandboxJob) -> Result<tempfile::TempDir, SandboxError> {
        let env_err = |e: std::io::Error| SandboxError::Environment(e.to_string());
        let dir = match &self.config.workspace_root {
            Some(root) => {
                std::fs::create_dir_all(root).map_err(env_err)?;
                tempfile::Builder::new().prefix("april-job-").tempdir_in(root)
            }
            None => tempfile::Builder::new().prefix("april-job-").tempdir(),
        }
        .map_err(env_err)?;
        if let Some(snapshot) = &self.config.library_snapshot {
            copy_tree(snapshot, dir.path()).map_err(env_err)?;
        }
        let mut module_file = dir.path().to_path_buf();
        for part in job.module_path.split('.').filter(|s| !s.is_empty()) {
            module_file.push(part);
        }
        module_file.set_extension(&self.config.module_file_ext);
        if let Some(parent) = module_file.parent() {
            std::fs::create_dir_all(parent).map_err(env_err)?;
        }
        let mut existing = std::fs::read_to_string(&module_file).unwrap_or_default();
        if !existing.is_empty() && !existing.ends_with('\n') {
            existing.push('\n');
        }
        existing.push_str(&job.candidate_source);
        existing.push('\n');
        std::fs::write(&module_file, existing).map_err(env_err)?;
        Ok(dir)
    }

    async fn invoke(&self, job: &SandboxJob, workspace: &Path) -> Result<SandboxResult, SandboxError> {
        let request = serde_json::to_vec(&job.request())
            .map_err(|e| SandboxError::ShimProtocol(e.to_string()))?;
        let (program, args) = self
            .config
            .shim
            .split_first()
            .ok_or_else(|| SandboxError::Environment("no shim command configured".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .current_dir(workspace)
            .env("APRIL_WORKSPACE", workspace)
            .env("APRIL_MODULE_PATH", &job.module_path)
            .envs(&job.env_overrides)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| SandboxError::Environment(format!("cannot launch shim `{program}`: {e}")))?;

        let start = Instant::now();
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let io = async {
            // A shim that exits without reading stdin yields a broken pipe; the
            // exit status and output decide the result in that case.
            let _ = stdin.write_all(&request).await;
            drop(stdin);
            let mut out = Vec::new();
            let mut err = Vec::new();
            let (r1, r2) = tokio::join!(stdout.read_to_end(&mut out), stderr.read_to_end(&mut err));
            r1.and(r2)?;
            let status = child.wait().await?;
            Ok::<_, std::io::Error>((status, out, err))
        };

        let outcome = tokio::time::timeout(job.timeout, io).await;
        let wall_time_ms = start.elapsed().as_millis() as u64;
        let (status, out, err) = match outcome {
            Err(_) => {
                // kill_on_drop reaps the child when `child` goes out of scope
                return Ok(SandboxResult {
                    build_ok: true,
                    per_test: job
                        .suite
                        .cases
                        .iter()
                        .map(|c| TestVerdict {
                            case_id: c.id.clone(),
                            verdict: Verdict::Error,
                            message: "timeout".into(),
                            duration_ms: 0,
                        })
                        .collect(),
                    stdout_tail: String::new(),
                    stderr_tail: "timeout".into(),
                    classification: Classification::RuntimeError,
                    wall_time_ms,
                });
            }
            Ok(Err(e)) => return Err(SandboxError::Environment(e.to_string())),
            Ok(Ok(v)) => v,
        };

        let response: ShimResponse = match serde_json::from_slice(&out) {
            Ok(r) => r,
            Err(e) => {
                return Err(SandboxError::ShimProtocol(format!(
                    "unparseable shim output (exit {:?}): {e}; stderr: {}",
                    status.code(),
                    tail(&String::from_utf8_lossy(&err), 512)
                )))
            }
        };
        if !status.success() {
            tracing::warn!("shim exited with {status} but produced a well-formed response");
        }
        let mut result = into_result(job, response)?;
        result.wall_time_ms = wall_time_ms;
        if result.stderr_tail.is_empty() {
            result.stderr_tail = tail(&String::from_utf8_lossy(&err), TAIL_LIMIT);
        }
        Ok(result)
    }

    pub async fn run_candidate(&self, job: SandboxJob) -> Result<SandboxResult, SandboxError> {
        job.validate()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| SandboxError::Environment(e.to_string()))?;
        let workspace = self.prepare_workspace(&job)?;
        let result = self.invoke(&job, workspace.path()).await;
        if self.config.keep_workspaces {
            let kept = workspace.keep();
            tracing::info!("kept workspace {}", kept.display());
        } else {
            drop(workspace);
        }
        if let Ok(r) = &result {
            emit(
                self.sink.as_ref(),
                EventKind::SandboxResult,
                serde_json::json!({
                    "task_id": job.task_id,
                    "candidate_hash": crate::store::content_hash(job.candidate_source.as_bytes()),
                    "classification": r.classification,
                    "passed": r.passed(),
                    "total": job.suite.cases.len(),
                }),
            );
        }
        result
    }
}

#[async_trait]
impl Executor for Sandbox {
    async fn run(&self, job: SandboxJob) -> Result<SandboxResult, SandboxError> {
        self.run_candidate(job).await
    }
}

/// Converts a shim response into a result, enforcing the id and build
/// invariants. Tests the shim did not report are recorded as errors.
pub fn into_result(job: &SandboxJob, response: ShimResponse) -> Result<SandboxResult, SandboxError> {
    let suite_ids: HashSet<&str> = job.suite.cases.iter().map(|c| c.id.as_str()).collect();
    let mut per_test = Vec::new();
    if response.build_ok {
        let mut seen = HashSet::new();
        for v in response.tests {
            if !suite_ids.contains(v.id.as_str()) {
                return Err(SandboxError::ShimProtocol(format!(
                    "verdict for unknown test id `{}`",
                    v.id
                )));
            }
            if !seen.insert(v.id.clone()) {
                return Err(SandboxError::ShimProtocol(format!(
                    "duplicate verdict for test id `{}`",
                    v.id
                )));
            }
            per_test.push(TestVerdict {
                case_id: v.id,
                verdict: v.verdict,
                message: v.message,
                duration_ms: v.duration_ms,
            });
        }
        for c in &job.suite.cases {
            if !seen.contains(&c.id) {
                per_test.push(TestVerdict {
                    case_id: c.id.clone(),
                    verdict: Verdict::Error,
                    message: "no verdict reported by shim".into(),
                    duration_ms: 0,
                });
            }
        }
    }
    let classification = classify(response.build_ok, &per_test);
    Ok(SandboxResult {
        build_ok: response.build_ok,
        per_test,
        stdout_tail: tail(&response.stdout_tail, TAIL_LIMIT),
        stderr_tail: tail(&response.stderr_tail, TAIL_LIMIT),
        classification,
        wall_time_ms: 0,
    })
}

/// Last `limit` bytes of `s`, cut at a char boundary.
pub fn tail(s: &str, limit: usize) -> String {
    if s.len() <= limit {
        return s.to_string();
    }
    let mut start = s.len() - limit;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_string()
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry
            .path()
            .strip_prefix(src)
            .map_err(std::io::Error::other)?;
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TestCase;

    fn suite(ids: &[&str]) -> TestSuite {
        TestSuite::new(
            "t",
            ids.iter()
                .map(|id| TestCase {
                    id: id.to_string(),
                    source_code: format!("test {id}"),
                    description: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn job(ids: &[&str]) -> SandboxJob {
        SandboxJob::new("t", "def f(): pass", "pkg.mod", "pkg", suite(ids))
    }

    fn verdict(id: &str, v: Verdict) -> WireVerdict {
        WireVerdict {
            id: id.into(),
            verdict: v,
            message: String::new(),
            duration_ms: 1,
        }
    }

    fn response(build_ok: bool, tests: Vec<WireVerdict>) -> ShimResponse {
        ShimResponse {
            build_ok,
            tests,
            stdout_tail: String::new(),
            stderr_tail: String::new(),
        }
    }

    #[test]
    fn classification_rules() {
        let j = job(&["a", "b", "c"]);
        let all = into_result(
            &j,
            response(true, ["a", "b", "c"].iter().map(|i| verdict(i, Verdict::Pass)).collect()),
        )
        .unwrap();
        assert_eq!(all.classification, Classification::AllPass);
        assert_eq!(penalty_of(&all), 0);

        let some = into_result(
            &j,
            response(
                true,
                vec![
                    verdict("a", Verdict::Pass),
                    verdict("b", Verdict::Fail),
                    verdict("c", Verdict::Pass),
                ],
            ),
        )
        .unwrap();
        assert_eq!(some.classification, Classification::SomeTestsFail);
        assert_eq!(penalty_of(&some), 1);

        let err = into_result(
            &j,
            response(
                true,
                vec![
                    verdict("a", Verdict::Error),
                    verdict("b", Verdict::Fail),
                    verdict("c", Verdict::Pass),
                ],
            ),
        )
        .unwrap();
        assert_eq!(err.classification, Classification::RuntimeError);
    }

    #[test]
    fn build_error_drops_verdicts() {
        let j = job(&["a"]);
        let r = into_result(&j, response(false, vec![verdict("a", Verdict::Pass)])).unwrap();
        assert_eq!(r.classification, Classification::BuildError);
        assert!(r.per_test.is_empty());
        assert_eq!(penalty_of(&r), 1);
        assert_eq!(reward_of(&r), 0);
    }

    #[test]
    fn unknown_ids_are_protocol_errors() {
        let j = job(&["a"]);
        assert!(matches!(
            into_result(&j, response(true, vec![verdict("zzz", Verdict::Pass)])),
            Err(SandboxError::ShimProtocol(_))
        ));
    }

    #[test]
    fn missing_verdicts_become_errors() {
        let j = job(&["a", "b"]);
        let r = into_result(&j, response(true, vec![verdict("a", Verdict::Pass)])).unwrap();
        assert_eq!(r.classification, Classification::RuntimeError);
        assert_eq!(r.per_test.len(), 2);
    }

    #[test]
    fn skipped_is_not_a_pass() {
        let j = job(&["a"]);
        let r = into_result(&j, response(true, vec![verdict("a", Verdict::Skipped)])).unwrap();
        assert_eq!(r.classification, Classification::SomeTestsFail);
    }

    #[test]
    fn tails_are_capped_on_char_boundaries() {
        let s = "é".repeat(5000);
        let t = tail(&s, TAIL_LIMIT);
        assert!(t.len() <= TAIL_LIMIT);
        assert!(t.chars().all(|c| c == 'é'));
        assert_eq!(tail("short", 10), "short");
    }

    #[test]
    fn missing_shim_is_environment_error() {
        let cfg = SandboxConfig {
            shim: vec!["/definitely/not/here/shim".into()],
            ..Default::default()
        };
        assert!(matches!(Sandbox::new(cfg), Err(SandboxError::Environment(_))));
        assert!(matches!(
            Sandbox::new(SandboxConfig::default()),
            Err(SandboxError::Environment(_))
        ));
    }

    #[test]
    fn wire_request_shape() {
        let req = job(&["a"]).request();
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "candidate_source": "def f(): pass",
                "module_path": "pkg.mod",
                "library_name": "pkg",
                "tests": [{"id": "a", "source": "test a"}]
            })
        );
    }

    #[test]
    fn failure_summary_lists_up_to_three() {
        let j = job(&["a", "b", "c", "d"]);
        let r = into_result(
            &j,
            response(
                true,
                ["a", "b", "c", "d"]
                    .iter()
                    .map(|i| WireVerdict {
                        message: format!("boom {i}"),
                        ..verdict(i, Verdict::Fail)
                    })
                    .collect(),
            ),
        )
        .unwrap();
        let s = r.failure_summary(3);
        assert!(s.contains("boom a") && s.contains("boom c") && !s.contains("boom d"));
    }
}
