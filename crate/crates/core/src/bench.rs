//! Benchmark runner and report arithmetic.
//!
//! Percentages and averages are computed from integer counts and rounded
//! half-up to one decimal, so `76 / 81` prints as `93.8`.

use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{extract_tagged_output, GenerationParams, LlmClient, Purpose};
use crate::prompt::PromptTemplate;
use crate::sandbox::{Classification, Executor, SandboxJob};
use crate::store::{emit, Event, EventKind, EventSink, NullSink};
use crate::task::{SynthesisTask, TaskBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("benchmark has no tasks")]
    EmptyBenchmark,
    #[error("report has no outcome groups")]
    EmptyReport,
    #[error("comparison task sets differ: {0}")]
    MismatchedTaskSets(String),
}

/// `num / den` rounded half-up to one decimal, as text.
pub fn ratio_one_decimal(num: u64, den: u64) -> String {
    let tenths = tenths_half_up(num, den);
    format!("{}.{}", tenths / 10, tenths % 10)
}

fn tenths_half_up(num: u64, den: u64) -> u64 {
    assert!(den > 0, "denominator must be positive");
    (20 * num + den) / (2 * den)
}

/// `100 * count / total`, one decimal, half-up.
pub fn percent_one_decimal(count: usize, total: usize) -> String {
    ratio_one_decimal(100 * count as u64, total as u64)
}

/// Signed difference of two percentages in tenths of a point, rounded first.
fn percent_tenths(count: usize, total: usize) -> i64 {
    tenths_half_up(100 * count as u64, total as u64) as i64
}

fn format_signed_tenths(t: i64) -> String {
    let sign = if t < 0 { "-" } else { "" };
    let a = t.unsigned_abs();
    format!("{sign}{}.{}", a / 10, a % 10)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub benchmark: String,
    pub executable: bool,
    pub all_tests_passed: bool,
    /// Sandbox classification, absent when no candidate could be extracted.
    pub classification: Option<Classification>,
    pub attempts: usize,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Whether any of the attempts passed; only set when more than one attempt ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_of_n_passed: Option<bool>,
}

impl TaskOutcome {
    /// Outcome of a task whose candidate was executed.
    pub fn executed(task: &SynthesisTask, classification: Classification) -> Self {
        Self {
            task_id: task.id.clone(),
            benchmark: task.library_name.clone(),
            executable: classification.is_executable(),
            all_tests_passed: classification == Classification::AllPass,
            classification: Some(classification),
            attempts: 1,
            duration_ms: 0,
            error: None,
            best_of_n_passed: None,
        }
    }

    /// Outcome of a task that never reached execution.
    pub fn failed(task: &SynthesisTask, error: String, duration_ms: u64) -> Self {
        Self {
            task_id: task.id.clone(),
            benchmark: task.library_name.clone(),
            executable: false,
            all_tests_passed: false,
            classification: None,
            attempts: 1,
            duration_ms,
            error: Some(error),
            best_of_n_passed: None,
        }
    }
}

/// Builds `tasks` synthetic outcomes with the given executable / passing
/// counts, for reproducing published tables.
pub fn outcomes_from_counts(benchmark: &str, tasks: usize, executable: usize, passed: usize) -> Vec<TaskOutcome> {
    assert!(passed <= executable && executable <= tasks);
    (0..tasks)
        .map(|i| {
            let all_tests_passed = i < passed;
            let executable = i < executable;
            TaskOutcome {
                task_id: format!("{benchmark}-{i:03}"),
                benchmark: benchmark.to_string(),
                executable,
                all_tests_passed,
                classification: Some(if all_tests_passed {
                    Classification::AllPass
                } else if executable {
                    Classification::SomeTestsFail
                } else {
                    Classification::RuntimeError
                }),
                attempts: 1,
                duration_ms: 0,
                error: None,
                best_of_n_passed: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub task_count: usize,
    pub executable_count: usize,
    pub executable_pct: String,
    pub passed_count: usize,
    pub passed_pct: String,
}

impl BenchRow {
    fn from_counts(name: &str, task_count: usize, executable_count: usize, passed_count: usize) -> Self {
        Self {
            name: name.to_string(),
            task_count,
            executable_count,
            executable_pct: percent_one_decimal(executable_count, task_count),
            passed_count,
            passed_pct: percent_one_decimal(passed_count, task_count),
        }
    }

    /// `"76(93.8%)"`.
    pub fn passed_cell(&self) -> String {
        format!("{}({}%)", self.passed_count, self.passed_pct)
    }

    pub fn executable_cell(&self) -> String {
        format!("{}({}%)", self.executable_count, self.executable_pct)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub benchmark: String,
    pub classification: Option<Classification>,
    pub executable: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Fingerprint {
    pub prompt_hash: String,
    pub synthesizer: String,
    pub seed: Option<u64>,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub total: BenchRow,
    pub tasks: Vec<TaskRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_of_n: Option<BenchRow>,
    #[serde(default)]
    pub fingerprint: Fingerprint,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Groups outcomes by benchmark in first-appearance order.
pub fn group_by_benchmark(outcomes: &[TaskOutcome]) -> Vec<(String, Vec<TaskOutcome>)> {
    let mut groups: Vec<(String, Vec<TaskOutcome>)> = Vec::new();
    for o in outcomes {
        match groups.iter_mut().find(|(n, _)| *n == o.benchmark) {
            Some((_, v)) => v.push(o.clone()),
            None => groups.push((o.benchmark.clone(), vec![o.clone()])),
        }
    }
    groups
}

pub fn compute_report(groups: &[(String, Vec<TaskOutcome>)]) -> Result<BenchReport, BenchError> {
    if groups.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut rows = Vec::new();
    let (mut t, mut e, mut p) = (0, 0, 0);
    let mut tasks = Vec::new();
    let mut best = (0usize, false);
    for (name, outcomes) in groups {
        if outcomes.is_empty() {
            return Err(BenchError::EmptyReport);
        }
        let exec = outcomes.iter().filter(|o| o.executable).count();
        let pass = outcomes.iter().filter(|o| o.all_tests_passed).count();
        rows.push(BenchRow::from_counts(name, outcomes.len(), exec, pass));
        t += outcomes.len();
        e += exec;
        p += pass;
        for o in outcomes {
            if let Some(b) = o.best_of_n_passed {
                best.1 = true;
                best.0 += usize::from(b);
            }
            tasks.push(TaskRow {
                task_id: o.task_id.clone(),
                benchmark: name.clone(),
                classification: o.classification,
                executable: o.executable,
                passed: o.all_tests_passed,
            });
        }
    }
    Ok(BenchReport {
        rows,
        total: BenchRow::from_counts("Total", t, e, p),
        tasks,
        best_of_n: best
            .1
            .then(|| BenchRow::from_counts("Best-of-N (not single-shot)", t, e, best.0)),
        fingerprint: Fingerprint::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub task_count: usize,
    pub baseline: String,
    pub treatment: String,
    /// Treatment minus baseline pass rate, in percentage points (of the
    /// rounded percentages).
    pub delta_points: String,
    /// Relative change of the pass count, in percent.
    pub relative_change: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

fn comparison_row(b: &BenchRow, t: &BenchRow) -> ComparisonRow {
    let delta = percent_tenths(t.passed_count, t.task_count) - percent_tenths(b.passed_count, b.task_count);
    let relative_change = if b.passed_count == 0 {
        "n/a".to_string()
    } else {
        // (t/b - 1) * 100 in tenths, half away from zero
        let num = 1000 * (t.passed_count as i64 - b.passed_count as i64);
        let den = b.passed_count as i64;
        let tenths = (2 * num + den * num.signum()) / (2 * den);
        format_signed_tenths(tenths)
    };
    ComparisonRow {
        name: t.name.clone(),
        task_count: t.task_count,
        baseline: b.passed_cell(),
        treatment: t.passed_cell(),
        delta_points: format_signed_tenths(delta),
        relative_change,
    }
}

pub fn compare_reports(baseline: &BenchReport, treatment: &BenchReport) -> Result<Comparison, BenchError> {
    let names = |r: &BenchReport| r.rows.iter().map(|x| (x.name.clone(), x.task_count)).collect::<Vec<_>>();
    if names(baseline) != names(treatment) {
        return Err(BenchError::MismatchedTaskSets(format!(
            "{:?} vs {:?}",
            names(baseline),
            names(treatment)
        )));
    }
    let ids = |r: &BenchReport| {
        let mut v: Vec<String> = r.tasks.iter().map(|x| x.task_id.clone()).collect();
        v.sort();
        v
    };
    if ids(baseline) != ids(treatment) {
        return Err(BenchError::MismatchedTaskSets("task ids differ".into()));
    }
    let mut rows: Vec<ComparisonRow> = baseline
        .rows
        .iter()
        .zip(&treatment.rows)
        .map(|(b, t)| comparison_row(b, t))
        .collect();
    rows.push(comparison_row(&baseline.total, &treatment.total));
    Ok(Comparison { rows })
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.push('\n');
    let last = rows.len().saturating_sub(1);
    for (i, r) in rows.iter().enumerate() {
        if i == last && rows.len() > 1 {
            out.push_str(
                &widths
                    .iter()
                    .map(|w| "-".repeat(*w))
                    .collect::<Vec<_>>()
                    .join("-+-"),
            );
            out.push('\n');
        }
        out.push_str(&line(r.clone()));
        out.push('\n');
    }
    out
}

/// Executability / pass-rate table, one row per benchmark plus the total.
pub fn render_report(report: &BenchReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .chain(std::iter::once(&report.total))
        .map(|r| {
            vec![
                r.name.clone(),
                r.task_count.to_string(),
                r.executable_cell(),
                r.passed_cell(),
            ]
        })
        .collect();
    let mut out = render_table(&["Benchmark", "#Tasks", "Executability", "Test Pass Rate"], &rows);
    if let Some(b) = &report.best_of_n {
        out.push_str(&format!(
            "{} (attempts={}): {}\n",
            b.name,
            report.fingerprint.attempts,
            b.passed_cell()
        ));
    }
    out
}

pub fn render_comparison(cmp: &Comparison) -> String {
    let rows: Vec<Vec<String>> = cmp
        .rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.task_count.to_string(),
                r.baseline.clone(),
                r.treatment.clone(),
                format!("{} pp", r.delta_points),
                format!("{}%", r.relative_change),
            ]
        })
        .collect();
    render_table(
        &[
            "Benchmark",
            "#Tasks",
            "Success Rate: Baseline",
            "Success Rate: Treatment",
            "Delta",
            "Relative",
        ],
        &rows,
    )
}

// ---------------------------------------------------------------------------
// Running

/// Produces a raw completion for a rendered prompt.
#[async_trait]
pub trait Synthesizer: Send + Sync {
    fn id(&self) -> String;

    async fn synthesize(&self, task: &SynthesisTask, prompt: &str, attempt: usize) -> Result<String, String>;
}

pub struct LlmSynthesizer {
    pub client: LlmClient,
    pub params: GenerationParams,
}

#[async_trait]
impl Synthesizer for LlmSynthesizer {
    fn id(&self) -> String {
        self.client.backend_id()
    }

    async fn synthesize(&self, _task: &SynthesisTask, prompt: &str, _attempt: usize) -> Result<String, String> {
        self.client
            .ask(Purpose::Synthesis, prompt, &self.params)
            .await
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone)]
pub struct BenchOptions {
    pub attempts: usize,
    pub concurrency: usize,
    pub timeout: std::time::Duration,
    pub sink: Arc<dyn EventSink>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            attempts: 1,
            concurrency: 4,
            timeout: std::time::Duration::from_secs(60),
            sink: Arc::new(NullSink),
        }
    }
}

/// Renders, synthesizes, extracts and executes one candidate.
pub async fn synthesize_and_run(
    bundle: &TaskBundle,
    prompt: &PromptTemplate,
    synthesizer: &dyn Synthesizer,
    executor: &dyn Executor,
    attempt: usize,
    timeout: std::time::Duration,
) -> Result<(String, crate::sandbox::SandboxResult), String> {
    let text = prompt.render(&bundle.task).map_err(|e| e.to_string())?;
    let completion = synthesizer.synthesize(&bundle.task, &text, attempt).await?;
    let candidate = extract_tagged_output(&completion).map_err(|e| e.to_string())?;
    let job = SandboxJob::new(
        &bundle.task.id,
        &candidate,
        &bundle.task.module_path,
        &bundle.task.library_name,
        bundle.suite.clone(),
    )
    .with_timeout(timeout);
    let result = executor.run(job).await.map_err(|e| e.to_string())?;
    Ok((candidate, result))
}

async fn run_one(
    bundle: &TaskBundle,
    prompt: &PromptTemplate,
    synthesizer: &dyn Synthesizer,
    executor: &dyn Executor,
    options: &BenchOptions,
) -> TaskOutcome {
    let start = Instant::now();
    let first = synthesize_and_run(bundle, prompt, synthesizer, executor, 0, options.timeout).await;
    let mut outcome = match &first {
        Err(e) => TaskOutcome::failed(&bundle.task, e.clone(), 0),
        Ok((_, r)) => TaskOutcome::executed(&bundle.task, r.classification),
    };
    if options.attempts > 1 {
        let mut any = outcome.all_tests_passed;
        for attempt in 1..options.attempts {
            if any {
                break;
            }
            if let Ok((_, r)) =
                synthesize_and_run(bundle, prompt, synthesizer, executor, attempt, options.timeout).await
            {
                any = r.classification == Classification::AllPass;
            }
            outcome.attempts = attempt + 1;
        }
        outcome.best_of_n_passed = Some(any);
    }
    outcome.duration_ms = start.elapsed().as_millis() as u64;
    outcome
}

/// Runs every task once (plus optional extra attempts). Per-task failures are
/// recorded as non-executable outcomes; results keep input order.
pub async fn run_benchmark(
    tasks: &[TaskBundle],
    prompt: &PromptTemplate,
    synthesizer: &dyn Synthesizer,
    executor: &dyn Executor,
    options: &BenchOptions,
) -> Result<Vec<TaskOutcome>, BenchError> {
    if tasks.is_empty() {
        return Err(BenchError::EmptyBenchmark);
    }
    let outcomes: Vec<TaskOutcome> = futures::stream::iter(tasks)
        .map(|b| run_one(b, prompt, synthesizer, executor, options))
        .buffered(options.concurrency.max(1))
        .collect()
        .await;
    for o in &outcomes {
        emit(
            options.sink.as_ref(),
            EventKind::Outcome,
            json!({ "stage": "bench", "outcome": o }),
        );
    }
    Ok(outcomes)
}

/// Bench outcomes recovered from a run's event log.
pub fn outcomes_from_events(events: &[Event]) -> Vec<TaskOutcome> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Outcome && e.payload["stage"] == "bench")
        .filter_map(|e| serde_json::from_value(e.payload["outcome"].clone()).ok())
        .collect()
}
