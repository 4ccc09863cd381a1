//! Validation-oracle generation.
//!
//! An agent model writes a candidate test suite from the API's docstrings and
//! reference implementation. The suite is run against the reference through
//! the sandbox, and an evaluator model grades it for comprehensiveness and
//! coverage breadth. Both signals are fed back (overwriting the previous
//! round's feedback) until the suite passes and grades well, or the iteration
//! cap is reached.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{extract_tag, tag_attribute, tag_pairs, GenerationParams, LlmClient, LlmError, Purpose, TagError};
use crate::sandbox::{Classification, Executor, SandboxError, SandboxJob, SandboxResult};
use crate::store::{emit, EventKind, EventSink, NullSink};
use crate::task::{GenerationMeta, TestCase, TestSuite};

pub const SUITE_TAG: &str = "validation_tests";
pub const TEST_TAG: &str = "test";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("no tests could be parsed from the agent reply")]
    Parse,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("evaluator reply could not be parsed: {0}")]
    EvaluatorParse(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no converged suite after {} iterations", .0.iterations_used)]
    NonConverged(Box<NonConverged>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonConverged {
    pub best: TestSuite,
    pub state: OracleGenState,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleGenInput {
    pub task_id: String,
    pub docstrings: String,
    pub reference_impl: String,
    pub module_path: String,
    pub library_name: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleGenState {
    pub iteration: usize,
    pub feedback_tests: Option<String>,
    pub feedback_quality: Option<String>,
    pub current_suite: Option<TestSuite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub is_good: bool,
    pub critique: String,
    pub comprehensiveness: u8,
    pub coverage_breadth: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub max_iterations: usize,
    /// Minimum score (of 5) on both rubric items for a suite to count as good.
    pub quality_threshold: u8,
    /// Failing-test messages included in test feedback.
    pub max_failures_in_feedback: usize,
    pub params: GenerationParams,
    /// Extra rubric text for the evaluator prompt.
    pub rubric: Option<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 6,
            quality_threshold: 4,
            max_failures_in_feedback: 3,
            params: GenerationParams::default(),
            rubric: None,
        }
    }
}

const DEFAULT_RUBRIC: &str = "Score the suite from 1 to 5 on comprehensiveness (does it pin down the documented behavior, including edge cases and error handling?) and on coverage_breadth (how many distinct input scenarios and code paths does it exercise?).";

pub fn agent_prompt(input: &OracleGenInput, state: &OracleGenState) -> String {
    let mut p = format!(
        "You are writing the validation test suite for the API `{task}` in module `{module}` of the `{library}` library.\n\
         The tests must pass against the reference implementation below and should cover the documented behavior thoroughly.\n\n\
         ## Docstrings\n{ds}\n\n## Reference implementation\n{ri}\n",
        task = input.task_id,
        module = input.module_path,
        library = input.library_name,
        ds = input.docstrings.trim(),
        ri = input.reference_impl.trim(),
    );
    if let Some(f) = &state.feedback_tests {
        p.push_str(&format!(
            "\n## Test failures from the previous attempt\n{}\n",
            f.trim_end()
        ));
    }
    if let Some(f) = &state.feedback_quality {
        p.push_str(&format!("\n## Reviewer critique of the previous attempt\n{}\n", f.trim_end()));
    }
    p.push_str(&format!(
        "\nReturn the suite inside <{SUITE_TAG}>, one <{TEST_TAG} name=\"...\"> element per standalone test.\n"
    ));
    p
}

/// Parses `<test name="...">source</test>` elements from an agent reply.
pub fn parse_suite(task_id: &str, reply: &str) -> Result<TestSuite, OracleError> {
    let block = extract_tag(reply, SUITE_TAG)?;
    let mut cases: Vec<TestCase> = Vec::new();
    for (i, (attrs, body)) in tag_pairs(&block.payload, TEST_TAG).into_iter().enumerate() {
        let source = body.trim();
        if source.is_empty() {
            continue;
        }
        let mut id = tag_attribute(attrs, "name").unwrap_or_else(|| format!("test_{}", i + 1));
        if cases.iter().any(|c| c.id == id) {
            id = format!("{id}_{}", i + 1);
        }
        cases.push(TestCase {
            id,
            source_code: source.to_string(),
            description: None,
        });
    }
    if cases.is_empty() {
        return Err(OracleError::Parse);
    }
    TestSuite::new(task_id, cases).map_err(|_| OracleError::Parse)
}

pub async fn gen_tests(
    input: &OracleGenInput,
    state: &OracleGenState,
    agent: &LlmClient,
    params: &GenerationParams,
) -> Result<TestSuite, OracleError> {
    let reply = agent
        .ask(Purpose::OracleGen, agent_prompt(input, state), params)
        .await?;
    parse_suite(&input.task_id, &reply)
}

pub fn evaluator_prompt(input: &OracleGenInput, suite: &TestSuite, rubric: Option<&str>) -> String {
    let tests: Vec<String> = suite
        .cases
        .iter()
        .map(|c| format!("# {}\n{}", c.id, c.source_code))
        .collect();
    format!(
        "Review the quality of a validation test suite.\n{}\n\n## Docstrings\n{}\n\n## Reference implementation\n{}\n\n## Test suite\n{}\n\n\
         Reply with exactly these lines:\ncomprehensiveness: <1-5>\ncoverage_breadth: <1-5>\ncritique: <what is missing or weak>\n",
        rubric.unwrap_or(DEFAULT_RUBRIC),
        input.docstrings.trim(),
        input.reference_impl.trim(),
        tests.join("\n\n"),
    )
}

/// Parses an evaluator reply. Accepts either the line format
/// (`comprehensiveness: 4`, `coverage_breadth: 5/5`, `critique: ...`) or a
/// JSON object with the same keys.
pub fn parse_quality(reply: &str, threshold: u8) -> Result<QualityVerdict, OracleError> {
    let (comp, cov, critique) = if let Some(v) = json_object(reply) {
        let score = |k: &str| v.get(k).and_then(|x| x.as_u64()).map(|x| x as u8);
        (
            score("comprehensiveness"),
            score("coverage_breadth"),
            v.get("critique")
                .and_then(|c| c.as_str())
                .unwrap_or_default()
                .to_string(),
        )
    } else {
        let mut comp = None;
        let mut cov = None;
        let mut critique = String::new();
        let mut in_critique = false;
        for line in reply.lines() {
            let lower = line.trim().to_ascii_lowercase();
            if let Some(rest) = lower.strip_prefix("comprehensiveness:") {
                comp = parse_score(rest);
                in_critique = false;
            } else if let Some(rest) = lower
                .strip_prefix("coverage_breadth:")
                .or_else(|| lower.strip_prefix("coverage:"))
            {
                cov = parse_score(rest);
                in_critique = false;
            } else if lower.starts_with("critique:") {
                critique = line.trim()["critique:".len()..].trim().to_string();
                in_critique = true;
            } else if in_critique {
                critique.push('\n');
                critique.push_str(line);
            }
        }
        (comp, cov, critique.trim().to_string())
    };
    let (Some(comprehensiveness), Some(coverage_breadth)) = (comp, cov) else {
        return Err(OracleError::EvaluatorParse(truncate(reply, 200)));
    };
    for s in [comprehensiveness, coverage_breadth] {
        if !(1..=5).contains(&s) {
            return Err(OracleError::EvaluatorParse(format!("score {s} outside 1-5")));
        }
    }
    Ok(QualityVerdict {
        is_good: comprehensiveness >= threshold && coverage_breadth >= threshold,
        critique,
        comprehensiveness,
        coverage_breadth,
    })
}

fn json_object(reply: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    serde_json::from_str::<serde_json::Value>(&reply[start..=end])
        .ok()?
        .as_object()
        .cloned()
}

fn parse_score(text: &str) -> Option<u8> {
    let digits: String = text
        .trim()
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Asks the evaluator to grade `suite`; an unparseable reply is retried once.
pub async fn evaluate_quality(
    input: &OracleGenInput,
    suite: &TestSuite,
    evaluator: &LlmClient,
    config: &OracleConfig,
) -> Result<QualityVerdict, OracleError> {
    if suite.cases.is_empty() {
        return Err(OracleError::InvalidInput("cannot evaluate an empty suite".into()));
    }
    let prompt = evaluator_prompt(input, suite, config.rubric.as_deref());
    let mut last_err = None;
    for _ in 0..2 {
        let reply = evaluator
            .ask(Purpose::QualityEval, prompt.clone(), &config.params)
            .await?;
        match parse_quality(&reply, config.quality_threshold) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("loop ran"))
}

pub struct OracleBackends {
    pub agent: LlmClient,
    pub evaluator: LlmClient,
    pub executor: Arc<dyn Executor>,
    pub sink: Arc<dyn EventSink>,
}

impl OracleBackends {
    pub fn new(agent: LlmClient, evaluator: LlmClient, executor: Arc<dyn Executor>) -> Self {
        Self {
            agent,
            evaluator,
            executor,
            sink: Arc::new(NullSink),
        }
    }
}

/// Runs `suite` against the reference implementation.
pub async fn test_against_reference(
    input: &OracleGenInput,
    suite: &TestSuite,
    executor: &dyn Executor,
) -> Result<SandboxResult, OracleError> {
    let job = SandboxJob::new(
        &input.task_id,
        &input.reference_impl,
        &input.module_path,
        &input.library_name,
        suite.clone(),
    );
    Ok(executor.run(job).await?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub suite: TestSuite,
    pub iterations_used: usize,
}

/// Ranks suites seen so far: passing on the reference first, then quality,
/// then fraction of passing tests.
fn rank(result: &SandboxResult, verdict: &QualityVerdict, total: usize) -> (bool, bool, u64, u8) {
    let frac = if total == 0 {
        0
    } else {
        (result.passed() as u64 * 1_000_000) / total as u64
    };
    (
        result.classification == Classification::AllPass,
        verdict.is_good,
        frac,
        verdict.comprehensiveness + verdict.coverage_breadth,
    )
}

pub async fn generate_validation_tests(
    input: &OracleGenInput,
    backends: &OracleBackends,
    config: &OracleConfig,
) -> Result<OracleRun, OracleError> {
    if config.max_iterations == 0 {
        return Err(OracleError::InvalidInput("max_iterations must be at least 1".into()));
    }
    if input.reference_impl.trim().is_empty() {
        return Err(OracleError::InvalidInput("reference implementation is empty".into()));
    }
    let mut state = OracleGenState::default();
    let mut best: Option<(TestSuite, (bool, bool, u64, u8))> = None;

    while state.iteration < config.max_iterations {
        let suite = gen_tests(input, &state, &backends.agent, &config.params).await?;
        state.iteration += 1;
        let result = test_against_reference(input, &suite, backends.executor.as_ref()).await?;
        let verdict = evaluate_quality(input, &suite, &backends.evaluator, config).await?;
        let tests_pass = result.classification == Classification::AllPass;
        emit(
            backends.sink.as_ref(),
            EventKind::Outcome,
            json!({
                "stage": "oracle_gen",
                "task_id": input.task_id,
                "iteration": state.iteration,
                "tests": suite.cases.len(),
                "classification": result.classification,
                "quality": verdict,
            }),
        );

        let score = rank(&result, &verdict, suite.cases.len());
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((suite.clone(), score));
        }

        if tests_pass && verdict.is_good {
            let mut suite = suite;
            suite.generation_meta = Some(GenerationMeta {
                iterations_used: state.iteration,
                generator: backends.agent.backend_id(),
                converged: true,
            });
            return Ok(OracleRun {
                suite,
                iterations_used: state.iteration,
            });
        }

        // Overwrite, never accumulate: the next prompt sees only this round.
        state.feedback_tests =
            (!tests_pass).then(|| result.failure_summary(config.max_failures_in_feedback));
        state.feedback_quality = (!verdict.is_good).then(|| {
            format!(
                "comprehensiveness {}/5, coverage_breadth {}/5. {}",
                verdict.comprehensiveness, verdict.coverage_breadth, verdict.critique
            )
        });
        state.current_suite = Some(suite);
    }

    let (mut best, _) = best.expect("at least one iteration ran");
    best.generation_meta = Some(GenerationMeta {
        iterations_used: state.iteration,
        generator: backends.agent.backend_id(),
        converged: false,
    });
    Err(OracleError::NonConverged(Box::new(NonConverged {
        best,
        iterations_used: state.iteration,
        state,
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub runs: usize,
    pub total_tests: usize,
    pub avg_tests: String,
    pub total_iterations: usize,
    pub avg_iterations: String,
}

/// Totals and one-decimal averages over (tests generated, iterations) per API.
pub fn oracle_metrics(runs: &[(usize, usize)]) -> Option<OracleMetrics> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as u64;
    let total_tests: usize = runs.iter().map(|r| r.0).sum();
    let total_iterations: usize = runs.iter().map(|r| r.1).sum();
    Some(OracleMetrics {
        runs: runs.len(),
        total_tests,
        avg_tests: crate::bench::ratio_one_decimal(total_tests as u64, n),
        total_iterations,
        avg_iterations: crate::bench::ratio_one_decimal(total_iterations as u64, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> OracleGenInput {
        OracleGenInput {
            task_id: "minkowski".into(),
            docstrings: "Compute the Minkowski distance.".into(),
            reference_impl: "def minkowski(u, v, p): ...".into(),
            module_path: "scipy.spatial.distance".into(),
            library_name: "scipy".into(),
        }
    }

    #[test]
    fn first_prompt_has_no_feedback_sections() {
        let p = agent_prompt(&input(), &OracleGenState::default());
        assert!(p.contains("Compute the Minkowski distance."));
        assert!(p.contains("def minkowski(u, v, p): ..."));
        assert!(!p.contains("Test failures"));
        assert!(!p.contains("Reviewer critique"));
    }

    #[test]
    fn feedback_is_included_verbatim() {
        let state = OracleGenState {
            iteration: 1,
            feedback_tests: Some("test_3 failed: expected 5, got 4".into()),
            ..Default::default()
        };
        let p = agent_prompt(&input(), &state);
        assert!(p.contains("## Test failures from the previous attempt\ntest_3 failed: expected 5, got 4"));
    }

    #[test]
    fn parses_named_tests() {
        let reply = r#"Here you go.
<validation_tests>
<test name="basic">expect_contains minkowski</test>
<test>expect_absent foo</test>
<test name="basic">expect_contains def</test>
</validation_tests>"#;
        let suite = parse_suite("t", reply).unwrap();
        let ids: Vec<&str> = suite.cases.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["basic", "test_2", "basic_3"]);
    }

    #[test]
    fn zero_tests_is_parse_error() {
        assert!(matches!(
            parse_suite("t", "<validation_tests>nothing here</validation_tests>"),
            Err(OracleError::Parse)
        ));
        assert!(matches!(parse_suite("t", "no tag"), Err(OracleError::Tag(_))));
    }

    #[test]
    fn quality_parsing() {
        let good = parse_quality("good\ncomprehensiveness: 5/5\ncoverage_breadth: 5/5\ncritique: fine", 4).unwrap();
        assert!(good.is_good);
        let weak = parse_quality(
            "comprehensiveness: 4\ncoverage_breadth: 2/5\ncritique: no edge cases for empty arrays",
            4,
        )
        .unwrap();
        assert!(!weak.is_good);
        assert_eq!(weak.critique, "no edge cases for empty arrays");
        let json = parse_quality(r#"{"comprehensiveness": 4, "coverage_breadth": 4, "critique": "ok"}"#, 4).unwrap();
        assert!(json.is_good);
        assert!(parse_quality("garbled", 4).is_err());
        assert!(parse_quality("comprehensiveness: 9\ncoverage_breadth: 4", 4).is_err());
    }

    #[test]
    fn metrics_single_run() {
        let m = oracle_metrics(&[(9, 1)]).unwrap();
        assert_eq!(
            (m.total_tests, m.avg_tests.as_str(), m.total_iterations, m.avg_iterations.as_str()),
            (9, "9.0", 1, "1.0")
        );
        assert!(oracle_metrics(&[]).is_none());
    }
}
