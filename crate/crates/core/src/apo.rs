//! Automatic prompt optimization.
//!
//! A prompt is scored by its discriminator score over a set of training
//! tasks: each task is synthesized once, run against its validation suite,
//! and charged a penalty of 1 unless every test passes. Critiques of the
//! failing generations form a text gradient, an edit model proposes revised
//! prompts from it, and a beam search keeps the best-scoring candidates.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bench::Synthesizer;
use crate::llm::{extract_tagged_output, tag_attribute, tag_pairs, GenerationParams, LlmClient, LlmError, Purpose};
use crate::prompt::{PromptError, PromptTemplate};
use crate::sandbox::{penalty_of, Executor, SandboxError, SandboxJob};
use crate::store::{emit, EventKind, EventSink, NullSink};
use crate::task::TaskBundle;

pub const UNPARSEABLE_CRITIQUE: &str = "unparseable output";
const PROPOSAL_TAG: &str = "prompt";

#[derive(Debug, Error)]
pub enum ApoError {
    #[error("invalid beam configuration: {0}")]
    InvalidConfig(String),
    #[error("no training tasks to score against")]
    EmptyTrainingSet,
    #[error("edit model produced no admissible prompts for {0}")]
    NoAdmissibleChildren(String),
    #[error("synthesis failed for task {task}: {message}")]
    Synthesis { task: String, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: Option<String>,
    pub edit_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: String,
    pub prompt: PromptTemplate,
    pub ds: Option<f64>,
    pub failures: usize,
    pub n: usize,
    pub critiques: Vec<String>,
    pub failed_task_ids: Vec<String>,
    pub lineage: Lineage,
    pub depth: usize,
    /// Position in creation order; the final tie-breaker.
    pub creation: usize,
}

impl PromptCandidate {
    pub fn root(prompt: PromptTemplate) -> Self {
        Self {
            id: prompt.id.clone(),
            prompt,
            ds: None,
            failures: 0,
            n: 0,
            critiques: Vec::new(),
            failed_task_ids: Vec::new(),
            lineage: Lineage {
                parent: None,
                edit_summary: "initial prompt".into(),
            },
            depth: 0,
            creation: 0,
        }
    }

    pub fn gradient(&self, iteration: usize) -> TextGradient {
        TextGradient {
            concatenated_critiques: self.critiques.join("\n\n"),
            source_task_ids: self.failed_task_ids.clone(),
            iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGradient {
    pub concatenated_critiques: String,
    pub source_task_ids: Vec<String>,
    pub iteration: usize,
}

impl TextGradient {
    pub fn is_empty(&self) -> bool {
        self.source_task_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_depth: usize,
    pub proposals_per_candidate: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_depth: 3,
            proposals_per_candidate: 4,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), ApoError> {
        if self.beam_width == 0 || self.max_depth == 0 || self.proposals_per_candidate == 0 {
            return Err(ApoError::InvalidConfig(
                "beam_width, max_depth and proposals_per_candidate must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Models and executor used while optimizing.
#[derive(Clone)]
pub struct ApoDeps {
    pub synthesizer: Arc<dyn Synthesizer>,
    pub critic: LlmClient,
    pub editor: LlmClient,
    pub executor: Arc<dyn Executor>,
    pub params: GenerationParams,
    pub sink: Arc<dyn EventSink>,
    pub concurrency: usize,
    pub timeout: Duration,
    pub max_failures_in_critique: usize,
}

impl ApoDeps {
    pub fn new(
        synthesizer: Arc<dyn Synthesizer>,
        critic: LlmClient,
        editor: LlmClient,
        executor: Arc<dyn Executor>,
    ) -> Self {
        Self {
            synthesizer,
            critic,
            editor,
            executor,
            params: GenerationParams::default(),
            sink: Arc::new(NullSink),
            concurrency: 4,
            timeout: Duration::from_secs(60),
            max_failures_in_critique: 3,
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }
}

pub fn critique_prompt(template: &PromptTemplate, bundle: &TaskBundle, solution: &str, failure: &str) -> String {
    format!(
        "You are reviewing why a code-generation prompt led to a failing implementation.\n\n\
         Prompt template:\n<prompt_template>\n{}\n</prompt_template>\n\n\
         Task {}: implement `{}` in module {} of {}.\n\n\
         Generated solution:\n<solution>\n{}\n</solution>\n\n\
         Test results:\n<test_results>\n{}</test_results>\n\n\
         In a few sentences, explain what in the prompt let this failure happen and how the prompt should change. \
         Reply with the critique only.",
        template.body(),
        bundle.task.id,
        bundle.task.signature.display_text(),
        bundle.task.module_path,
        bundle.task.library_name,
        solution,
        failure,
    )
}

pub fn edit_prompt(template: &PromptTemplate, gradient: &TextGradient, k: usize) -> String {
    let placeholders: Vec<String> = template
        .required_placeholders()
        .iter()
        .map(|p| format!("{{{p}}}"))
        .collect();
    format!(
        "You improve prompts for a code-generation model.\n\n\
         Current prompt:\n<current_prompt>\n{}\n</current_prompt>\n\n\
         Critiques of generations that failed under this prompt:\n<critiques>\n{}\n</critiques>\n\n\
         Write {k} revised versions of the prompt that address the critiques. \
         Keep each of these placeholders exactly once and unchanged: {}. \
         Wrap every version as <{PROPOSAL_TAG} summary=\"one-line description of the edit\">...</{PROPOSAL_TAG}>.",
        template.body(),
        gradient.concatenated_critiques,
        placeholders.join(", "),
    )
}

struct TaskScore {
    penalty: u8,
    critique: Option<String>,
}

async fn score_task(template: &PromptTemplate, bundle: &TaskBundle, deps: &ApoDeps) -> Result<TaskScore, ApoError> {
    let rendered = template.render(&bundle.task)?;
    let completion = deps
        .synthesizer
        .synthesize(&bundle.task, &rendered, 0)
        .await
        .map_err(|message| ApoError::Synthesis {
            task: bundle.task.id.clone(),
            message,
        })?;
    let solution = match extract_tagged_output(&completion) {
        Ok(s) => s,
        Err(_) => {
            return Ok(TaskScore {
                penalty: 1,
                critique: Some(UNPARSEABLE_CRITIQUE.into()),
            })
        }
    };
    let job = SandboxJob::new(
        &bundle.task.id,
        &solution,
        &bundle.task.module_path,
        &bundle.task.library_name,
        bundle.suite.clone(),
    )
    .with_timeout(deps.timeout);
    let result = deps.executor.run(job).await?;
    let penalty = penalty_of(&result);
    let critique = if penalty == 1 {
        let summary = result.failure_summary(deps.max_failures_in_critique);
        let text = critique_prompt(template, bundle, &solution, &summary);
        let reply = deps.critic.ask(Purpose::Critique, text, &deps.params).await?;
        Some(reply.trim().to_string())
    } else {
        None
    };
    Ok(TaskScore { penalty, critique })
}

/// Scores `candidate` in place: `ds = 1 - failures / n`, critiques in task order.
pub async fn score_prompt(
    candidate: &mut PromptCandidate,
    train: &[TaskBundle],
    deps: &ApoDeps,
) -> Result<f64, ApoError> {
    if train.is_empty() {
        return Err(ApoError::EmptyTrainingSet);
    }
    let template = &candidate.prompt;
    let scores: Vec<Result<TaskScore, ApoError>> = futures::stream::iter(train)
        .map(|b| score_task(template, b, deps))
        .buffered(deps.concurrency.max(1))
        .collect()
        .await;
    let mut failures = 0;
    let mut critiques = Vec::new();
    let mut failed = Vec::new();
    for (bundle, score) in train.iter().zip(scores) {
        let score = score?;
        if score.penalty == 1 {
            failures += 1;
            failed.push(bundle.task.id.clone());
            critiques.push(score.critique.unwrap_or_default());
        }
    }
    let n = train.len();
    let ds = 1.0 - failures as f64 / n as f64;
    candidate.ds = Some(ds);
    candidate.failures = failures;
    candidate.n = n;
    candidate.critiques = critiques;
    candidate.failed_task_ids = failed;

    let blob = deps
        .sink
        .put_blob(candidate.prompt.body().as_bytes())
        .unwrap_or_default();
    emit(
        deps.sink.as_ref(),
        EventKind::CandidateScored,
        json!({
            "id": candidate.id,
            "parent": candidate.lineage.parent,
            "depth": candidate.depth,
            "ds": ds,
            "failures": failures,
            "n": n,
            "prompt_hash": candidate.prompt.hash(),
            "prompt_blob": blob,
            "edit_summary": candidate.lineage.edit_summary,
            "critiques": candidate.critiques,
        }),
    );
    Ok(ds)
}

/// Asks the edit model for `k` revisions of `parent`. Proposals that break
/// the template, repeat each other, or repeat any prompt in `known` (at least
/// the parent's ancestors) are dropped.
pub async fn propose_edits(
    parent: &PromptCandidate,
    known: &[&PromptCandidate],
    gradient: &TextGradient,
    k: usize,
    deps: &ApoDeps,
    next_creation: &mut usize,
) -> Result<Vec<PromptCandidate>, ApoError> {
    let reply = deps
        .editor
        .ask(Purpose::ApoEdit, edit_prompt(&parent.prompt, gradient, k), &deps.params)
        .await?;
    let mut seen: HashSet<String> = known
        .iter()
        .map(|a| a.prompt.normalized_body())
        .collect();
    seen.insert(parent.prompt.normalized_body());

    let mut children = Vec::new();
    for (attrs, body) in tag_pairs(&reply, PROPOSAL_TAG) {
        if children.len() == k {
            break;
        }
        let body = body.trim();
        let id = format!("p{}", *next_creation);
        let prompt = match parent.prompt.with_body(id.clone(), body) {
            Ok(p) => p,
            Err(e) => {
                tracing::debug!("rejected proposal from {}: {e}", parent.id);
                continue;
            }
        };
        if !seen.insert(prompt.normalized_body()) {
            continue;
        }
        let creation = *next_creation;
        *next_creation += 1;
        children.push(PromptCandidate {
            id,
            prompt,
            ds: None,
            failures: 0,
            n: 0,
            critiques: Vec::new(),
            failed_task_ids: Vec::new(),
            lineage: Lineage {
                parent: Some(parent.id.clone()),
                edit_summary: tag_attribute(attrs, "summary").unwrap_or_default(),
            },
            depth: parent.depth + 1,
            creation,
        });
    }
    if children.is_empty() {
        return Err(ApoError::NoAdmissibleChildren(parent.id.clone()));
    }
    Ok(children)
}

/// ds descending, then shallower depth, then earlier creation.
pub fn beam_order(a: &PromptCandidate, b: &PromptCandidate) -> std::cmp::Ordering {
    let ds = |c: &PromptCandidate| c.ds.unwrap_or(f64::NEG_INFINITY);
    ds(b)
        .total_cmp(&ds(a))
        .then(a.depth.cmp(&b.depth))
        .then(a.creation.cmp(&b.creation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamLevel {
    pub level: usize,
    pub scored: Vec<String>,
    pub beam: Vec<String>,
    pub best_ds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamOutcome {
    pub best: PromptCandidate,
    /// Every scored candidate in creation order.
    pub tree: Vec<PromptCandidate>,
    pub levels: Vec<BeamLevel>,
}

impl BeamOutcome {
    /// One line per scored candidate: `{id, parent, depth, ds, prompt_hash}`.
    pub fn write_trace(&self, path: &Path) -> Result<(), ApoError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in &self.tree {
            let line = json!({
                "id": c.id,
                "parent": c.lineage.parent,
                "depth": c.depth,
                "ds": c.ds,
                "prompt_hash": c.prompt.hash(),
            });
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }
}

async fn score_all(
    candidates: Vec<PromptCandidate>,
    train: &[TaskBundle],
    deps: &ApoDeps,
) -> Result<Vec<PromptCandidate>, ApoError> {
    let results: Vec<Result<PromptCandidate, ApoError>> = futures::stream::iter(candidates)
        .map(|mut c| async move {
            score_prompt(&mut c, train, deps).await?;
            Ok(c)
        })
        .buffered(deps.concurrency.max(1))
        .collect()
        .await;
    results.into_iter().collect()
}

/// Beam search from `p0`. Parents stay in the comparison set of the next
/// level, so the best ds per level never decreases. A level with no
/// admissible children ends the search early.
pub async fn beam_search(
    p0: PromptCandidate,
    train: &[TaskBundle],
    config: &BeamConfig,
    deps: &ApoDeps,
) -> Result<BeamOutcome, ApoError> {
    config.validate()?;
    if train.is_empty() {
        return Err(ApoError::EmptyTrainingSet);
    }
    let mut root = p0;
    root.creation = 0;
    score_prompt(&mut root, train, deps).await?;
    let mut next_creation = 1;
    let mut tree = vec![root.clone()];
    let mut beam = vec![root];
    let mut levels = vec![BeamLevel {
        level: 0,
        scored: vec![beam[0].id.clone()],
        beam: vec![beam[0].id.clone()],
        best_ds: beam[0].ds.unwrap_or(0.0),
    }];
    record_level(deps, &levels[0]);

    for level in 1..=config.max_depth {
        let mut children = Vec::new();
        for member in &beam {
            let gradient = member.gradient(level);
            if gradient.is_empty() {
                continue;
            }
            // Everything already in the tree or proposed at this level counts
            // as known, which covers siblings and ancestors.
            let known: Vec<&PromptCandidate> = tree.iter().chain(children.iter()).collect();
            match propose_edits(
                member,
                &known,
                &gradient,
                config.proposals_per_candidate,
                deps,
                &mut next_creation,
            )
            .await
            {
                Ok(c) => children.extend(c),
                Err(ApoError::NoAdmissibleChildren(id)) => emit(
                    deps.sink.as_ref(),
                    EventKind::Warning,
                    json!({ "stage": "apo", "message": format!("no admissible children for {id}") }),
                ),
                Err(e) => return Err(e),
            }
        }
        if children.is_empty() {
            tracing::info!("beam search stopped at level {level}: nothing to expand");
            break;
        }
        let scored = score_all(children, train, deps).await?;
        tree.extend(scored.iter().cloned());
        let scored_ids = scored.iter().map(|c| c.id.clone()).collect();
        let mut pool = beam;
        pool.extend(scored);
        pool.sort_by(beam_order);
        pool.truncate(config.beam_width);
        beam = pool;
        let lvl = BeamLevel {
            level,
            scored: scored_ids,
            beam: beam.iter().map(|c| c.id.clone()).collect(),
            best_ds: beam[0].ds.unwrap_or(0.0),
        };
        record_level(deps, &lvl);
        levels.push(lvl);
    }
    Ok(BeamOutcome {
        best: beam[0].clone(),
        tree,
        levels,
    })
}

fn record_level(deps: &ApoDeps, level: &BeamLevel) {
    emit(
        deps.sink.as_ref(),
        EventKind::BeamLevel,
        serde_json::to_value(level).unwrap_or_default(),
    );
}
