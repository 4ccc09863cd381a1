//! Synthesis task definitions and the on-disk task/suite schemas.
//!
//! A task file is a JSON document with the normative field names
//! `{id, signature:{name, params:[{name, annotation}], returns, kind}, module_path,
//! library_name, examples:[{id, source, description?}], validation_suite}`.
//! The signature may also carry a verbatim `source` line; prompt rendering uses
//! that text as-is and only falls back to `name(p1, p2, ...)` when it is absent.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown task id `{0}`")]
    UnknownTaskId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InvocationKind {
    InstanceMethod,
    ClassMethod,
    StaticMethod,
    #[default]
    ModuleFunction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSignature {
    pub name: String,
    #[serde(default)]
    pub params: Vec<Parameter>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub returns: String,
    #[serde(default)]
    pub kind: InvocationKind,
    /// Verbatim signature text as it appears in the target language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl MethodSignature {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !is_identifier(&self.name) {
            return Err(TaskError::Validation(format!(
                "signature name `{}` is not a valid identifier",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.params {
            if !is_identifier(&p.name) {
                return Err(TaskError::Validation(format!(
                    "parameter name `{}` is not a valid identifier",
                    p.name
                )));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(TaskError::Validation(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Text used when the signature is rendered into a prompt.
    pub fn display_text(&self) -> String {
        match &self.source {
            Some(s) => s.clone(),
            None => {
                let params: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
                format!("{}({})", self.name, params.join(", "))
            }
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    #[serde(rename = "source")]
    pub source_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub iterations_used: usize,
    pub generator: String,
    #[serde(default = "default_true")]
    pub converged: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub task_id: String,
    pub cases: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_meta: Option<GenerationMeta>,
}

impl TestSuite {
    pub fn new(task_id: impl Into<String>, cases: Vec<TestCase>) -> Result<Self, TaskError> {
        let suite = Self {
            task_id: task_id.into(),
            cases,
            generation_meta: None,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let mut ids = HashSet::new();
        for case in &self.cases {
            if case.source_code.trim().is_empty() {
                return Err(TaskError::Validation(format!(
                    "test case `{}` has empty source",
                    case.id
                )));
            }
            if !ids.insert(case.id.as_str()) {
                return Err(TaskError::Validation(format!(
                    "duplicate test case id `{}` in suite for `{}`",
                    case.id, self.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn parse(content: &str) -> Result<Self, TaskError> {
        let suite: TestSuite =
            serde_json::from_str(content).map_err(|e| TaskError::Schema(e.to_string()))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let content = read(path)?;
        Self::parse(&content)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    pub fn case_ids(&self) -> BTreeSet<&str> {
        self.cases.iter().map(|c| c.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisTask {
    pub id: String,
    pub signature: MethodSignature,
    pub module_path: String,
    pub library_name: String,
    pub examples: Vec<TestCase>,
    /// Locator of the held-out validation suite, relative to the task file.
    #[serde(rename = "validation_suite")]
    pub validation_suite_ref: PathBuf,
}

/// Field-presence view used to report missing fields as schema errors before
/// type-level deserialization.
const REQUIRED_FIELDS: [&str; 6] = [
    "id",
    "signature",
    "module_path",
    "library_name",
    "examples",
    "validation_suite",
];

impl SynthesisTask {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.trim().is_empty() {
            return Err(TaskError::Validation("task id is empty".into()));
        }
        self.signature.validate()?;
        if self.examples.is_empty() {
            return Err(TaskError::Validation(format!(
                "task `{}` has no examples",
                self.id
            )));
        }
        let mut ids = HashSet::new();
        for ex in &self.examples {
            if ex.source_code.trim().is_empty() {
                return Err(TaskError::Validation(format!(
                    "example `{}` has empty source",
                    ex.id
                )));
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(TaskError::Validation(format!(
                    "duplicate example id `{}`",
                    ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    /// Checks that `suite` is either disjoint from the examples or contains all
    /// of them (compared by source text).
    pub fn check_suite_relation(&self, suite: &TestSuite) -> Result<(), TaskError> {
        let suite_sources: HashSet<&str> =
            suite.cases.iter().map(|c| c.source_code.trim()).collect();
        let shared = self
            .examples
            .iter()
            .filter(|e| suite_sources.contains(e.source_code.trim()))
            .count();
        if shared == 0 || shared == self.examples.len() {
            Ok(())
        } else {
            Err(TaskError::Validation(format!(
                "validation suite for `{}` partially overlaps the examples ({shared} of {})",
                self.id,
                self.examples.len()
            )))
        }
    }
}

pub fn parse_task_file(content: &str) -> Result<SynthesisTask, TaskError> {
    let value: serde_json::Value =
        serde_json::from_str(content).map_err(|e| TaskError::Schema(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| TaskError::Schema("task file must be a JSON object".into()))?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(TaskError::Schema(format!("missing field `{field}`")));
        }
    }
    let task: SynthesisTask =
        serde_json::from_value(value).map_err(|e| TaskError::Schema(e.to_string()))?;
    task.validate()?;
    Ok(task)
}

/// A task with its validation suite resolved and loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub task: SynthesisTask,
    pub suite: TestSuite,
}

impl TaskBundle {
    pub fn new(task: SynthesisTask, suite: TestSuite) -> Result<Self, TaskError> {
        task.check_suite_relation(&suite)?;
        Ok(Self { task, suite })
    }

    pub fn id(&self) -> &str {
        &self.task.id
    }
}

/// Loads one task file and the suite it references.
pub fn load_task(path: &Path) -> Result<TaskBundle, TaskError> {
    let task = parse_task_file(&read(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let suite = TestSuite::load(&base.join(&task.validation_suite_ref))?;
    TaskBundle::new(task, suite)
}

/// Loads every `*.task.json` file in `dir`, ordered by file name.
pub fn load_task_dir(dir: &Path) -> Result<Vec<TaskBundle>, TaskError> {
    let entries = std::fs::read_dir(dir).map_err(|source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".task.json"))
        })
        .collect();
    paths.sort();
    let bundles = paths
        .iter()
        .map(|p| load_task(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ids = HashSet::new();
    for b in &bundles {
        if !ids.insert(b.id().to_string()) {
            return Err(TaskError::Validation(format!(
                "duplicate task id `{}` in {}",
                b.id(),
                dir.display()
            )));
        }
    }
    Ok(bundles)
}

fn read(path: &Path) -> Result<String, TaskError> {
    std::fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Something carrying a task id; lets the split work on tasks and bundles alike.
pub trait HasTaskId {
    fn task_id(&self) -> &str;
}

impl HasTaskId for SynthesisTask {
    fn task_id(&self) -> &str {
        &self.id
    }
}

impl HasTaskId for TaskBundle {
    fn task_id(&self) -> &str {
        &self.task.id
    }
}

/// Partitions `tasks` into (train, eval), preserving input order in each half.
pub fn split_train_eval<T: HasTaskId + Clone>(
    tasks: &[T],
    train_ids: &BTreeSet<String>,
) -> Result<(Vec<T>, Vec<T>), TaskError> {
    let known: HashSet<&str> = tasks.iter().map(|t| t.task_id()).collect();
    if let Some(missing) = train_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(TaskError::UnknownTaskId(missing.clone()));
    }
    Ok(tasks
        .iter()
        .cloned()
        .partition(|t| train_ids.contains(t.task_id())))
}

/// Whether evaluation runs on the held-out remainder or on every task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Disjoint,
    Overlapping,
}

/// Like [`split_train_eval`], but in overlapping mode the eval side is the full task list.
pub fn split_with_mode<T: HasTaskId + Clone>(
    tasks: &[T],
    train_ids: &BTreeSet<String>,
    mode: SplitMode,
) -> Result<(Vec<T>, Vec<T>), TaskError> {
    let (train, eval) = split_train_eval(tasks, train_ids)?;
    match mode {
        SplitMode::Disjoint => Ok((train, eval)),
        SplitMode::Overlapping => Ok((train, tasks.to_vec())),
    }
}

/// Reads a train-id file: one id per line, `#` comments and blank lines ignored.
pub fn parse_id_list(content: &str) -> BTreeSet<String> {
    content
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}
