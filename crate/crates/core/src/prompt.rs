//! Prompt templates.
//!
//! Placeholders are written `{name}`; a literal brace is written `{{` or `}}`.
//! Braces that do not form `{identifier}` are kept as literal text. The
//! reserved slot `{few_shot_exemplars}` may appear at most once and expands to
//! the template's exemplars (or to nothing when there are none); it is not part
//! of the required placeholder set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::OUTPUT_TAG;
use crate::task::SynthesisTask;

pub const SIGNATURE: &str = "api_signature_rlvr_apo";
pub const MODULE: &str = "module_rlvr_apo";
pub const LIBRARY: &str = "library_rlvr_apo";
pub const TESTS: &str = "tests_rlvr_apo";
pub const EXEMPLAR_SLOT: &str = "few_shot_exemplars";

pub const SYNTHESIS_PLACEHOLDERS: [&str; 4] = [SIGNATURE, MODULE, LIBRARY, TESTS];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("placeholder {{{0}}} has no value")]
    MissingPlaceholderValue(String),
    #[error("placeholder {{{0}}} is not in the required set")]
    UnboundPlaceholder(String),
    #[error("required placeholder {{{name}}} occurs {count} times (expected exactly once)")]
    PlaceholderCount { name: String, count: usize },
    #[error("template file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub signature: String,
    pub module: String,
    pub library: String,
    pub tests: String,
    pub output: String,
}

impl FewShotExemplar {
    fn render(&self) -> String {
        format!(
            "Method signature: {}\nModule: {}\nLibrary: {}\nTest cases: {}\nOutput:\n<{OUTPUT_TAG}>\n{}\n</{OUTPUT_TAG}>",
            self.signature, self.module, self.library, self.tests, self.output
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// Splits a body into literal text and `{name}` slots, resolving `{{`/`}}`.
fn parse_body(body: &str) -> Vec<Segment> {
    let chars: Vec<char> = body.chars().collect();
    let mut out = Vec::new();
    let mut text = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' && chars.get(i + 1) == Some(&'{') {
            text.push('{');
            i += 2;
            continue;
        }
        if c == '}' && chars.get(i + 1) == Some(&'}') {
            text.push('}');
            i += 2;
            continue;
        }
        if c == '{' {
            let mut j = i + 1;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let starts_ok = chars
                .get(i + 1)
                .is_some_and(|c| c.is_ascii_alphabetic() || *c == '_');
            if starts_ok && chars.get(j) == Some(&'}') {
                if !text.is_empty() {
                    out.push(Segment::Text(std::mem::take(&mut text)));
                }
                out.push(Segment::Slot(chars[i + 1..j].iter().collect()));
                i = j + 1;
                continue;
            }
        }
        text.push(c);
        i += 1;
    }
    if !text.is_empty() {
        out.push(Segment::Text(text));
    }
    out
}

/// Escapes literal text so it survives as-is in a template body.
pub fn escape_braces(text: &str) -> String {
    text.replace('{', "{{").replace('}', "}}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    body: String,
    required_placeholders: BTreeSet<String>,
    #[serde(default)]
    pub exemplars: Vec<FewShotExemplar>,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        body: impl Into<String>,
        required: impl IntoIterator<Item = impl Into<String>>,
        exemplars: Vec<FewShotExemplar>,
    ) -> Result<Self, PromptError> {
        let t = Self {
            id: id.into(),
            body: body.into(),
            required_placeholders: required.into_iter().map(Into::into).collect(),
            exemplars,
        };
        t.validate()?;
        Ok(t)
    }

    /// A synthesis template: the required set is the four task placeholders.
    pub fn synthesis(
        id: impl Into<String>,
        body: impl Into<String>,
        exemplars: Vec<FewShotExemplar>,
    ) -> Result<Self, PromptError> {
        Self::new(id, body, SYNTHESIS_PLACEHOLDERS, exemplars)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required_placeholders
    }

    /// Same required set and exemplars, new body; validated.
    pub fn with_body(&self, id: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        Self::new(
            id,
            body,
            self.required_placeholders.iter().cloned(),
            self.exemplars.clone(),
        )
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let segments = parse_body(&self.body);
        for seg in &segments {
            if let Segment::Slot(name) = seg {
                *counts.entry(name.as_str()).or_default() += 1;
            }
        }
        for (name, count) in &counts {
            if *name == EXEMPLAR_SLOT {
                if *count > 1 {
                    return Err(PromptError::PlaceholderCount {
                        name: name.to_string(),
                        count: *count,
                    });
                }
            } else if !self.required_placeholders.contains(*name) {
                return Err(PromptError::UnboundPlaceholder(name.to_string()));
            }
        }
        for name in &self.required_placeholders {
            let count = counts.get(name.as_str()).copied().unwrap_or(0);
            if count != 1 {
                return Err(PromptError::PlaceholderCount {
                    name: name.clone(),
                    count,
                });
            }
        }
        Ok(())
    }

    /// Substitutes placeholder values. Values are inserted verbatim and never
    /// re-scanned for placeholders.
    pub fn render_with(&self, values: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.validate()?;
        let mut out = String::with_capacity(self.body.len() + 256);
        for seg in parse_body(&self.body) {
            match seg {
                Segment::Text(t) => out.push_str(&t),
                Segment::Slot(name) if name == EXEMPLAR_SLOT => {
                    out.push_str(&self.render_exemplars())
                }
                Segment::Slot(name) => match values.get(&name) {
                    Some(v) if !v.trim().is_empty() => out.push_str(v),
                    _ => return Err(PromptError::MissingPlaceholderValue(name)),
                },
            }
        }
        Ok(out)
    }

    fn render_exemplars(&self) -> String {
        if self.exemplars.is_empty() {
            return String::new();
        }
        let blocks: Vec<String> = self.exemplars.iter().map(FewShotExemplar::render).collect();
        format!("**Here are some examples:**\n{}\n\n", blocks.join("\n\n"))
    }

    pub fn render(&self, task: &SynthesisTask) -> Result<String, PromptError> {
        self.render_with(&task_values(task))
    }

    /// Whitespace-normalized body, used for de-duplication.
    pub fn normalized_body(&self) -> String {
        normalize_text(&self.body)
    }

    pub fn hash(&self) -> String {
        crate::store::content_hash(self.body.as_bytes())
    }

    /// File form: a `---` delimited front-matter block of `key: value` lines
    /// (`id`, `required_placeholders` as a comma-separated list), then the body.
    pub fn to_file_text(&self) -> String {
        let required: Vec<&str> = self.required_placeholders.iter().map(String::as_str).collect();
        let mut out = format!(
            "---\nid: {}\nrequired_placeholders: {}\n",
            self.id,
            required.join(", ")
        );
        if !self.exemplars.is_empty() {
            out.push_str(&format!(
                "exemplars: {}\n",
                serde_json::to_string(&self.exemplars).expect("exemplars serialize")
            ));
        }
        out.push_str("---\n");
        out.push_str(&self.body);
        out
    }

    pub fn parse_file_text(text: &str) -> Result<Self, PromptError> {
        let rest = text
            .strip_prefix("---\n")
            .ok_or_else(|| PromptError::Format("missing front-matter header".into()))?;
        let end = rest
            .find("\n---\n")
            .ok_or_else(|| PromptError::Format("unterminated front-matter header".into()))?;
        let header = &rest[..end];
        let body = &rest[end + "\n---\n".len()..];
        let mut id = None;
        let mut required = None;
        let mut exemplars = Vec::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| PromptError::Format(format!("bad header line `{line}`")))?;
            let v = v.trim();
            match k.trim() {
                "id" => id = Some(v.to_string()),
                "required_placeholders" => {
                    required = Some(
                        v.split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect::<Vec<_>>(),
                    )
                }
                "exemplars" => {
                    exemplars = serde_json::from_str(v)
                        .map_err(|e| PromptError::Format(format!("exemplars: {e}")))?
                }
                other => return Err(PromptError::Format(format!("unknown header key `{other}`"))),
            }
        }
        let id = id.ok_or_else(|| PromptError::Format("header lacks `id`".into()))?;
        let required =
            required.ok_or_else(|| PromptError::Format("header lacks `required_placeholders`".into()))?;
        Self::new(id, body, required, exemplars)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Format(format!("{}: {e}", path.display())))?;
        Self::parse_file_text(&text)
    }
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Placeholder values for a task. The tests slot gets the task's examples,
/// never its validation suite.
pub fn task_values(task: &SynthesisTask) -> BTreeMap<String, String> {
    let tests = task
        .examples
        .iter()
        .map(|t| t.source_code.trim_end())
        .collect::<Vec<_>>()
        .join("\n\n");
    BTreeMap::from([
        (SIGNATURE.to_string(), task.signature.display_text()),
        (MODULE.to_string(), task.module_path.clone()),
        (LIBRARY.to_string(), task.library_name.clone()),
        (TESTS.to_string(), tests),
    ])
}

const INITIAL_BODY: &str = "### Implement a python method inside a python module.

**Task:**

Imagine you are a Python developer specialized in machine learning and scientific libraries. You will be given a python method signature, the module it belongs to, the library it belongs to, and a set of test cases. The method can be a instance method of a class or a module method. Your task is to implement the method using the dependencies from the module and the library to pass the test cases.

**Output Format:**

Put your ouput inside the <output_api_implementations> xml element, and output only the implemented method.
<output_api_implementations> [your method implementation here] </output_api_implementations>

**Crucial Information:**

Carefully analyze the provided test cases. Each test case represents a specific input and the expected output of the method you are implementing. Your implementation *must* satisfy all given test cases. Consider these test cases as concrete examples of how the method should behave. Aim to re-use functions from the specified library wherever possible.

{few_shot_exemplars}Method signature: {api_signature_rlvr_apo}
Module: {module_rlvr_apo}
Library: {library_rlvr_apo}
Test cases: {tests_rlvr_apo}
Output:
";

/// The two neutral exemplars shipped with the built-in prompt.
pub fn default_exemplars() -> Vec<FewShotExemplar> {
    vec![
        FewShotExemplar {
            signature: "def clip_norm(x, max_norm)".into(),
            module: "numpy.linalg".into(),
            library: "numpy".into(),
            tests: "assert np.allclose(clip_norm(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])".into(),
            output: "def clip_norm(x, max_norm):\n    n = np.linalg.norm(x)\n    return x if n <= max_norm else x * (max_norm / n)".into(),
        },
        FewShotExemplar {
            signature: "def chebyshev(u, v)".into(),
            module: "scipy.spatial.distance".into(),
            library: "scipy".into(),
            tests: "assert chebyshev([1, 0, 0], [0, 1, 0]) == 1".into(),
            output: "def chebyshev(u, v):\n    u = _validate_vector(u)\n    v = _validate_vector(v)\n    return max(abs(u - v))".into(),
        },
    ]
}

/// The hand-engineered seed prompt.
pub fn initial_prompt() -> PromptTemplate {
    PromptTemplate::synthesis("p0", INITIAL_BODY, default_exemplars())
        .expect("built-in prompt is valid")
}

/// Loads `builtin` or a template file.
pub fn load_prompt(spec: &str) -> Result<PromptTemplate, PromptError> {
    if spec == "builtin" {
        Ok(initial_prompt())
    } else {
        PromptTemplate::load(Path::new(spec))
    }
}
