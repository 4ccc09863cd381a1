//! A tiny execution shim for fixtures, speaking the sandbox wire protocol.
//!
//! Candidates "build" when their brackets balance. Each test is a list of
//! directives, one per line, checked against the candidate text:
//!
//! ```text
//! expect_eq <text>        candidate (trimmed) equals <text>
//! expect_contains <text>  candidate contains <text>
//! expect_absent <text>    candidate does not contain <text>
//! expect_module_contains <text>
//!                         the module file in the working directory contains <text>
//! raise <message>         the test errors with <message>
//! sleep <ms>              pause before continuing
//! print <text>            write <text> to stdout
//! # ...                   comment
//! ```
//!
//! A failed expectation yields verdict `fail`; `raise` or an unknown directive
//! yields `error`. A failing test never stops later tests from running.

use std::time::{Duration, Instant};

use async_trait::async_trait;

use crate::sandbox::{
    into_result, Executor, SandboxError, SandboxJob, SandboxResult, ShimRequest, ShimResponse, Verdict,
    WireVerdict,
};

fn brackets_balance(src: &str) -> Result<(), String> {
    let mut stack = Vec::new();
    for (line_no, line) in src.lines().enumerate() {
        for c in line.chars() {
            match c {
                '(' | '[' | '{' => stack.push((c, line_no + 1)),
                ')' | ']' | '}' => {
                    let want = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    match stack.pop() {
                        Some((open, _)) if open == want => {}
                        _ => return Err(format!("SyntaxError: unmatched '{c}' on line {}", line_no + 1)),
                    }
                }
                _ => {}
            }
        }
    }
    match stack.pop() {
        Some((open, line)) => Err(format!("SyntaxError: '{open}' was never closed (line {line})")),
        None => Ok(()),
    }
}

/// Reads `<module/path>.<any ext>` relative to the working directory.
fn read_module(module_path: &str) -> Option<String> {
    let rel: std::path::PathBuf = module_path.split('.').collect();
    let dir = rel.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let stem = rel.file_name()?.to_os_string();
    let dir = if dir.as_os_str().is_empty() { ".".into() } else { dir };
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .find(|p| p.is_file() && p.file_stem() == Some(stem.as_os_str()))
        .and_then(|p| std::fs::read_to_string(p).ok())
}

fn run_test(candidate: &str, module_path: &str, source: &str, stdout: &mut String) -> (Verdict, String) {
    let body = candidate.trim();
    for line in source.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line.starts_with('#') {
            continue;
        }
        let (op, arg) = line.split_once(' ').unwrap_or((line, ""));
        match op {
            "expect_eq" if body != arg => {
                return (
                    Verdict::Fail,
                    format!("AssertionError: expected {arg:?}, got {body:?}"),
                )
            }
            "expect_contains" if !body.contains(arg) => {
                return (
                    Verdict::Fail,
                    format!("AssertionError: {arg:?} not found in candidate"),
                )
            }
            "expect_absent" if body.contains(arg) => {
                return (
                    Verdict::Fail,
                    format!("AssertionError: {arg:?} unexpectedly present"),
                )
            }
            "expect_module_contains" => match read_module(module_path) {
                Some(text) if text.contains(arg) => {}
                Some(_) => {
                    return (
                        Verdict::Fail,
                        format!("AssertionError: {arg:?} not found in module {module_path}"),
                    )
                }
                None => return (Verdict::Error, format!("ImportError: no module named {module_path}")),
            },
            "expect_eq" | "expect_contains" | "expect_absent" => {}
            "raise" => return (Verdict::Error, format!("RuntimeError: {arg}")),
            "sleep" => match arg.parse::<u64>() {
                Ok(ms) => std::thread::sleep(Duration::from_millis(ms)),
                Err(_) => return (Verdict::Error, format!("ValueError: bad sleep `{arg}`")),
            },
            "print" => {
                stdout.push_str(arg);
                stdout.push('\n');
            }
            other => return (Verdict::Error, format!("NameError: unknown directive `{other}`")),
        }
    }
    (Verdict::Pass, String::new())
}

pub fn execute(request: &ShimRequest) -> ShimResponse {
    if let Err(msg) = brackets_balance(&request.candidate_source) {
        return ShimResponse {
            build_ok: false,
            tests: Vec::new(),
            stdout_tail: String::new(),
            stderr_tail: msg,
        };
    }
    let mut stdout = String::new();
    let tests = request
        .tests
        .iter()
        .map(|t| {
            let start = Instant::now();
            let (verdict, message) = run_test(&request.candidate_source, &request.module_path, &t.source, &mut stdout);
            WireVerdict {
                id: t.id.clone(),
                verdict,
                message,
                duration_ms: start.elapsed().as_millis() as u64,
            }
        })
        .collect();
    ShimResponse {
        build_ok: true,
        tests,
        stdout_tail: stdout,
        stderr_tail: String::new(),
    }
}

/// Runs the stub shim in-process. Requests and responses still pass through
/// the wire types, so results match the subprocess shim, minus timeouts and
/// spawn cost.
#[derive(Debug, Default, Clone, Copy)]
pub struct InProcessShim;

#[async_trait]
impl Executor for InProcessShim {
    async fn run(&self, job: SandboxJob) -> Result<SandboxResult, SandboxError> {
        let start = Instant::now();
        let response = execute(&job.request());
        let mut result = into_result(&job, response)?;
        result.wall_time_ms = start.elapsed().as_millis() as u64;
        Ok(result)
    }
}

/// Reads one request from stdin and writes the response to stdout. Returns
/// the process exit code: 2 for an unreadable request, 3 when stdout fails.
pub fn serve_stdio() -> u8 {
    use std::io::{Read, Write};
    let mut input = String::new();
    if let Err(e) = std::io::stdin().read_to_string(&mut input) {
        eprintln!("cannot read stdin: {e}");
        return 2;
    }
    let request: ShimRequest = match serde_json::from_str(&input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("malformed request: {e}");
            return 2;
        }
    };
    let response = execute(&request);
    let mut out = std::io::stdout().lock();
    if serde_json::to_writer(&mut out, &response).is_err() || out.flush().is_err() {
        return 3;
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::WireTest;

    fn req(candidate: &str, tests: &[&str]) -> ShimRequest {
        ShimRequest {
            candidate_source: candidate.into(),
            module_path: "m".into(),
            library_name: "l".into(),
            tests: tests
                .iter()
                .enumerate()
                .map(|(i, s)| WireTest {
                    id: format!("t{i}"),
                    source: s.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn unbalanced_candidate_does_not_build() {
        let r = execute(&req("def f(:\n  pass", &["expect_contains f"]));
        assert!(!r.build_ok);
        assert!(r.tests.is_empty());
        assert!(r.stderr_tail.contains("SyntaxError"));
    }

    #[test]
    fn verdicts() {
        let r = execute(&req(
            "abc",
            &["expect_eq abc", "expect_eq abd", "raise boom", "expect_contains b\nexpect_absent z"],
        ));
        let v: Vec<Verdict> = r.tests.iter().map(|t| t.verdict).collect();
        assert_eq!(v, vec![Verdict::Pass, Verdict::Fail, Verdict::Error, Verdict::Pass]);
        assert!(r.tests[1].message.starts_with("AssertionError"));
    }

    #[test]
    fn unknown_directive_errors() {
        let r = execute(&req("x", &["assert x == 1"]));
        assert_eq!(r.tests[0].verdict, Verdict::Error);
    }
}
