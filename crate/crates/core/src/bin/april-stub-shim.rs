//! Fixture execution shim: one wire-protocol request on stdin, one response on stdout.

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(april_core::stub_shim::serve_stdio())
}
