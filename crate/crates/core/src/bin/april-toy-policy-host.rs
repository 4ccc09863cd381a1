//! Serves a toy softmax policy over the external-policy protocol: one JSON
//! request per stdin line, one JSON reply per stdout line.

fn main() {
    if let Err(e) = april_core::rlvr::serve_toy_policy_stdio() {
        eprintln!("{e}");
        std::process::exit(2);
    }
}
