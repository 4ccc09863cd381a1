use std::sync::Arc;

use april_core::bench::{
    compute_report, group_by_benchmark, outcomes_from_events, render_report, run_benchmark, BenchError,
    BenchOptions, LlmSynthesizer, Synthesizer,
};
use april_core::llm::{GenerationParams, LlmClient, MockBackend, Purpose, ScriptEntry};
use april_core::prompt::initial_prompt;
use april_core::sandbox::{Classification, Sandbox, SandboxConfig};
use april_core::store::{EventKind, RunStore};
use april_core::stub_shim::InProcessShim;
use april_core::task::{SynthesisTask, TaskBundle, TestCase, TestSuite};
use serde_json::json;

fn bundle(library: &str, name: &str, test: &str) -> TaskBundle {
    let task = SynthesisTask {
        id: format!("{library}.{name}"),
        signature: serde_json::from_value(json!({"name": name, "params": [{"name": "x"}]})).unwrap(),
        module_path: format!("{library}.core"),
        library_name: library.into(),
        examples: vec![TestCase {
            id: "ex".into(),
            source_code: format!("expect_contains def {name}"),
            description: None,
        }],
        validation_suite_ref: "unused.json".into(),
    };
    let suite = TestSuite::new(
        &task.id,
        vec![TestCase {
            id: "v".into(),
            source_code: test.into(),
            description: None,
        }],
    )
    .unwrap();
    TaskBundle::new(task, suite).unwrap()
}

fn tasks() -> Vec<TaskBundle> {
    vec![
        bundle("numlib", "mean", "expect_contains sum(x)"),
        bundle("numlib", "peak", "expect_contains max(x)"),
        bundle("statlib", "spread", "expect_contains stdev"),
        bundle("statlib", "broken", "expect_contains x"),
    ]
}

fn synthesizer() -> LlmSynthesizer {
    let w = |c: &str| format!("<output_api_implementations>{c}</output_api_implementations>");
    let s = Some(Purpose::Synthesis);
    LlmSynthesizer {
        client: LlmClient::new(Arc::new(
            MockBackend::new(vec![
                ScriptEntry::new(s, &["def mean"], w("def mean(x): return sum(x) / len(x)")),
                ScriptEntry::new(s, &["def peak"], w("def peak(x): return sorted(x)[-1]")),
                ScriptEntry::new(s, &["def spread"], w("def spread(x): return stdev(x)")),
                ScriptEntry::new(s, &["def broken"], w("def broken(x: return x")),
            ])
            .unwrap(),
        )),
        params: GenerationParams::default(),
    }
}

#[tokio::test]
async fn outcomes_classify_each_task() {
    let out = run_benchmark(
        &tasks(),
        &initial_prompt(),
        &synthesizer(),
        &InProcessShim,
        &BenchOptions::default(),
    )
    .await
    .unwrap();
    let classes: Vec<Option<Classification>> = out.iter().map(|o| o.classification).collect();
    assert_eq!(
        classes,
        [
            Some(Classification::AllPass),
            Some(Classification::SomeTestsFail),
            Some(Classification::AllPass),
            Some(Classification::BuildError),
        ]
    );
    for o in &out {
        assert!(!o.all_tests_passed || o.executable);
    }
    let report = compute_report(&group_by_benchmark(&out)).unwrap();
    assert_eq!(report.rows[0].passed_cell(), "1(50.0%)");
    assert_eq!(report.rows[0].executable_cell(), "2(100.0%)");
    assert_eq!(report.rows[1].passed_cell(), "1(50.0%)");
    assert_eq!(report.total.passed_cell(), "2(50.0%)");
    let text = render_report(&report);
    assert!(text.contains("Total"));
    assert!(text.contains("3(75.0%)"));
}

#[tokio::test]
async fn subprocess_sandbox_agrees_with_in_process_shim() {
    let sb = Sandbox::new(SandboxConfig {
        shim: vec![env!("CARGO_BIN_EXE_april-stub-shim").into()],
        ..SandboxConfig::default()
    })
    .unwrap();
    let opts = BenchOptions::default();
    let a = run_benchmark(&tasks(), &initial_prompt(), &synthesizer(), &sb, &opts)
        .await
        .unwrap();
    let b = run_benchmark(&tasks(), &initial_prompt(), &synthesizer(), &InProcessShim, &opts)
        .await
        .unwrap();
    let strip = |v: &[april_core::bench::TaskOutcome]| {
        v.iter()
            .map(|o| (o.task_id.clone(), o.classification))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[tokio::test]
async fn empty_benchmark_is_an_error() {
    let err = run_benchmark(
        &[],
        &initial_prompt(),
        &synthesizer(),
        &InProcessShim,
        &BenchOptions::default(),
    )
    .await
    .unwrap_err();
    assert_eq!(err, BenchError::EmptyBenchmark);
}

#[tokio::test]
async fn synthesis_failures_become_non_executable_outcomes() {
    struct Refuses;
    #[async_trait::async_trait]
    impl Synthesizer for Refuses {
        fn id(&self) -> String {
            "refuses".into()
        }
        async fn synthesize(&self, _: &SynthesisTask, _: &str, _: usize) -> Result<String, String> {
            Err("backend refused".into())
        }
    }
    let out = run_benchmark(&tasks(), &initial_prompt(), &Refuses, &InProcessShim, &BenchOptions::default())
        .await
        .unwrap();
    assert!(out.iter().all(|o| !o.executable && o.error.is_some()));
}

#[tokio::test]
async fn report_rebuilds_from_the_run_log() {
    let root = tempfile::tempdir().unwrap();
    let store = RunStore::new(root.path());
    let handle = Arc::new(store.open("bench", json!({"seed": 0})).unwrap());
    let opts = BenchOptions {
        sink: handle.clone(),
        ..BenchOptions::default()
    };
    let live = run_benchmark(&tasks(), &initial_prompt(), &synthesizer(), &InProcessShim, &opts)
        .await
        .unwrap();
    handle.close().unwrap();

    let events = store.replay(&handle.run_id(), Some(EventKind::Outcome)).unwrap();
    let replayed = outcomes_from_events(&events);
    assert_eq!(replayed, live);
    assert_eq!(
        compute_report(&group_by_benchmark(&replayed)).unwrap(),
        compute_report(&group_by_benchmark(&live)).unwrap()
    );
}

#[tokio::test]
async fn extra_attempts_are_reported_separately() {
    let opts = BenchOptions {
        attempts: 3,
        ..BenchOptions::default()
    };
    let out = run_benchmark(&tasks(), &initial_prompt(), &synthesizer(), &InProcessShim, &opts)
        .await
        .unwrap();
    assert!(out.iter().all(|o| o.best_of_n_passed.is_some()));
    // passing tasks stop after the first attempt
    assert_eq!(out[0].attempts, 1);
    assert_eq!(out[1].attempts, 3);
    let report = compute_report(&group_by_benchmark(&out)).unwrap();
    assert!(report.best_of_n.is_some());
    // single-shot figures are unchanged by extra attempts
    assert_eq!(report.total.passed_count, 2);
}
