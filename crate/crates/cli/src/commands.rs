//! One function per subcommand. Each prepares its inputs with a null event
//! sink, stops there under `--dry-run`, and otherwise opens a run, rewires
//! the sinks to it and executes the stage.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use april_core::apo::{beam_search, ApoDeps, PromptCandidate};
use april_core::bench::{
    compare_reports, compute_report, group_by_benchmark, outcomes_from_events, render_comparison,
    render_report, run_benchmark, synthesize_and_run, BenchOptions, BenchReport, Fingerprint,
    LlmSynthesizer, Synthesizer, TaskOutcome,
};
use april_core::llm::LlmClient;
use april_core::oracle::{generate_validation_tests, OracleBackends, OracleError, OracleGenInput};
use april_core::prompt::load_prompt;
use april_core::rlvr::{
    toy_domain, train, Checkpoint, ExternalPolicy, Policy, ToySoftmaxPolicy, ToySpec, TrainDeps,
    TrainerState, CHECKPOINT_FORMAT,
};
use april_core::sandbox::{Sandbox, SandboxError};
use april_core::store::{content_hash, emit, EventKind, EventSink, NullSink, RunHandle, RunStore};
use april_core::task::{load_task, load_task_dir, parse_id_list, parse_task_file, split_train_eval, TaskBundle};
use clap::CommandFactory;
use serde_json::json;

use crate::config::{load_backend, process_env, AppConfig, Overrides};
use crate::{
    ApoArgs, BenchArgs, Cli, Command, GenOracleArgs, PolicyKind, ReplayArgs, ReportArgs, SynthArgs,
    TrainArgs,
};

/// A problem with how the command was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(subcommand: &str, message: impl std::fmt::Display) -> anyhow::Error {
    let mut cmd = Cli::command();
    let synopsis = cmd
        .find_subcommand_mut(subcommand)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    anyhow::Error::new(UsageError(format!("{message}\n\n{synopsis}")))
}

struct Ctx {
    config: AppConfig,
    dry_run: bool,
    argv: Vec<String>,
}

pub async fn dispatch(cli: Cli) -> Result<()> {
    let flags = Overrides {
        runs_dir: cli.global.runs_dir.clone(),
        seed: cli.global.seed,
        workers: cli.global.workers,
        keep_workspaces: cli.global.keep_workspaces,
    };
    let config = AppConfig::load(cli.global.config.as_deref(), &process_env(), &flags)?;
    let ctx = Ctx {
        config,
        dry_run: cli.global.dry_run,
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::GenOracle(a) => gen_oracle(&ctx, a).await,
        Command::Synth(a) => synth(&ctx, a).await,
        Command::Apo(a) => apo(&ctx, a).await,
        Command::Train(a) => train_cmd(&ctx, a).await,
        Command::Bench(a) => bench(&ctx, a).await,
        Command::Report(a) => report(&ctx, a).await,
        Command::Replay(a) => replay(&ctx, a).await,
        Command::StubShim | Command::ToyPolicyHost => unreachable!("handled before dispatch"),
    }
}

impl Ctx {
    fn store(&self) -> RunStore {
        RunStore::new(&self.config.paths.runs_dir)
    }

    /// Opens a run, executes `stage` against it and closes it whatever the
    /// outcome. A failure is recorded as a warning event before closing.
    async fn with_run<F, Fut>(&self, command: &str, stage: F) -> Result<()>
    where
        F: FnOnce(Arc<RunHandle>) -> Fut,
        Fut: Future<Output = Result<()>>,
    {
        let snapshot = json!({ "argv": self.argv, "config": self.config });
        let run = Arc::new(self.store().open(command, snapshot)?);
        let result = stage(run.clone()).await;
        if let Err(e) = &result {
            emit(run.as_ref(), EventKind::Warning, json!({ "error": format!("{e:#}") }));
        }
        run.close()?;
        eprintln!("run {} recorded in {}", run.run_id(), run.dir().display());
        result
    }

    fn sandbox(&self) -> Result<Sandbox> {
        Sandbox::new(self.config.sandbox.clone()).map_err(|e| match e {
            SandboxError::Environment(m) => anyhow!("EnvironmentError: {m}"),
            other => anyhow!(other),
        })
    }

    fn tasks_dir(&self, flag: Option<&PathBuf>, subcommand: &str) -> Result<PathBuf> {
        flag.cloned()
            .or_else(|| self.config.paths.tasks_dir.clone())
            .ok_or_else(|| usage(subcommand, "no task directory: pass --tasks or set paths.tasks_dir"))
    }

    fn backend_path(&self, first: Option<&PathBuf>, second: Option<&PathBuf>, role: &str, subcommand: &str) -> Result<PathBuf> {
        first
            .or(second)
            .cloned()
            .ok_or_else(|| usage(subcommand, format!("no `{role}` backend: pass --backend or set backends.{role}")))
    }

    fn client(&self, path: &Path) -> Result<LlmClient> {
        load_backend(path, Arc::new(NullSink))
    }

    fn finish_dry_run(&self, what: &str) -> bool {
        if self.dry_run {
            println!("dry run: {what}; nothing written");
        }
        self.dry_run
    }
}

fn record_tasks(sink: &dyn EventSink, tasks: &[TaskBundle]) {
    for b in tasks {
        emit(
            sink,
            EventKind::TaskLoaded,
            json!({
                "task_id": b.task.id,
                "library": b.task.library_name,
                "examples": b.task.examples.len(),
                "tests": b.suite.cases.len(),
                "task_hash": content_hash(b.task.to_json().as_bytes()),
            }),
        );
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

// ---------------------------------------------------------------------------

async fn gen_oracle(ctx: &Ctx, args: GenOracleArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.task).with_context(|| format!("cannot read {}", args.task.display()))?;
    let task = parse_task_file(&text)?;
    let reference_impl = std::fs::read_to_string(&args.ref_impl)
        .with_context(|| format!("cannot read {}", args.ref_impl.display()))?;
    let docstrings = match &args.docstrings {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
        None => {
            let examples: Vec<&str> = task.examples.iter().map(|e| e.source_code.trim()).collect();
            format!("{}\n\nExamples:\n{}", task.signature.display_text(), examples.join("\n"))
        }
    };
    let input = OracleGenInput {
        task_id: task.id.clone(),
        docstrings,
        reference_impl,
        module_path: task.module_path.clone(),
        library_name: task.library_name.clone(),
    };
    let b = &ctx.config.backends;
    let agent = ctx.client(&ctx.backend_path(b.oracle_agent.as_ref(), args.backend.as_ref(), "oracle_agent", "gen-oracle")?)?;
    let evaluator =
        ctx.client(&ctx.backend_path(b.quality_evaluator.as_ref(), args.backend.as_ref(), "quality_evaluator", "gen-oracle")?)?;
    let sandbox = ctx.sandbox()?;
    let mut config = ctx.config.oracle.clone();
    if let Some(n) = args.max_iter {
        config.max_iterations = n;
    }
    config.params.seed = Some(ctx.config.seed);
    if ctx.finish_dry_run(&format!("gen-oracle for `{}` is ready", task.id)) {
        return Ok(());
    }

    ctx.with_run("gen-oracle", |run| async move {
        let sink: Arc<dyn EventSink> = run.clone();
        let mut backends = OracleBackends::new(
            agent.with_sink(sink.clone()),
            evaluator.with_sink(sink.clone()),
            Arc::new(sandbox.with_sink(sink.clone())),
        );
        backends.sink = sink.clone();
        let (suite, iterations, converged) = match generate_validation_tests(&input, &backends, &config).await {
            Ok(r) => (r.suite, r.iterations_used, true),
            Err(OracleError::NonConverged(nc)) => (nc.best, nc.iterations_used, false),
            Err(e) => return Err(e.into()),
        };
        write_file(&args.out, &(suite.to_json() + "\n"))?;
        emit(
            sink.as_ref(),
            EventKind::Outcome,
            json!({
                "stage": "gen_oracle",
                "task_id": input.task_id,
                "converged": converged,
                "iterations": iterations,
                "tests": suite.cases.len(),
            }),
        );
        if !converged {
            bail!(
                "no suite passed the reference and the quality review within {iterations} iterations; best suite written to {}",
                args.out.display()
            );
        }
        println!(
            "{}: {} tests after {iterations} iteration(s), written to {}",
            input.task_id,
            suite.cases.len(),
            args.out.display()
        );
        Ok(())
    })
    .await
}

async fn synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let bundle = load_task(&args.task)?;
    let prompt = load_prompt(&args.prompt)?;
    let path = ctx.backend_path(args.backend.as_ref(), ctx.config.backends.synthesis.as_ref(), "synthesis", "synth")?;
    let client = ctx.client(&path)?;
    let sandbox = ctx.sandbox()?;
    if ctx.finish_dry_run(&format!("synth for `{}` is ready", bundle.id())) {
        return Ok(());
    }

    ctx.with_run("synth", |run| async move {
        let sink: Arc<dyn EventSink> = run.clone();
        record_tasks(sink.as_ref(), std::slice::from_ref(&bundle));
        let synthesizer = LlmSynthesizer {
            client: client.with_sink(sink.clone()),
            params: ctx.config.generation_params(),
        };
        let sandbox = sandbox.with_sink(sink.clone());
        let timeout = ctx.config.sandbox.timeout();
        let start = std::time::Instant::now();
        let (outcome, candidate) = match synthesize_and_run(&bundle, &prompt, &synthesizer, &sandbox, 0, timeout).await {
            Ok((candidate, result)) => (TaskOutcome::executed(&bundle.task, result.classification), Some(candidate)),
            Err(e) => (TaskOutcome::failed(&bundle.task, e, 0), None),
        };
        let outcome = TaskOutcome {
            duration_ms: start.elapsed().as_millis() as u64,
            ..outcome
        };
        let candidate_hash = match &candidate {
            Some(c) => Some(sink.put_blob(c.as_bytes())?),
            None => None,
        };
        emit(
            sink.as_ref(),
            EventKind::Outcome,
            json!({ "stage": "synth", "outcome": outcome, "candidate_hash": candidate_hash }),
        );
        if let (Some(path), Some(c)) = (&args.out, &candidate) {
            write_file(path, c)?;
        }
        match (&outcome.classification, &outcome.error) {
            (Some(c), _) => println!("{}: {c:?}", outcome.task_id),
            (None, Some(e)) => println!("{}: not executable ({e})", outcome.task_id),
            (None, None) => println!("{}: not executable", outcome.task_id),
        }
        Ok(())
    })
    .await
}

async fn apo(ctx: &Ctx, args: ApoArgs) -> Result<()> {
    let dir = ctx.tasks_dir(args.tasks.as_ref(), "apo")?;
    let tasks = load_task_dir(&dir)?;
    let ids_text = std::fs::read_to_string(&args.train_ids)
        .with_context(|| format!("cannot read {}", args.train_ids.display()))?;
    let (train_set, _) = split_train_eval(&tasks, &parse_id_list(&ids_text))?;
    if train_set.is_empty() {
        bail!("the training id list selects no tasks");
    }
    let p0 = load_prompt(&args.init_prompt)?;
    let mut beam = ctx.config.apo.clone();
    if let Some(w) = args.beam {
        beam.beam_width = w;
    }
    if let Some(d) = args.depth {
        beam.max_depth = d;
    }
    if let Some(k) = args.proposals {
        beam.proposals_per_candidate = k;
    }
    beam.validate()?;
    let b = &ctx.config.backends;
    let synth_path = ctx.backend_path(args.backend.as_ref(), b.synthesis.as_ref(), "synthesis", "apo")?;
    let synth_client = ctx.client(&synth_path)?;
    let critic = ctx.client(b.critique.as_ref().unwrap_or(&synth_path))?;
    let editor = ctx.client(b.edit.as_ref().unwrap_or(&synth_path))?;
    let sandbox = ctx.sandbox()?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.trace.jsonl", args.out.display())));
    if ctx.finish_dry_run(&format!("apo over {} training tasks is ready", train_set.len())) {
        return Ok(());
    }

    ctx.with_run("apo", |run| async move {
        let sink: Arc<dyn EventSink> = run.clone();
        record_tasks(sink.as_ref(), &train_set);
        let synthesizer = LlmSynthesizer {
            client: synth_client.with_sink(sink.clone()),
            params: ctx.config.generation_params(),
        };
        let mut deps = ApoDeps::new(
            Arc::new(synthesizer),
            critic.with_sink(sink.clone()),
            editor.with_sink(sink.clone()),
            Arc::new(sandbox.with_sink(sink.clone())),
        )
        .with_sink(sink.clone());
        deps.params = ctx.config.generation_params();
        deps.concurrency = ctx.config.sandbox.workers.max(1);
        deps.timeout = ctx.config.sandbox.timeout();

        let outcome = beam_search(PromptCandidate::root(p0), &train_set, &beam, &deps).await?;
        write_file(&args.out, &outcome.best.prompt.to_file_text())?;
        outcome.write_trace(&trace)?;
        let ds = outcome.best.ds.unwrap_or(0.0);
        emit(
            sink.as_ref(),
            EventKind::Outcome,
            json!({
                "stage": "apo",
                "best": outcome.best.id,
                "ds": ds,
                "prompt_hash": outcome.best.prompt.hash(),
                "candidates": outcome.tree.len(),
            }),
        );
        for level in &outcome.levels {
            println!("level {}: best ds {:.3} over {} candidate(s)", level.level, level.best_ds, level.scored.len());
        }
        println!(
            "best prompt {} (ds {ds:.3}) written to {}; trace in {}",
            outcome.best.id,
            args.out.display(),
            trace.display()
        );
        Ok(())
    })
    .await
}

async fn train_cmd(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let tasks_dir = args.tasks.clone().or_else(|| ctx.config.paths.tasks_dir.clone());
    let (tasks, toy_spec) = match &tasks_dir {
        Some(dir) => {
            let tasks = load_task_dir(dir)?;
            let t = &ctx.config.toy;
            let spec = ToySpec {
                vocab: t.vocab.clone(),
                length: t.length,
                contexts: tasks.iter().map(|b| b.task.id.clone()).collect(),
                logit_scale: t.logit_scale,
            };
            (tasks, spec)
        }
        None => {
            let (spec, tasks) = toy_domain();
            (tasks, spec)
        }
    };
    let (policy, toy): (Box<dyn Policy>, Option<ToySpec>) = match args.policy {
        PolicyKind::Toy => (Box::new(ToySoftmaxPolicy::new(toy_spec.clone())?), Some(toy_spec)),
        PolicyKind::External => {
            let command: Vec<String> = match &args.policy_cmd {
                Some(c) => c.split_whitespace().map(String::from).collect(),
                None => ctx.config.policy.command.clone(),
            };
            if command.is_empty() {
                return Err(usage("train", "an external policy needs --policy-cmd or policy.command"));
            }
            (Box::new(ExternalPolicy::spawn(&command, &[])?), None)
        }
    };
    let mut grpo = ctx.config.grpo.clone();
    if let Some(e) = args.epochs {
        grpo.epochs = e;
    }
    grpo.validate()?;
    let initial = policy.initial_params()?;
    let sandbox = ctx.sandbox()?;
    if ctx.finish_dry_run(&format!("training on {} tasks is ready", tasks.len())) {
        return Ok(());
    }

    ctx.with_run("train", |run| async move {
        let sink: Arc<dyn EventSink> = run.clone();
        record_tasks(sink.as_ref(), &tasks);
        let sandbox = sandbox.with_sink(sink.clone());
        let deps = TrainDeps {
            executor: &sandbox,
            sink: sink.clone(),
            timeout: ctx.config.sandbox.timeout(),
        };
        let mut state = TrainerState::new(initial);
        let seed = ctx.config.seed;
        let report = train(policy.as_ref(), &mut state, &tasks, &grpo, seed, &deps).await?;
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            policy: policy.id(),
            toy,
            seed,
            steps: report.steps,
            config: grpo.clone(),
            params: state.params.clone(),
        };
        std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
        let report_path = args.out.join("report.json");
        write_file(&report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        checkpoint.save(&args.out.join("checkpoint.json"))?;
        let last_ma = report.moving_average.last().copied().unwrap_or(0.0);
        emit(
            sink.as_ref(),
            EventKind::Outcome,
            json!({
                "stage": "train",
                "steps": report.steps,
                "stopped_early": report.stopped_early,
                "final_moving_average": last_ma,
            }),
        );
        println!(
            "{} steps{}; final moving-average reward {last_ma:.3}; outputs in {}",
            report.steps,
            if report.stopped_early { " (early stop)" } else { "" },
            args.out.display()
        );
        Ok(())
    })
    .await
}

async fn bench(ctx: &Ctx, args: BenchArgs) -> Result<()> {
    if args.attempts == 0 {
        return Err(usage("bench", "--attempts must be at least 1"));
    }
    let dir = ctx.tasks_dir(args.tasks.as_ref(), "bench")?;
    let tasks = load_task_dir(&dir)?;
    let prompt = load_prompt(&args.prompt)?;
    let path = ctx.backend_path(args.backend.as_ref(), ctx.config.backends.synthesis.as_ref(), "synthesis", "bench")?;
    let client = ctx.client(&path)?;
    let sandbox = ctx.sandbox()?;
    if ctx.finish_dry_run(&format!("bench over {} tasks is ready", tasks.len())) {
        return Ok(());
    }

    ctx.with_run("bench", |run| async move {
        let sink: Arc<dyn EventSink> = run.clone();
        record_tasks(sink.as_ref(), &tasks);
        let synthesizer = LlmSynthesizer {
            client: client.with_sink(sink.clone()),
            params: ctx.config.generation_params(),
        };
        let sandbox = sandbox.with_sink(sink.clone());
        let options = BenchOptions {
            attempts: args.attempts,
            concurrency: ctx.config.sandbox.workers.max(1),
            timeout: ctx.config.sandbox.timeout(),
            sink: sink.clone(),
        };
        let outcomes = run_benchmark(&tasks, &prompt, &synthesizer, &sandbox, &options).await?;
        let mut report = compute_report(&group_by_benchmark(&outcomes))?;
        report.fingerprint = Fingerprint {
            prompt_hash: prompt.hash(),
            synthesizer: synthesizer.id(),
            seed: Some(ctx.config.seed),
            attempts: args.attempts,
        };
        emit(
            sink.as_ref(),
            EventKind::Outcome,
            json!({ "stage": "bench_report", "fingerprint": report.fingerprint }),
        );
        write_file(&args.out, &report.to_json())?;
        print!("{}", render_report(&report));
        Ok(())
    })
    .await
}

fn read_report(path: &Path) -> Result<BenchReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a bench report", path.display()))
}

/// Rebuilds a bench report from the outcome events of a recorded run.
fn report_from_run(store: &RunStore, run_id: &str) -> Result<BenchReport> {
    let events = store.replay(run_id, Some(EventKind::Outcome))?;
    let mut report = compute_report(&group_by_benchmark(&outcomes_from_events(&events)))
        .with_context(|| format!("run `{run_id}` holds no bench outcomes"))?;
    if let Some(e) = events.iter().rev().find(|e| e.payload["stage"] == "bench_report") {
        report.fingerprint = serde_json::from_value(e.payload["fingerprint"].clone())?;
    }
    Ok(report)
}

async fn report(ctx: &Ctx, args: ReportArgs) -> Result<()> {
    // Load everything first so a bad input never opens a run.
    let (text, rebuilt) = if let Some(paths) = &args.compare {
        let cmp = compare_reports(&read_report(&paths[0])?, &read_report(&paths[1])?)?;
        (render_comparison(&cmp), None)
    } else if let Some(run_id) = &args.run {
        let r = report_from_run(&ctx.store(), run_id)?;
        (render_report(&r), Some(r))
    } else {
        let path = args.file.as_ref().expect("clap requires one source");
        let r = read_report(path)?;
        (render_report(&r), Some(r))
    };
    if args.out.is_some() && rebuilt.is_none() {
        return Err(usage("report", "--out applies to a single report, not a comparison"));
    }
    if ctx.finish_dry_run("report inputs are readable") {
        return Ok(());
    }
    ctx.with_run("report", |run| async move {
        emit(
            run.as_ref(),
            EventKind::Outcome,
            json!({ "stage": "report", "rendered_hash": content_hash(text.as_bytes()) }),
        );
        if let (Some(out), Some(r)) = (&args.out, &rebuilt) {
            write_file(out, &r.to_json())?;
        }
        print!("{text}");
        Ok(())
    })
    .await
}

async fn replay(ctx: &Ctx, args: ReplayArgs) -> Result<()> {
    let store = ctx.store();
    let kind = match &args.kind {
        Some(k) => Some(EventKind::parse(k).ok_or_else(|| {
            usage(
                "replay",
                format!(
                    "unknown event kind `{k}`; expected one of task_loaded, llm_call, sandbox_result, \
                     candidate_scored, beam_level, group_sampled, train_step, outcome, warning"
                ),
            )
        })?),
        None => None,
    };
    let lines: Vec<String> = match &args.run_id {
        Some(id) => store
            .replay(id, kind)?
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()?,
        None => store
            .list_runs()?
            .into_iter()
            .map(|id| {
                let command = store.meta(&id).map(|m| m.command).unwrap_or_default();
                format!("{id}\t{command}")
            })
            .collect(),
    };
    if ctx.finish_dry_run("replay source is readable") {
        return Ok(());
    }
    ctx.with_run("replay", |run| async move {
        emit(
            run.as_ref(),
            EventKind::Outcome,
            json!({ "stage": "replay", "source": args.run_id, "kind": args.kind, "lines": lines.len() }),
        );
        for line in &lines {
            println!("{line}");
        }
        Ok(())
    })
    .await
}
