use std::sync::Arc;

use april_core::llm::GenerationParams;
use april_core::rlvr::{
    compute_advantages, sample_group, toy_domain, train, train_step, Checkpoint, ExternalPolicy, GRPOConfig, Group,
    Policy, RlvrError, ToySoftmaxPolicy, ToySpec, TrainDeps, TrainerState, CHECKPOINT_FORMAT,
};
use april_core::store::{EventKind, MemorySink};
use april_core::stub_shim::InProcessShim;

fn toy() -> ToySoftmaxPolicy {
    ToySoftmaxPolicy::new(toy_domain().0).unwrap()
}

fn host() -> ExternalPolicy {
    ExternalPolicy::spawn(&[env!("CARGO_BIN_EXE_april-toy-policy-host").to_string()], &[]).unwrap()
}

#[test]
fn external_policy_agrees_with_the_local_one() {
    let local = toy();
    let remote = host();
    assert_eq!(remote.id(), local.id());
    let init = remote.initial_params().unwrap();
    assert_eq!(init, local.initial_params().unwrap());
    let params: Vec<f64> = (0..init.len()).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
    let gen = GenerationParams {
        temperature: 1.0,
        ..GenerationParams::default()
    };
    for seed in 0..5 {
        let a = local.sample(&params, "toy-cd", &gen, seed).unwrap();
        let b = remote.sample(&params, "toy-cd", &gen, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            local.grad_seq_logprob(&params, "toy-cd", &a.tokens).unwrap(),
            remote.grad_seq_logprob(&params, "toy-cd", &a.tokens).unwrap()
        );
    }
    let ctxs = vec!["toy-ab".to_string()];
    assert_eq!(local.kl(&params, &init, &ctxs).unwrap(), remote.kl(&params, &init, &ctxs).unwrap());
    assert!(matches!(
        remote.logprobs(&params, "missing", &[0, 0]),
        Err(RlvrError::PolicyHost(_))
    ));
}

#[test]
fn external_policy_reads_its_shape_from_the_environment() {
    let spec = ToySpec {
        vocab: vec!["x".into(), "y".into()],
        length: 3,
        contexts: vec!["only".into()],
        logit_scale: 1.0,
    };
    let remote = ExternalPolicy::spawn(
        &[env!("CARGO_BIN_EXE_april-toy-policy-host").to_string()],
        &[("APRIL_TOY_POLICY".into(), serde_json::to_string(&spec).unwrap())],
    )
    .unwrap();
    assert_eq!(remote.initial_params().unwrap().len(), 6);
}

#[test]
fn group_sampling_is_seeded_and_deduplicated() {
    let p = toy();
    let params = p.initial_params().unwrap();
    let cfg = GRPOConfig {
        k: 4,
        ..GRPOConfig::default()
    };
    let a = sample_group(&p, &params, "toy-ab", &cfg, 11).unwrap();
    let b = sample_group(&p, &params, "toy-ab", &cfg, 11).unwrap();
    assert_eq!(a, b);
    let texts: Vec<&str> = a.candidates.iter().map(|c| c.text.as_str()).collect();
    let mut unique = texts.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), texts.len());
    assert_eq!(a.candidates.iter().map(|c| c.multiplicity).sum::<usize>(), a.draws);
}

#[test]
fn two_distinct_draws_keep_both() {
    let p = ToySoftmaxPolicy::new(ToySpec {
        vocab: vec!["a".into(), "b".into()],
        length: 1,
        contexts: vec!["c".into()],
        logit_scale: 1.0,
    })
    .unwrap();
    let cfg = GRPOConfig {
        k: 2,
        ..GRPOConfig::default()
    };
    let params = p.initial_params().unwrap();
    let g = (0..50)
        .map(|seed| sample_group(&p, &params, "c", &cfg, seed).unwrap())
        .find(|g| g.draws == 2)
        .expect("some seed yields two distinct draws without resampling");
    assert_eq!(g.size_after_dedup(), 2);
}

#[test]
fn collapsed_policy_gives_a_degenerate_group() {
    let p = toy();
    let mut params = p.initial_params().unwrap();
    // make token 0 overwhelmingly likely everywhere
    for (i, v) in params.iter_mut().enumerate() {
        if i % 4 == 0 {
            *v = 50.0;
        }
    }
    match sample_group(&p, &params, "toy-ab", &GRPOConfig::default(), 3) {
        Err(RlvrError::DegenerateGroup { group, .. }) => {
            assert_eq!(group.size_after_dedup(), 1);
            assert_eq!(group.draws, 8 + 16);
        }
        other => panic!("expected a degenerate group, got {other:?}"),
    }
}

fn zero_advantage_group(p: &ToySoftmaxPolicy, params: &[f64]) -> Group {
    let cfg = GRPOConfig::default();
    let mut g = sample_group(p, params, "toy-ab", &cfg, 5).unwrap();
    g.rewards = vec![1.0; g.candidates.len()];
    g.advantages = compute_advantages(&g.rewards, false);
    g
}

#[test]
fn zero_advantages_without_kl_leave_parameters_alone() {
    let p = toy();
    let init = p.initial_params().unwrap();
    let g = zero_advantage_group(&p, &init);
    let mut state = TrainerState::new(init.clone());
    let cfg = GRPOConfig {
        kl_coefficient: 0.0,
        ..GRPOConfig::default()
    };
    train_step(&p, &mut state, &[g], &cfg).unwrap();
    assert_eq!(state.params, init);
}

#[test]
fn refresh_every_step_makes_ratios_one() {
    let p = toy();
    let init = p.initial_params().unwrap();
    let mut state = TrainerState::new(init.clone());
    let cfg = GRPOConfig::default();
    let mut g = zero_advantage_group(&p, &init);
    g.rewards[0] = 0.0;
    g.advantages = compute_advantages(&g.rewards, false);
    for _ in 0..3 {
        let r = train_step(&p, &mut state, std::slice::from_ref(&g), &cfg).unwrap();
        assert_eq!(r.diagnostics.mean_ratio, 1.0);
        assert_eq!(r.diagnostics.clip_fraction, 0.0);
    }
    assert_ne!(state.params, init);
}

#[tokio::test]
async fn zero_epochs_is_a_no_op() {
    let (spec, tasks) = toy_domain();
    let p = ToySoftmaxPolicy::new(spec).unwrap();
    let init = p.initial_params().unwrap();
    let mut state = TrainerState::new(init.clone());
    let cfg = GRPOConfig {
        epochs: 0,
        ..GRPOConfig::default()
    };
    let r = train(&p, &mut state, &tasks, &cfg, 0, &TrainDeps::new(&InProcessShim))
        .await
        .unwrap();
    assert_eq!(r.steps, 0);
    assert!(r.reward_curve.is_empty());
    assert_eq!(r.final_params, init);
}

#[tokio::test]
async fn infinite_delta_stops_after_one_window() {
    let (spec, tasks) = toy_domain();
    let p = ToySoftmaxPolicy::new(spec).unwrap();
    let mut state = TrainerState::new(p.initial_params().unwrap());
    let cfg = GRPOConfig {
        early_stop_delta: f64::INFINITY,
        early_stop_window: 7,
        ..GRPOConfig::default()
    };
    let sink = Arc::new(MemorySink::default());
    let deps = TrainDeps {
        sink: sink.clone(),
        ..TrainDeps::new(&InProcessShim)
    };
    let r = train(&p, &mut state, &tasks, &cfg, 0, &deps).await.unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.steps, 7);
    assert_eq!(sink.of_kind(EventKind::TrainStep).len(), 7);
    assert_eq!(sink.of_kind(EventKind::GroupSampled).len(), 7 * tasks.len());
}

#[tokio::test]
async fn training_is_reproducible_for_a_seed() {
    let run = |seed| async move {
        let (spec, tasks) = toy_domain();
        let p = ToySoftmaxPolicy::new(spec).unwrap();
        let mut state = TrainerState::new(p.initial_params().unwrap());
        let cfg = GRPOConfig {
            epochs: 15,
            ..GRPOConfig::default()
        };
        train(&p, &mut state, &tasks, &cfg, seed, &TrainDeps::new(&InProcessShim))
            .await
            .unwrap()
    };
    assert_eq!(run(3).await, run(3).await);
    assert_ne!(run(3).await.final_params, run(4).await.final_params);
}

#[test]
fn checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        policy: "toy".into(),
        toy: Some(toy_domain().0),
        seed: 9,
        steps: 12,
        config: GRPOConfig::default(),
        params: vec![0.25, -1.5, 3.0],
    };
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}
