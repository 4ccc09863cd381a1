//! GRPO training from verifiable test rewards.
//!
//! For each task the policy samples `K` candidates, duplicates are removed,
//! every survivor is run against the task's validation suite, and the binary
//! rewards are centered on the group mean. The update minimizes a clipped
//! importance-ratio surrogate plus a KL penalty towards the initial policy.
//!
//! Policies are stateless: they evaluate probabilities for a parameter vector
//! supplied by the caller, so the trainer can hold the current, old and
//! reference parameters side by side.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bench::Synthesizer;
use crate::llm::{wrap_in_tags, GenerationParams};
use crate::sandbox::{reward_of, Executor, SandboxJob};
use crate::store::{emit, EventKind, EventSink, NullSink};
use crate::task::{SynthesisTask, TaskBundle};

#[derive(Debug, Error)]
pub enum RlvrError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown policy context `{0}`")]
    UnknownContext(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("group for `{task_id}` has a single distinct candidate")]
    DegenerateGroup { task_id: String, group: Box<Group> },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("policy host error: {0}")]
    PolicyHost(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    /// Per-token log-probabilities under the untempered policy.
    pub logprobs: Vec<f64>,
    pub text: String,
}

/// A parametric sequence policy. Every method takes the parameter vector to
/// evaluate, so the same object serves the current, old and reference policy.
pub trait Policy: Send + Sync {
    fn id(&self) -> String;

    fn initial_params(&self) -> Result<Vec<f64>, RlvrError>;

    fn sample(&self, params: &[f64], ctx: &str, gen: &GenerationParams, seed: u64) -> Result<Sampled, RlvrError>;

    fn logprobs(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError>;

    /// Gradient of the summed sequence log-probability.
    fn grad_seq_logprob(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError>;

    /// `KL(pi_params || pi_reference)` averaged over the given contexts, and
    /// its gradient with respect to `params`.
    fn kl(&self, params: &[f64], reference: &[f64], ctxs: &[String]) -> Result<(f64, Vec<f64>), RlvrError>;
}

// ---------------------------------------------------------------------------
// Toy softmax policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub vocab: Vec<String>,
    pub length: usize,
    pub contexts: Vec<String>,
    /// Logits are `logit_scale * theta`.
    #[serde(default = "unit_scale")]
    pub logit_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Independent categorical distributions, one logit table per (context,
/// position). Parameters are laid out context-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySoftmaxPolicy {
    spec: ToySpec,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl ToySoftmaxPolicy {
    pub fn new(spec: ToySpec) -> Result<Self, RlvrError> {
        if spec.vocab.is_empty() || spec.vocab.len() > 32 {
            return Err(RlvrError::InvalidConfig("vocabulary size must be in 1..=32".into()));
        }
        if spec.length == 0 || spec.length > 8 {
            return Err(RlvrError::InvalidConfig("length must be in 1..=8".into()));
        }
        if spec.contexts.is_empty() {
            return Err(RlvrError::InvalidConfig("at least one context is required".into()));
        }
        if !(spec.logit_scale > 0.0 && spec.logit_scale.is_finite()) {
            return Err(RlvrError::InvalidConfig("logit_scale must be positive".into()));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.contexts.len() * self.spec.length * self.spec.vocab.len()
    }

    fn ctx_index(&self, ctx: &str) -> Result<usize, RlvrError> {
        self.spec
            .contexts
            .iter()
            .position(|c| c == ctx)
            .ok_or_else(|| RlvrError::UnknownContext(ctx.to_string()))
    }

    fn offset(&self, c: usize, pos: usize) -> usize {
        (c * self.spec.length + pos) * self.spec.vocab.len()
    }

    fn check(&self, params: &[f64]) -> Result<(), RlvrError> {
        if params.len() != self.param_count() {
            return Err(RlvrError::InvalidParams(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn logits(&self, params: &[f64], c: usize, pos: usize) -> Vec<f64> {
        let o = self.offset(c, pos);
        params[o..o + self.spec.vocab.len()]
            .iter()
            .map(|t| self.spec.logit_scale * t)
            .collect()
    }

    /// Per-position probabilities for one context.
    pub fn probs(&self, params: &[f64], ctx: &str) -> Result<Vec<Vec<f64>>, RlvrError> {
        self.check(params)?;
        let c = self.ctx_index(ctx)?;
        Ok((0..self.spec.length)
            .map(|j| softmax(&self.logits(params, c, j)))
            .collect())
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.spec.vocab[t as usize].as_str())
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), RlvrError> {
        if tokens.len() != self.spec.length || tokens.iter().any(|&t| t as usize >= self.spec.vocab.len()) {
            return Err(RlvrError::InvalidParams(format!("token sequence {tokens:?} out of range")));
        }
        Ok(())
    }
}

fn draw(probs: &[f64], gen: &GenerationParams, logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    if gen.temperature == 0.0 {
        return logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, z)| if *z > logits[best] { i } else { best });
    }
    let tempered = if gen.temperature == 1.0 {
        probs.to_vec()
    } else {
        let scaled: Vec<f64> = logits.iter().map(|z| z / gen.temperature).collect();
        softmax(&scaled)
    };
    let mut order: Vec<usize> = (0..tempered.len()).collect();
    order.sort_by(|&a, &b| tempered[b].total_cmp(&tempered[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += tempered[i];
        if mass >= gen.top_p {
            break;
        }
    }
    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += tempered[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().expect("nucleus is never empty")
}

impl Policy for ToySoftmaxPolicy {
    fn id(&self) -> String {
        format!(
            "toy-softmax(v={},l={},c={})",
            self.spec.vocab.len(),
            self.spec.length,
            self.spec.contexts.len()
        )
    }

    fn initial_params(&self) -> Result<Vec<f64>, RlvrError> {
        Ok(vec![0.0; self.param_count()])
    }

    fn sample(&self, params: &[f64], ctx: &str, gen: &GenerationParams, seed: u64) -> Result<Sampled, RlvrError> {
        self.check(params)?;
        let c = self.ctx_index(ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(self.spec.length);
        let mut logprobs = Vec::with_capacity(self.spec.length);
        for j in 0..self.spec.length {
            let z = self.logits(params, c, j);
            let lp = log_softmax(&z);
            let p = softmax(&z);
            let t = draw(&p, gen, &z, &mut rng);
            tokens.push(t as u32);
            logprobs.push(lp[t]);
        }
        let text = self.decode(&tokens);
        Ok(Sampled { tokens, logprobs, text })
    }

    fn logprobs(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError> {
        self.check(params)?;
        self.check_tokens(tokens)?;
        let c = self.ctx_index(ctx)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| log_softmax(&self.logits(params, c, j))[t as usize])
            .collect())
    }

    fn grad_seq_logprob(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError> {
        self.check(params)?;
        self.check_tokens(tokens)?;
        let c = self.ctx_index(ctx)?;
        let mut g = vec![0.0; params.len()];
        for (j, &t) in tokens.iter().enumerate() {
            let p = softmax(&self.logits(params, c, j));
            let o = self.offset(c, j);
            for (k, pk) in p.iter().enumerate() {
                g[o + k] = self.spec.logit_scale * (f64::from(u8::from(k == t as usize)) - pk);
            }
        }
        Ok(g)
    }

    fn kl(&self, params: &[f64], reference: &[f64], ctxs: &[String]) -> Result<(f64, Vec<f64>), RlvrError> {
        self.check(params)?;
        self.check(reference)?;
        let mut grad = vec![0.0; params.len()];
        if ctxs.is_empty() {
            return Ok((0.0, grad));
        }
        let norm = (ctxs.len() * self.spec.length) as f64;
        let mut total = 0.0;
        for ctx in ctxs {
            let c = self.ctx_index(ctx)?;
            for j in 0..self.spec.length {
                let lp = log_softmax(&self.logits(params, c, j));
                let lq = log_softmax(&self.logits(reference, c, j));
                let kl_pos: f64 = lp
                    .iter()
                    .zip(&lq)
                    .map(|(a, b)| a.exp() * (a - b))
                    .sum();
                total += kl_pos;
                let o = self.offset(c, j);
                for k in 0..lp.len() {
                    grad[o + k] += self.spec.logit_scale * lp[k].exp() * ((lp[k] - lq[k]) - kl_pos) / norm;
                }
            }
        }
        Ok((total / norm, grad))
    }
}

// ---------------------------------------------------------------------------
// Groups

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCandidate {
    pub tokens: Vec<u32>,
    pub text: String,
    pub sampling_logprobs: Vec<f64>,
    /// How many of the raw draws produced this text.
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub task_id: String,
    pub context: String,
    pub candidates: Vec<GroupCandidate>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Candidates whose execution failed for infrastructure reasons.
    pub infra_error: Vec<bool>,
    pub size_requested: usize,
    pub draws: usize,
}

impl Group {
    pub fn size_after_dedup(&self) -> usize {
        self.candidates.len()
    }

    /// Mean reward over the raw draws (each distinct candidate weighted by
    /// its multiplicity), ignoring infrastructure failures.
    pub fn mean_reward(&self) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for (i, c) in self.candidates.iter().enumerate() {
            if self.infra_error.get(i).copied().unwrap_or(false) {
                continue;
            }
            num += c.multiplicity as f64 * self.rewards.get(i).copied().unwrap_or(0.0);
            den += c.multiplicity;
        }
        (den > 0).then(|| num / den as f64)
    }
}

/// Keeps the first occurrence of every distinct text, counting repeats.
pub fn dedup_candidates(samples: Vec<GroupCandidate>) -> Vec<GroupCandidate> {
    let mut out: Vec<GroupCandidate> = Vec::new();
    for s in samples {
        match out.iter_mut().find(|c| c.text == s.text) {
            Some(c) => c.multiplicity += s.multiplicity,
            None => out.push(s),
        }
    }
    out
}

/// Draws `K` candidates. When fewer than two distinct texts come out, up to
/// `resample_budget` extra draws are made before giving up.
pub fn sample_group(
    policy: &dyn Policy,
    params: &[f64],
    task_id: &str,
    config: &GRPOConfig,
    seed: u64,
) -> Result<Group, RlvrError> {
    if config.k < 2 {
        return Err(RlvrError::InvalidConfig("K must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = |rng: &mut ChaCha8Rng| -> Result<GroupCandidate, RlvrError> {
        let s = policy.sample(params, task_id, &config.sampling, rng.gen())?;
        Ok(GroupCandidate {
            tokens: s.tokens,
            text: s.text,
            sampling_logprobs: s.logprobs,
            multiplicity: 1,
        })
    };
    let mut raw = Vec::with_capacity(config.k);
    for _ in 0..config.k {
        raw.push(one(&mut rng)?);
    }
    let mut candidates = dedup_candidates(raw);
    let mut draws = config.k;
    let budget = config.resample_budget();
    while candidates.len() < 2 && draws < config.k + budget {
        let extra = one(&mut rng)?;
        draws += 1;
        candidates = dedup_candidates(candidates.into_iter().chain(std::iter::once(extra)).collect());
    }
    let group = Group {
        task_id: task_id.to_string(),
        context: task_id.to_string(),
        rewards: vec![0.0; candidates.len()],
        advantages: vec![0.0; candidates.len()],
        infra_error: vec![false; candidates.len()],
        candidates,
        size_requested: config.k,
        draws,
    };
    if group.candidates.len() < 2 {
        return Err(RlvrError::DegenerateGroup {
            task_id: task_id.to_string(),
            group: Box::new(group),
        });
    }
    Ok(group)
}

/// Runs every candidate against the task's suite. Reward is 1 iff all tests
/// pass; an executor failure gives reward 0 and is flagged as infrastructure.
pub async fn assign_rewards(group: &mut Group, bundle: &TaskBundle, executor: &dyn Executor, timeout: Duration) {
    let jobs = group.candidates.iter().map(|c| {
        SandboxJob::new(
            &bundle.task.id,
            &c.text,
            &bundle.task.module_path,
            &bundle.task.library_name,
            bundle.suite.clone(),
        )
        .with_timeout(timeout)
    });
    let results: Vec<_> = futures::stream::iter(jobs)
        .map(|job| executor.run(job))
        .buffered(8)
        .collect()
        .await;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                group.rewards[i] = f64::from(reward_of(&r));
                group.infra_error[i] = false;
            }
            Err(e) => {
                tracing::warn!("infrastructure error scoring {}: {e}", group.task_id);
                group.rewards[i] = 0.0;
                group.infra_error[i] = true;
            }
        }
    }
}

/// `A_i = R_i - mean(R)`, optionally divided by the group standard deviation.
pub fn compute_advantages(rewards: &[f64], normalize_by_std: bool) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize_by_std {
        return centered;
    }
    let std = (centered.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return centered;
    }
    centered.into_iter().map(|a| a / std).collect()
}

// ---------------------------------------------------------------------------
// Objective

mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GRPOConfig {
    pub k: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub old_policy_refresh_interval: usize,
    pub early_stop_window: usize,
    #[serde(with = "maybe_infinite")]
    pub early_stop_delta: f64,
    pub normalize_by_std: bool,
    /// Extra draws allowed when de-duplication leaves fewer than two
    /// candidates; defaults to `2 * K`.
    pub max_resamples: Option<usize>,
    pub sampling: GenerationParams,
    pub workers: usize,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        Self {
            k: 8,
            clip_epsilon: 0.2,
            kl_coefficient: 0.04,
            learning_rate: 0.1,
            epochs: 200,
            minibatch_size: 8,
            old_policy_refresh_interval: 1,
            early_stop_window: 20,
            early_stop_delta: 0.01,
            normalize_by_std: false,
            max_resamples: None,
            sampling: GenerationParams {
                temperature: 1.0,
                ..GenerationParams::default()
            },
            workers: 4,
        }
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<(), RlvrError> {
        let bad = |m: &str| Err(RlvrError::InvalidConfig(m.to_string()));
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return bad("clip_epsilon must be positive");
        }
        if self.kl_coefficient.is_nan() || self.kl_coefficient < 0.0 {
            return bad("kl_coefficient must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.minibatch_size == 0 || self.old_policy_refresh_interval == 0 || self.early_stop_window == 0 {
            return bad("minibatch_size, old_policy_refresh_interval and early_stop_window must be at least 1");
        }
        if self.early_stop_delta.is_nan() || self.early_stop_delta < 0.0 {
            return bad("early_stop_delta must be non-negative");
        }
        self.sampling
            .validate()
            .map_err(|e| RlvrError::InvalidConfig(e.to_string()))
    }

    pub fn resample_budget(&self) -> usize {
        self.max_resamples.unwrap_or(2 * self.k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Sum over groups of `-mean_i min(r_i A_i, clip(r_i) A_i) + beta KL`, with
/// sequence-level ratios `r_i = exp(lp_theta(s_i) - lp_old(s_i))`, and its
/// exact gradient with respect to `theta`.
pub fn grpo_objective(
    policy: &dyn Policy,
    theta: &[f64],
    old: &[f64],
    reference: &[f64],
    groups: &[Group],
    config: &GRPOConfig,
) -> Result<Objective, RlvrError> {
    let eps = config.clip_epsilon;
    let beta = config.kl_coefficient;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    let (mut ratio_sum, mut clipped, mut count) = (0.0, 0usize, 0usize);
    let (mut kl_sum, mut surrogate_sum) = (0.0, 0.0);
    let (mut reward_num, mut reward_den) = (0.0, 0.0);

    for g in groups {
        let n = g.candidates.len() as f64;
        let mut surrogate_mean = 0.0;
        for (c, &a) in g.candidates.iter().zip(&g.advantages) {
            let lp: f64 = policy.logprobs(theta, &g.context, &c.tokens)?.iter().sum();
            let lp_old: f64 = policy.logprobs(old, &g.context, &c.tokens)?.iter().sum();
            let r = (lp - lp_old).exp();
            let unclipped = r * a;
            let clipped_term = clip(r, 1.0 - eps, 1.0 + eps) * a;
            let s = unclipped.min(clipped_term);
            surrogate_mean += s / n;
            ratio_sum += r;
            count += 1;
            let clip_active = (a > 0.0 && r > 1.0 + eps) || (a < 0.0 && r < 1.0 - eps);
            if clip_active {
                clipped += 1;
            } else if a != 0.0 {
                let gl = policy.grad_seq_logprob(theta, &g.context, &c.tokens)?;
                for (gi, d) in grad.iter_mut().zip(gl) {
                    *gi -= a * r * d / n;
                }
            }
        }
        let (kl, kl_grad) = policy.kl(theta, reference, std::slice::from_ref(&g.context))?;
        if beta != 0.0 {
            for (gi, d) in grad.iter_mut().zip(kl_grad) {
                *gi += beta * d;
            }
        }
        loss += -surrogate_mean + beta * kl;
        kl_sum += kl;
        surrogate_sum += surrogate_mean;
        for (i, c) in g.candidates.iter().enumerate() {
            if !g.infra_error.get(i).copied().unwrap_or(false) {
                reward_num += c.multiplicity as f64 * g.rewards.get(i).copied().unwrap_or(0.0);
                reward_den += c.multiplicity as f64;
            }
        }
    }
    let ng = groups.len().max(1) as f64;
    Ok(Objective {
        loss,
        grad,
        diagnostics: Diagnostics {
            mean_ratio: if count > 0 { ratio_sum / count as f64 } else { 1.0 },
            clip_fraction: if count > 0 { clipped as f64 / count as f64 } else { 0.0 },
            kl: kl_sum / ng,
            mean_reward: if reward_den > 0.0 { reward_num / reward_den } else { 0.0 },
            surrogate: surrogate_sum / ng,
        },
    })
}

/// Parameter vectors the trainer keeps between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub params: Vec<f64>,
    pub old_params: Vec<f64>,
    pub ref_params: Vec<f64>,
}

impl TrainerState {
    /// The reference policy is the initial one and stays frozen.
    pub fn new(initial: Vec<f64>) -> Self {
        Self {
            step: 0,
            old_params: initial.clone(),
            ref_params: initial.clone(),
            params: initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub diagnostics: Diagnostics,
}

/// One gradient-descent update on the given groups. The old policy is
/// refreshed to the current parameters at the start of every
/// `old_policy_refresh_interval`-th step.
pub fn train_step(
    policy: &dyn Policy,
    state: &mut TrainerState,
    groups: &[Group],
    config: &GRPOConfig,
) -> Result<StepReport, RlvrError> {
    if state.step.is_multiple_of(config.old_policy_refresh_interval) {
        state.old_params = state.params.clone();
    }
    let obj = grpo_objective(
        policy,
        &state.params,
        &state.old_params,
        &state.ref_params,
        groups,
        config,
    )?;
    if !obj.loss.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
        return Err(RlvrError::NonFiniteLoss { step: state.step });
    }
    for (p, g) in state.params.iter_mut().zip(&obj.grad) {
        *p -= config.learning_rate * g;
    }
    let report = StepReport {
        step: state.step,
        loss: obj.loss,
        diagnostics: obj.diagnostics,
    };
    state.step += 1;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean group reward per step (multiplicity-weighted over raw draws).
    pub reward_curve: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub stopped_early: bool,
    pub degenerate_groups: usize,
    pub infra_errors: usize,
    pub step_reports: Vec<StepReport>,
    pub final_params: Vec<f64>,
}

/// Moving average of the last `window` values at every position.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// True once at least `window` steps have run and the moving average stayed
/// within a band narrower than `delta` over the last `window` steps.
pub fn should_stop_early(moving: &[f64], window: usize, delta: f64) -> bool {
    if window == 0 || moving.len() < window {
        return false;
    }
    let last = &moving[moving.len() - window..];
    let hi = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = last.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo < delta
}

pub struct TrainDeps<'a> {
    pub executor: &'a dyn Executor,
    pub sink: Arc<dyn EventSink>,
    pub timeout: Duration,
}

impl<'a> TrainDeps<'a> {
    pub fn new(executor: &'a dyn Executor) -> Self {
        Self {
            executor,
            sink: Arc::new(NullSink),
            timeout: Duration::from_secs(60),
        }
    }
}

/// GRPO over `tasks` for up to `config.epochs` passes, one update per
/// mini-batch. Degenerate groups are left out of the update but still count
/// towards the reward curve.
pub async fn train(
    policy: &dyn Policy,
    state: &mut TrainerState,
    tasks: &[TaskBundle],
    config: &GRPOConfig,
    seed: u64,
    deps: &TrainDeps<'_>,
) -> Result<TrainReport, RlvrError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(RlvrError::InvalidConfig("no training tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport {
        steps: 0,
        reward_curve: Vec::new(),
        moving_average: Vec::new(),
        stopped_early: false,
        degenerate_groups: 0,
        infra_errors: 0,
        step_reports: Vec::new(),
        final_params: state.params.clone(),
    };
    'epochs: for _epoch in 0..config.epochs {
        for batch in tasks.chunks(config.minibatch_size) {
            let step = state.step;
            let mut groups = Vec::with_capacity(batch.len());
            for bundle in batch {
                let group_seed: u64 = rng.gen();
                match sample_group(policy, &state.params, &bundle.task.id, config, group_seed) {
                    Ok(g) => groups.push((g, false)),
                    Err(RlvrError::DegenerateGroup { group, .. }) => groups.push((*group, true)),
                    Err(e) => return Err(e),
                }
            }
            let scored: Vec<(Group, bool)> = futures::stream::iter(groups.into_iter().zip(batch))
                .map(|((mut g, degenerate), bundle)| async move {
                    assign_rewards(&mut g, bundle, deps.executor, deps.timeout).await;
                    g.advantages = compute_advantages(&g.rewards, config.normalize_by_std);
                    (g, degenerate)
                })
                .buffered(config.workers.max(1))
                .collect()
                .await;

            let (mut num, mut den) = (0.0, 0usize);
            for (g, degenerate) in &scored {
                report.infra_errors += g.infra_error.iter().filter(|x| **x).count();
                if *degenerate {
                    report.degenerate_groups += 1;
                }
                for (i, c) in g.candidates.iter().enumerate() {
                    if !g.infra_error[i] {
                        num += c.multiplicity as f64 * g.rewards[i];
                        den += c.multiplicity;
                    }
                }
                emit(
                    deps.sink.as_ref(),
                    EventKind::GroupSampled,
                    json!({
                        "step": step,
                        "task_id": g.task_id,
                        "requested": g.size_requested,
                        "draws": g.draws,
                        "unique": g.size_after_dedup(),
                        "texts": g.candidates.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
                        "multiplicities": g.candidates.iter().map(|c| c.multiplicity).collect::<Vec<_>>(),
                        "rewards": g.rewards,
                        "advantages": g.advantages,
                        "degenerate": degenerate,
                    }),
                );
            }
            let usable: Vec<Group> = scored
                .into_iter()
                .filter(|(_, degenerate)| !degenerate)
                .map(|(g, _)| g)
                .collect();
            let step_report = if usable.is_empty() {
                state.step += 1;
                None
            } else {
                Some(train_step(policy, state, &usable, config)?)
            };
            let mean_reward = if den > 0 { num / den as f64 } else { 0.0 };
            report.reward_curve.push(mean_reward);
            report.moving_average = moving_average(&report.reward_curve, config.early_stop_window);
            let ma = *report.moving_average.last().expect("curve is non-empty");
            emit(
                deps.sink.as_ref(),
                EventKind::TrainStep,
                json!({
                    "step": step,
                    "mean_reward": mean_reward,
                    "moving_average": ma,
                    "updated": step_report.is_some(),
                    "loss": step_report.as_ref().map(|r| r.loss),
                    "diagnostics": step_report.as_ref().map(|r| &r.diagnostics),
                }),
            );
            if let Some(r) = step_report {
                report.step_reports.push(r);
            }
            report.steps += 1;
            if should_stop_early(&report.moving_average, config.early_stop_window, config.early_stop_delta) {
                report.stopped_early = true;
                break 'epochs;
            }
        }
    }
    report.final_params = state.params.clone();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Toy domain and checkpoints

/// Five string-emission tasks over a four-letter vocabulary: each suite
/// demands one exact two-letter target, so a uniform policy starts near a
/// 1-in-16 success rate.
pub fn toy_domain() -> (ToySpec, Vec<TaskBundle>) {
    toy_domain_with(
        &["a", "b", "c", "d"],
        &[("toy-ab", "ab"), ("toy-ba", "ba"), ("toy-cd", "cd"), ("toy-dc", "dc"), ("toy-ad", "ad")],
        TOY_LOGIT_SCALE,
    )
}

/// Scale that lets plain gradient descent at the default learning rate make
/// visible progress on the toy domain within a couple of hundred steps.
pub const TOY_LOGIT_SCALE: f64 = 4.0;

/// A toy domain over `vocab` with one task per `(id, target)` pair. Targets
/// must all have the same length.
pub fn toy_domain_with(vocab: &[&str], targets: &[(&str, &str)], logit_scale: f64) -> (ToySpec, Vec<TaskBundle>) {
    let spec = ToySpec {
        vocab: vocab.iter().map(|s| s.to_string()).collect(),
        length: targets.first().map_or(1, |(_, t)| t.chars().count()),
        contexts: targets.iter().map(|(id, _)| id.to_string()).collect(),
        logit_scale,
    };
    let bundles = targets
        .iter()
        .map(|(id, target)| toy_task(id, target))
        .collect();
    (spec, bundles)
}

fn toy_task(id: &str, target: &str) -> TaskBundle {
    use crate::task::{MethodSignature, TestCase, TestSuite};
    let signature: MethodSignature = serde_json::from_value(json!({
        "name": "emit",
        "params": [],
        "returns": "str",
    }))
    .expect("static signature");
    let task = SynthesisTask {
        id: id.to_string(),
        signature,
        module_path: "toy.strings".into(),
        library_name: "toy".into(),
        examples: Vec::new(),
        validation_suite_ref: format!("{id}.suite.json").into(),
    };
    let suite = TestSuite::new(
        id,
        vec![TestCase {
            id: "exact".into(),
            source_code: format!("expect_eq {target}"),
            description: None,
        }],
    )
    .expect("static suite");
    TaskBundle { task, suite }
}

pub const CHECKPOINT_FORMAT: &str = "april-checkpoint/1";

/// Plain-JSON checkpoint: parameters, training config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySpec>,
    pub seed: u64,
    pub steps: usize,
    pub config: GRPOConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), RlvrError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| RlvrError::InvalidParams(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlvrError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| RlvrError::InvalidParams(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(RlvrError::InvalidParams(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        Ok(ck)
    }
}

/// Synthesizes with a policy at fixed parameters, for benchmarking.
pub struct PolicySynthesizer {
    pub policy: Arc<dyn Policy>,
    pub params: Vec<f64>,
    pub sampling: GenerationParams,
    pub seed: u64,
}

#[async_trait]
impl Synthesizer for PolicySynthesizer {
    fn id(&self) -> String {
        self.policy.id()
    }

    async fn synthesize(&self, task: &SynthesisTask, _prompt: &str, attempt: usize) -> Result<String, String> {
        let seed = self.seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.policy
            .sample(&self.params, &task.id, &self.sampling, seed)
            .map(|s| wrap_in_tags(&s.text))
            .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// External policies over a JSON-lines subprocess

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PolicyRequest {
    Describe,
    Sample {
        context: String,
        params: Vec<f64>,
        temperature: f64,
        top_p: f64,
        seed: u64,
    },
    Logprob {
        context: String,
        params: Vec<f64>,
        tokens: Vec<u32>,
    },
    GradLogprob {
        context: String,
        params: Vec<f64>,
        tokens: Vec<u32>,
    },
    Kl {
        params: Vec<f64>,
        reference: Vec<f64>,
        contexts: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

/// Host side of the protocol: answers one request with a local policy.
pub fn serve_policy_request(policy: &dyn Policy, request: &PolicyRequest) -> PolicyResponse {
    let result = (|| -> Result<PolicyResponse, RlvrError> {
        Ok(match request {
            PolicyRequest::Describe => PolicyResponse {
                id: Some(policy.id()),
                params: Some(policy.initial_params()?),
                ..Default::default()
            },
            PolicyRequest::Sample {
                context,
                params,
                temperature,
                top_p,
                seed,
            } => {
                let gen = GenerationParams {
                    temperature: *temperature,
                    top_p: *top_p,
                    ..GenerationParams::default()
                };
                let s = policy.sample(params, context, &gen, *seed)?;
                PolicyResponse {
                    tokens: Some(s.tokens),
                    logprobs: Some(s.logprobs),
                    text: Some(s.text),
                    ..Default::default()
                }
            }
            PolicyRequest::Logprob { context, params, tokens } => PolicyResponse {
                logprobs: Some(policy.logprobs(params, context, tokens)?),
                ..Default::default()
            },
            PolicyRequest::GradLogprob { context, params, tokens } => PolicyResponse {
                grad: Some(policy.grad_seq_logprob(params, context, tokens)?),
                ..Default::default()
            },
            PolicyRequest::Kl {
                params,
                reference,
                contexts,
            } => {
                let (value, grad) = policy.kl(params, reference, contexts)?;
                PolicyResponse {
                    value: Some(value),
                    grad: Some(grad),
                    ..Default::default()
                }
            }
        })
    })();
    result.unwrap_or_else(|e| PolicyResponse {
        error: Some(e.to_string()),
        ..Default::default()
    })
}

struct HostIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A policy living in another process, spoken to one JSON line at a time.
pub struct ExternalPolicy {
    io: Mutex<HostIo>,
    id: String,
    initial: Vec<f64>,
}

impl ExternalPolicy {
    pub fn spawn(command: &[String], envs: &[(String, String)]) -> Result<Self, RlvrError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| RlvrError::PolicyHost("empty policy host command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .envs(envs.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| RlvrError::PolicyHost(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut me = Self {
            io: Mutex::new(HostIo { child, stdin, stdout }),
            id: String::new(),
            initial: Vec::new(),
        };
        let r = me.call(&PolicyRequest::Describe)?;
        me.id = r.id.unwrap_or_else(|| "external".into());
        me.initial = r
            .params
            .ok_or_else(|| RlvrError::PolicyHost("describe reply has no params".into()))?;
        Ok(me)
    }

    fn call(&self, request: &PolicyRequest) -> Result<PolicyResponse, RlvrError> {
        let mut io = self.io.lock().expect("policy host lock");
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(io.stdin, "{line}")?;
        io.stdin.flush()?;
        let mut reply = String::new();
        if io.stdout.read_line(&mut reply)? == 0 {
            return Err(RlvrError::PolicyHost("policy host closed its output".into()));
        }
        let response: PolicyResponse =
            serde_json::from_str(&reply).map_err(|e| RlvrError::PolicyHost(format!("bad reply: {e}")))?;
        match response.error {
            Some(e) => Err(RlvrError::PolicyHost(e)),
            None => Ok(response),
        }
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

fn missing(field: &str) -> RlvrError {
    RlvrError::PolicyHost(format!("reply is missing `{field}`"))
}

impl Policy for ExternalPolicy {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn initial_params(&self) -> Result<Vec<f64>, RlvrError> {
        Ok(self.initial.clone())
    }

    fn sample(&self, params: &[f64], ctx: &str, gen: &GenerationParams, seed: u64) -> Result<Sampled, RlvrError> {
        let r = self.call(&PolicyRequest::Sample {
            context: ctx.into(),
            params: params.to_vec(),
            temperature: gen.temperature,
            top_p: gen.top_p,
            seed,
        })?;
        Ok(Sampled {
            tokens: r.tokens.ok_or_else(|| missing("tokens"))?,
            logprobs: r.logprobs.ok_or_else(|| missing("logprobs"))?,
            text: r.text.ok_or_else(|| missing("text"))?,
        })
    }

    fn logprobs(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError> {
        self.call(&PolicyRequest::Logprob {
            context: ctx.into(),
            params: params.to_vec(),
            tokens: tokens.to_vec(),
        })?
        .logprobs
        .ok_or_else(|| missing("logprobs"))
    }

    fn grad_seq_logprob(&self, params: &[f64], ctx: &str, tokens: &[u32]) -> Result<Vec<f64>, RlvrError> {
        self.call(&PolicyRequest::GradLogprob {
            context: ctx.into(),
            params: params.to_vec(),
            tokens: tokens.to_vec(),
        })?
        .grad
        .ok_or_else(|| missing("grad"))
    }

    fn kl(&self, params: &[f64], reference: &[f64], ctxs: &[String]) -> Result<(f64, Vec<f64>), RlvrError> {
        let r = self.call(&PolicyRequest::Kl {
            params: params.to_vec(),
            reference: reference.to_vec(),
            contexts: ctxs.to_vec(),
        })?;
        Ok((r.value.ok_or_else(|| missing("value"))?, r.grad.ok_or_else(|| missing("grad"))?))
    }
}

/// Serves a toy policy over stdin/stdout until stdin closes. The shape comes
/// from `APRIL_TOY_POLICY` (a JSON [`ToySpec`]), defaulting to the toy domain.
pub fn serve_toy_policy_stdio() -> Result<(), RlvrError> {
    let spec: ToySpec = match std::env::var("APRIL_TOY_POLICY") {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| RlvrError::InvalidConfig(format!("bad APRIL_TOY_POLICY: {e}")))?,
        Err(_) => toy_domain().0,
    };
    let policy = ToySoftmaxPolicy::new(spec)?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<PolicyRequest>(&line) {
            Ok(req) => serve_policy_request(&policy, &req),
            Err(e) => PolicyResponse {
                error: Some(format!("malformed request: {e}")),
                ..Default::default()
            },
        };
        let text = serde_json::to_string(&reply).expect("reply serializes");
        if writeln!(stdout, "{text}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
    Ok(())
}
