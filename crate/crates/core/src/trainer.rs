//! Preference-optimization training loop.
//!
//! A run starts from a policy (normally the output of [`fit_sft`]), freezes
//! a copy of it as the reference and then, for every optimizer step:
//!
//! 1. forwards the policy on both responses of each example (the reference
//!    log-probs are cached until the next refresh);
//! 2. builds the token log-ratios and the implicit reward of the configured
//!    variant, drawing the down-sampling stream from `(seed, epoch, example)`;
//! 3. back-propagates the preference loss (plus the optional chosen-NLL
//!    term) into a private per-example gradient;
//! 4. merges the gradients in example order and applies the optimizer.
//!
//! Per-example work runs on a rayon pool; because merging is ordered, a run
//! is bit-identical for any thread count.

use crate::datagen::{Judge, LengthBias};
use crate::kernels::{
    self, implicit_reward, loss_grad_wrt_logprobs, preference_loss, sigmoid, token_log_ratios,
    KernelError,
};
use crate::model::{self, ModelError, ParamGrad, PolicyParams};
use crate::rng::{rng_for, Domain, RngStream};
use crate::types::{ImplicitReward, LossConfig, PreferenceTriplet, RefreshCadence, TokenSeq, TypeError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip)]
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; the step averages over
    /// `batch_size * grad_accum` examples.
    pub grad_accum: usize,
    pub learning_rate: f64,
    /// Fraction of the total steps over which the learning rate ramps
    /// linearly from `lr / warmup_steps` up to `lr`.
    pub warmup_ratio: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Evaluate every this many optimizer steps; 0 evaluates only before the
    /// first and after the last step.
    pub eval_every: usize,
    pub max_decode_len: usize,
    /// Defaults to the last vocabulary id.
    pub stop_id: Option<u32>,
    /// Worker threads for per-example work; 0 uses every core.
    pub threads: usize,
    /// Maximum-likelihood warm-up before preference training.
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub embed_dim: usize,
    pub order: usize,
    /// Seeds parameter init and the warm-up shuffle, independently of the
    /// preference-loss seed.
    pub init_seed: u64,
    /// Held-out triplets drawn fresh from the corpus world for evaluation.
    pub test_size: usize,
    /// Length relation of the held-out triplets.
    pub test_length_bias: LengthBias,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 1,
            batch_size: 32,
            grad_accum: 1,
            learning_rate: 1e-3,
            warmup_ratio: 0.1,
            optimizer: OptimizerKind::Adamw,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 0,
            max_decode_len: 32,
            stop_id: None,
            threads: 1,
            sft_epochs: 3,
            sft_lr: 1e-2,
            embed_dim: model::DEFAULT_EMBED_DIM,
            order: model::DEFAULT_ORDER,
            init_seed: 7,
            test_size: 1000,
            test_length_bias: LengthBias::Mixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be at least 1".into());
        }
        // zero is allowed: it freezes the policy, which tests rely on
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be at least 1".into());
        }
        if !(self.sft_lr >= 0.0 && self.sft_lr.is_finite()) {
            return bad(format!("sft_lr must be >= 0, got {}", self.sft_lr));
        }
        if self.embed_dim == 0 || self.order == 0 {
            return bad("embed_dim and order must be at least 1".into());
        }
        Ok(())
    }

    pub fn stop_id_for(&self, vocab_size: usize) -> u32 {
        self.stop_id.unwrap_or((vocab_size - 1) as u32)
    }
}

/// State of the step at which a run aborted.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub step: usize,
    pub epoch: usize,
    /// Corpus index of the first offending example, if one was identified.
    pub example: Option<usize>,
    pub what: String,
    pub loss: f64,
    pub delta: f64,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} (epoch {})", self.step, self.epoch)?;
        if let Some(e) = self.example {
            write!(f, ", example {e}")?;
        }
        write!(f, ": {} (loss={}, delta={})", self.what, self.loss, self.delta)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus does not fit the policy vocabulary: example {example}: {source}")]
    VocabMismatch { example: usize, source: TypeError },
    #[error("non-finite value, aborting at {0}")]
    NonFinite(Diagnostic),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("writing metrics: {0}")]
    Io(#[from] io::Error),
    #[error("writing metrics: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Batch statistics of one optimizer step, computed before its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub delta_mean: f64,
    pub chosen_term: f64,
    pub rejected_term: f64,
    pub sigma_neg_delta: f64,
    pub tm_mean: f64,
    pub grad_norm: f64,
}

/// Evaluation after `step` optimizer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub win_rate: f64,
    pub policy_len: f64,
    pub ref_len: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Steps after whose update the reference was replaced.
    pub refresh_steps: Vec<usize>,
}

/// Receives records as they are produced.
pub trait MetricsSink {
    fn on_step(&mut self, record: &StepRecord) -> Result<()>;
    fn on_eval(&mut self, record: &EvalRecord) -> Result<()>;
}

pub struct NullSink;

impl MetricsSink for NullSink {
    fn on_step(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _: &EvalRecord) -> Result<()> {
        Ok(())
    }
}

/// Step and eval CSVs with headers
/// `step,epoch,loss,delta_mean,chosen_term,rejected_term,sigma_neg_delta,tm_mean,grad_norm`
/// and `step,win_rate,policy_len,ref_len`.
pub struct CsvSink<A: Write, B: Write> {
    steps: csv::Writer<A>,
    evals: csv::Writer<B>,
}

impl<A: Write, B: Write> CsvSink<A, B> {
    pub fn new(steps: A, evals: B) -> Result<Self> {
        let builder = || {
            let mut b = csv::WriterBuilder::new();
            b.has_headers(false);
            b
        };
        let mut steps = builder().from_writer(steps);
        let mut evals = builder().from_writer(evals);
        steps.write_record(STEP_COLUMNS)?;
        evals.write_record(EVAL_COLUMNS)?;
        Ok(Self { steps, evals })
    }

    pub fn finish(mut self) -> Result<(A, B)> {
        self.steps.flush()?;
        self.evals.flush()?;
        let a = self.steps.into_inner().map_err(|e| e.into_error())?;
        let b = self.evals.into_inner().map_err(|e| e.into_error())?;
        Ok((a, b))
    }
}

pub const STEP_COLUMNS: [&str; 9] = [
    "step",
    "epoch",
    "loss",
    "delta_mean",
    "chosen_term",
    "rejected_term",
    "sigma_neg_delta",
    "tm_mean",
    "grad_norm",
];

pub const EVAL_COLUMNS: [&str; 4] = ["step", "win_rate", "policy_len", "ref_len"];

impl<A: Write, B: Write> MetricsSink for CsvSink<A, B> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.steps.serialize(r)?;
        Ok(())
    }
    fn on_eval(&mut self, r: &EvalRecord) -> Result<()> {
        self.evals.serialize(r)?;
        Ok(())
    }
}

impl MetricsSink for RunMetrics {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.steps.push(r.clone());
        Ok(())
    }
    fn on_eval(&mut self, r: &EvalRecord) -> Result<()> {
        self.evals.push(r.clone());
        Ok(())
    }
}

/// What [`train_with`] evaluates against: greedy decodes of the policy are
/// judged against those of `baseline` on `prompts`.
pub struct EvalSetup<'a> {
    pub prompts: &'a [TokenSeq],
    pub baseline: &'a PolicyParams,
    pub judge: &'a dyn Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Strict wins count 1, ties 0.5.
    pub win_rate: f64,
    /// Mean decoded length, stop token excluded.
    pub policy_len: f64,
    pub ref_len: f64,
}

fn body_len(seq: &TokenSeq, stop_id: u32) -> usize {
    seq.ids().iter().take_while(|&&t| t != stop_id).count()
}

/// Greedy-decodes both models on every prompt and lets `judge` compare the
/// outputs.
pub fn evaluate(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompts: &[TokenSeq],
    judge: &dyn Judge,
    max_len: usize,
    stop_id: u32,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(TrainError::Config("evaluation needs at least one prompt".into()));
    }
    let per_prompt = prompts
        .par_iter()
        .map(|p| -> Result<(f64, usize, usize)> {
            let a = model::greedy_decode(policy, p, max_len, stop_id)?;
            let b = model::greedy_decode(reference, p, max_len, stop_id)?;
            let win = match judge.compare(p, &a, &b) {
                Ordering::Greater => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Less => 0.0,
            };
            Ok((win, body_len(&a, stop_id), body_len(&b, stop_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_prompt.len() as f64;
    Ok(EvalReport {
        n: per_prompt.len(),
        win_rate: per_prompt.iter().map(|r| r.0).sum::<f64>() / n,
        policy_len: per_prompt.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        ref_len: per_prompt.iter().map(|r| r.2 as f64).sum::<f64>() / n,
    })
}

/// Implicit-reward statistics of `policy` against `reference` on held-out
/// triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub n: usize,
    pub delta_mean: f64,
    /// Standard error of `delta_mean`.
    pub delta_se: f64,
    pub chosen_term_mean: f64,
    pub rejected_term_mean: f64,
}

/// Uses the variant and `β` of `loss`; SAMPO draws come from the evaluation
/// stream keyed by the triplet index.
pub fn reward_stats(
    policy: &PolicyParams,
    reference: &PolicyParams,
    triplets: &[PreferenceTriplet],
    loss: &LossConfig,
) -> Result<RewardStats> {
    if triplets.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let rewards = triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<ImplicitReward> {
            let rw = token_log_ratios(
                &model::forward_logprobs(policy, &t.prompt, &t.chosen)?,
                &model::forward_logprobs(reference, &t.prompt, &t.chosen)?,
            )?;
            let rl = token_log_ratios(
                &model::forward_logprobs(policy, &t.prompt, &t.rejected)?,
                &model::forward_logprobs(reference, &t.prompt, &t.rejected)?,
            )?;
            let mut rng = RngStream::new(Domain::Eval, loss.seed, 0, i as u64);
            Ok(implicit_reward(loss.variant, &rw, &rl, loss.beta, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|r| r.delta).sum::<f64>() / n;
    let var = if rewards.len() > 1 {
        rewards.iter().map(|r| (r.delta - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RewardStats {
        n: rewards.len(),
        delta_mean: mean,
        delta_se: (var / n).sqrt(),
        chosen_term_mean: rewards.iter().map(|r| r.chosen_term).sum::<f64>() / n,
        rejected_term_mean: rewards.iter().map(|r| r.rejected_term).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone)]
struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(config: &TrainConfig, n: usize) -> Self {
        Self {
            kind: config.optimizer,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn adam(n: usize) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`.
    fn apply(&mut self, params: &mut PolicyParams, grad: &ParamGrad, lr: f64) {
        let p = params.values_mut();
        let g = grad.values();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in p.iter_mut().zip(g) {
                    *p -= lr * (g + self.weight_decay * *p);
                }
            }
            OptimizerKind::Adamw => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..p.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                    p[i] -= lr * (update + self.weight_decay * p[i]);
                }
            }
        }
    }
}

/// Token-level maximum likelihood on every response (both sides, each
/// followed by the stop token), trained with Adam for `sft_epochs` at
/// `sft_lr`. Returns the fitted params and the mean per-token NLL of each
/// epoch.
pub fn fit_sft(
    config: &TrainConfig,
    corpus: &[PreferenceTriplet],
    policy: &PolicyParams,
) -> Result<(PolicyParams, Vec<f64>)> {
    config.validate()?;
    check_corpus(corpus, policy)?;
    let stop = config.stop_id_for(policy.vocab_size());
    let seqs: Vec<(TokenSeq, TokenSeq)> = corpus
        .iter()
        .flat_map(|t| [(&t.prompt, &t.chosen), (&t.prompt, &t.rejected)])
        .map(|(p, r)| {
            let mut ids = r.ids().to_vec();
            ids.push(stop);
            Ok((p.clone(), TokenSeq::new(ids)?))
        })
        .collect::<Result<_>>()?;
    let mut params = policy.clone();
    let mut opt = Optimizer::adam(params.param_count());
    let batch = config.batch_size * config.grad_accum;
    let pool = thread_pool(config.threads);
    let mut history = Vec::with_capacity(config.sft_epochs);
    for epoch in 0..config.sft_epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        RngStream::new(Domain::Shuffle, config.init_seed, epoch as u64, u64::MAX).shuffle(&mut order);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let outs = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| -> Result<(ParamGrad, f64)> {
                        let (p, r) = &seqs[i];
                        let lp = model::forward_logprobs(&params, p, r)?;
                        let g = model::backward(&params, p, r, &vec![-1.0; r.len()])?;
                        Ok((g, -lp.iter().sum::<f64>()))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let count: usize = chunk.iter().map(|&i| seqs[i].1.len()).sum();
            let mut grad = ParamGrad::zeros_like(&params);
            for (g, l) in &outs {
                grad.add_assign(g);
                nll += l;
            }
            tokens += count;
            grad.scale(1.0 / count as f64);
            opt.apply(&mut params, &grad, config.sft_lr);
        }
        let mean = nll / tokens as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(TrainError::NonFinite(Diagnostic {
                step: 0,
                epoch,
                example: None,
                what: "warm-up produced a non-finite loss".into(),
                loss: mean,
                delta: f64::NAN,
            }));
        }
        history.push(mean);
    }
    Ok((params, history))
}

/// A rayon pool with `threads` workers (0 = one per core).
pub fn thread_pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("building a rayon pool")
}

fn check_corpus(corpus: &[PreferenceTriplet], policy: &PolicyParams) -> Result<()> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for (i, t) in corpus.iter().enumerate() {
        t.check_vocab(policy.vocab_size())
            .map_err(|source| TrainError::VocabMismatch { example: i, source })?;
    }
    Ok(())
}

type RefCache = Vec<(Vec<f64>, Vec<f64>)>;

fn reference_cache(reference: &PolicyParams, corpus: &[PreferenceTriplet]) -> Result<RefCache> {
    corpus
        .par_iter()
        .map(|t| {
            Ok((
                model::forward_logprobs(reference, &t.prompt, &t.chosen)?,
                model::forward_logprobs(reference, &t.prompt, &t.rejected)?,
            ))
        })
        .collect()
}

struct ExampleOut {
    grad: ParamGrad,
    loss: f64,
    reward: ImplicitReward,
    tm: usize,
}

/// Mutable state of a preference run.
pub struct TrainState<'a> {
    config: &'a TrainConfig,
    corpus: &'a [PreferenceTriplet],
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    ref_cache: RefCache,
    optimizer: Optimizer,
    pub step: usize,
    pub refreshes: usize,
}

impl<'a> TrainState<'a> {
    /// Freezes a copy of `policy` as the reference.
    pub fn new(config: &'a TrainConfig, corpus: &'a [PreferenceTriplet], policy: PolicyParams) -> Result<Self> {
        config.validate()?;
        check_corpus(corpus, &policy)?;
        let reference = policy.clone();
        let ref_cache = reference_cache(&reference, corpus)?;
        let optimizer = Optimizer::new(config, policy.param_count());
        Ok(Self {
            config,
            corpus,
            policy,
            reference,
            ref_cache,
            optimizer,
            step: 0,
            refreshes: 0,
        })
    }

    /// Replaces the reference with a copy of the current policy.
    pub fn refresh_reference(&mut self) -> Result<()> {
        self.reference = self.policy.clone();
        self.ref_cache = reference_cache(&self.reference, self.corpus)?;
        self.refreshes += 1;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.config.batch_size * self.config.grad_accum)
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.config.warmup_ratio * self.total_steps() as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.config.learning_rate
        } else {
            self.config.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }

    fn example(&self, index: usize, epoch: usize) -> Result<ExampleOut> {
        let t = &self.corpus[index];
        let loss_cfg = &self.config.loss;
        let (ref_w, ref_l) = &self.ref_cache[index];
        let lp_w = model::forward_logprobs(&self.policy, &t.prompt, &t.chosen)?;
        let lp_l = model::forward_logprobs(&self.policy, &t.prompt, &t.rejected)?;
        if lp_w.iter().chain(&lp_l).any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(Diagnostic {
                step: self.step,
                epoch,
                example: Some(index),
                what: "non-finite policy log-probability".into(),
                loss: f64::NAN,
                delta: f64::NAN,
            }));
        }
        let rw = token_log_ratios(&lp_w, ref_w)?;
        let rl = token_log_ratios(&lp_l, ref_l)?;
        let mut rng = rng_for(loss_cfg.seed, epoch as u64, index as u64);
        let reward = implicit_reward(loss_cfg.variant, &rw, &rl, loss_cfg.beta, &mut rng)?;
        let (tw, tl) = t.lens();
        let mut g = loss_grad_wrt_logprobs(&reward, (tw, tl))?;
        let mut loss = preference_loss(reward.delta);
        if loss_cfg.sft_weight > 0.0 {
            loss = kernels::hybrid_loss(loss, kernels::sft_nll(&lp_w)?, loss_cfg.sft_weight);
            for (a, b) in g.chosen.iter_mut().zip(kernels::sft_nll_grad(tw, loss_cfg.sft_weight)) {
                *a += b;
            }
        }
        let mut grad = model::backward(&self.policy, &t.prompt, &t.chosen, &g.chosen)?;
        model::accumulate_backward(&self.policy, &t.prompt, &t.rejected, &g.rejected, &mut grad)?;
        Ok(ExampleOut {
            grad,
            loss,
            reward,
            tm: tw.min(tl),
        })
    }

    /// One optimizer step over `indices` (corpus positions). Returns the
    /// batch statistics measured before the update.
    pub fn step_on(&mut self, indices: &[usize], epoch: usize) -> Result<StepRecord> {
        // collect every result first so the reported error is the first in
        // batch order, whatever the thread count
        let outs: Vec<Result<ExampleOut>> = indices.par_iter().map(|&i| self.example(i, epoch)).collect();
        let outs: Vec<ExampleOut> = outs.into_iter().collect::<Result<_>>()?;
        let n = outs.len() as f64;
        let mut grad = ParamGrad::zeros_like(&self.policy);
        let mut rec = StepRecord {
            step: self.step,
            epoch,
            loss: 0.0,
            delta_mean: 0.0,
            chosen_term: 0.0,
            rejected_term: 0.0,
            sigma_neg_delta: 0.0,
            tm_mean: 0.0,
            grad_norm: 0.0,
        };
        for (o, &i) in outs.iter().zip(indices) {
            if !o.loss.is_finite() || !o.reward.delta.is_finite() || !o.grad.values().iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite(Diagnostic {
                    step: self.step,
                    epoch,
                    example: Some(i),
                    what: "non-finite loss, reward or gradient".into(),
                    loss: o.loss,
                    delta: o.reward.delta,
                }));
            }
            grad.add_assign(&o.grad);
            rec.loss += o.loss;
            rec.delta_mean += o.reward.delta;
            rec.chosen_term += o.reward.chosen_term;
            rec.rejected_term += o.reward.rejected_term;
            rec.sigma_neg_delta += sigmoid(-o.reward.delta);
            rec.tm_mean += o.tm as f64;
        }
        grad.scale(1.0 / n);
        rec.loss /= n;
        rec.delta_mean /= n;
        rec.chosen_term /= n;
        rec.rejected_term /= n;
        rec.sigma_neg_delta /= n;
        rec.tm_mean /= n;
        rec.grad_norm = grad.l2_norm();

        let lr = self.lr_at(self.step);
        self.optimizer.apply(&mut self.policy, &grad, lr);
        if !self.policy.is_finite() {
            return Err(TrainError::NonFinite(Diagnostic {
                step: self.step,
                epoch,
                example: None,
                what: "update produced non-finite parameters".into(),
                loss: rec.loss,
                delta: rec.delta_mean,
            }));
        }
        self.step += 1;
        Ok(rec)
    }
}

/// Trains without evaluation; see [`train_with`].
pub fn train(
    config: &TrainConfig,
    corpus: &[PreferenceTriplet],
    policy: &PolicyParams,
) -> Result<(PolicyParams, RunMetrics)> {
    let mut metrics = RunMetrics::default();
    let (params, refreshes) = train_with(config, corpus, policy, None, &mut metrics)?;
    metrics.refresh_steps = refreshes;
    Ok((params, metrics))
}

/// Full run. Every record is passed to `sink` as soon as it exists; the
/// returned vector lists the steps after which the reference was refreshed.
///
/// Examples are reshuffled every epoch from `(seed, epoch)`. With an
/// evaluation setup, the policy is evaluated before the first step, every
/// `eval_every` steps and after the last step.
pub fn train_with(
    config: &TrainConfig,
    corpus: &[PreferenceTriplet],
    policy: &PolicyParams,
    eval: Option<&EvalSetup<'_>>,
    sink: &mut (dyn MetricsSink + Send),
) -> Result<(PolicyParams, Vec<usize>)> {
    let pool = thread_pool(config.threads);
    pool.install(|| {
        let mut state = TrainState::new(config, corpus, policy.clone())?;
        let stop = config.stop_id_for(policy.vocab_size());
        let do_eval = |state: &TrainState, sink: &mut (dyn MetricsSink + Send)| -> Result<()> {
            if let Some(e) = eval {
                let r = evaluate(&state.policy, e.baseline, e.prompts, e.judge, config.max_decode_len, stop)?;
                sink.on_eval(&EvalRecord {
                    step: state.step,
                    win_rate: r.win_rate,
                    policy_len: r.policy_len,
                    ref_len: r.ref_len,
                })?;
            }
            Ok(())
        };
        do_eval(&state, sink)?;
        let eff = config.batch_size * config.grad_accum;
        let mut refreshes = Vec::new();
        let mut last_eval = 0;
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            RngStream::new(Domain::Shuffle, config.loss.seed, epoch as u64, 0).shuffle(&mut order);
            let chunks: Vec<&[usize]> = order.chunks(eff).collect();
            let last_chunk = chunks.len() - 1;
            for (c, chunk) in chunks.into_iter().enumerate() {
                let rec = state.step_on(chunk, epoch)?;
                sink.on_step(&rec)?;
                let refresh = match config.loss.iterative_refresh_every {
                    RefreshCadence::Frozen => false,
                    RefreshCadence::Steps(k) => k > 0 && state.step % k == 0,
                    RefreshCadence::Epoch => c == last_chunk,
                };
                if refresh {
                    state.refresh_reference()?;
                    refreshes.push(rec.step);
                }
                if config.eval_every > 0 && state.step % config.eval_every == 0 {
                    do_eval(&state, sink)?;
                    last_eval = state.step;
                }
            }
        }
        if last_eval != state.step {
            do_eval(&state, sink)?;
        }
        Ok((state.policy, refreshes))
    })
}
