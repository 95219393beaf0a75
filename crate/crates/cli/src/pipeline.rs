//! Shared steps of a training run: world reconstruction, warm-up, held-out
//! split, preference training and held-out statistics.

use crate::config::RunConfigFile;
use sampo_core::datagen::{generate_split, QualityOracle};
use sampo_core::trainer::{
    fit_sft, reward_stats, thread_pool, train_with, EvalRecord, EvalSetup, MetricsSink, RewardStats, StepRecord,
};
use sampo_core::{
    CorpusSpec, DatagenError, ModelShape, PolicyParams, PreferenceTriplet, RunMetrics, TokenSeq,
    TrainConfig, TrainError,
};
use serde::Serialize;

/// Example streams of the held-out split; the corpus itself uses split 0.
pub const TEST_SPLIT: u64 = 1;

#[derive(Debug)]
pub enum PipelineError {
    Config(String),
    Train(TrainError),
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Config(m) => f.write_str(m),
            PipelineError::Train(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Train(e) => e.source(),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        PipelineError::Train(e)
    }
}

/// Everything a set of runs on one corpus can share.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub oracle: QualityOracle,
    /// Freshly initialized params before the warm-up.
    pub init: PolicyParams,
    /// Warm-up output: the starting policy, the frozen reference and the
    /// evaluation baseline of every run.
    pub reference: PolicyParams,
    pub sft_nll: Vec<f64>,
    pub test: Vec<PreferenceTriplet>,
    pub test_prompts: Vec<TokenSeq>,
}

fn corpus_error(e: DatagenError) -> PipelineError {
    PipelineError::Config(format!("corpus section: {e}"))
}

/// Rebuilds the world described by `cfg.corpus`, checks the corpus against
/// it, fits the warm-up policy and draws the held-out split.
pub fn prepare(cfg: &RunConfigFile, corpus: &[PreferenceTriplet]) -> Result<Prepared, PipelineError> {
    let train = cfg.train_config();
    train.validate()?;
    let oracle = QualityOracle::from_spec(&cfg.corpus).map_err(corpus_error)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus.into());
    }
    let shape = ModelShape::new(cfg.corpus.vocab_size, train.order, train.embed_dim)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let init = PolicyParams::init(shape, train.init_seed).map_err(|e| PipelineError::Config(e.to_string()))?;
    let pool = thread_pool(train.threads);
    let (reference, sft_nll) = pool.install(|| fit_sft(&train, corpus, &init))?;
    let test = if train.test_size > 0 {
        let spec = CorpusSpec {
            size: train.test_size,
            length_bias: train.test_length_bias,
            ..cfg.corpus.clone()
        };
        pool.install(|| generate_split(&spec, &oracle, TEST_SPLIT)).map_err(corpus_error)?
    } else {
        Vec::new()
    };
    let test_prompts = test.iter().map(|t| t.prompt.clone()).collect();
    Ok(Prepared {
        oracle,
        init,
        reference,
        sft_nll,
        test,
        test_prompts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    #[serde(skip)]
    pub policy: PolicyParams,
    #[serde(skip)]
    pub metrics: RunMetrics,
    pub total_steps: usize,
    pub refresh_steps: Vec<usize>,
    pub final_eval: Option<EvalRecord>,
    pub heldout: Option<RewardStats>,
}

/// Forwards every record to two sinks.
struct Tee<'a> {
    first: &'a mut RunMetrics,
    second: &'a mut (dyn MetricsSink + Send),
}

impl MetricsSink for Tee<'_> {
    fn on_step(&mut self, r: &StepRecord) -> sampo_core::trainer::Result<()> {
        self.first.on_step(r)?;
        self.second.on_step(r)
    }
    fn on_eval(&mut self, r: &EvalRecord) -> sampo_core::trainer::Result<()> {
        self.first.on_eval(r)?;
        self.second.on_eval(r)
    }
}

/// Trains from the prepared reference and evaluates on the held-out split.
pub fn run(
    train: &TrainConfig,
    corpus: &[PreferenceTriplet],
    prepared: &Prepared,
    sink: &mut (dyn MetricsSink + Send),
) -> Result<RunOutcome, PipelineError> {
    let mut metrics = RunMetrics::default();
    let setup = EvalSetup {
        prompts: &prepared.test_prompts,
        baseline: &prepared.reference,
        judge: &prepared.oracle,
    };
    let eval = (!prepared.test_prompts.is_empty()).then_some(&setup);
    let (policy, refresh_steps) = {
        let mut tee = Tee {
            first: &mut metrics,
            second: sink,
        };
        train_with(train, corpus, &prepared.reference, eval, &mut tee)?
    };
    let heldout = if prepared.test.is_empty() {
        None
    } else {
        let pool = thread_pool(train.threads);
        Some(pool.install(|| reward_stats(&policy, &prepared.reference, &prepared.test, &train.loss))?)
    };
    metrics.refresh_steps = refresh_steps.clone();
    Ok(RunOutcome {
        total_steps: metrics.steps.len(),
        final_eval: metrics.evals.last().cloned(),
        policy,
        metrics,
        refresh_steps,
        heldout,
    })
}
