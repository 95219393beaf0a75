//! Commands behind the `sampo` binary.
//!
//! Every command returns `Ok(())` or a [`CmdError`] carrying the process
//! exit code. Output files are written to a temporary file in the target
//! directory and renamed into place, so a failed command leaves no partial
//! files behind.

pub mod config;
pub mod pipeline;
pub mod report;

use anyhow::{anyhow, Context};
use config::RunConfigFile;
use pipeline::PipelineError;
use sampo_core::datagen::{self, DatagenError};
use sampo_core::gradcheck::{self, GradcheckConfig, Instance};
use sampo_core::model;
use sampo_core::trainer::{CsvSink, TrainError};
use sampo_core::{PolicyParams, Variant};
use serde::Serialize;
use std::fmt;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use tempfile::NamedTempFile;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_CORPUS: u8 = 4;
pub const EXIT_NON_FINITE: u8 = 5;

#[derive(Debug)]
pub struct CmdError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CmdError {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult = Result<(), CmdError>;

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, CmdError>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, CmdError> {
        self.map_err(|e| CmdError::new(code, e))
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn load_config(path: &Path, g: &GlobalOpts) -> Result<RunConfigFile, CmdError> {
    let mut cfg = RunConfigFile::load(path).or_exit(EXIT_CONFIG)?;
    if let Some(t) = g.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn out_dir_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn temp_beside(path: &Path) -> Result<NamedTempFile, CmdError> {
    NamedTempFile::new_in(out_dir_of(path))
        .with_context(|| format!("creating a temporary file next to {}", path.display()))
        .or_exit(EXIT_FAILURE)
}

fn persist(tmp: NamedTempFile, path: &Path) -> CmdResult {
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))
        .or_exit(EXIT_FAILURE)?;
    Ok(())
}

/// Writes `path` atomically with the bytes produced by `fill`.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut NamedTempFile) -> anyhow::Result<()>) -> CmdResult {
    let mut tmp = temp_beside(path)?;
    fill(&mut tmp)
        .and_then(|()| Ok(tmp.flush()?))
        .with_context(|| format!("writing {}", path.display()))
        .or_exit(EXIT_FAILURE)?;
    persist(tmp, path)
}

fn read_corpus(path: &Path) -> Result<Vec<sampo_core::PreferenceTriplet>, CmdError> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening corpus {}", path.display()))
        .or_exit(EXIT_CORPUS)?;
    datagen::read_jsonl(BufReader::new(file))
        .with_context(|| format!("reading corpus {}", path.display()))
        .or_exit(EXIT_CORPUS)
}

/// `gen`: writes the corpus described by the config's `[corpus]` table as
/// JSON lines and prints its length audit.
pub fn cmd_gen(config: &Path, out: &Path, g: &GlobalOpts, stdout: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(config, g)?;
    if let Some(s) = g.seed {
        cfg.corpus.seed = s;
    }
    let (corpus, _) = datagen::generate_corpus(&cfg.corpus).map_err(|e| match e {
        DatagenError::Infeasible(_) | DatagenError::InvalidSpec(_) => CmdError::new(EXIT_INFEASIBLE, e),
        other => CmdError::new(EXIT_FAILURE, other),
    })?;
    write_atomic(out, |f| {
        let mut w = std::io::BufWriter::new(f);
        datagen::write_jsonl(&corpus, &mut w)?;
        w.flush()?;
        Ok(())
    })?;
    let report = datagen::audit(&corpus, cfg.loss.beta, 1.0).or_exit(EXIT_FAILURE)?;
    writeln!(
        stdout,
        "wrote {} triplets to {}\nfraction chosen longer: {}\nT_w mean {:.3} sd {:.3}, T_l mean {:.3} sd {:.3}, T_w-T_l mean {:.3} sd {:.3}",
        corpus.len(),
        out.display(),
        report.frac_chosen_longer,
        report.tw.mean,
        report.tw.sd,
        report.tl.mean,
        report.tl.sd,
        report.diff.mean,
        report.diff.sd,
    )
    .or_exit(EXIT_FAILURE)
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    variant: Variant,
    beta: f64,
    loss_seed: u64,
    sft_weight: f64,
    sft_nll: &'a [f64],
    #[serde(flatten)]
    outcome: &'a pipeline::RunOutcome,
}

fn pipeline_exit(e: PipelineError) -> CmdError {
    let code = match &e {
        PipelineError::Config(_) | PipelineError::Train(TrainError::Config(_)) => EXIT_CONFIG,
        PipelineError::Train(TrainError::NonFinite(_)) => EXIT_NON_FINITE,
        PipelineError::Train(
            TrainError::VocabMismatch { .. } | TrainError::EmptyCorpus | TrainError::Type(_),
        ) => EXIT_CORPUS,
        PipelineError::Train(_) => EXIT_FAILURE,
    };
    CmdError::new(code, e)
}

/// Paths written by `train` inside its output directory.
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub eval: PathBuf,
    pub init_ckpt: PathBuf,
    pub final_ckpt: PathBuf,
    pub summary: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            eval: dir.join("eval.csv"),
            init_ckpt: dir.join("init.ckpt"),
            final_ckpt: dir.join("final.ckpt"),
            summary: dir.join("summary.json"),
        }
    }
}

fn checkpoint_bytes(params: &PolicyParams) -> Vec<u8> {
    let mut buf = Vec::new();
    model::write_checkpoint(params, &mut buf).expect("writing to memory");
    buf
}

/// `train`: warm-up, preference training and evaluation. Writes
/// `metrics.csv`, `eval.csv`, `init.ckpt` (the warm-up policy every run
/// starts from), `final.ckpt` and `summary.json` into `out_dir`.
pub fn cmd_train(
    config: &Path,
    corpus_path: &Path,
    out_dir: &Path,
    variant: Option<Variant>,
    g: &GlobalOpts,
    stdout: &mut dyn Write,
) -> CmdResult {
    let mut cfg = load_config(config, g)?;
    if let Some(s) = g.seed {
        cfg.loss.seed = s;
    }
    if let Some(v) = variant {
        cfg.loss.variant = v;
    }
    let corpus = read_corpus(corpus_path)?;
    if let Some((i, t)) = corpus
        .iter()
        .enumerate()
        .find(|(_, t)| t.check_vocab(cfg.corpus.vocab_size).is_err())
    {
        let e = t.check_vocab(cfg.corpus.vocab_size).unwrap_err();
        return Err(CmdError::new(
            EXIT_CORPUS,
            anyhow!("corpus example {i} does not fit vocab_size {}: {e}", cfg.corpus.vocab_size),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .or_exit(EXIT_FAILURE)?;
    let outputs = TrainOutputs::in_dir(out_dir);

    let prepared = pipeline::prepare(&cfg, &corpus).map_err(pipeline_exit)?;
    let train = cfg.train_config();
    let mut sink = CsvSink::new(temp_beside(&outputs.metrics)?, temp_beside(&outputs.eval)?)
        .or_exit(EXIT_FAILURE)?;
    let outcome = pipeline::run(&train, &corpus, &prepared, &mut sink).map_err(pipeline_exit)?;
    let (metrics_tmp, eval_tmp) = sink.finish().or_exit(EXIT_FAILURE)?;

    let summary = TrainSummary {
        variant: train.loss.variant,
        beta: train.loss.beta,
        loss_seed: train.loss.seed,
        sft_weight: train.loss.sft_weight,
        sft_nll: &prepared.sft_nll,
        outcome: &outcome,
    };
    let summary_json = serde_json::to_string_pretty(&summary).or_exit(EXIT_FAILURE)?;
    persist(metrics_tmp, &outputs.metrics)?;
    persist(eval_tmp, &outputs.eval)?;
    write_atomic(&outputs.init_ckpt, |f| Ok(f.write_all(&checkpoint_bytes(&prepared.reference))?))?;
    write_atomic(&outputs.final_ckpt, |f| Ok(f.write_all(&checkpoint_bytes(&outcome.policy))?))?;
    write_atomic(&outputs.summary, |f| Ok(writeln!(f, "{summary_json}")?))?;

    let mut msg = format!(
        "{} run: {} steps, results in {}",
        train.loss.variant,
        outcome.total_steps,
        out_dir.display()
    );
    if let Some(e) = &outcome.final_eval {
        msg += &format!(
            "\nfinal win rate {:.4}, mean decode length {:.3} (reference {:.3})",
            e.win_rate, e.policy_len, e.ref_len
        );
    }
    if let Some(h) = &outcome.heldout {
        msg += &format!("\nheld-out delta {:.6} +/- {:.6}", h.delta_mean, h.delta_se);
    }
    writeln!(stdout, "{msg}").or_exit(EXIT_FAILURE)
}

/// `gradcheck` with the production gradients.
pub fn cmd_gradcheck(trials: usize, g: &GlobalOpts, stdout: &mut dyn Write) -> CmdResult {
    cmd_gradcheck_with(trials, g, &gradcheck::analytic_gradient, stdout)
}

/// `gradcheck` against a substitute analytic gradient.
pub fn cmd_gradcheck_with(
    trials: usize,
    g: &GlobalOpts,
    analytic: &(dyn Fn(&Instance) -> Vec<f64> + Sync),
    stdout: &mut dyn Write,
) -> CmdResult {
    if trials == 0 {
        return Err(CmdError::new(EXIT_CONFIG, anyhow!("trials must be at least 1")));
    }
    let config = GradcheckConfig::new(trials, g.seed.unwrap_or(sampo_core::types::DEFAULT_SEED));
    let run = || gradcheck::run_gradcheck_with(&config, analytic);
    let report = match g.threads {
        Some(t) => sampo_core::trainer::thread_pool(t).install(run),
        None => run(),
    };
    let mut text = String::new();
    for c in &report.cases {
        let status = if c.failures.is_empty() { "ok" } else { "FAIL" };
        text += &format!(
            "{:<7} trials {:>5}  max relative error {:.3e}  {status}\n",
            c.case.name(),
            c.trials,
            c.max_rel_error
        );
        if !c.failures.is_empty() {
            text += &format!(
                "        {} failing trials; worst instance key: seed {} case {} trial {}\n",
                c.failures.len(),
                config.seed,
                c.case.name(),
                c.worst_trial
            );
        }
    }
    write!(stdout, "{text}").or_exit(EXIT_FAILURE)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CmdError::new(
            EXIT_FAILURE,
            anyhow!("gradient check failed (tolerance {:e})", config.tolerance),
        ))
    }
}

/// `audit`: length statistics of a corpus file as JSON, printed and
/// optionally written to `out`.
pub fn cmd_audit(
    corpus_path: &Path,
    beta: f64,
    mean_ratio: f64,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> CmdResult {
    let corpus = read_corpus(corpus_path)?;
    let report = datagen::audit(&corpus, beta, mean_ratio).or_exit(EXIT_CORPUS)?;
    let json = serde_json::to_string_pretty(&report).or_exit(EXIT_FAILURE)?;
    if let Some(path) = out {
        write_atomic(path, |f| Ok(writeln!(f, "{json}")?))?;
    }
    writeln!(stdout, "{json}").or_exit(EXIT_FAILURE)
}

/// Default summary path: `<out stem>_summary.csv` next to `out`.
pub fn default_summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out_dir_of(out).join(format!("{stem}_summary.csv"))
}

/// `report`: merges metric CSVs into `run_label,step,series,value` rows and
/// a per-run summary table.
pub fn cmd_report(
    inputs: &[String],
    out: &Path,
    summary: Option<&Path>,
    stdout: &mut dyn Write,
) -> CmdResult {
    if inputs.is_empty() {
        return Err(CmdError::new(EXIT_CONFIG, anyhow!("report needs at least one input")));
    }
    let tables = inputs
        .iter()
        .map(|a| report::load_table(a))
        .collect::<anyhow::Result<Vec<_>>>()
        .or_exit(EXIT_CONFIG)?;
    let rows = report::tidy(&tables);
    let sums = report::summarize(&tables);
    let summary_path = summary.map(Path::to_path_buf).unwrap_or_else(|| default_summary_path(out));
    write_atomic(out, |f| report::write_csv(&rows, f, &report::TIDY_COLUMNS))?;
    write_atomic(&summary_path, |f| report::write_csv(&sums, f, &report::SUMMARY_COLUMNS))?;
    let mut text = format!("{} tidy rows written to {}\n", rows.len(), out.display());
    for s in &sums {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        text += &format!(
            "{}: final delta {}, win rate {}, length {}\n",
            s.run_label,
            show(s.final_delta),
            show(s.final_win_rate),
            show(s.final_policy_len)
        );
    }
    write!(stdout, "{text}").or_exit(EXIT_FAILURE)
}
