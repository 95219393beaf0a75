//! Synthetic preference corpora with controllable length bias.
//!
//! The generator builds a small latent "world" over the content tokens
//! `0..V-1` (id `V-1` is reserved for the stop token and never appears in a
//! generated response):
//!
//! - a first-order base chain whose rows are either peaked (a handful of
//!   successors a short way ahead on a random ring of the content tokens) or
//!   flat (support over every content token);
//! - a score table `S[prev][tok] ~ N(0, 1)`.
//!
//! Chosen responses follow the base chain tilted by `+gap/2 · S`, rejected
//! responses the chain tilted by `-gap/2 · S`, so with `quality_gap = 0` the
//! two sides are identically distributed and only their lengths differ.
//! The same table judges responses later: a response scores the mean of
//! `S` over its transitions.

use crate::rng::{Domain, RngStream};
use crate::types::{PreferenceTriplet, TokenSeq, TripletMeta, TypeError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("infeasible corpus spec: {0}")]
    Infeasible(String),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

/// Relation between the chosen length `T_w` and the rejected length `T_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LengthBias {
    /// `T_w > T_l` for every triplet.
    Long,
    /// `T_w < T_l` for every triplet.
    Short,
    /// `T_w = T_l` for every triplet.
    #[default]
    Neutral,
    /// LONG with probability `mixed_long_prob`, otherwise SHORT.
    Mixed,
}

/// Inclusive length range, written `[min, max]` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

impl From<(usize, usize)> for LenRange {
    fn from((min, max): (usize, usize)) -> Self {
        Self { min, max }
    }
}

impl From<LenRange> for (usize, usize) {
    fn from(r: LenRange) -> Self {
        (r.min, r.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub size: usize,
    pub vocab_size: usize,
    pub prompt_len: LenRange,
    pub response_len: LenRange,
    pub length_bias: LengthBias,
    pub quality_gap: f64,
    pub seed: u64,
    /// Successor count of a peaked base-chain row.
    pub branching: usize,
    /// Peaked rows pick their successors among the next `window` ring
    /// positions.
    pub window: usize,
    /// Fraction of rows that are flat over all content tokens.
    pub flat_fraction: f64,
    /// Standard deviation of the logits of peaked rows.
    pub base_scale: f64,
    /// Standard deviation of the logits of flat rows.
    pub flat_scale: f64,
    pub mixed_long_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 1000,
            vocab_size: 50,
            prompt_len: LenRange::new(2, 4),
            response_len: LenRange::new(4, 12),
            length_bias: LengthBias::Neutral,
            quality_gap: 0.5,
            seed: 42,
            branching: 4,
            window: 6,
            flat_fraction: 0.15,
            base_scale: 1.0,
            flat_scale: 0.5,
            mixed_long_prob: 0.6,
        }
    }
}

impl CorpusSpec {
    pub fn stop_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    fn content_size(&self) -> usize {
        self.vocab_size - 1
    }

    /// Shape checks; infeasible length relations are reported by
    /// [`generate_corpus`] as [`DatagenError::Infeasible`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        for (name, r) in [("prompt_len", self.prompt_len), ("response_len", self.response_len)] {
            if r.min == 0 || r.min > r.max {
                return bad(format!("{name} must satisfy 1 <= min <= max, got [{}, {}]", r.min, r.max));
            }
        }
        if !(self.quality_gap >= 0.0 && self.quality_gap.is_finite()) {
            return bad(format!("quality_gap must be >= 0, got {}", self.quality_gap));
        }
        if self.branching == 0 || self.branching > self.window {
            return bad(format!(
                "need 1 <= branching <= window, got branching {} and window {}",
                self.branching, self.window
            ));
        }
        if self.window >= self.content_size() {
            return bad(format!(
                "window must be smaller than the {} content tokens, got {}",
                self.content_size(),
                self.window
            ));
        }
        for (name, p) in [("flat_fraction", self.flat_fraction), ("mixed_long_prob", self.mixed_long_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [("base_scale", self.base_scale), ("flat_scale", self.flat_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn check_feasible(&self) -> Result<()> {
        let r = self.response_len;
        if self.length_bias != LengthBias::Neutral && r.min == r.max {
            return Err(DatagenError::Infeasible(format!(
                "{:?} needs two distinct response lengths but response_len is [{}, {}]",
                self.length_bias, r.min, r.max
            )));
        }
        Ok(())
    }
}

/// Compares two responses to the same prompt.
pub trait Judge: Sync {
    /// `Greater` when `a` is better than `b`.
    fn compare(&self, prompt: &TokenSeq, a: &TokenSeq, b: &TokenSeq) -> Ordering;
}

/// The latent world: base chain, tilted chains and the score table.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityOracle {
    vocab_size: usize,
    /// `(V-1)²`, row-major by previous token.
    scores: Vec<f64>,
    base: Vec<f64>,
    good: Vec<f64>,
    bad: Vec<f64>,
    stationary: Vec<f64>,
}

impl QualityOracle {
    /// Builds the world of a spec; depends only on the vocabulary, the world
    /// parameters, the quality gap and the seed.
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.content_size();
        let mut rng = RngStream::new(Domain::World, spec.seed, 0, 0);
        let mut ring: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut ring);
        let mut pos = vec![0; c];
        for (i, &t) in ring.iter().enumerate() {
            pos[t] = i;
        }

        let mut logits = vec![f64::NEG_INFINITY; c * c];
        for prev in 0..c {
            let (support, scale): (Vec<usize>, f64) = if rng.bernoulli(spec.flat_fraction) {
                ((0..c).collect(), spec.flat_scale)
            } else {
                let mut ahead: Vec<usize> = (1..=spec.window).map(|k| ring[(pos[prev] + k) % c]).collect();
                rng.shuffle(&mut ahead);
                ahead.truncate(spec.branching);
                ahead.sort_unstable();
                (ahead, spec.base_scale)
            };
            for tok in support {
                logits[prev * c + tok] = scale * rng.normal();
            }
        }
        let scores: Vec<f64> = (0..c * c).map(|_| rng.normal()).collect();

        let half = spec.quality_gap / 2.0;
        let base = normalize_rows(c, |i| logits[i]);
        let good = normalize_rows(c, |i| logits[i] + half * scores[i]);
        let bad = normalize_rows(c, |i| logits[i] - half * scores[i]);
        let stationary = stationary(c, &base);
        Ok(Self {
            vocab_size: spec.vocab_size,
            scores,
            base,
            good,
            bad,
            stationary,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn stop_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    fn content_size(&self) -> usize {
        self.vocab_size - 1
    }

    /// `S[prev][tok]`.
    pub fn token_score(&self, prev: u32, tok: u32) -> f64 {
        self.scores[prev as usize * self.content_size() + tok as usize]
    }

    /// Mean transition score of `response` after `prompt`. The stop token and
    /// anything after it are ignored; an empty remainder scores `None`.
    pub fn score(&self, prompt: &TokenSeq, response: &TokenSeq) -> Option<f64> {
        let stop = self.stop_id();
        let body: Vec<u32> = response.ids().iter().copied().take_while(|&t| t != stop).collect();
        if body.is_empty() {
            return None;
        }
        let mut prev = *prompt.ids().last()?;
        if prev >= stop {
            return None;
        }
        let mut total = 0.0;
        for &tok in &body {
            if tok >= stop {
                return None;
            }
            total += self.token_score(prev, tok);
            prev = tok;
        }
        Some(total / body.len() as f64)
    }

    fn walk(&self, table: &[f64], mut prev: usize, len: usize, rng: &mut RngStream) -> Vec<u32> {
        let c = self.content_size();
        (0..len)
            .map(|_| {
                prev = rng.categorical(&table[prev * c..(prev + 1) * c]);
                prev as u32
            })
            .collect()
    }

    fn prompt(&self, len: usize, rng: &mut RngStream) -> Vec<u32> {
        let first = rng.categorical(&self.stationary);
        let mut p = vec![first as u32];
        p.extend(self.walk(&self.base, first, len - 1, rng));
        p
    }
}

impl Judge for QualityOracle {
    /// `None` (nothing to score) loses to any scored response.
    fn compare(&self, prompt: &TokenSeq, a: &TokenSeq, b: &TokenSeq) -> Ordering {
        match (self.score(prompt, a), self.score(prompt, b)) {
            (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
            (Some(_), None) => Ordering::Greater,
            (None, Some(_)) => Ordering::Less,
            (None, None) => Ordering::Equal,
        }
    }
}

fn normalize_rows(c: usize, logit: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for r in 0..c {
        let row = &mut out[r * c..(r + 1) * c];
        let max = (0..c).map(|j| logit(r * c + j)).fold(f64::NEG_INFINITY, f64::max);
        for (j, p) in row.iter_mut().enumerate() {
            *p = (logit(r * c + j) - max).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    out
}

fn stationary(c: usize, table: &[f64]) -> Vec<f64> {
    let mut pi = vec![1.0 / c as f64; c];
    for _ in 0..500 {
        let mut next = vec![0.0; c];
        for (i, &w) in pi.iter().enumerate() {
            for (j, n) in next.iter_mut().enumerate() {
                *n += w * table[i * c + j];
            }
        }
        // lazy step keeps periodic chains convergent
        for (p, n) in pi.iter_mut().zip(next) {
            *p = 0.5 * *p + 0.5 * n;
        }
    }
    pi
}

fn draw_lengths(spec: &CorpusSpec, rng: &mut RngStream) -> (usize, usize) {
    let r = spec.response_len;
    let distinct = |rng: &mut RngStream| {
        let a = rng.range_inclusive(r.min, r.max);
        let mut b = rng.range_inclusive(r.min, r.max - 1);
        if b >= a {
            b += 1;
        }
        (a.max(b), a.min(b))
    };
    match spec.length_bias {
        LengthBias::Neutral => {
            let t = rng.range_inclusive(r.min, r.max);
            (t, t)
        }
        LengthBias::Long => distinct(rng),
        LengthBias::Short => {
            let (hi, lo) = distinct(rng);
            (lo, hi)
        }
        LengthBias::Mixed => {
            let long = rng.bernoulli(spec.mixed_long_prob);
            let (hi, lo) = distinct(rng);
            if long {
                (hi, lo)
            } else {
                (lo, hi)
            }
        }
    }
}

const MAX_REDRAWS: usize = 1000;

fn generate_one(
    spec: &CorpusSpec,
    oracle: &QualityOracle,
    split: u64,
    index: usize,
) -> Result<PreferenceTriplet> {
    let mut rng = RngStream::new(Domain::Example, spec.seed, split, index as u64);
    let (tw, tl) = draw_lengths(spec, &mut rng);
    let plen = rng.range_inclusive(spec.prompt_len.min, spec.prompt_len.max);
    let prompt = oracle.prompt(plen, &mut rng);
    let last = *prompt.last().expect("prompt_len >= 1") as usize;
    let chosen = oracle.walk(&oracle.good, last, tw, &mut rng);
    let mut rejected = oracle.walk(&oracle.bad, last, tl, &mut rng);
    let mut redraws = 0;
    while rejected == chosen {
        redraws += 1;
        if redraws > MAX_REDRAWS {
            return Err(DatagenError::Infeasible(format!(
                "example {index}: could not draw distinct responses"
            )));
        }
        rejected = oracle.walk(&oracle.bad, last, tl, &mut rng);
    }
    let prompt = TokenSeq::new(prompt)?;
    let chosen = TokenSeq::new(chosen)?;
    let rejected = TokenSeq::new(rejected)?;
    let meta = TripletMeta {
        tw,
        tl,
        score_w: oracle.score(&prompt, &chosen).unwrap_or(0.0),
        score_l: oracle.score(&prompt, &rejected).unwrap_or(0.0),
    };
    Ok(PreferenceTriplet::new(prompt, chosen, rejected, Some(meta))?)
}

/// `size` triplets satisfying the spec's length relation, plus the oracle
/// that generated them. Example `i` depends only on `(seed, i)`, so the
/// output does not depend on the thread count.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<PreferenceTriplet>, QualityOracle)> {
    let oracle = QualityOracle::from_spec(spec)?;
    let corpus = generate_split(spec, &oracle, 0)?;
    Ok((corpus, oracle))
}

/// `spec.size` triplets from the world of `oracle`, drawn from the example
/// streams of `split`. Split 0 is the corpus of [`generate_corpus`]; other
/// splits give disjoint draws from the same world, e.g. a test set with a
/// different length bias.
pub fn generate_split(
    spec: &CorpusSpec,
    oracle: &QualityOracle,
    split: u64,
) -> Result<Vec<PreferenceTriplet>> {
    spec.validate()?;
    spec.check_feasible()?;
    if oracle.vocab_size != spec.vocab_size {
        return Err(DatagenError::InvalidSpec(format!(
            "oracle has {} tokens but the spec asks for {}",
            oracle.vocab_size, spec.vocab_size
        )));
    }
    (0..spec.size)
        .into_par_iter()
        .map(|i| generate_one(spec, oracle, split, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthSplit {
    /// `T_w > T_l`.
    pub long: Vec<PreferenceTriplet>,
    /// `T_w < T_l`.
    pub short: Vec<PreferenceTriplet>,
    pub ties: usize,
}

pub fn split_by_length(corpus: &[PreferenceTriplet]) -> LengthSplit {
    let mut split = LengthSplit {
        long: Vec::new(),
        short: Vec::new(),
        ties: 0,
    };
    for t in corpus {
        let (tw, tl) = t.lens();
        match tw.cmp(&tl) {
            Ordering::Greater => split.long.push(t.clone()),
            Ordering::Less => split.short.push(t.clone()),
            Ordering::Equal => split.ties += 1,
        }
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// `T_w - T_l`.
    pub diff: i64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAuditReport {
    pub n: usize,
    pub frac_chosen_longer: f64,
    pub tw: MeanSd,
    pub tl: MeanSd,
    pub diff: MeanSd,
    pub beta: f64,
    pub mean_ratio: f64,
    /// `β · (T_w - T_l) · r̄` for each triplet, in corpus order.
    pub bias_proxy: Vec<f64>,
    pub bias_proxy_mean: f64,
    /// One bin per observed `T_w - T_l`, ascending.
    pub histogram: Vec<HistogramBin>,
}

/// Length statistics and the predicted length-driven reward bias for a
/// caller-supplied mean token log-ratio `mean_ratio`.
pub fn audit(corpus: &[PreferenceTriplet], beta: f64, mean_ratio: f64) -> Result<LengthAuditReport> {
    if corpus.is_empty() {
        return Err(DatagenError::EmptyCorpus);
    }
    let lens: Vec<(f64, f64)> = corpus
        .iter()
        .map(|t| {
            let (w, l) = t.lens();
            (w as f64, l as f64)
        })
        .collect();
    let n = corpus.len();
    let longer = lens.iter().filter(|(w, l)| w > l).count();
    let bias_proxy: Vec<f64> = lens.iter().map(|(w, l)| beta * (w - l) * mean_ratio).collect();
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for t in corpus {
        let (w, l) = t.lens();
        *bins.entry(w as i64 - l as i64).or_default() += 1;
    }
    Ok(LengthAuditReport {
        n,
        frac_chosen_longer: longer as f64 / n as f64,
        tw: MeanSd::of(lens.iter().map(|p| p.0)),
        tl: MeanSd::of(lens.iter().map(|p| p.1)),
        diff: MeanSd::of(lens.iter().map(|p| p.0 - p.1)),
        beta,
        mean_ratio,
        bias_proxy_mean: bias_proxy.iter().sum::<f64>() / n as f64,
        bias_proxy,
        histogram: bins
            .into_iter()
            .map(|(diff, count)| HistogramBin { diff, count })
            .collect(),
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(corpus: &[PreferenceTriplet], mut out: W) -> Result<()> {
    for t in corpus {
        let line = serde_json::to_string(t).map_err(io::Error::from)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Blank lines are skipped; errors carry 1-based line numbers.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PreferenceTriplet>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}
