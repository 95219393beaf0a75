//! Finite-difference verification of the end-to-end loss gradients.
//!
//! Each trial builds a random tiny instance (policy, reference, one
//! triplet, `β`) and compares the analytic parameter gradient of the loss
//! against central differences. SAMPO and TOPK selections are drawn once at
//! the unperturbed parameters and held fixed, so the loss is smooth in the
//! parameters being perturbed.

use crate::kernels::{self, delta_on_subsets, loss_grad_wrt_logprobs, preference_loss, token_log_ratios};
use crate::model::{self, ModelShape, PolicyParams};
use crate::rng::{Domain, RngStream};
use crate::types::{ImplicitReward, PreferenceTriplet, TokenSeq, Variant};
use serde::Serialize;
use std::collections::BTreeMap;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckCase {
    Dpo,
    Sampo,
    Sanorm,
    Topk,
    /// DPO plus a weighted chosen-NLL term.
    Hybrid,
}

impl CheckCase {
    pub const ALL: [CheckCase; 5] = [
        CheckCase::Dpo,
        CheckCase::Sampo,
        CheckCase::Sanorm,
        CheckCase::Topk,
        CheckCase::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckCase::Dpo => "DPO",
            CheckCase::Sampo => "SAMPO",
            CheckCase::Sanorm => "SANORM",
            CheckCase::Topk => "TOPK",
            CheckCase::Hybrid => "HYBRID",
        }
    }

    fn variant(self) -> Variant {
        match self {
            CheckCase::Dpo | CheckCase::Hybrid => Variant::Dpo,
            CheckCase::Sampo => Variant::Sampo,
            CheckCase::Sanorm => Variant::Sanorm,
            CheckCase::Topk => Variant::Topk,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// One random problem. The selections are fixed for SAMPO/TOPK.
#[derive(Debug, Clone)]
pub struct Instance {
    pub case: CheckCase,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub triplet: PreferenceTriplet,
    pub beta: f64,
    pub sft_weight: f64,
    pub idx_w: Option<Vec<usize>>,
    pub idx_l: Option<Vec<usize>>,
}

fn random_seq(rng: &mut RngStream, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab as u64) as u32).collect()
}

fn random_params(rng: &mut RngStream, shape: ModelShape) -> PolicyParams {
    let values = (0..shape.param_count()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    PolicyParams::from_values(shape, values).expect("finite values")
}

impl Instance {
    /// Deterministic in `(seed, case, trial)`.
    pub fn random(seed: u64, case: CheckCase, trial: u64) -> Self {
        let mut rng = RngStream::new(Domain::Gradcheck, seed, case.index(), trial);
        let vocab = rng.range_inclusive(3, 6);
        let shape = ModelShape::new(vocab, rng.range_inclusive(1, 2), rng.range_inclusive(2, 4))
            .expect("valid shape");
        let policy = random_params(&mut rng, shape);
        let reference = random_params(&mut rng, shape);
        let beta = rng.uniform(0.1, 2.0);
        let sft_weight = if case == CheckCase::Hybrid {
            rng.uniform(0.1, 2.0)
        } else {
            0.0
        };
        loop {
            let plen = rng.range_inclusive(1, 3);
            let prompt = random_seq(&mut rng, plen, vocab);
            let wlen = rng.range_inclusive(1, 6);
            let chosen = random_seq(&mut rng, wlen, vocab);
            let llen = rng.range_inclusive(1, 6);
            let rejected = random_seq(&mut rng, llen, vocab);
            if rejected == chosen {
                continue;
            }
            let triplet = PreferenceTriplet::new(
                TokenSeq::new(prompt).expect("non-empty"),
                TokenSeq::new(chosen).expect("non-empty"),
                TokenSeq::new(rejected).expect("non-empty"),
                None,
            )
            .expect("distinct responses");
            let mut inst = Self {
                case,
                policy: policy.clone(),
                reference: reference.clone(),
                triplet,
                beta,
                sft_weight,
                idx_w: None,
                idx_l: None,
            };
            if matches!(case, CheckCase::Sampo | CheckCase::Topk) {
                let (rw, rl) = inst.ratios(&inst.policy);
                let r = kernels::implicit_reward(case.variant(), &rw, &rl, beta, &mut rng)
                    .expect("valid instance");
                inst.idx_w = r.sampled_chosen_idx;
                inst.idx_l = r.sampled_rejected_idx;
            }
            if !inst.is_constant() {
                return inst;
            }
        }
    }

    /// True when the contributing chosen and rejected positions see the same
    /// (context, token) pairs with the same weights, so that the two terms
    /// cancel for every parameter value. The gradient is then exactly zero
    /// and a relative error means nothing. SANORM weighs each side by
    /// `1/T_side`, so there the pair proportions are compared.
    fn is_constant(&self) -> bool {
        if self.sft_weight > 0.0 {
            return false;
        }
        let order = self.policy.shape().order;
        let t = &self.triplet;
        let counts = |resp: &TokenSeq, idx: &Option<Vec<usize>>| {
            let seq: Vec<u32> = t.prompt.ids().iter().chain(resp.ids()).copied().collect();
            let start = t.prompt.len();
            let all: Vec<usize> = (0..resp.len()).collect();
            let mut out: BTreeMap<(Vec<Option<u32>>, u32), usize> = BTreeMap::new();
            for &i in idx.as_ref().unwrap_or(&all) {
                let pos = start + i;
                let ctx = (0..order).map(|j| pos.checked_sub(order - j).map(|k| seq[k])).collect();
                *out.entry((ctx, seq[pos])).or_default() += 1;
            }
            out
        };
        let (cw, cl) = (counts(&t.chosen, &self.idx_w), counts(&t.rejected, &self.idx_l));
        if self.case == CheckCase::Sanorm {
            let (tw, tl) = t.lens();
            cw.keys().eq(cl.keys()) && cw.iter().zip(&cl).all(|((_, a), (_, b))| a * tl == b * tw)
        } else {
            cw == cl
        }
    }

    fn ratios(&self, policy: &PolicyParams) -> (crate::TokenLogRatios, crate::TokenLogRatios) {
        let t = &self.triplet;
        let side = |resp: &TokenSeq| {
            token_log_ratios(
                &model::forward_logprobs(policy, &t.prompt, resp).expect("in vocab"),
                &model::forward_logprobs(&self.reference, &t.prompt, resp).expect("in vocab"),
            )
            .expect("finite ratios")
        };
        (side(&t.chosen), side(&t.rejected))
    }

    fn reward(&self, policy: &PolicyParams) -> ImplicitReward {
        let (rw, rl) = self.ratios(policy);
        let v = self.case.variant();
        match (&self.idx_w, &self.idx_l) {
            (Some(iw), Some(il)) => delta_on_subsets(v, &rw, &rl, self.beta, iw, il),
            _ => kernels::implicit_reward(v, &rw, &rl, self.beta, &mut RngStream::new(Domain::Gradcheck, 0, 0, 0)),
        }
        .expect("valid instance")
    }

    /// Loss at `policy` with this instance's fixed selections.
    pub fn loss(&self, policy: &PolicyParams) -> f64 {
        let mut l = preference_loss(self.reward(policy).delta);
        if self.sft_weight > 0.0 {
            let t = &self.triplet;
            let lp = model::forward_logprobs(policy, &t.prompt, &t.chosen).expect("in vocab");
            l += self.sft_weight * kernels::sft_nll(&lp).expect("non-empty");
        }
        l
    }
}

/// The production analytic gradient: kernel gradient w.r.t. token
/// log-probs, then the model's backward pass.
pub fn analytic_gradient(inst: &Instance) -> Vec<f64> {
    let t = &inst.triplet;
    let reward = inst.reward(&inst.policy);
    let mut g = loss_grad_wrt_logprobs(&reward, t.lens()).expect("valid reward");
    if inst.sft_weight > 0.0 {
        for (a, b) in g.chosen.iter_mut().zip(kernels::sft_nll_grad(t.chosen.len(), inst.sft_weight)) {
            *a += b;
        }
    }
    let mut grad = model::backward(&inst.policy, &t.prompt, &t.chosen, &g.chosen).expect("shapes");
    model::accumulate_backward(&inst.policy, &t.prompt, &t.rejected, &g.rejected, &mut grad)
        .expect("shapes");
    grad.values().to_vec()
}

pub fn numeric_gradient(inst: &Instance, h: f64) -> Vec<f64> {
    let mut p = inst.policy.clone();
    (0..p.param_count())
        .map(|i| {
            let x = p.values()[i];
            p.values_mut()[i] = x + h;
            let up = inst.loss(&p);
            p.values_mut()[i] = x - h;
            let down = inst.loss(&p);
            p.values_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a tiny floor on the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradcheckConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: CheckCase,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Trial index of the largest error.
    pub worst_trial: u64,
    /// Trial indices above tolerance.
    pub failures: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.failures.is_empty())
    }
}

pub fn run_gradcheck(config: &GradcheckConfig) -> GradcheckReport {
    run_gradcheck_with(config, &analytic_gradient)
}

/// Same as [`run_gradcheck`] with a substitute analytic gradient.
pub fn run_gradcheck_with(
    config: &GradcheckConfig,
    analytic: &(dyn Fn(&Instance) -> Vec<f64> + Sync),
) -> GradcheckReport {
    use rayon::prelude::*;
    let cases = CheckCase::ALL
        .iter()
        .map(|&case| {
            let errors: Vec<f64> = (0..config.trials as u64)
                .into_par_iter()
                .map(|trial| {
                    let inst = Instance::random(config.seed, case, trial);
                    relative_error(&analytic(&inst), &numeric_gradient(&inst, config.step))
                })
                .collect();
            let (worst, max) = errors
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, &e)| if e > acc.1 || e.is_nan() { (i, e) } else { acc });
            CaseReport {
                case,
                trials: config.trials,
                max_rel_error: max,
                worst_trial: worst as u64,
                failures: errors
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| !(e <= config.tolerance))
                    .map(|(i, _)| i as u64)
                    .collect(),
            }
        })
        .collect();
    GradcheckReport {
        config: *config,
        cases,
    }
}
