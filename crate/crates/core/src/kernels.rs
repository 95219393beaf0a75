//! Implicit-reward kernels, the preference loss, and gradients of the loss
//! with respect to the policy's per-token log-probabilities.
//!
//! Every reward variant is a difference of two `β`-scaled aggregates of
//! per-token log-ratios:
//!
//! | variant | chosen aggregate                        | rejected aggregate        |
//! |---------|-----------------------------------------|---------------------------|
//! | DPO     | `Σ rw`                                  | `Σ rl`                    |
//! | SAMPO   | `Σ rw` over `T_m` uniform positions     | same, drawn independently |
//! | SANORM  | `(T_w+T_l)/2 · mean(rw)`                | `(T_w+T_l)/2 · mean(rl)`  |
//! | TOPK    | `Σ` of the `T_m` largest `rw`           | `Σ` of the `T_m` largest `rl` |
//!
//! with `T_m = min(T_w, T_l)`. Selections are treated as constants when
//! differentiating: gradients only reach the positions that contributed.
//!
//! All sums are left folds in ascending index order starting from `+0.0`, so
//! a selection that covers every position reproduces the DPO sum bit for bit.

use crate::rng::RngStream;
use crate::types::{ImplicitReward, TokenLogRatios, TypeError, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("empty response")]
    EmptyResponse,
    #[error("length mismatch: policy has {policy} log-probs, reference has {reference}")]
    LengthMismatch { policy: usize, reference: usize },
    #[error("non-finite input at position {0}")]
    NonFinite(usize),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("cannot select {k} of {n} positions")]
    SubsetSize { n: usize, k: usize },
    #[error("inconsistent index lists: {0}")]
    InconsistentIndices(String),
}

impl From<TypeError> for KernelError {
    fn from(e: TypeError) -> Self {
        match e {
            TypeError::NonFinite(i) => KernelError::NonFinite(i),
            TypeError::EmptySequence => KernelError::EmptyResponse,
            other => KernelError::InconsistentIndices(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// `∂L/∂ log πθ(y_t|·)` for every chosen and rejected token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradWrtLogProbs {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

fn fold_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v)
}

fn fold_sum_at(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().fold(0.0, |acc, &i| acc + values[i])
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(KernelError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidBeta(beta))
    }
}

/// `log π(y|x) = Σ_t log π(y_t|y_<t, x)`.
pub fn seq_logprob(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(KernelError::EmptyResponse);
    }
    check_finite(token_logprobs)?;
    Ok(fold_sum(token_logprobs))
}

/// Element-wise `policy_lp - ref_lp`.
pub fn token_log_ratios(policy_lp: &[f64], ref_lp: &[f64]) -> Result<TokenLogRatios> {
    if policy_lp.len() != ref_lp.len() {
        return Err(KernelError::LengthMismatch {
            policy: policy_lp.len(),
            reference: ref_lp.len(),
        });
    }
    if policy_lp.is_empty() {
        return Err(KernelError::EmptyResponse);
    }
    check_finite(policy_lp)?;
    check_finite(ref_lp)?;
    let values = policy_lp.iter().zip(ref_lp).map(|(p, r)| p - r).collect();
    Ok(TokenLogRatios::new(values)?)
}

pub fn delta_dpo(rw: &TokenLogRatios, rl: &TokenLogRatios, beta: f64) -> Result<ImplicitReward> {
    check_beta(beta)?;
    Ok(ImplicitReward::from_terms(
        Variant::Dpo,
        beta,
        beta * fold_sum(rw.values()),
        beta * fold_sum(rl.values()),
        None,
        None,
    ))
}

/// `k` distinct indices from `[0, n)`, uniformly over all size-`k` subsets,
/// sorted ascending. Partial Fisher-Yates over the index array.
pub fn uniform_subsample(n: usize, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(KernelError::SubsetSize { n, k });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    if k < n {
        for i in 0..k {
            let j = i + rng.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
    }
    Ok(pool)
}

pub fn delta_sampo(
    rw: &TokenLogRatios,
    rl: &TokenLogRatios,
    beta: f64,
    rng: &mut RngStream,
) -> Result<ImplicitReward> {
    check_beta(beta)?;
    let tm = rw.len().min(rl.len());
    let idx_w = uniform_subsample(rw.len(), tm, rng)?;
    let idx_l = uniform_subsample(rl.len(), tm, rng)?;
    Ok(ImplicitReward::from_terms(
        Variant::Sampo,
        beta,
        beta * fold_sum_at(rw.values(), &idx_w),
        beta * fold_sum_at(rl.values(), &idx_l),
        Some(idx_w),
        Some(idx_l),
    ))
}

/// `(T_w + T_l) / 2`.
pub fn sanorm_scale(tw: usize, tl: usize) -> f64 {
    (tw + tl) as f64 / 2.0
}

pub fn delta_sanorm(rw: &TokenLogRatios, rl: &TokenLogRatios, beta: f64) -> Result<ImplicitReward> {
    check_beta(beta)?;
    let scale = sanorm_scale(rw.len(), rl.len());
    let mean_w = fold_sum(rw.values()) / rw.len() as f64;
    let mean_l = fold_sum(rl.values()) / rl.len() as f64;
    Ok(ImplicitReward::from_terms(
        Variant::Sanorm,
        beta,
        beta * scale * mean_w,
        beta * scale * mean_l,
        None,
        None,
    ))
}

/// Indices of the `k` largest values, ties to the lower index, sorted
/// ascending.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(KernelError::SubsetSize { n, k });
    }
    check_finite(values)?;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

pub fn delta_topk(rw: &TokenLogRatios, rl: &TokenLogRatios, beta: f64) -> Result<ImplicitReward> {
    check_beta(beta)?;
    let tm = rw.len().min(rl.len());
    let idx_w = topk_indices(rw.values(), tm)?;
    let idx_l = topk_indices(rl.values(), tm)?;
    Ok(ImplicitReward::from_terms(
        Variant::Topk,
        beta,
        beta * fold_sum_at(rw.values(), &idx_w),
        beta * fold_sum_at(rl.values(), &idx_l),
        Some(idx_w),
        Some(idx_l),
    ))
}

/// Dispatch on `variant`. The stream is only consumed by SAMPO.
pub fn implicit_reward(
    variant: Variant,
    rw: &TokenLogRatios,
    rl: &TokenLogRatios,
    beta: f64,
    rng: &mut RngStream,
) -> Result<ImplicitReward> {
    match variant {
        Variant::Dpo => delta_dpo(rw, rl, beta),
        Variant::Sampo => delta_sampo(rw, rl, beta, rng),
        Variant::Sanorm => delta_sanorm(rw, rl, beta),
        Variant::Topk => delta_topk(rw, rl, beta),
    }
}

/// Recompute a SAMPO/TOPK reward on fixed selections. Used to evaluate the
/// loss with the selection held constant (finite differences, enumeration).
pub fn delta_on_subsets(
    variant: Variant,
    rw: &TokenLogRatios,
    rl: &TokenLogRatios,
    beta: f64,
    idx_w: &[usize],
    idx_l: &[usize],
) -> Result<ImplicitReward> {
    check_beta(beta)?;
    check_indices(idx_w, rw.len(), "chosen")?;
    check_indices(idx_l, rl.len(), "rejected")?;
    Ok(ImplicitReward::from_terms(
        variant,
        beta,
        beta * fold_sum_at(rw.values(), idx_w),
        beta * fold_sum_at(rl.values(), idx_l),
        Some(idx_w.to_vec()),
        Some(idx_l.to_vec()),
    ))
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the response with reward `r_w` is
/// preferred over the one with reward `r_l`.
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// `-log σ(Δ)`.
pub fn preference_loss(delta: f64) -> f64 {
    softplus(-delta)
}

/// Mean negative log-likelihood of the chosen tokens.
pub fn sft_nll(chosen_logprobs: &[f64]) -> Result<f64> {
    Ok(-seq_logprob(chosen_logprobs)? / chosen_logprobs.len() as f64)
}

/// `∂(weight · sft_nll)/∂ log πθ(y_w^t|·)` for each chosen position.
pub fn sft_nll_grad(tw: usize, weight: f64) -> Vec<f64> {
    vec![-weight / tw as f64; tw]
}

pub fn hybrid_loss(pref_loss: f64, sft_nll: f64, weight: f64) -> f64 {
    pref_loss + weight * sft_nll
}

fn check_indices(idx: &[usize], len: usize, side: &str) -> Result<()> {
    if let Some(&last) = idx.last() {
        if last >= len {
            return Err(KernelError::InconsistentIndices(format!(
                "{side} index {last} out of range for length {len}"
            )));
        }
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KernelError::InconsistentIndices(format!(
            "{side} indices are not strictly increasing"
        )));
    }
    Ok(())
}

fn scatter(len: usize, idx: &[usize], value: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for &i in idx {
        out[i] = value;
    }
    out
}

/// Gradient of `preference_loss(Δ)` with respect to each policy token
/// log-probability, `lens = (T_w, T_l)`.
///
/// Contributing positions get `∓β·σ(−Δ)` (chosen negative, rejected
/// positive); for SANORM each position gets `β·σ(−Δ)·((T_w+T_l)/2)/T_side`.
pub fn loss_grad_wrt_logprobs(
    reward: &ImplicitReward,
    lens: (usize, usize),
) -> Result<GradWrtLogProbs> {
    let (tw, tl) = lens;
    if tw == 0 || tl == 0 {
        return Err(KernelError::EmptyResponse);
    }
    check_beta(reward.beta)?;
    if !reward.delta.is_finite() {
        return Err(KernelError::NonFinite(0));
    }
    let weight = reward.beta * sigmoid(-reward.delta);
    match reward.variant {
        Variant::Dpo | Variant::Sanorm => {
            if reward.sampled_chosen_idx.is_some() || reward.sampled_rejected_idx.is_some() {
                return Err(KernelError::InconsistentIndices(format!(
                    "{} rewards carry no sampled positions",
                    reward.variant
                )));
            }
            let (gw, gl) = if reward.variant == Variant::Dpo {
                (weight, weight)
            } else {
                let scale = sanorm_scale(tw, tl);
                (weight * scale / tw as f64, weight * scale / tl as f64)
            };
            Ok(GradWrtLogProbs {
                chosen: vec![-gw; tw],
                rejected: vec![gl; tl],
            })
        }
        Variant::Sampo | Variant::Topk => {
            let (Some(iw), Some(il)) = (&reward.sampled_chosen_idx, &reward.sampled_rejected_idx)
            else {
                return Err(KernelError::InconsistentIndices(format!(
                    "{} reward is missing its selected positions",
                    reward.variant
                )));
            };
            check_indices(iw, tw, "chosen")?;
            check_indices(il, tl, "rejected")?;
            let tm = tw.min(tl);
            if iw.len() != tm || il.len() != tm {
                return Err(KernelError::InconsistentIndices(format!(
                    "expected {tm} positions per side, got {} and {}",
                    iw.len(),
                    il.len()
                )));
            }
            Ok(GradWrtLogProbs {
                chosen: scatter(tw, iw, -weight),
                rejected: scatter(tl, il, weight),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn r(v: &[f64]) -> TokenLogRatios {
        TokenLogRatios::new(v.to_vec()).unwrap()
    }

    const TOL: f64 = 1e-12;

    #[test]
    fn seq_logprob_examples() {
        assert_eq!(seq_logprob(&[-1.0, -2.0]).unwrap(), -3.0);
        assert_eq!(seq_logprob(&[0.0]).unwrap(), 0.0);
        assert_eq!(seq_logprob(&[]), Err(KernelError::EmptyResponse));
        assert!(seq_logprob(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn token_log_ratio_examples() {
        assert_eq!(token_log_ratios(&[-1.0, -1.0], &[-1.0, -1.0]).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(token_log_ratios(&[-0.5], &[-1.5]).unwrap().values(), &[1.0]);
        assert!(matches!(
            token_log_ratios(&[-0.5], &[-1.5, -2.0]),
            Err(KernelError::LengthMismatch { .. })
        ));
        let p = [-0.3, -2.2, -1.7];
        let q = [-0.9, -0.4, -3.1];
        let sum: f64 = token_log_ratios(&p, &q).unwrap().values().iter().sum();
        let seq = seq_logprob(&p).unwrap() - seq_logprob(&q).unwrap();
        assert!((sum - seq).abs() < TOL);
    }

    #[test]
    fn dpo_examples() {
        let d = delta_dpo(&r(&[0.2, 0.3]), &r(&[0.1]), 1.0).unwrap();
        assert!((d.delta - 0.4).abs() < TOL);
        assert!(d.reconstructs());
        let x = r(&[0.7, -0.2, 0.05]);
        assert_eq!(delta_dpo(&x, &x, 0.3).unwrap().delta, 0.0);
        assert!(matches!(delta_dpo(&x, &x, 0.0), Err(KernelError::InvalidBeta(_))));
    }

    #[test]
    fn subsample_edge_cases() {
        let mut rng = rng_for(42, 0, 0);
        assert_eq!(uniform_subsample(3, 3, &mut rng).unwrap(), vec![0, 1, 2]);
        assert_eq!(uniform_subsample(1, 1, &mut rng).unwrap(), vec![0]);
        assert!(uniform_subsample(3, 4, &mut rng).is_err());
        assert!(uniform_subsample(3, 0, &mut rng).is_err());
        for _ in 0..200 {
            let s = uniform_subsample(9, 4, &mut rng).unwrap();
            assert_eq!(s.len(), 4);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 9));
        }
    }

    #[test]
    fn sampo_equal_lengths_matches_dpo_exactly() {
        let rw = r(&[0.11, -0.4, 0.23, 0.9]);
        let rl = r(&[0.5, 0.01, -0.3, 0.2]);
        let s = delta_sampo(&rw, &rl, 0.5, &mut rng_for(1, 0, 0)).unwrap();
        let d = delta_dpo(&rw, &rl, 0.5).unwrap();
        assert_eq!(s.delta.to_bits(), d.delta.to_bits());
    }

    #[test]
    fn sampo_short_example_takes_one_of_two_values() {
        let rw = r(&[0.2, 0.3]);
        let rl = r(&[0.1]);
        let mut seen = [false, false];
        for ex in 0..64 {
            let d = delta_sampo(&rw, &rl, 1.0, &mut rng_for(42, 0, ex)).unwrap();
            if (d.delta - 0.1).abs() < TOL {
                seen[0] = true;
            } else if (d.delta - 0.2).abs() < TOL {
                seen[1] = true;
            } else {
                panic!("unexpected delta {}", d.delta);
            }
            assert!(d.reconstructs());
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn sanorm_examples() {
        let d = delta_sanorm(&r(&[0.2, 0.3]), &r(&[0.1]), 1.0).unwrap();
        assert!((d.delta - 0.225).abs() < TOL);
        let rw = r(&[0.3, -0.1, 0.4]);
        let rl = r(&[0.2, 0.2, -0.5]);
        let a = delta_sanorm(&rw, &rl, 0.7).unwrap().delta;
        let b = delta_dpo(&rw, &rl, 0.7).unwrap().delta;
        assert!((a - b).abs() < TOL);
        assert_eq!(delta_sanorm(&rw, &rw, 0.7).unwrap().delta, 0.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.2, -0.5, 0.3], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(topk_indices(&[1.0], 2).is_err());
        let d = delta_topk(&r(&[0.2, -0.5, 0.3]), &r(&[0.1]), 1.0).unwrap();
        assert!((d.delta - 0.2).abs() < TOL);
        assert_eq!(d.sampled_chosen_idx, Some(vec![2]));
    }

    #[test]
    fn logistic_and_loss_values() {
        assert_eq!(bt_preference_prob(0.3, 0.3), 0.5);
        assert!((bt_preference_prob(3f64.ln(), 0.0) - 0.75).abs() < TOL);
        assert_eq!(bt_preference_prob(1000.0, 0.0), 1.0);
        assert_eq!(bt_preference_prob(0.0, 1000.0), 0.0);
        assert!((preference_loss(0.0) - std::f64::consts::LN_2).abs() < TOL);
        assert!(preference_loss(1000.0) < 1e-300);
        let big = preference_loss(-1000.0);
        assert!((big - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn grad_at_zero_delta_is_half_beta() {
        let rw = r(&[0.0, 0.0, 0.0]);
        let rl = r(&[0.0, 0.0]);
        let d = delta_dpo(&rw, &rl, 0.4).unwrap();
        let g = loss_grad_wrt_logprobs(&d, (3, 2)).unwrap();
        assert!(g.chosen.iter().all(|&x| (x + 0.2).abs() < TOL));
        assert!(g.rejected.iter().all(|&x| (x - 0.2).abs() < TOL));
    }

    #[test]
    fn sampo_grad_masks_unsampled_positions() {
        let reward = ImplicitReward::from_terms(Variant::Sampo, 1.0, 0.3, 0.1, Some(vec![1]), Some(vec![0]));
        let g = loss_grad_wrt_logprobs(&reward, (3, 1)).unwrap();
        assert_eq!(g.chosen[0], 0.0);
        assert_eq!(g.chosen[2], 0.0);
        assert!(g.chosen[1] < 0.0);
        assert!(g.rejected[0] > 0.0);
    }

    #[test]
    fn grad_rejects_inconsistent_indices() {
        let mut reward = ImplicitReward::from_terms(Variant::Sampo, 1.0, 0.0, 0.0, Some(vec![3]), Some(vec![0]));
        assert!(loss_grad_wrt_logprobs(&reward, (3, 1)).is_err());
        reward.sampled_chosen_idx = Some(vec![1, 1]);
        assert!(loss_grad_wrt_logprobs(&reward, (3, 2)).is_err());
        reward.sampled_chosen_idx = None;
        assert!(loss_grad_wrt_logprobs(&reward, (3, 1)).is_err());
        let dpo = ImplicitReward::from_terms(Variant::Dpo, 1.0, 0.0, 0.0, Some(vec![0]), None);
        assert!(loss_grad_wrt_logprobs(&dpo, (1, 1)).is_err());
    }

    #[test]
    fn sanorm_grad_spreads_scale_over_tokens() {
        let d = delta_sanorm(&r(&[0.2, 0.3]), &r(&[0.1]), 1.0).unwrap();
        let g = loss_grad_wrt_logprobs(&d, (2, 1)).unwrap();
        let w = sigmoid(-d.delta);
        assert!((g.chosen[0] + w * 1.5 / 2.0).abs() < TOL);
        assert!((g.rejected[0] - w * 1.5).abs() < TOL);
    }

    #[test]
    fn hybrid_examples() {
        assert_eq!(hybrid_loss(0.7, 2.0, 0.0), 0.7);
        assert!((hybrid_loss(0.7, 2.0, 1.0) - 2.7).abs() < TOL);
        assert!((sft_nll(&[-1.0, -3.0]).unwrap() - 2.0).abs() < TOL);
        assert_eq!(sft_nll_grad(4, 1.0), vec![-0.25; 4]);
    }
}
