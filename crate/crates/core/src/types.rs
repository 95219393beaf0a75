//! Domain types shared by every module: token sequences, preference triplets,
//! per-token log-ratios, loss configuration and the implicit reward record.
//!
//! All types are immutable once constructed and validate their invariants in
//! their constructors, including when they are deserialized.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TypeError {
    #[error("token sequence must contain at least one id")]
    EmptySequence,
    #[error("token id {id} is out of range for vocabulary size {vocab_size}")]
    OutOfVocab { id: u32, vocab_size: usize },
    #[error("chosen and rejected responses are identical")]
    IdenticalResponses,
    #[error("non-finite log-ratio at position {0}")]
    NonFinite(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// An ordered, non-empty list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self, TypeError> {
        if ids.is_empty() {
            return Err(TypeError::EmptySequence);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Fails on the first id that is not below `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<(), TypeError> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(TypeError::OutOfVocab { id, vocab_size }),
            None => Ok(()),
        }
    }

    pub fn max_id(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = TypeError;

    fn try_from(ids: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(ids)
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(seq: TokenSeq) -> Self {
        seq.0
    }
}

/// Generator bookkeeping attached to a triplet: both lengths and the latent
/// quality scores of each response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub tw: usize,
    pub tl: usize,
    pub score_w: f64,
    pub score_l: f64,
}

#[derive(Deserialize)]
struct RawTriplet {
    prompt: TokenSeq,
    chosen: TokenSeq,
    rejected: TokenSeq,
    #[serde(default)]
    meta: Option<TripletMeta>,
}

/// A prompt with one preferred (`chosen`) and one dispreferred (`rejected`)
/// response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriplet")]
pub struct PreferenceTriplet {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<TripletMeta>,
}

impl PreferenceTriplet {
    pub fn new(
        prompt: TokenSeq,
        chosen: TokenSeq,
        rejected: TokenSeq,
        meta: Option<TripletMeta>,
    ) -> Result<Self, TypeError> {
        if chosen == rejected {
            return Err(TypeError::IdenticalResponses);
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
            meta,
        })
    }

    /// `(T_w, T_l)`.
    pub fn lens(&self) -> (usize, usize) {
        (self.chosen.len(), self.rejected.len())
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<(), TypeError> {
        self.prompt.check_vocab(vocab_size)?;
        self.chosen.check_vocab(vocab_size)?;
        self.rejected.check_vocab(vocab_size)
    }
}

impl TryFrom<RawTriplet> for PreferenceTriplet {
    type Error = TypeError;

    fn try_from(raw: RawTriplet) -> Result<Self, Self::Error> {
        Self::new(raw.prompt, raw.chosen, raw.rejected, raw.meta)
    }
}

/// Per-token `log πθ(y_t|·) − log πref(y_t|·)` for one response, natural log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenLogRatios(Vec<f64>);

impl TokenLogRatios {
    pub fn new(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.is_empty() {
            return Err(TypeError::EmptySequence);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(TypeError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for TokenLogRatios {
    type Error = TypeError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<TokenLogRatios> for Vec<f64> {
    fn from(r: TokenLogRatios) -> Self {
        r.0
    }
}

/// Which implicit-reward formula a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Full token sums on both sides.
    Dpo,
    /// Uniform down-sampling of both sides to `min(T_w, T_l)` tokens.
    #[default]
    Sampo,
    /// Per-token means rescaled by `(T_w + T_l) / 2`.
    Sanorm,
    /// Largest `min(T_w, T_l)` log-ratios on each side.
    Topk,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dpo, Variant::Sampo, Variant::Sanorm, Variant::Topk];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dpo => "DPO",
            Variant::Sampo => "SAMPO",
            Variant::Sanorm => "SANORM",
            Variant::Topk => "TOPK",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DPO" => Ok(Variant::Dpo),
            "SAMPO" => Ok(Variant::Sampo),
            "SANORM" => Ok(Variant::Sanorm),
            "TOPK" => Ok(Variant::Topk),
            other => Err(TypeError::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

/// When the frozen reference is replaced by a copy of the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefreshCadence {
    /// Reference stays frozen for the whole run.
    #[default]
    Frozen,
    /// After every `k` optimizer steps.
    Steps(usize),
    /// After the last step of every epoch.
    Epoch,
}

impl RefreshCadence {
    pub fn from_steps(k: usize) -> Self {
        if k == 0 {
            RefreshCadence::Frozen
        } else {
            RefreshCadence::Steps(k)
        }
    }
}

// Config files write this either as a step count (0 = frozen) or as "epoch".
impl Serialize for RefreshCadence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RefreshCadence::Frozen => s.serialize_u64(0),
            RefreshCadence::Steps(k) => s.serialize_u64(*k as u64),
            RefreshCadence::Epoch => s.serialize_str("epoch"),
        }
    }
}

impl<'de> Deserialize<'de> for RefreshCadence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(u64),
            Named(String),
        }
        match Raw::deserialize(d)? {
            Raw::Steps(k) => Ok(RefreshCadence::from_steps(k as usize)),
            Raw::Named(s) if s.eq_ignore_ascii_case("epoch") => Ok(RefreshCadence::Epoch),
            Raw::Named(s) => Err(serde::de::Error::custom(format!(
                "iterative_refresh_every must be a step count or \"epoch\", got `{s}`"
            ))),
        }
    }
}

/// Default `β`.
pub const DEFAULT_BETA: f64 = 0.1;
/// Default run seed.
pub const DEFAULT_SEED: u64 = 42;
/// SFT weight used for hybrid preference + SFT runs.
pub const HYBRID_SFT_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub variant: Variant,
    /// Weight of the chosen-response NLL term; 0 disables the hybrid loss.
    pub sft_weight: f64,
    pub iterative_refresh_every: RefreshCadence,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            variant: Variant::default(),
            sft_weight: 0.0,
            iterative_refresh_every: RefreshCadence::Frozen,
            seed: DEFAULT_SEED,
        }
    }
}

impl LossConfig {
    pub fn new(variant: Variant, beta: f64) -> Self {
        Self {
            variant,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TypeError::InvalidConfig(format!(
                "beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        if !(self.sft_weight >= 0.0 && self.sft_weight.is_finite()) {
            return Err(TypeError::InvalidConfig(format!(
                "sft_weight must be non-negative, got {}",
                self.sft_weight
            )));
        }
        Ok(())
    }
}

/// The scalar implicit reward `Δ` together with how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitReward {
    pub delta: f64,
    pub chosen_term: f64,
    pub rejected_term: f64,
    /// Contributing chosen positions for SAMPO/TOPK; `None` means all.
    pub sampled_chosen_idx: Option<Vec<usize>>,
    pub sampled_rejected_idx: Option<Vec<usize>>,
    pub variant: Variant,
    pub beta: f64,
}

impl ImplicitReward {
    /// `delta` is always computed as `chosen_term - rejected_term`.
    pub fn from_terms(
        variant: Variant,
        beta: f64,
        chosen_term: f64,
        rejected_term: f64,
        sampled_chosen_idx: Option<Vec<usize>>,
        sampled_rejected_idx: Option<Vec<usize>>,
    ) -> Self {
        Self {
            delta: chosen_term - rejected_term,
            chosen_term,
            rejected_term,
            sampled_chosen_idx,
            sampled_rejected_idx,
            variant,
            beta,
        }
    }

    pub fn reconstructs(&self) -> bool {
        let recon = self.chosen_term - self.rejected_term;
        (self.delta - recon).abs() <= f64::EPSILON * recon.abs().max(self.delta.abs()).max(1.0)
    }
}
