//! Autoregressive debiasing at decode time.
//!
//! At each step with context `c`:
//!
//! 1. `V′ = top_k p*(· | c) ∩ S`, the likely next tokens that are bias-sensitive.
//! 2. `p̂(w | c) ∝ exp(e(w)ᵀ P f(c))`, the distribution with the context
//!    embedding guarded by the nullspace projector `P` (or, for the subspace
//!    variant, with the bias-subspace component of `f(c)` removed).
//! 3. `α_t = Σ_{V′} p*(w) q(w) / Σ_{V′} p*(w)`, or a fixed `α`. An empty `V′`
//!    gives `α_t = 0`.
//! 4. `p = α_t p̂ + (1 − α_t) p*`.
//!
//! Mixing happens on normalized probabilities, not logits. Every exported
//! trace says so in its header.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::NullspaceProjector;
use crate::error::{Error, Result};
use crate::lm::{softmax, top_k_indices, DistributionHook, LanguageModel};
use crate::subspace::{BiasSensitiveSet, BiasSubspace};

/// Default size of the top-k pool that `V′` is drawn from.
pub const DEFAULT_CANDIDATE_POOL: usize = 50;

#[derive(Debug, Clone)]
pub enum DebiasMethod {
    /// Guard `f(c)` with a nullspace projector.
    Inlp(NullspaceProjector),
    /// Remove the bias-subspace component of `f(c)`.
    Subspace(BiasSubspace),
}

impl DebiasMethod {
    pub fn name(&self) -> &'static str {
        match self {
            DebiasMethod::Inlp(_) => "inlp",
            DebiasMethod::Subspace(_) => "subspace",
        }
    }

    fn dim(&self) -> usize {
        match self {
            DebiasMethod::Inlp(p) => p.dim(),
            DebiasMethod::Subspace(s) => s.dim(),
        }
    }

    /// The guarded context embedding.
    pub fn guard(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: f.len(),
            });
        }
        match self {
            DebiasMethod::Inlp(p) => Ok(p.apply(f)),
            DebiasMethod::Subspace(s) => s.reject(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum AlphaMode {
    Fixed {
        alpha: f64,
    },
    /// `α_t` from the bias-sensitive candidates, multiplied by `scale ∈ [0, 1]`.
    Learned {
        scale: f64,
    },
}

impl AlphaMode {
    pub fn fixed(alpha: f64) -> Self {
        AlphaMode::Fixed { alpha }
    }

    pub fn learned() -> Self {
        AlphaMode::Learned { scale: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            AlphaMode::Fixed { alpha } => alpha,
            AlphaMode::Learned { scale } => scale,
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("alpha {v} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DebiasConfig {
    pub method: DebiasMethod,
    pub alpha: AlphaMode,
    pub top_k: usize,
    pub bias_set: BiasSensitiveSet,
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A [`DebiasConfig`] resolved against one model's vocabulary.
#[derive(Debug, Clone)]
pub struct Debiaser {
    config: DebiasConfig,
    /// `q(w)` per vocabulary id; 0 outside `S`.
    q: Vec<f64>,
    in_set: Vec<bool>,
}

impl Debiaser {
    pub fn new(lm: &LanguageModel, config: DebiasConfig) -> Result<Self> {
        config.validate()?;
        if config.method.dim() != lm.dim() {
            return Err(Error::DimMismatch {
                expected: lm.dim(),
                found: config.method.dim(),
            });
        }
        let vocab = lm.table().vocab();
        let in_set: Vec<bool> = vocab
            .tokens()
            .iter()
            .map(|t| config.bias_set.contains(t))
            .collect();
        let q = vocab
            .tokens()
            .iter()
            .map(|t| config.bias_set.q_normalized(t))
            .collect();
        Ok(Self { config, q, in_set })
    }

    pub fn config(&self) -> &DebiasConfig {
        &self.config
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn in_set(&self) -> &[bool] {
        &self.in_set
    }

    /// One decoding step: the mixed distribution and its trace.
    pub fn step(&self, lm: &LanguageModel, context: &[usize]) -> Result<(Vec<f64>, StepTrace)> {
        let f = lm.context_embedding_ids(context)?;
        let p_star = lm.distribution_for(&f)?;
        self.step_with(lm, &f, p_star)
    }

    fn step_with(
        &self,
        lm: &LanguageModel,
        f: &[f64],
        p_star: Vec<f64>,
    ) -> Result<(Vec<f64>, StepTrace)> {
        let candidates = candidate_set(&p_star, self.config.top_k, &self.in_set);
        let alpha = match self.config.alpha {
            AlphaMode::Fixed { alpha } => alpha,
            AlphaMode::Learned { scale } => scale * compute_alpha(&p_star, &candidates, &self.q),
        };
        let p_hat = lm.distribution_for(&self.config.method.guard(f)?)?;
        let mixed = mix(&p_hat, &p_star, alpha);
        let trace = StepTrace {
            alpha,
            candidates: candidates.len(),
            p_star,
            p_hat,
            mixed: mixed.clone(),
            sampled: None,
        };
        Ok((mixed, trace))
    }

    /// A generation hook that records one [`StepTrace`] per step.
    pub fn hook(&self) -> DebiasHook<'_> {
        DebiasHook {
            debiaser: self,
            traces: Vec::new(),
        }
    }
}

/// Per-step record of a debiased decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub alpha: f64,
    /// `|V′|`.
    pub candidates: usize,
    pub p_star: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub mixed: Vec<f64>,
    pub sampled: Option<usize>,
}

pub struct DebiasHook<'a> {
    debiaser: &'a Debiaser,
    pub traces: Vec<StepTrace>,
}

impl DistributionHook for DebiasHook<'_> {
    fn transform(
        &mut self,
        lm: &LanguageModel,
        context: &[usize],
        base: Vec<f64>,
    ) -> Result<Vec<f64>> {
        let f = lm.context_embedding_ids(context)?;
        let (mixed, trace) = self.debiaser.step_with(lm, &f, base)?;
        self.traces.push(trace);
        Ok(mixed)
    }

    fn observe(&mut self, token: usize) {
        if let Some(t) = self.traces.last_mut() {
            t.sampled = Some(token);
        }
    }
}

/// Always applies the guarded distribution (`α = 1` at every step).
#[derive(Debug, Clone)]
pub struct GuardEveryStep {
    pub method: DebiasMethod,
}

impl DistributionHook for GuardEveryStep {
    fn transform(
        &mut self,
        lm: &LanguageModel,
        context: &[usize],
        _base: Vec<f64>,
    ) -> Result<Vec<f64>> {
        let f = lm.context_embedding_ids(context)?;
        lm.distribution_for(&self.method.guard(&f)?)
    }
}

/// Header line of an exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub mixing: String,
    pub method: String,
    pub alpha_mode: AlphaMode,
    pub top_k: usize,
}

/// Writes a header line then one JSON record per step.
pub fn write_trace<W: Write>(
    mut out: W,
    config: &DebiasConfig,
    traces: &[StepTrace],
) -> Result<()> {
    let header = TraceHeader {
        mixing: "probabilities".into(),
        method: config.method.name().into(),
        alpha_mode: config.alpha,
        top_k: config.top_k,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for t in traces {
        writeln!(out, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

/// `softmax(E · P f(c))`.
pub fn debiased_distribution(
    lm: &LanguageModel,
    context: &[usize],
    projector: &NullspaceProjector,
) -> Result<Vec<f64>> {
    let f = lm.context_embedding_ids(context)?;
    if projector.dim() != f.len() {
        return Err(Error::DimMismatch {
            expected: f.len(),
            found: projector.dim(),
        });
    }
    lm.distribution_for(&projector.apply(&f))
}

/// `top_k(p*) ∩ S`, ordered by descending probability (ties by index).
pub fn candidate_set(p_star: &[f64], top_k: usize, in_set: &[bool]) -> Vec<usize> {
    top_k_indices(p_star, top_k)
        .into_iter()
        .filter(|&i| in_set[i])
        .collect()
}

/// Probability-weighted mean of `q` over the candidates; 0 when there are none.
pub fn compute_alpha(p_star: &[f64], candidates: &[usize], q: &[f64]) -> f64 {
    let mass: f64 = candidates.iter().map(|&i| p_star[i]).sum();
    if candidates.is_empty() || mass <= 0.0 {
        return 0.0;
    }
    let weighted: f64 = candidates.iter().map(|&i| p_star[i] * q[i]).sum();
    (weighted / mass).clamp(0.0, 1.0)
}

/// `α p̂ + (1 − α) p*`. The endpoints return the inputs unchanged.
pub fn mix(p_hat: &[f64], p_star: &[f64], alpha: f64) -> Vec<f64> {
    if alpha <= 0.0 {
        return p_star.to_vec();
    }
    if alpha >= 1.0 {
        return p_hat.to_vec();
    }
    let mut out: Vec<f64> = p_hat
        .iter()
        .zip(p_star)
        .map(|(h, s)| alpha * h + (1.0 - alpha) * s)
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// One A-INLP step with the given projector and α mode.
pub fn a_inlp_step(
    lm: &LanguageModel,
    context: &[usize],
    projector: &NullspaceProjector,
    alpha: AlphaMode,
    top_k: usize,
    bias_set: &BiasSensitiveSet,
) -> Result<(Vec<f64>, StepTrace)> {
    let d = Debiaser::new(
        lm,
        DebiasConfig {
            method: DebiasMethod::Inlp(projector.clone()),
            alpha,
            top_k,
            bias_set: bias_set.clone(),
        },
    )?;
    d.step(lm, context)
}

/// One A-subspace step.
pub fn a_subspace_step(
    lm: &LanguageModel,
    context: &[usize],
    subspace: &BiasSubspace,
    alpha: AlphaMode,
    top_k: usize,
    bias_set: &BiasSensitiveSet,
) -> Result<(Vec<f64>, StepTrace)> {
    let d = Debiaser::new(
        lm,
        DebiasConfig {
            method: DebiasMethod::Subspace(subspace.clone()),
            alpha,
            top_k,
            bias_set: bias_set.clone(),
        },
    )?;
    d.step(lm, context)
}

/// Plain softmax of arbitrary logits, re-exported for callers building
/// their own guarded distributions.
pub fn guarded_softmax(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}
