use std::fmt;
use std::str::FromStr;

use crate::align::ATTENTION_FLOOR;
use crate::error::{Error, Result};

/// What a scorer may look at: a hypothesis or a candidate extension.
#[derive(Clone, Copy, Debug)]
pub struct Features<'a> {
    pub log_prob: f64,
    pub length: usize,
    /// Running sum of paragraph attention.
    pub paragraph_coverage: &'a [f64],
    /// Running sum of source-token attention.
    pub token_coverage: &'a [f64],
    pub str_cov_total: f64,
    pub ptrgen_total: f64,
}

/// Ranks hypotheses. Scores must be non-decreasing in `log_prob` when the
/// other features are fixed; beam search relies on this to prune siblings.
pub trait Scorer: Send + Sync {
    fn score(&self, f: &Features<'_>) -> f64;

    /// Largest score any continuation of an unfinished hypothesis can reach
    /// within `max_len` tokens.
    fn upper_bound(&self, _f: &Features<'_>, _max_len: usize) -> f64 {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Vanilla,
    AttAlign,
    StrCov,
    GnmtCoverage,
    PtrGenCoverage,
}

impl ScorerKind {
    pub const ALL: [Self; 5] = [
        Self::Vanilla,
        Self::AttAlign,
        Self::StrCov,
        Self::GnmtCoverage,
        Self::PtrGenCoverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::AttAlign => "attalign",
            Self::StrCov => "strcov",
            Self::GnmtCoverage => "gnmt-cp",
            Self::PtrGenCoverage => "ptrgen-cov",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer {s:?}")))
    }
}

/// `log P / |y|`.
pub fn vanilla_score(log_prob: f64, length: usize) -> f64 {
    log_prob / length.max(1) as f64
}

/// `1 - Σ_i min(α_i, coverage_i)` for one step's attention `α`.
pub fn str_cov(step_attention: &[f64], coverage: &[f64]) -> f64 {
    1.0 - overlap(step_attention, coverage)
}

/// `Σ_i min(α_i, coverage_i)`.
pub fn ptrgen_coverage(step_attention: &[f64], coverage: &[f64]) -> f64 {
    overlap(step_attention, coverage)
}

fn overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// `Σ_i log(min(coverage_i, 1))`, each term clamped at [`ATTENTION_FLOOR`].
pub fn gnmt_coverage_penalty(coverage: &[f64]) -> f64 {
    coverage.iter().map(|c| c.min(1.0).max(ATTENTION_FLOOR).ln()).sum()
}

fn vanilla_bound(f: &Features<'_>, max_len: usize) -> f64 {
    // log-probabilities are never positive, so the mean only grows by
    // spreading the same mass over the longest allowed length
    f.log_prob / max_len.max(f.length).max(1) as f64
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Vanilla;

impl Scorer for Vanilla {
    fn score(&self, f: &Features<'_>) -> f64 {
        vanilla_score(f.log_prob, f.length)
    }

    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        vanilla_bound(f, max_len)
    }
}

/// Length-normalized likelihood plus `beta` times the alignment of the
/// hypothesis' paragraph attention with a predicted distribution.
#[derive(Clone, Debug)]
pub struct AttAlign {
    pub eta_hat: Vec<f64>,
    pub beta: f64,
}

impl AttAlign {
    pub fn new(eta_hat: Vec<f64>, beta: f64) -> Result<Self> {
        if eta_hat.is_empty() {
            return Err(Error::Contract("empty predicted attention".into()));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
        }
        Ok(Self { eta_hat, beta })
    }

    pub fn alignment(&self, coverage: &[f64]) -> f64 {
        let total: f64 = coverage.iter().sum();
        coverage
            .iter()
            .zip(&self.eta_hat)
            .map(|(c, h)| {
                let eta = if total > 0.0 { c / total } else { 0.0 };
                eta.min(*h).max(ATTENTION_FLOOR).ln()
            })
            .sum()
    }
}

impl Scorer for AttAlign {
    fn score(&self, f: &Features<'_>) -> f64 {
        let base = vanilla_score(f.log_prob, f.length);
        if self.beta == 0.0 {
            return base;
        }
        base + self.beta * self.alignment(f.paragraph_coverage)
    }

    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        let best: f64 = self.eta_hat.iter().map(|h| h.max(ATTENTION_FLOOR).ln()).sum();
        vanilla_bound(f, max_len) + self.beta * best
    }
}

/// `(log P + weight · Σ_t strCov_t) / |y|`.
#[derive(Clone, Copy, Debug)]
pub struct StrCov {
    pub weight: f64,
}

impl Scorer for StrCov {
    fn score(&self, f: &Features<'_>) -> f64 {
        (f.log_prob + self.weight * f.str_cov_total) / f.length.max(1) as f64
    }

    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        // each further step adds at most `weight`; the mean is monotone in
        // the final length, so one of the two extremes is the maximum
        let at = |len: usize| (f.log_prob + self.weight * (f.str_cov_total + (len - f.length) as f64)) / len as f64;
        let lo = f.length + 1;
        let hi = max_len.max(lo);
        at(lo).max(at(hi))
    }
}

/// Length-normalized likelihood plus `beta` times the translation coverage penalty.
#[derive(Clone, Copy, Debug)]
pub struct GnmtCoverage {
    pub beta: f64,
}

impl Scorer for GnmtCoverage {
    fn score(&self, f: &Features<'_>) -> f64 {
        vanilla_score(f.log_prob, f.length) + self.beta * gnmt_coverage_penalty(f.token_coverage)
    }

    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        vanilla_bound(f, max_len)
    }
}

/// Length-normalized likelihood minus `beta` times the accumulated overlap penalty.
#[derive(Clone, Copy, Debug)]
pub struct PtrGenCoverage {
    pub beta: f64,
}

impl Scorer for PtrGenCoverage {
    fn score(&self, f: &Features<'_>) -> f64 {
        vanilla_score(f.log_prob, f.length) - self.beta * f.ptrgen_total
    }

    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        vanilla_bound(f, max_len) - self.beta * f.ptrgen_total
    }
}

/// Builds the scorer for `kind`. Only the alignment scorer needs `eta_hat`.
pub fn build_scorer(
    kind: ScorerKind,
    beta: f64,
    str_cov_weight: f64,
    eta_hat: Option<&[f64]>,
) -> Result<Box<dyn Scorer>> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    Ok(match kind {
        ScorerKind::Vanilla => Box::new(Vanilla),
        ScorerKind::AttAlign => {
            let eta = eta_hat.ok_or_else(|| Error::Config("the attalign scorer needs predicted attention".into()))?;
            Box::new(AttAlign::new(eta.to_vec(), beta)?)
        }
        ScorerKind::StrCov => Box::new(StrCov { weight: str_cov_weight }),
        ScorerKind::GnmtCoverage => Box::new(GnmtCoverage { beta }),
        ScorerKind::PtrGenCoverage => Box::new(PtrGenCoverage { beta }),
    })
}
