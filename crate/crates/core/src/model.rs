//! Chain factor-graph instances and the mask score function.
//!
//! A [`ChainModel`] scores a binary token mask `m` as
//! `sum_i m_i s_i + sum_i m_i m_{i+1} r_i`, subject to the hard budget
//! `sum_i m_i <= K`. Masks over budget are [`Score::Infeasible`] rather than a
//! negative-infinity float.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token budget, either an absolute count or a fraction of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    /// Resolves against a sequence length. Fractions round up, so 0.6 of 7
    /// tokens is 5.
    pub fn resolve(self, len: usize) -> Result<usize> {
        match self {
            Budget::Count(k) if k <= len => Ok(k),
            Budget::Count(k) => Err(Error::BudgetTooLarge { budget: k, len }),
            Budget::Fraction(f) => resolve_fraction(f, len),
        }
    }
}

pub(crate) fn resolve_fraction(f: f64, len: usize) -> Result<usize> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::BadFraction(f));
    }
    // 0.7 * 10 evaluates to 7.000000000000001; the slack keeps exact products
    // from rounding up an extra token.
    let k = (f * len as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(k.min(len))
}

/// A chain of `L` binary variables with unary scores, non-negative
/// continuity bonuses between neighbours, and a cardinality budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    unary: Vec<f64>,
    edge: Vec<f64>,
    budget: usize,
}

impl ChainModel {
    pub fn new(unary: Vec<f64>, edge: Vec<f64>, budget: Budget) -> Result<Self> {
        let len = unary.len();
        let expected_edges = len.saturating_sub(1);
        if edge.len() != expected_edges {
            return Err(Error::LengthMismatch {
                expected: expected_edges,
                actual: edge.len(),
            });
        }
        if unary.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "unary" });
        }
        if edge.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "edge" });
        }
        if let Some((index, &value)) = edge.iter().enumerate().find(|(_, &r)| r < 0.0) {
            return Err(Error::NegativeEdge { index, value });
        }
        let budget = budget.resolve(len)?;
        Ok(Self {
            unary,
            edge,
            budget,
        })
    }

    /// Broadcasts a single continuity bonus to every edge.
    pub fn uniform(unary: Vec<f64>, edge_bonus: f64, budget: Budget) -> Result<Self> {
        let edges = vec![edge_bonus; unary.len().saturating_sub(1)];
        Self::new(unary, edges, budget)
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    pub fn edge(&self) -> &[f64] {
        &self.edge
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Same scores with a different budget.
    pub fn with_budget(&self, budget: Budget) -> Result<Self> {
        Self::new(self.unary.clone(), self.edge.clone(), budget)
    }

    pub(crate) fn check_len(&self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: bits.len(),
            });
        }
        Ok(())
    }

    /// Score with no budget check.
    pub(crate) fn raw_score(&self, bits: &[bool]) -> f64 {
        let mut total = 0.0;
        for (i, &b) in bits.iter().enumerate() {
            if b {
                total += self.unary[i];
                if i + 1 < bits.len() && bits[i + 1] {
                    total += self.edge[i];
                }
            }
        }
        total
    }
}

/// Outcome of scoring a mask against a budgeted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Score {
    Feasible(f64),
    Infeasible,
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Feasible(v) => Some(v),
            Score::Infeasible => None,
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, Score::Feasible(_))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Feasible(v) => write!(f, "{v}"),
            Score::Infeasible => f.write_str("infeasible"),
        }
    }
}

/// `sum m_i s_i + sum m_i m_{i+1} r_i`, or [`Score::Infeasible`] when
/// `enforce_budget` is set and more than `K` tokens are selected.
pub fn score_of(model: &ChainModel, bits: &[bool], enforce_budget: bool) -> Result<Score> {
    model.check_len(bits)?;
    if enforce_budget && selected_count(bits) > model.budget {
        return Ok(Score::Infeasible);
    }
    Ok(Score::Feasible(model.raw_score(bits)))
}

/// Unbudgeted score plus `lambda * (K - |m|)`. The constant `lambda * K` is
/// part of the returned value.
pub fn lagrangian_score(model: &ChainModel, bits: &[bool], cfg: &RelaxConfig) -> Result<f64> {
    model.check_len(bits)?;
    let used = selected_count(bits) as f64;
    Ok(model.raw_score(bits) + cfg.lambda * (model.budget as f64 - used))
}

pub fn selected_count(bits: &[bool]) -> usize {
    bits.iter().filter(|&&b| b).count()
}

/// Number of maximal runs of consecutive selected tokens.
pub fn segment_count(bits: &[bool]) -> usize {
    let mut prev = false;
    let mut runs = 0;
    for &b in bits {
        if b && !prev {
            runs += 1;
        }
        prev = b;
    }
    runs
}

/// Number of neighbouring pairs that are both selected.
pub fn adjacent_pairs(bits: &[bool]) -> usize {
    bits.windows(2).filter(|w| w[0] && w[1]).count()
}

/// Deterministic tie-break between equal-score masks: the smaller code
/// `sum_i m_i 2^i` wins, i.e. at the last position where the masks differ the
/// one leaving the token unselected is preferred. `Less` means `a` is
/// preferred.
pub fn tie_break(a: &[bool], b: &[bool]) -> Ordering {
    debug_assert_eq!(a.len(), b.len());
    for (&x, &y) in a.iter().zip(b).rev() {
        if x != y {
            return if x { Ordering::Greater } else { Ordering::Less };
        }
    }
    Ordering::Equal
}

/// A binary selection over tokens, optionally carrying its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
    score: Option<Score>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits, score: None }
    }

    /// Builds a mask and caches its budget-enforced score under `model`.
    pub fn scored(model: &ChainModel, bits: Vec<bool>) -> Result<Self> {
        let score = score_of(model, &bits, true)?;
        Ok(Self {
            bits,
            score: Some(score),
        })
    }

    pub fn empty(len: usize) -> Self {
        Self::new(vec![false; len])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    pub fn score(&self) -> Option<Score> {
        self.score
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        selected_count(&self.bits)
    }

    pub fn segments(&self) -> usize {
        segment_count(&self.bits)
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Invalid {
                    field: "mask",
                    reason: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mask::new(bits))
    }
}

/// Parses a `0`/`1` string into bits. Panics on other characters; intended
/// for tests and literals.
pub fn bits(s: &str) -> Vec<bool> {
    s.parse::<Mask>().expect("bit string").into_bits()
}

/// Lagrange multiplier, Gibbs temperature, and sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl RelaxConfig {
    pub fn new(lambda: f64, temperature: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            lambda,
            temperature,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid {
                field: "lambda",
                reason: format!("{} is not a finite non-negative value", self.lambda),
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid {
                field: "temperature",
                reason: format!("{} is not a finite positive value", self.temperature),
            });
        }
        Ok(())
    }
}

/// Per-token selection probabilities and the log partition function of the
/// Lagrangian-shifted Gibbs distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub probs: Vec<f64>,
    pub log_z: f64,
}
