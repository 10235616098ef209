//! Lagrangian relaxation of the budget and the Gibbs distribution it induces.
//!
//! The hard budget is replaced by a per-token cost `lambda`, giving
//! `p(m) ∝ exp((score(m) + lambda * (K - |m|)) / T)`. On a chain this
//! distribution has exact marginals by forward-backward, approximate samples
//! by Perturb-and-MAP, and a multiplier search that recovers a feasible MAP.

use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{dp_map_unbudgeted, viterbi, Solution, SolverTag};
use crate::logspace::{Dual, LogScalar};
use crate::model::{selected_count, ChainModel, Marginals, RelaxConfig};
use crate::par::{map_range, Execution};
use crate::rng;

/// Node and pair posteriors of a binary chain.
pub(crate) struct Posterior<S> {
    /// `P(m_i = 1)`
    pub probs: Vec<S>,
    /// `P(m_i = 1, m_{i+1} = 1)`
    pub pairs: Vec<S>,
    pub log_z: S,
}

/// Forward-backward in log space. `theta[i]` is the log-potential of
/// `m_i = 1` (state 0 has potential 0); `psi[i]` is added when `m_i` and
/// `m_{i+1}` are both 1.
pub(crate) fn forward_backward<S: LogScalar>(theta: &[S], psi: &[S]) -> Posterior<S> {
    let len = theta.len();
    if len == 0 {
        return Posterior {
            probs: Vec::new(),
            pairs: Vec::new(),
            log_z: S::constant(0.0),
        };
    }
    let zero = S::constant(0.0);
    let mut alpha = Vec::with_capacity(len);
    alpha.push([zero, theta[0]]);
    for i in 1..len {
        let [a0, a1] = alpha[i - 1];
        alpha.push([S::lse(a0, a1), theta[i] + S::lse(a0, a1 + psi[i - 1])]);
    }
    let mut beta = vec![[zero, zero]; len];
    for i in (0..len - 1).rev() {
        let [b0, b1] = beta[i + 1];
        let on = theta[i + 1] + b1;
        beta[i] = [S::lse(b0, on), S::lse(b0, on + psi[i])];
    }
    let [l0, l1] = alpha[len - 1];
    let log_z = S::lse(l0, l1);
    let probs = (0..len)
        .map(|i| (alpha[i][1] + beta[i][1] - log_z).exp())
        .collect();
    let pairs = (0..len - 1)
        .map(|i| (alpha[i][1] + psi[i] + theta[i + 1] + beta[i + 1][1] - log_z).exp())
        .collect();
    Posterior {
        probs,
        pairs,
        log_z,
    }
}

fn natural_params(model: &ChainModel, lambda: f64, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let theta = model
        .unary()
        .iter()
        .map(|s| (s - lambda) / temperature)
        .collect();
    let psi = model.edge().iter().map(|r| r / temperature).collect();
    (theta, psi)
}

/// Exact marginals and log partition function of the Lagrangian-shifted
/// Gibbs distribution.
pub fn chain_marginals(model: &ChainModel, cfg: &RelaxConfig) -> Result<Marginals> {
    cfg.validate()?;
    let (theta, psi) = natural_params(model, cfg.lambda, cfg.temperature);
    let post = forward_backward(&theta, &psi);
    Ok(Marginals {
        probs: post.probs,
        log_z: post.log_z + cfg.lambda * model.budget() as f64 / cfg.temperature,
    })
}

/// Continuous relaxation of the mask: the chain marginals.
pub fn soft_mask(model: &ChainModel, cfg: &RelaxConfig) -> Result<Vec<f64>> {
    Ok(chain_marginals(model, cfg)?.probs)
}

/// Gradient of `sum_i g_i * soft_mask_i` with respect to model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskGrad {
    pub unary: Vec<f64>,
    pub edge: Vec<f64>,
    pub lambda: f64,
}

impl SoftMaskGrad {
    pub fn edge_sum(&self) -> f64 {
        self.edge.iter().sum()
    }
}

/// Vector-Jacobian product of [`soft_mask`] at fixed `lambda`.
///
/// The Jacobian of the marginals with respect to the natural parameters is
/// the (symmetric) covariance matrix of the sufficient statistics, so the
/// product is one forward-mode pass along the cotangent.
pub fn soft_mask_vjp(
    model: &ChainModel,
    cfg: &RelaxConfig,
    cotangent: &[f64],
) -> Result<SoftMaskGrad> {
    cfg.validate()?;
    if cotangent.len() != model.len() {
        return Err(Error::LengthMismatch {
            expected: model.len(),
            actual: cotangent.len(),
        });
    }
    let (d_theta, d_psi) = covariance_products(model, cfg.lambda, cfg.temperature, cotangent);
    Ok(chain_rule(&d_theta, &d_psi, cfg.temperature))
}

// Returns (Cov(g.m, m_j))_j and (Cov(g.m, m_k m_{k+1}))_k.
fn covariance_products(
    model: &ChainModel,
    lambda: f64,
    temperature: f64,
    direction: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (theta, psi) = natural_params(model, lambda, temperature);
    let theta: Vec<Dual> = theta
        .iter()
        .zip(direction)
        .map(|(&t, &g)| Dual::new(t, g))
        .collect();
    let psi: Vec<Dual> = psi.iter().map(|&p| Dual::constant(p)).collect();
    let post = forward_backward(&theta, &psi);
    (
        post.probs.iter().map(|d| d.tangent).collect(),
        post.pairs.iter().map(|d| d.tangent).collect(),
    )
}

fn chain_rule(d_theta: &[f64], d_psi: &[f64], temperature: f64) -> SoftMaskGrad {
    let unary: Vec<f64> = d_theta.iter().map(|v| v / temperature).collect();
    let lambda = -unary.iter().sum::<f64>();
    SoftMaskGrad {
        unary,
        edge: d_psi.iter().map(|v| v / temperature).collect(),
        lambda,
    }
}

/// Soft mask whose multiplier is set so the expected number of selected
/// tokens meets the budget: `sum_i p_i(lambda) = K` when the unconstrained
/// expectation exceeds `K`, else `lambda = 0`.
#[derive(Debug, Clone)]
pub struct BudgetedSoftMask {
    pub probs: Vec<f64>,
    pub lambda: f64,
    pub active: bool,
    model: ChainModel,
    temperature: f64,
}

impl BudgetedSoftMask {
    pub fn fit(model: &ChainModel, temperature: f64) -> Result<Self> {
        RelaxConfig::new(0.0, temperature, 0)?;
        let budget = model.budget() as f64;
        let expected = |lambda: f64| -> f64 {
            let (theta, psi) = natural_params(model, lambda, temperature);
            forward_backward(&theta, &psi).probs.iter().sum()
        };
        let build = |lambda: f64, active: bool| {
            let (theta, psi) = natural_params(model, lambda, temperature);
            BudgetedSoftMask {
                probs: forward_backward(&theta, &psi).probs,
                lambda,
                active,
                model: model.clone(),
                temperature,
            }
        };

        if model.is_empty() || expected(0.0) <= budget {
            return Ok(build(0.0, false));
        }
        if model.budget() == 0 {
            // No finite multiplier empties the chain; use the limit.
            return Ok(BudgetedSoftMask {
                probs: vec![0.0; model.len()],
                lambda: f64::INFINITY,
                active: false,
                model: model.clone(),
                temperature,
            });
        }

        let mut lo = 0.0;
        let mut hi = 1.0f64;
        while expected(hi) > budget {
            lo = hi;
            hi *= 2.0;
        }
        // Safeguarded Newton on h(lambda) = E|m| - K, decreasing in lambda.
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (theta, psi) = natural_params(model, x, temperature);
            let theta: Vec<Dual> = theta
                .iter()
                .map(|&t| Dual::new(t, -1.0 / temperature))
                .collect();
            let psi: Vec<Dual> = psi.iter().map(|&p| Dual::constant(p)).collect();
            let post = forward_backward(&theta, &psi);
            let h = post.probs.iter().map(|d| d.value).sum::<f64>() - budget;
            let dh = post.probs.iter().map(|d| d.tangent).sum::<f64>();
            if h == 0.0 {
                break;
            }
            if h > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = if dh < 0.0 { x - h / dh } else { f64::NAN };
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let step = (next - x).abs();
            x = next;
            if step <= 4.0 * f64::EPSILON * x.max(1.0) {
                break;
            }
        }
        Ok(build(x, true))
    }

    /// Gradient of `sum_i g_i p_i` including the dependence of the fitted
    /// multiplier on scores and bonuses.
    pub fn vjp(&self, cotangent: &[f64]) -> SoftMaskGrad {
        assert_eq!(cotangent.len(), self.probs.len(), "cotangent length");
        if !self.lambda.is_finite() {
            return SoftMaskGrad {
                unary: vec![0.0; self.probs.len()],
                edge: vec![0.0; self.probs.len().saturating_sub(1)],
                lambda: 0.0,
            };
        }
        let (a, b) = covariance_products(&self.model, self.lambda, self.temperature, cotangent);
        let mut grad = chain_rule(&a, &b, self.temperature);
        if self.active {
            // Implicit function theorem on sum_i p_i(s, r, lambda) = K.
            let ones = vec![1.0; self.probs.len()];
            let (c, d) = covariance_products(&self.model, self.lambda, self.temperature, &ones);
            let var = c.iter().sum::<f64>();
            if var > 0.0 {
                let dl = grad.lambda;
                for (u, cj) in grad.unary.iter_mut().zip(&c) {
                    *u += dl * cj / var;
                }
                for (e, dk) in grad.edge.iter_mut().zip(&d) {
                    *e += dl * dk / var;
                }
            }
            grad.lambda = 0.0;
        }
        grad
    }
}

/// Masks drawn by Perturb-and-MAP together with per-token frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub masks: Vec<Vec<bool>>,
    pub empirical_freq: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Multiplies the Gumbel perturbation; 0 reduces every sample to the MAP.
    pub noise_scale: f64,
    pub execution: Execution,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            noise_scale: 1.0,
            execution: Execution::default(),
        }
    }
}

/// Perturb-and-MAP sampling from the Lagrangian-shifted Gibbs distribution.
///
/// Each sample adds independent Gumbel noise (scaled by the temperature) to
/// the potentials of both states of every token and solves the unbudgeted
/// MAP of the perturbed chain. Sample `j` uses its own random stream, so the
/// first `n` samples do not depend on how many are requested.
pub fn perturb_and_map_sample(
    model: &ChainModel,
    cfg: &RelaxConfig,
    n_samples: usize,
    opts: SampleOptions,
) -> Result<SampleBatch> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Invalid {
            field: "n_samples",
            reason: "must be at least 1".into(),
        });
    }
    if !(opts.noise_scale >= 0.0 && opts.noise_scale.is_finite()) {
        return Err(Error::Invalid {
            field: "noise_scale",
            reason: format!("{} is not a finite non-negative value", opts.noise_scale),
        });
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let scale = opts.noise_scale * cfg.temperature;
    let masks = map_range(opts.execution, n_samples, |j| {
        let mut rng = rng::stream(cfg.seed, "perturb-and-map", j as u64);
        let perturbed: Vec<f64> = model
            .unary()
            .iter()
            .map(|&s| {
                let on: f64 = gumbel.sample(&mut rng);
                let off: f64 = gumbel.sample(&mut rng);
                s + scale * (on - off)
            })
            .collect();
        viterbi(&perturbed, model.edge(), cfg.lambda)
    });
    let mut counts = vec![0usize; model.len()];
    for m in &masks {
        for (c, &b) in counts.iter_mut().zip(m) {
            *c += b as usize;
        }
    }
    let empirical_freq = counts
        .iter()
        .map(|&c| c as f64 / n_samples as f64)
        .collect();
    Ok(SampleBatch {
        masks,
        empirical_freq,
        seed: cfg.seed,
    })
}

/// Result of the multiplier search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaFit {
    pub lambda: f64,
    /// Feasible mask; its score is the true budgeted score.
    pub solution: Solution,
    /// Lagrangian dual value `max_m [score(m) - lambda |m|] + lambda K`.
    pub dual_bound: f64,
    /// `dual_bound - solution.score`, never negative.
    pub duality_gap: f64,
}

/// Bisects on `lambda` for the smallest multiplier whose unbudgeted MAP
/// respects the budget, then fills any budget left over at that multiplier
/// with positive-gain tokens. The returned mask is always feasible and
/// `solution.score >= OPT - duality_gap`.
pub fn tune_lambda(model: &ChainModel) -> LambdaFit {
    let budget = model.budget();
    let feasible_at = |lambda: f64| {
        let bits = viterbi(model.unary(), model.edge(), lambda);
        let ok = selected_count(&bits) <= budget;
        (bits, ok)
    };

    let (bits0, ok0) = feasible_at(0.0);
    let (lambda, bits) = if ok0 {
        (0.0, bits0)
    } else {
        let max_s = model
            .unary()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let max_r = model.edge().iter().copied().fold(0.0, f64::max);
        let mut lo = 0.0f64;
        let mut hi = (max_s + max_r).max(0.0) + 1.0;
        let (mut hi_bits, ok) = feasible_at(hi);
        debug_assert!(ok, "upper multiplier bound empties the mask");
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let (bits, ok) = feasible_at(mid);
            if ok {
                hi = mid;
                hi_bits = bits;
            } else {
                lo = mid;
            }
        }
        (hi, hi_bits)
    };

    let used = selected_count(&bits);
    let dual_gap = lambda * (budget - used) as f64;
    let base_score = model.raw_score(&bits);
    let bits = greedy_fill(model, bits);
    let solution = Solution::budgeted(model, bits, SolverTag::Lagrangian);
    // dual_bound = base_score + dual_gap; the fill can only close the gap.
    let duality_gap = (dual_gap - (solution.score - base_score)).max(0.0);
    LambdaFit {
        lambda,
        dual_bound: solution.score + duality_gap,
        solution,
        duality_gap,
    }
}

// Adds the token with the largest positive marginal gain (earliest on ties)
// while budget remains. At a breakpoint where several tokens leave the MAP
// together, bisection alone can undershoot the budget.
fn greedy_fill(model: &ChainModel, mut bits: Vec<bool>) -> Vec<bool> {
    let (unary, edge) = (model.unary(), model.edge());
    let len = bits.len();
    let mut used = selected_count(&bits);
    while used < model.budget() {
        let mut pick: Option<(usize, f64)> = None;
        for i in (0..len).filter(|&i| !bits[i]) {
            let mut gain = unary[i];
            if i > 0 && bits[i - 1] {
                gain += edge[i - 1];
            }
            if i + 1 < len && bits[i + 1] {
                gain += edge[i];
            }
            if gain > 0.0 && pick.is_none_or(|(_, g)| gain > g) {
                pick = Some((i, gain));
            }
        }
        match pick {
            Some((i, _)) => {
                bits[i] = true;
                used += 1;
            }
            None => break,
        }
    }
    bits
}

/// The Lagrangian dual function `max_m [score(m) - lambda |m|] + lambda K`.
pub fn dual_value(model: &ChainModel, lambda: f64) -> f64 {
    dp_map_unbudgeted(model, lambda).score + lambda * model.budget() as f64
}

/// Rounds a soft mask at 0.5.
pub fn threshold(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}
