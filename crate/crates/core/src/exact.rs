//! Exact MAP solvers: exhaustive enumeration and a budgeted chain dynamic
//! program. Both resolve equal scores with [`crate::model::tie_break`]: the
//! winner is the mask with the smallest code `sum_i m_i 2^i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{selected_count, ChainModel, Mask};

/// Largest chain the enumeration oracle accepts (about 4M masks).
pub const BRUTE_FORCE_LIMIT: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    Brute,
    Dp,
    /// Two-state Viterbi over a unary-shifted objective without budget.
    Unbudgeted,
    /// Feasible mask recovered by Lagrange multiplier search.
    Lagrangian,
}

/// A MAP mask and its objective value.
///
/// For [`SolverTag::Brute`] and [`SolverTag::Dp`] the score is the
/// budget-enforced score of the mask. For [`SolverTag::Unbudgeted`] it is the
/// shifted objective `sum m_i (s_i - shift) + pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub mask: Mask,
    pub score: f64,
    pub solver: SolverTag,
}

impl Solution {
    pub(crate) fn budgeted(model: &ChainModel, bits: Vec<bool>, solver: SolverTag) -> Self {
        let mask = Mask::scored(model, bits).expect("solver mask has model length");
        let score = mask
            .score()
            .and_then(|s| s.value())
            .expect("solver mask respects the budget");
        Self {
            mask,
            score,
            solver,
        }
    }

    pub fn bits(&self) -> &[bool] {
        self.mask.bits()
    }
}

/// Enumerates every mask. Errors when the chain is longer than
/// [`BRUTE_FORCE_LIMIT`].
pub fn brute_force_map(model: &ChainModel) -> Result<Solution> {
    let len = model.len();
    if len > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            len,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let unary = model.unary();
    let edge = model.edge();
    let budget = model.budget() as u32;

    let mut best: Option<(u32, f64)> = None;
    for code in 0u32..(1u32 << len) {
        if code.count_ones() > budget {
            continue;
        }
        let mut score = 0.0;
        for i in 0..len {
            if code >> i & 1 == 1 {
                score += unary[i];
                if i + 1 < len && code >> (i + 1) & 1 == 1 {
                    score += edge[i];
                }
            }
        }
        // Ascending enumeration with a strict comparison keeps the smallest
        // code among equal scores.
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((code, score));
        }
    }
    let (code, _) = best.expect("the empty mask is always feasible");
    let bits = (0..len).map(|i| code >> i & 1 == 1).collect();
    Ok(Solution::budgeted(model, bits, SolverTag::Brute))
}

/// Exact budgeted MAP by dynamic programming over
/// (position, tokens allowed, current bit). `O(L * K)` time and memory.
pub fn dp_map(model: &ChainModel) -> Solution {
    let bits = budgeted_chain_map(model.unary(), model.edge(), model.budget());
    Solution::budgeted(model, bits, SolverTag::Dp)
}

fn budgeted_chain_map(unary: &[f64], edge: &[f64], budget: usize) -> Vec<bool> {
    let len = unary.len();
    if len == 0 {
        return Vec::new();
    }
    let width = budget + 1;
    // best[(i * width + c) * 2 + b]: best score of tokens 0..=i using at most
    // c tokens, with m_i = b.
    let idx = |i: usize, c: usize, b: usize| (i * width + c) * 2 + b;
    let mut best = vec![f64::NEG_INFINITY; len * width * 2];
    for c in 0..width {
        best[idx(0, c, 0)] = 0.0;
        if c > 0 {
            best[idx(0, c, 1)] = unary[0];
        }
    }
    for i in 1..len {
        for c in 0..width {
            best[idx(i, c, 0)] = best[idx(i - 1, c, 0)].max(best[idx(i - 1, c, 1)]);
            if c > 0 {
                let from_off = best[idx(i - 1, c - 1, 0)];
                let from_on = best[idx(i - 1, c - 1, 1)] + edge[i - 1];
                best[idx(i, c, 1)] = unary[i] + from_off.max(from_on);
            }
        }
    }

    // Backtrack from the last token, keeping a token unselected whenever
    // that attains the optimum.
    let mut bits = vec![false; len];
    let mut c = budget;
    let mut next_on = false;
    for i in (0..len).rev() {
        let bonus = if next_on { edge[i] } else { 0.0 };
        let off = best[idx(i, c, 0)];
        let on = best[idx(i, c, 1)] + bonus;
        if on > off {
            bits[i] = true;
            c -= 1;
        }
        next_on = bits[i];
    }
    bits
}

/// Maximizes `sum m_i (s_i - unary_shift) + sum m_i m_{i+1} r_i` over all
/// masks, ignoring the budget. The reported score is that shifted objective.
pub fn dp_map_unbudgeted(model: &ChainModel, unary_shift: f64) -> Solution {
    let bits = viterbi(model.unary(), model.edge(), unary_shift);
    let score = model.raw_score(&bits) - unary_shift * selected_count(&bits) as f64;
    Solution {
        mask: Mask::new(bits),
        score,
        solver: SolverTag::Unbudgeted,
    }
}

/// Two-state Viterbi with unaries `s_i - shift`, same tie-break as [`dp_map`].
pub(crate) fn viterbi(unary: &[f64], edge: &[f64], shift: f64) -> Vec<bool> {
    let len = unary.len();
    if len == 0 {
        return Vec::new();
    }
    let mut best = Vec::with_capacity(len);
    best.push([0.0, unary[0] - shift]);
    for i in 1..len {
        let [off, on] = best[i - 1];
        best.push([off.max(on), unary[i] - shift + off.max(on + edge[i - 1])]);
    }
    let mut bits = vec![false; len];
    let mut next_on = false;
    for i in (0..len).rev() {
        let bonus = if next_on { edge[i] } else { 0.0 };
        let [off, on] = best[i];
        bits[i] = on + bonus > off;
        next_on = bits[i];
    }
    bits
}
