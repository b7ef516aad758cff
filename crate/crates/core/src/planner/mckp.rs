//! Per-block rate selection under a FLOPs budget.
//!
//! Minimize `Σᵢ e[i][rᵢ]` subject to `Σᵢ c[i][rᵢ] ≤ β` with exactly one rate
//! per block: a multiple-choice knapsack. Costs are discretized to budget
//! units `⌈c/g⌉` against a capacity of `⌊β/g⌋` units and solved exactly by
//! dynamic programming over blocks.
//!
//! Ties are broken toward lower total (discretized) cost, then toward the
//! lexicographically smallest vector of rate indices, block 0 first. The
//! brute-force enumerator applies the same rule, and both accumulate the
//! objective in the same order, `e₀ + (e₁ + (… + (e_{B−1} + 0)))`, so
//! their results compare bit-for-bit.

use serde::{Deserialize, Serialize};

use super::flops::CostTable;
use crate::distill::ErrorTable;
use crate::error::{Error, Result};

/// Largest brute-force instance.
pub const BRUTE_FORCE_MAX_BLOCKS: usize = 12;
/// Default number of DP units in the budget.
pub const DEFAULT_BUDGET_UNITS: f64 = 1e6;
const MAX_DP_UNITS: f64 = 5e7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    /// FLOPs budget β.
    pub beta: f64,
    /// FLOPs per DP unit g.
    pub granularity: f64,
}

impl Budget {
    /// Budget with granularity `β / 10⁶`.
    pub fn new(beta: f64) -> Result<Self> {
        Self::with_granularity(beta, beta / DEFAULT_BUDGET_UNITS)
    }

    pub fn with_granularity(beta: f64, granularity: f64) -> Result<Self> {
        if !(beta > 0.0) || !(granularity > 0.0) || !granularity.is_finite() {
            return Err(Error::Argument(format!(
                "budget needs β > 0 and finite g > 0 (β={beta}, g={granularity})"
            )));
        }
        Ok(Self { beta, granularity })
    }
}

/// One rate per block and the resulting totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePlan {
    pub rates: Vec<usize>,
    #[serde(with = "crate::numerics::serde_inf::scalar")]
    pub objective: f64,
    pub cost: f64,
    #[serde(with = "crate::numerics::serde_inf::scalar")]
    pub budget: f64,
}

impl RatePlan {
    /// Plan keeping every block at full softmax.
    pub fn identity(blocks: usize) -> Self {
        Self {
            rates: vec![1; blocks],
            objective: 0.0,
            cost: 0.0,
            budget: f64::INFINITY,
        }
    }

    pub fn blocks(&self) -> usize {
        self.rates.len()
    }
}

fn check_tables(errors: &[Vec<f64>], costs: &[Vec<f64>], rates: &[usize]) -> Result<()> {
    if errors.is_empty() || errors.len() != costs.len() {
        return Err(Error::Shape(format!(
            "error table has {} blocks, cost table {}",
            errors.len(),
            costs.len()
        )));
    }
    for (i, (e, c)) in errors.iter().zip(costs).enumerate() {
        if e.len() != rates.len() || c.len() != rates.len() {
            return Err(Error::Shape(format!("block {i}: row lengths differ from {} rates", rates.len())));
        }
        if e.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(Error::Argument(format!("block {i}: errors must be non-negative")));
        }
        if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Argument(format!("block {i}: costs must be finite and non-negative")));
        }
    }
    Ok(())
}

fn units(costs: &[Vec<f64>], g: f64) -> Result<Vec<Vec<usize>>> {
    costs
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| {
                    let u = (c / g).ceil();
                    if u > MAX_DP_UNITS {
                        Err(Error::Argument(format!(
                            "cost {c} is {u} budget units; increase the granularity"
                        )))
                    } else {
                        Ok(u as usize)
                    }
                })
                .collect()
        })
        .collect()
}

fn min_cost(costs: &[Vec<f64>]) -> f64 {
    costs
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum()
}

fn plan_from_indices(
    indices: &[usize],
    objective: f64,
    costs: &[Vec<f64>],
    rates: &[usize],
    budget: &Budget,
) -> RatePlan {
    RatePlan {
        rates: indices.iter().map(|&r| rates[r]).collect(),
        objective,
        cost: indices.iter().enumerate().map(|(i, &r)| costs[i][r]).sum(),
        budget: budget.beta,
    }
}

/// Fails fast when even the cheapest assignment is over budget.
fn exceeds_budget(costs: &[Vec<f64>], budget: &Budget) -> Result<()> {
    let min = min_cost(costs);
    if min > budget.beta {
        return Err(Error::Infeasible {
            budget: budget.beta,
            min_cost: min,
        });
    }
    Ok(())
}

/// Exact DP on tables given as matrices (blocks × rates).
pub fn solve_mckp_matrices(errors: &[Vec<f64>], costs: &[Vec<f64>], rates: &[usize], budget: &Budget) -> Result<RatePlan> {
    check_tables(errors, costs, rates)?;
    exceeds_budget(costs, budget)?;
    let w = units(costs, budget.granularity)?;
    let blocks = errors.len();
    let reachable: usize = w.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    let capacity = if budget.beta.is_finite() {
        let cap = (budget.beta / budget.granularity).floor();
        if cap > MAX_DP_UNITS && (reachable as f64) > MAX_DP_UNITS {
            return Err(Error::Argument(format!(
                "budget spans {cap} units; increase the granularity"
            )));
        }
        (cap as usize).min(reachable)
    } else {
        reachable
    };

    // best[w]: minimal objective of blocks i.. with total exactly w units.
    let none = u16::MAX;
    let mut best: Vec<Option<f64>> = vec![None; capacity + 1];
    best[0] = Some(0.0);
    let mut choice = vec![vec![none; capacity + 1]; blocks];
    for i in (0..blocks).rev() {
        let mut next: Vec<Option<f64>> = vec![None; capacity + 1];
        for (total, slot) in next.iter_mut().enumerate() {
            for (r, &wr) in w[i].iter().enumerate() {
                if wr > total {
                    continue;
                }
                if let Some(rest) = best[total - wr] {
                    let value = errors[i][r] + rest;
                    if slot.is_none_or(|cur| value < cur) {
                        *slot = Some(value);
                        choice[i][total] = r as u16;
                    }
                }
            }
        }
        best = next;
    }

    let mut target = None;
    for (total, value) in best.iter().enumerate() {
        if let Some(v) = *value {
            if target.is_none_or(|(_, cur)| v < cur) {
                target = Some((total, v));
            }
        }
    }
    let Some((mut total, objective)) = target else {
        return Err(Error::Infeasible {
            budget: budget.beta,
            min_cost: min_cost(costs),
        });
    };
    let mut indices = Vec::with_capacity(blocks);
    for (i, row) in choice.iter().enumerate() {
        let r = row[total] as usize;
        indices.push(r);
        total -= w[i][r];
    }
    Ok(plan_from_indices(&indices, objective, costs, rates, budget))
}

pub fn solve_mckp(errors: &ErrorTable, costs: &CostTable, budget: &Budget) -> Result<RatePlan> {
    if errors.rates != costs.rates {
        return Err(Error::Shape(format!(
            "error table rates {:?} differ from cost table rates {:?}",
            errors.rates, costs.rates
        )));
    }
    solve_mckp_matrices(&errors.errors, &costs.costs, &costs.rates, budget)
}

/// Exhaustive search over all `|ℛ|^B` assignments (B ≤ 12).
pub fn brute_force_mckp_matrices(errors: &[Vec<f64>], costs: &[Vec<f64>], rates: &[usize], budget: &Budget) -> Result<RatePlan> {
    check_tables(errors, costs, rates)?;
    let blocks = errors.len();
    if blocks > BRUTE_FORCE_MAX_BLOCKS {
        return Err(Error::TooLarge {
            blocks,
            limit: BRUTE_FORCE_MAX_BLOCKS,
        });
    }
    exceeds_budget(costs, budget)?;
    let w = units(costs, budget.granularity)?;
    let capacity = if budget.beta.is_finite() {
        (budget.beta / budget.granularity).floor()
    } else {
        f64::INFINITY
    };
    let k = rates.len();
    let mut indices = vec![0usize; blocks];
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    loop {
        let total: usize = indices.iter().enumerate().map(|(i, &r)| w[i][r]).sum();
        if (total as f64) <= capacity {
            let objective = indices
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (i, &r)| errors[i][r] + acc);
            let better = match &best {
                None => true,
                Some((bo, bt, _)) => objective < *bo || (objective == *bo && total < *bt),
            };
            if better {
                best = Some((objective, total, indices.clone()));
            }
        }
        // Odometer increment, last block fastest, so enumeration is lexicographic.
        let mut pos = blocks;
        loop {
            if pos == 0 {
                let Some((objective, _, idx)) = best else {
                    return Err(Error::Infeasible {
                        budget: budget.beta,
                        min_cost: min_cost(costs),
                    });
                };
                return Ok(plan_from_indices(&idx, objective, costs, rates, budget));
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < k {
                break;
            }
            indices[pos] = 0;
        }
    }
}

pub fn brute_force_mckp(errors: &ErrorTable, costs: &CostTable, budget: &Budget) -> Result<RatePlan> {
    if errors.rates != costs.rates {
        return Err(Error::Shape("error and cost tables use different rates".into()));
    }
    brute_force_mckp_matrices(&errors.errors, &costs.costs, &costs.rates, budget)
}

/// Indices of the `k` blocks with the smallest error (ties → lower index).
pub fn lowest_error_blocks(column: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > column.len() {
        return Err(Error::Argument(format!(
            "cannot convert {k} of {} blocks",
            column.len()
        )));
    }
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Converts the `k` lowest-error blocks at `rate`, leaving the rest at rate 1.
pub fn homogeneous_select(errors: &ErrorTable, costs: &CostTable, rate: usize, k: usize) -> Result<RatePlan> {
    let col = errors
        .rates
        .iter()
        .position(|&r| r == rate)
        .ok_or_else(|| Error::Argument(format!("rate {rate} not in the error table")))?;
    let one = errors
        .rates
        .iter()
        .position(|&r| r == 1)
        .ok_or_else(|| Error::Argument("error table lacks rate 1".into()))?;
    if errors.rates != costs.rates || errors.errors.len() != costs.costs.len() {
        return Err(Error::Shape("error and cost tables disagree".into()));
    }
    let column: Vec<f64> = errors.errors.iter().map(|row| row[col]).collect();
    let chosen = lowest_error_blocks(&column, k)?;
    let indices: Vec<usize> = (0..column.len())
        .map(|i| if chosen.binary_search(&i).is_ok() { col } else { one })
        .collect();
    let objective = indices
        .iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (i, &r)| errors.errors[i][r] + acc);
    let mut plan = plan_from_indices(&indices, objective, &costs.costs, &costs.rates, &Budget {
        beta: f64::INFINITY,
        granularity: 1.0,
    });
    plan.budget = plan.cost;
    Ok(plan)
}
