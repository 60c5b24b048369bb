//! Exact algorithms on box-plus-balance sets: Euclidean projection with
//! balance multipliers, linear minimization (the per-commodity arrangement
//! oracle), and the single-commodity market equilibrium solver.
//!
//! A balance set couples the agents of one commodity: volumes live in a box
//! and sum to zero (everything sold is bought). Both the projection and the
//! linear oracle reduce to one-dimensional breakpoint walks over the agent
//! bounds, so they terminate exactly instead of iterating to tolerance.
//!
//! Sign conventions follow the Lagrangian `<p, y> - lambda * sum(y)`: an
//! interior coordinate of the linear oracle satisfies `p_i = lambda`, which
//! is what lets the multiplier be read as a market clearing price.

use crate::exec::{self, ExecPolicy};
use crate::model::{MarketState, FEASIBILITY_TOL};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("invalid box bounds: {0}")]
    InvalidBounds(String),
    #[error(
        "balance set is empty: lower bounds sum to {sum_lower}, upper bounds to {sum_upper}, \
         so the volumes cannot sum to zero"
    )]
    EmptyBalanceSet { sum_lower: f64, sum_upper: f64 },
    #[error("commodity {commodity}: balance set is empty")]
    EmptyCommodity { commodity: usize },
    #[error("market cannot clear: {0}")]
    InfeasibleMarket(String),
    #[error("point is not market-feasible: {0}")]
    InfeasiblePoint(String),
    #[error("invalid price data: {0}")]
    InvalidData(String),
}

/// Per-agent volume bounds for a single commodity: one slice of the global
/// box or of a moving window.
#[derive(Debug, Clone, PartialEq)]
pub struct CommodityBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CommodityBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, BalanceError> {
        if lower.len() != upper.len() {
            return Err(BalanceError::InvalidBounds(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(BalanceError::InvalidBounds("no agents".into()));
        }
        for i in 0..lower.len() {
            if !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(BalanceError::InvalidBounds(format!(
                    "non-finite bound for agent {i}"
                )));
            }
            if lower[i] > upper[i] {
                return Err(BalanceError::InvalidBounds(format!(
                    "agent {i}: lower {} exceeds upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(CommodityBox { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The balance set over this box is nonempty exactly when the bound sums
    /// straddle zero.
    pub fn is_feasible(&self, tol: f64) -> bool {
        let sum_lower: f64 = self.lower.iter().sum();
        let sum_upper: f64 = self.upper.iter().sum();
        sum_lower <= tol && sum_upper >= -tol
    }

    /// Largest box-constraint violation of `values` (zero when inside).
    pub fn violation(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len(), "length mismatch");
        let mut worst = 0.0f64;
        for i in 0..values.len() {
            worst = worst.max(self.lower[i] - values[i]).max(values[i] - self.upper[i]);
        }
        worst
    }

    fn require_feasible(&self) -> Result<(f64, f64), BalanceError> {
        let sum_lower: f64 = self.lower.iter().sum();
        let sum_upper: f64 = self.upper.iter().sum();
        if !sum_lower.is_finite() || !sum_upper.is_finite() {
            return Err(BalanceError::InvalidBounds(
                "bound sums overflow f64; bounds are too large to balance".into(),
            ));
        }
        if sum_lower > FEASIBILITY_TOL || sum_upper < -FEASIBILITY_TOL {
            return Err(BalanceError::EmptyBalanceSet {
                sum_lower,
                sum_upper,
            });
        }
        Ok((sum_lower, sum_upper))
    }
}

/// Per-commodity balance multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearingPrices {
    pub lambda: Vec<f64>,
}

/// Result of a per-commodity linear minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LmoPoint {
    pub y: Vec<f64>,
    /// Balance multiplier; interior coordinates satisfy `p_i = lambda`.
    pub lambda: f64,
    /// Objective `<p, y>` at the minimizer.
    pub value: f64,
    /// True when the multiplier is only determined up to an interval; the
    /// reported `lambda` is then that interval's midpoint (or its finite
    /// endpoint when one side is unbounded).
    pub degenerate: bool,
}

/// Result of a market-wide linear minimization, one balance problem per
/// commodity.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketLmo {
    pub y: MarketState,
    pub clearing: ClearingPrices,
    pub value: f64,
    pub degenerate: Vec<bool>,
}

/// Projects `z` onto the balance set `{y in box : sum(y) = 0}` and returns
/// the projection together with its balance multiplier, so that
/// `y_i = clip(z_i - lambda, lower_i, upper_i)` holds componentwise.
///
/// The multiplier is found by walking the sorted breakpoints
/// `{z_i - upper_i, z_i - lower_i}` of the piecewise-linear dual function
/// `h(lambda) = sum_i clip(z_i - lambda)`, which is nonincreasing, so the
/// walk terminates at machine precision without iteration.
pub fn project_balanced(z: &[f64], bx: &CommodityBox) -> Result<(Vec<f64>, f64), BalanceError> {
    assert_eq!(z.len(), bx.len(), "point/box length mismatch");
    let (sum_lower, sum_upper) = bx.require_feasible()?;
    let m = z.len();

    // Event list: at lambda = z_i - upper_i coordinate i unlatches from its
    // upper bound and becomes free; at z_i - lower_i it latches onto its
    // lower bound. Walking lambda upward keeps h piecewise linear with slope
    // -count between events.
    let mut events: Vec<(f64, bool, usize)> = Vec::with_capacity(2 * m);
    for i in 0..m {
        events.push((z[i] - bx.upper[i], true, i));
        events.push((z[i] - bx.lower[i], false, i));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut s_const = sum_upper;
    let mut s_free_z = 0.0;
    let mut count = 0usize;
    let mut prev = f64::NEG_INFINITY;

    if sum_upper < 0.0 {
        // Feasible only up to tolerance dust: everything pinned at the upper
        // bounds is the closest the set gets to balance.
        let lambda = events.first().map_or(0.0, |e| e.0);
        return Ok((bx.upper.clone(), lambda));
    }

    for &(at, enters, i) in &events {
        let h_here = s_const + s_free_z - count as f64 * at;
        if h_here <= 0.0 {
            let lambda = if count > 0 {
                (s_const + s_free_z) / count as f64
            } else {
                // h is constant and zero on this whole segment; any lambda in
                // it yields the same projection, take the midpoint.
                if prev.is_finite() {
                    0.5 * (prev + at)
                } else {
                    at
                }
            };
            return Ok((clip_shift(z, lambda, bx), lambda));
        }
        if enters {
            s_const -= bx.upper[i];
            s_free_z += z[i];
            count += 1;
        } else {
            s_free_z -= z[i];
            s_const += bx.lower[i];
            count -= 1;
        }
        prev = at;
    }

    // Past every event all coordinates sit at their lower bounds, so h has
    // flattened out at sum_lower >= 0; within tolerance the lower corner is
    // the projection.
    debug_assert!(sum_lower >= -FEASIBILITY_TOL);
    let lambda = events.last().map_or(0.0, |e| e.0);
    Ok((bx.lower.clone(), lambda))
}

fn clip_shift(z: &[f64], lambda: f64, bx: &CommodityBox) -> Vec<f64> {
    z.iter()
        .enumerate()
        .map(|(i, &zi)| (zi - lambda).clamp(bx.lower[i], bx.upper[i]))
        .collect()
}

/// Projects a full market state onto the product of per-commodity balance
/// sets, one independent projection per commodity column.
pub fn project_market(
    z: &MarketState,
    boxes: &[CommodityBox],
    policy: ExecPolicy,
) -> Result<(MarketState, ClearingPrices), BalanceError> {
    let (m, n) = z.dim();
    assert_eq!(boxes.len(), n, "need one box per commodity");
    let per_commodity = exec::try_map_collect(policy, n, |j| {
        let col: Vec<f64> = z.column(j).to_vec();
        project_balanced(&col, &boxes[j]).map_err(|e| match e {
            BalanceError::EmptyBalanceSet { .. } => BalanceError::EmptyCommodity { commodity: j },
            other => other,
        })
    })?;
    let y = Array2::from_shape_fn((m, n), |(i, j)| per_commodity[j].0[i]);
    let lambda = per_commodity.iter().map(|r| r.1).collect();
    Ok((y, ClearingPrices { lambda }))
}

/// Minimizes `<p, y>` over the balance set `{y in box : sum(y) = 0}`.
///
/// Greedy arrangement: starting from the lower corner, raise coordinates to
/// their upper bounds in order of increasing price until the balance deficit
/// is paid; the coordinate where the walk stops splits, and its price is the
/// multiplier. Ties are walked in agent order, so the lowest admissible
/// index absorbs the fractional split.
pub fn lmo_balanced(p: &[f64], bx: &CommodityBox) -> Result<LmoPoint, BalanceError> {
    assert_eq!(p.len(), bx.len(), "price/box length mismatch");
    bx.require_feasible()?;
    let m = p.len();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    let mut y = bx.lower.clone();
    let mut budget: f64 = -bx.lower.iter().sum::<f64>();
    // Feasibility dust can leave the budget slightly negative; the lower
    // corner is then the answer.
    budget = budget.max(0.0);

    // last filled / first untouched coordinate in price order, for the
    // multiplier interval.
    let mut below: Option<f64> = None;
    let mut above: Option<f64> = None;
    let mut split: Option<f64> = None;

    let mut walk = order.iter().peekable();
    while let Some(&&i) = walk.peek() {
        if budget <= 0.0 {
            break;
        }
        let cap = bx.upper[i] - bx.lower[i];
        if budget >= cap {
            y[i] = bx.upper[i];
            budget -= cap;
            // A zero-width coordinate sits at both bounds at once and puts
            // no constraint on the multiplier.
            if cap > 0.0 {
                below = Some(p[i]);
            }
            walk.next();
        } else {
            y[i] = bx.lower[i] + budget;
            split = Some(p[i]);
            walk.next();
            break;
        }
    }
    if split.is_none() {
        above = walk
            .find(|&&i| bx.upper[i] - bx.lower[i] > 0.0)
            .map(|&i| p[i]);
    }

    let (lambda, degenerate) = match split {
        Some(v) => (v, false),
        None => match (below, above) {
            (Some(a), Some(b)) if a == b => (a, false),
            (Some(a), Some(b)) => (0.5 * (a + b), true),
            (Some(a), None) => (a, true),
            (None, Some(b)) => (b, true),
            (None, None) => (0.0, true),
        },
    };
    let value = p.iter().zip(&y).map(|(pi, yi)| pi * yi).sum();
    Ok(LmoPoint {
        y,
        lambda,
        value,
        degenerate,
    })
}

/// Market-wide linear minimization: one balance problem per commodity, with
/// the multipliers collected as clearing prices and the objective summed.
pub fn lmo_market(
    p: &MarketState,
    boxes: &[CommodityBox],
    policy: ExecPolicy,
) -> Result<MarketLmo, BalanceError> {
    let (m, n) = p.dim();
    assert_eq!(boxes.len(), n, "need one box per commodity");
    let per_commodity = exec::try_map_collect(policy, n, |j| {
        let col: Vec<f64> = p.column(j).to_vec();
        lmo_balanced(&col, &boxes[j]).map_err(|e| match e {
            BalanceError::EmptyBalanceSet { .. } => BalanceError::EmptyCommodity { commodity: j },
            other => other,
        })
    })?;
    let y = Array2::from_shape_fn((m, n), |(i, j)| per_commodity[j].y[i]);
    Ok(MarketLmo {
        y,
        clearing: ClearingPrices {
            lambda: per_commodity.iter().map(|r| r.lambda).collect(),
        },
        value: per_commodity.iter().map(|r| r.value).sum(),
        degenerate: per_commodity.iter().map(|r| r.degenerate).collect(),
    })
}

// ---------------------------------------------------------------------------
// Single-commodity market equilibrium

/// One participant of the single-commodity market: an affine price function
/// on a volume segment. Traders quote `intercept + slope * x` (supply gets
/// more expensive as volume grows), buyers quote `intercept - slope * y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSide {
    pub intercept: f64,
    pub slope: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AffineSide {
    pub fn new(intercept: f64, slope: f64, lower: f64, upper: f64) -> Self {
        AffineSide {
            intercept,
            slope,
            lower,
            upper,
        }
    }
}

/// Affine single-commodity market: traders with nondecreasing price
/// functions and buyers with nonincreasing ones, each on a volume segment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffinePriceSpec {
    pub traders: Vec<AffineSide>,
    pub buyers: Vec<AffineSide>,
}

/// Clearing point of the affine single-commodity market.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium1d {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
    /// True when flat participants sitting exactly at the clearing price had
    /// freedom in their volumes; the reported volumes are the deterministic
    /// choice that starts each such participant at its lower bound and pays
    /// the balance deficit in index order.
    pub tie: bool,
}

fn validate_sides(name: &str, sides: &[AffineSide]) -> Result<(), BalanceError> {
    for (k, s) in sides.iter().enumerate() {
        if !s.intercept.is_finite() || !s.slope.is_finite() || s.slope < 0.0 {
            return Err(BalanceError::InvalidData(format!(
                "{name} {k}: price function needs a finite intercept and a nonnegative slope"
            )));
        }
        if !s.lower.is_finite() || !s.upper.is_finite() || s.lower > s.upper {
            return Err(BalanceError::InvalidData(format!(
                "{name} {k}: volume segment [{}, {}] is invalid",
                s.lower, s.upper
            )));
        }
    }
    Ok(())
}

/// Aggregate supply at price `lambda`. A trader with positive slope supplies
/// the clipped inverse of its price function; a flat trader supplies its
/// lower volume below the quote and its upper volume above. `high` picks
/// which bound a flat trader sitting exactly at its quote contributes.
fn supply_at(traders: &[AffineSide], lambda: f64, high: bool) -> f64 {
    traders
        .iter()
        .map(|t| {
            if t.slope > 0.0 {
                ((lambda - t.intercept) / t.slope).clamp(t.lower, t.upper)
            } else if lambda < t.intercept || (lambda == t.intercept && !high) {
                t.lower
            } else {
                t.upper
            }
        })
        .sum()
}

/// Aggregate demand at price `lambda`; `low` picks the smaller bound for
/// flat buyers sitting exactly at their quote.
fn demand_at(buyers: &[AffineSide], lambda: f64, low: bool) -> f64 {
    buyers
        .iter()
        .map(|b| {
            if b.slope > 0.0 {
                ((b.intercept - lambda) / b.slope).clamp(b.lower, b.upper)
            } else if lambda > b.intercept || (lambda == b.intercept && low) {
                b.lower
            } else {
                b.upper
            }
        })
        .sum()
}

/// Solves the affine single-commodity market: finds volumes and a clearing
/// price such that every trader with volume strictly inside its segment
/// quotes exactly the clearing price (boundary volumes quote on the correct
/// side), and supply balances demand.
///
/// Monotonicity of the excess `supply - demand` makes the clearing price an
/// interval `[a, b]`; both edges are found by bisection and the midpoint is
/// reported. Flat participants quoting the clearing price have free volumes;
/// they start at their lower bounds and the remaining imbalance is paid out
/// in index order, with `tie` flagging that the freedom existed.
pub fn single_commodity_equilibrium(
    spec: &AffinePriceSpec,
) -> Result<Equilibrium1d, BalanceError> {
    validate_sides("trader", &spec.traders)?;
    validate_sides("buyer", &spec.buyers)?;

    let sum = |sides: &[AffineSide], f: fn(&AffineSide) -> f64| -> f64 {
        sides.iter().map(f).sum()
    };
    let (ts_lo, ts_hi) = (sum(&spec.traders, |s| s.lower), sum(&spec.traders, |s| s.upper));
    let (bs_lo, bs_hi) = (sum(&spec.buyers, |s| s.lower), sum(&spec.buyers, |s| s.upper));
    if ts_lo > bs_hi || bs_lo > ts_hi {
        return Err(BalanceError::InfeasibleMarket(format!(
            "supply range [{ts_lo}, {ts_hi}] and demand range [{bs_lo}, {bs_hi}] do not overlap"
        )));
    }

    // Bracket the clearing interval by every price either side can quote.
    let mut lo0 = f64::INFINITY;
    let mut hi0 = f64::NEG_INFINITY;
    for t in &spec.traders {
        lo0 = lo0.min(t.intercept + t.slope * t.lower);
        hi0 = hi0.max(t.intercept + t.slope * t.upper);
    }
    for b in &spec.buyers {
        lo0 = lo0.min(b.intercept - b.slope * b.upper);
        hi0 = hi0.max(b.intercept - b.slope * b.lower);
    }
    if !lo0.is_finite() {
        lo0 = 0.0;
        hi0 = 0.0;
    }
    lo0 -= 1.0;
    hi0 += 1.0;

    let excess_hi = |l: f64| supply_at(&spec.traders, l, true) - demand_at(&spec.buyers, l, true);
    let excess_lo = |l: f64| supply_at(&spec.traders, l, false) - demand_at(&spec.buyers, l, false);

    // a = smallest price with nonnegative optimistic excess.
    let a = if excess_hi(lo0) >= 0.0 {
        lo0
    } else {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if excess_hi(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    // b = largest price with nonpositive pessimistic excess.
    let b = if excess_lo(hi0) <= 0.0 {
        hi0
    } else {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if excess_lo(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    // The two bisections approach the same crossing from different
    // predicates and can settle on adjacent floats, so the interval is only
    // trusted up to rounding.
    let collapse_tol = 1e-9 * (1.0 + a.abs().max(b.abs()));
    if a > b + collapse_tol {
        return Err(BalanceError::InfeasibleMarket(format!(
            "clearing interval collapsed ({a} > {b})"
        )));
    }
    let lambda = 0.5 * (a + b);

    // Volumes at the clearing price; flat participants quoting lambda (up to
    // the same rounding slack) are free and start at their lower bounds.
    let flex_tol = 1e-9 * (1.0 + lambda.abs());
    let mut x = Vec::with_capacity(spec.traders.len());
    let mut flex_traders = Vec::new();
    for (i, t) in spec.traders.iter().enumerate() {
        if t.slope > 0.0 {
            x.push(((lambda - t.intercept) / t.slope).clamp(t.lower, t.upper));
        } else if (lambda - t.intercept).abs() <= flex_tol {
            x.push(t.lower);
            flex_traders.push(i);
        } else {
            x.push(if lambda < t.intercept { t.lower } else { t.upper });
        }
    }
    let mut y = Vec::with_capacity(spec.buyers.len());
    let mut flex_buyers = Vec::new();
    for (j, b) in spec.buyers.iter().enumerate() {
        if b.slope > 0.0 {
            y.push(((b.intercept - lambda) / b.slope).clamp(b.lower, b.upper));
        } else if (lambda - b.intercept).abs() <= flex_tol {
            y.push(b.lower);
            flex_buyers.push(j);
        } else {
            y.push(if lambda > b.intercept { b.lower } else { b.upper });
        }
    }

    let tie = flex_traders
        .iter()
        .any(|&i| spec.traders[i].upper > spec.traders[i].lower)
        || flex_buyers
            .iter()
            .any(|&j| spec.buyers[j].upper > spec.buyers[j].lower);

    // Pay out the remaining imbalance in index order on whichever side is
    // short; the clearing interval guarantees the flexible capacity covers
    // it (up to bisection dust).
    let mut residual = y.iter().sum::<f64>() - x.iter().sum::<f64>();
    if residual > 0.0 {
        for &i in &flex_traders {
            if residual <= 0.0 {
                break;
            }
            let room = spec.traders[i].upper - spec.traders[i].lower;
            let add = residual.min(room);
            x[i] += add;
            residual -= add;
        }
    } else if residual < 0.0 {
        let mut need = -residual;
        for &j in &flex_buyers {
            if need <= 0.0 {
                break;
            }
            let room = spec.buyers[j].upper - spec.buyers[j].lower;
            let add = need.min(room);
            y[j] += add;
            need -= add;
        }
    }

    Ok(Equilibrium1d { x, y, lambda, tie })
}

/// Per-participant violations of a claimed single-commodity equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumCheck {
    pub max_violation: f64,
    pub trader_violations: Vec<f64>,
    pub buyer_violations: Vec<f64>,
}

/// Checks a claimed equilibrium against externally supplied price
/// evaluations: `g_values[i]` is trader `i`'s price at `x[i]`, `h_values[j]`
/// buyer `j`'s at `y[j]`. Volumes must be feasible to within `eps` (inside
/// their segments, supply balancing demand); the per-participant violation
/// is the residual of the branch its volume selects, with points within
/// `eps` of a bound allowed the one-sided branch.
#[allow(clippy::too_many_arguments)]
pub fn check_single_equilibrium(
    x: &[f64],
    y: &[f64],
    lambda: f64,
    g_values: &[f64],
    h_values: &[f64],
    trader_bounds: &[(f64, f64)],
    buyer_bounds: &[(f64, f64)],
    eps: f64,
) -> Result<EquilibriumCheck, BalanceError> {
    if x.len() != g_values.len() || x.len() != trader_bounds.len() {
        return Err(BalanceError::InvalidData(
            "trader volumes, prices, and bounds must have equal lengths".into(),
        ));
    }
    if y.len() != h_values.len() || y.len() != buyer_bounds.len() {
        return Err(BalanceError::InvalidData(
            "buyer volumes, prices, and bounds must have equal lengths".into(),
        ));
    }
    for (i, &xi) in x.iter().enumerate() {
        let (lo, hi) = trader_bounds[i];
        if xi < lo - eps || xi > hi + eps {
            return Err(BalanceError::InfeasiblePoint(format!(
                "trader {i} volume {xi} outside [{lo}, {hi}]"
            )));
        }
    }
    for (j, &yj) in y.iter().enumerate() {
        let (lo, hi) = buyer_bounds[j];
        if yj < lo - eps || yj > hi + eps {
            return Err(BalanceError::InfeasiblePoint(format!(
                "buyer {j} volume {yj} outside [{lo}, {hi}]"
            )));
        }
    }
    let imbalance = (x.iter().sum::<f64>() - y.iter().sum::<f64>()).abs();
    if imbalance > eps {
        return Err(BalanceError::InfeasiblePoint(format!(
            "supply and demand differ by {imbalance}"
        )));
    }

    // Branch residual: a volume near a bound may use that bound's one-sided
    // condition; the equality branch is always available and dominates for
    // interior volumes.
    let branch = |v: f64, price: f64, lo: f64, hi: f64, skew: f64| -> f64 {
        let mut best = (price - lambda).abs();
        if (v - lo).abs() <= eps {
            best = best.min((skew * (lambda - price)).max(0.0));
        }
        if (v - hi).abs() <= eps {
            best = best.min((skew * (price - lambda)).max(0.0));
        }
        best
    };

    let trader_violations: Vec<f64> = x
        .iter()
        .zip(g_values)
        .zip(trader_bounds)
        .map(|((&xi, &gi), &(lo, hi))| branch(xi, gi, lo, hi, 1.0))
        .collect();
    let buyer_violations: Vec<f64> = y
        .iter()
        .zip(h_values)
        .zip(buyer_bounds)
        .map(|((&yj, &hj), &(lo, hi))| branch(yj, hj, lo, hi, -1.0))
        .collect();

    let max_violation = trader_violations
        .iter()
        .chain(&buyer_violations)
        .fold(0.0f64, |acc, &v| acc.max(v));
    Ok(EquilibriumCheck {
        max_violation,
        trader_violations,
        buyer_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(lower: Vec<f64>, upper: Vec<f64>) -> CommodityBox {
        CommodityBox::new(lower, upper).unwrap()
    }

    #[test]
    fn projection_matches_worked_example() {
        let (y, lambda) = project_balanced(&[3.0, 0.0, -1.0], &bx(vec![-2.0; 3], vec![2.0; 3])).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[2], -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn projection_fixes_balanced_interior_points() {
        let (y, lambda) = project_balanced(&[1.0, -1.0], &bx(vec![-2.0; 2], vec![2.0; 2])).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
        assert_abs_diff_eq!(lambda, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_satisfies_kkt_clip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = rng.gen_range(1..8);
            let lower: Vec<f64> = (0..m).map(|_| -rng.gen::<f64>() * 2.0).collect();
            let upper: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 2.0).collect();
            let z: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let b = bx(lower, upper);
            let (y, lambda) = project_balanced(&z, &b).unwrap();
            let scale = z.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            assert!(y.iter().sum::<f64>().abs() <= 1e-10 * scale);
            for i in 0..m {
                let clip = (z[i] - lambda).clamp(b.lower[i], b.upper[i]);
                assert_abs_diff_eq!(y[i], clip, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projection_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = bx(vec![-1.5, -0.5, -2.0, -1.0], vec![0.5, 1.0, 2.0, 0.25]);
        for _ in 0..1000 {
            let z1: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect();
            let z2: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect();
            let (y1, _) = project_balanced(&z1, &b).unwrap();
            let (y2, _) = project_balanced(&z2, &b).unwrap();
            let dy: f64 = y1.iter().zip(&y2).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let dz: f64 = z1.iter().zip(&z2).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            assert!(dy <= dz + 1e-12, "expansion: {dy} > {dz}");
        }
    }

    #[test]
    fn projection_rejects_empty_balance_set() {
        let err = project_balanced(&[0.0, 0.0], &bx(vec![1.0, 1.0], vec![2.0, 2.0])).unwrap_err();
        assert!(matches!(err, BalanceError::EmptyBalanceSet { .. }));
    }

    #[test]
    fn market_projection_is_columnwise() {
        let z = array![[3.0, 1.0], [0.0, -1.0], [-1.0, 0.0]];
        let boxes = vec![bx(vec![-2.0; 3], vec![2.0; 3]), bx(vec![-2.0; 3], vec![2.0; 3])];
        let (y, prices) = project_market(&z, &boxes, ExecPolicy::Sequential).unwrap();
        assert_abs_diff_eq!(y[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prices.lambda[0], 0.5, epsilon = 1e-12);
        // Second column is already balanced and interior.
        assert_abs_diff_eq!(y[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prices.lambda[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn market_projection_permutes_with_columns() {
        let z = array![[3.0, 1.0], [0.0, -1.0], [-1.0, 0.0]];
        let boxes = vec![
            bx(vec![-2.0; 3], vec![2.0; 3]),
            bx(vec![-1.0; 3], vec![1.0; 3]),
        ];
        let swapped = array![[1.0, 3.0], [-1.0, 0.0], [0.0, -1.0]];
        let boxes_swapped = vec![boxes[1].clone(), boxes[0].clone()];
        let (y, _) = project_market(&z, &boxes, ExecPolicy::Sequential).unwrap();
        let (ys, _) = project_market(&swapped, &boxes_swapped, ExecPolicy::Sequential).unwrap();
        for i in 0..3 {
            assert_eq!(y[(i, 0)], ys[(i, 1)]);
            assert_eq!(y[(i, 1)], ys[(i, 0)]);
        }
    }

    #[test]
    fn lmo_matches_worked_example() {
        let r = lmo_balanced(&[1.0, 2.0, 3.0], &bx(vec![-1.0; 3], vec![1.0; 3])).unwrap();
        assert_eq!(r.y, vec![1.0, 0.0, -1.0]);
        assert_eq!(r.lambda, 2.0);
        assert_eq!(r.value, -2.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn lmo_constant_prices_fill_lowest_indices_first() {
        let r = lmo_balanced(&[4.0; 4], &bx(vec![-1.0; 4], vec![1.0; 4])).unwrap();
        assert_eq!(r.y, vec![1.0, 1.0, -1.0, -1.0]);
        assert_abs_diff_eq!(r.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lmo_two_agent_forced_trade() {
        let r = lmo_balanced(&[1.0, 5.0], &bx(vec![0.0, -4.0], vec![4.0, 0.0])).unwrap();
        assert_eq!(r.y, vec![4.0, -4.0]);
        assert_eq!(r.value, -16.0);
        assert!(r.degenerate);
        assert_eq!(r.lambda, 3.0);
    }

    #[test]
    fn lmo_beats_every_feasible_point_via_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let m = rng.gen_range(2..6);
            let lower: Vec<f64> = (0..m).map(|_| -1.0 - rng.gen::<f64>()).collect();
            let upper: Vec<f64> = (0..m).map(|_| 1.0 + rng.gen::<f64>()).collect();
            let p: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let b = bx(lower, upper);
            let r = lmo_balanced(&p, &b).unwrap();
            // Optimality certificate: p_i > lambda at lower, p_i < lambda at
            // upper, equality where split.
            for i in 0..m {
                let reduced = p[i] - r.lambda;
                if reduced > 1e-12 {
                    assert_eq!(r.y[i], b.lower[i], "positive reduced cost off lower bound");
                }
                if reduced < -1e-12 {
                    assert_eq!(r.y[i], b.upper[i], "negative reduced cost off upper bound");
                }
            }
            assert!(r.y.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn market_lmo_sums_commodity_values() {
        let p = array![[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]];
        let boxes = vec![bx(vec![-1.0; 3], vec![1.0; 3]), bx(vec![-1.0; 3], vec![1.0; 3])];
        let r = lmo_market(&p, &boxes, ExecPolicy::Sequential).unwrap();
        assert_eq!(r.value, -2.0);
        assert_eq!(r.clearing.lambda.len(), 2);
        assert!(!r.degenerate[0]);
    }

    #[test]
    fn equilibrium_affine_closed_form() {
        let spec = AffinePriceSpec {
            traders: vec![AffineSide::new(1.0, 1.0, 0.0, 10.0)],
            buyers: vec![AffineSide::new(7.0, 2.0, 0.0, 10.0)],
        };
        let eq = single_commodity_equilibrium(&spec).unwrap();
        assert_abs_diff_eq!(eq.lambda, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(eq.x[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(eq.y[0], 2.0, epsilon = 1e-9);
        assert!(!eq.tie);
    }

    #[test]
    fn equilibrium_flat_overlap_reports_tie() {
        let spec = AffinePriceSpec {
            traders: vec![AffineSide::new(5.0, 0.0, 0.0, 10.0)],
            buyers: vec![AffineSide::new(5.0, 0.0, 0.0, 10.0)],
        };
        let eq = single_commodity_equilibrium(&spec).unwrap();
        assert_eq!(eq.lambda, 5.0);
        assert_eq!(eq.x, vec![0.0]);
        assert_eq!(eq.y, vec![0.0]);
        assert!(eq.tie);
    }

    #[test]
    fn equilibrium_no_trade_midpoint_price() {
        let spec = AffinePriceSpec {
            traders: vec![AffineSide::new(6.0, 0.0, 0.0, 10.0)],
            buyers: vec![AffineSide::new(4.0, 0.0, 0.0, 10.0)],
        };
        let eq = single_commodity_equilibrium(&spec).unwrap();
        assert_eq!(eq.x, vec![0.0]);
        assert_eq!(eq.y, vec![0.0]);
        assert_abs_diff_eq!(eq.lambda, 5.0, epsilon = 1e-9);
        assert!(!eq.tie);
    }

    #[test]
    fn equilibrium_rejects_disjoint_volume_ranges() {
        let spec = AffinePriceSpec {
            traders: vec![AffineSide::new(1.0, 1.0, 5.0, 10.0)],
            buyers: vec![AffineSide::new(7.0, 2.0, 0.0, 1.0)],
        };
        assert!(matches!(
            single_commodity_equilibrium(&spec),
            Err(BalanceError::InfeasibleMarket(_))
        ));
    }

    #[test]
    fn checker_accepts_closed_form_solution() {
        let report = check_single_equilibrium(
            &[2.0],
            &[2.0],
            3.0,
            &[3.0],
            &[3.0],
            &[(0.0, 10.0)],
            &[(0.0, 10.0)],
            1e-9,
        )
        .unwrap();
        assert_eq!(report.max_violation, 0.0);
    }

    #[test]
    fn checker_measures_interior_price_gap() {
        let report = check_single_equilibrium(
            &[2.0],
            &[2.0],
            3.1,
            &[3.0],
            &[3.0],
            &[(0.0, 10.0)],
            &[(0.0, 10.0)],
            1e-9,
        )
        .unwrap();
        assert_abs_diff_eq!(report.max_violation, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn checker_accepts_boundary_branches() {
        // Everyone at the lower bound 0, clearing price below every trader
        // quote and above every buyer quote.
        let report = check_single_equilibrium(
            &[0.0, 0.0],
            &[0.0],
            5.0,
            &[6.0, 7.5],
            &[4.0],
            &[(0.0, 10.0), (0.0, 3.0)],
            &[(0.0, 10.0)],
            1e-9,
        )
        .unwrap();
        assert_eq!(report.max_violation, 0.0);
    }

    #[test]
    fn checker_rejects_unbalanced_volumes() {
        let err = check_single_equilibrium(
            &[2.0],
            &[1.0],
            3.0,
            &[3.0],
            &[3.0],
            &[(0.0, 10.0)],
            &[(0.0, 10.0)],
            1e-9,
        )
        .unwrap_err();
        assert!(matches!(err, BalanceError::InfeasiblePoint(_)));
    }

    #[test]
    fn solver_output_passes_checker_on_random_markets() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let nt = rng.gen_range(1..4);
            let nb = rng.gen_range(1..4);
            let side = |rng: &mut ChaCha8Rng| {
                let lo = rng.gen::<f64>() * 2.0;
                AffineSide::new(
                    rng.gen::<f64>() * 6.0,
                    if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() * 2.0 },
                    lo,
                    lo + rng.gen::<f64>() * 4.0,
                )
            };
            let spec = AffinePriceSpec {
                traders: (0..nt).map(|_| side(&mut rng)).collect(),
                buyers: (0..nb).map(|_| side(&mut rng)).collect(),
            };
            let tlo: f64 = spec.traders.iter().map(|s| s.lower).sum();
            let thi: f64 = spec.traders.iter().map(|s| s.upper).sum();
            let blo: f64 = spec.buyers.iter().map(|s| s.lower).sum();
            let bhi: f64 = spec.buyers.iter().map(|s| s.upper).sum();
            if tlo > bhi || blo > thi {
                continue;
            }
            let eq = single_commodity_equilibrium(&spec).unwrap();
            let g: Vec<f64> = spec
                .traders
                .iter()
                .zip(&eq.x)
                .map(|(s, &v)| s.intercept + s.slope * v)
                .collect();
            let h: Vec<f64> = spec
                .buyers
                .iter()
                .zip(&eq.y)
                .map(|(s, &v)| s.intercept - s.slope * v)
                .collect();
            let tb: Vec<(f64, f64)> = spec.traders.iter().map(|s| (s.lower, s.upper)).collect();
            let bb: Vec<(f64, f64)> = spec.buyers.iter().map(|s| (s.lower, s.upper)).collect();
            let report =
                check_single_equilibrium(&eq.x, &eq.y, eq.lambda, &g, &h, &tb, &bb, 1e-8).unwrap();
            assert!(
                report.max_violation <= 1e-8,
                "violation {} for {:?}",
                report.max_violation,
                spec
            );
        }
    }
}
