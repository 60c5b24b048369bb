//! Iterative solvers for the market equilibrium problem: a subgradient
//! projection method over the stationary balance set, a combined relaxation
//! method with geometric gap stages for moving windows, and an experimental
//! fixed-point iteration on the moving sets themselves.

use crate::balance::{self, BalanceError, ClearingPrices, CommodityBox};
use crate::exec::ExecPolicy;
use crate::model::{
    is_balanced_feasible, validate_assumptions, AssumptionMode, MarketState, ModelError, Scenario,
    FEASIBILITY_TOL,
};
use crate::pricing::{self, PricePolytope, PricingError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    /// The scenario fails a structural assumption the method needs.
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),
    /// An iterate or evaluation stopped being finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_theta0() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    200_000
}
fn default_target_gap() -> f64 {
    1e-4
}

/// Subgradient projection settings. The step sequence is
/// `theta_k = theta0 / (k + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgpConfig {
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_target_gap")]
    pub target_gap: f64,
}

impl Default for SgpConfig {
    fn default() -> Self {
        Self {
            theta0: default_theta0(),
            max_iter: default_max_iter(),
            target_gap: default_target_gap(),
        }
    }
}

impl SgpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.theta0.is_finite() || self.theta0 <= 0.0 {
            return Err(format!("theta0 must be finite and positive, got {}", self.theta0));
        }
        if self.max_iter == 0 {
            return Err("max_iter must be at least 1".into());
        }
        if !self.target_gap.is_finite() || self.target_gap <= 0.0 {
            return Err(format!(
                "target_gap must be finite and positive, got {}",
                self.target_gap
            ));
        }
        Ok(())
    }
}

fn default_beta() -> f64 {
    0.5
}
fn default_delta0() -> f64 {
    1.0
}
fn default_delta_decay() -> f64 {
    0.5
}
fn default_tau0() -> f64 {
    0.5
}
fn default_tau_decay() -> f64 {
    0.5
}
fn default_delta_min() -> f64 {
    1e-5
}
fn default_stage_cap() -> usize {
    64
}
fn default_iter_cap() -> usize {
    100_000
}

/// Combined relaxation settings. Stage s uses the gap threshold
/// `delta_s = delta0 * delta_decay^s` (s = 1, 2, ...); within a stage the
/// step starts at `tau0`, doubles on accepted steps up to the current rung
/// `tau0 * tau_decay^l`, and the rung drops one level each time the descent
/// test fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcgmConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default = "default_delta_decay")]
    pub delta_decay: f64,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_tau_decay")]
    pub tau_decay: f64,
    #[serde(default = "default_delta_min")]
    pub delta_min: f64,
    #[serde(default = "default_stage_cap")]
    pub stage_cap: usize,
    #[serde(default = "default_iter_cap")]
    pub iter_cap: usize,
}

impl Default for PcgmConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            delta0: default_delta0(),
            delta_decay: default_delta_decay(),
            tau0: default_tau0(),
            tau_decay: default_tau_decay(),
            delta_min: default_delta_min(),
            stage_cap: default_stage_cap(),
            iter_cap: default_iter_cap(),
        }
    }
}

impl PcgmConfig {
    pub fn validate(&self) -> Result<(), String> {
        let open_unit = |name: &str, v: f64| -> Result<(), String> {
            if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                Err(format!("{name} must lie strictly between 0 and 1, got {v}"))
            } else {
                Ok(())
            }
        };
        open_unit("beta", self.beta)?;
        open_unit("delta_decay", self.delta_decay)?;
        open_unit("tau0", self.tau0)?;
        open_unit("tau_decay", self.tau_decay)?;
        if !self.delta0.is_finite() || self.delta0 <= 0.0 {
            return Err(format!("delta0 must be finite and positive, got {}", self.delta0));
        }
        if !self.delta_min.is_finite() || self.delta_min <= 0.0 {
            return Err(format!(
                "delta_min must be finite and positive, got {}",
                self.delta_min
            ));
        }
        if self.stage_cap == 0 {
            return Err("stage_cap must be at least 1".into());
        }
        if self.iter_cap == 0 {
            return Err("iter_cap must be at least 1".into());
        }
        Ok(())
    }

    fn tau_rung(&self, l: usize) -> f64 {
        self.tau0 * self.tau_decay.powi(l as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgp,
    Pcgm,
    Fpi,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgp => "sgp",
            Method::Pcgm => "pcgm",
            Method::Fpi => "fpi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// The method reached its own stopping criterion.
    Converged,
    /// SGP/FPI ran out of iterations before the gap target.
    MaxIterReached,
    /// PCGM ran out of stages before `delta_min`.
    StageCapExceeded,
    /// A PCGM stage ran out of inner iterations before restarting.
    IterCapReached,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterReached => "max_iter_reached",
            SolveStatus::StageCapExceeded => "stage_cap_exceeded",
            SolveStatus::IterCapReached => "iter_cap_reached",
        }
    }
}

/// One trace row. SGP/FPI rows use stage 0 and l 0; PCGM rows carry the
/// 1-based stage, the in-stage iteration, and the step rung index l.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub stage: usize,
    pub iter: usize,
    pub l: usize,
    /// Objective value at the iterate the row describes.
    pub objective: f64,
    /// Stationary gap `<p(x), x - y>` over the active balance set.
    pub gap: f64,
    /// Step length in force at this iterate.
    pub theta: f64,
    /// For PCGM, whether the descent test passed on the step taken from this
    /// iterate. SGP/FPI rows always record true.
    pub accepted: bool,
    /// True on PCGM rows that close a stage.
    pub restart: bool,
}

/// A PCGM stage transition: the state that certified `gap < delta` for its
/// stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartPoint {
    pub stage: usize,
    pub delta: f64,
    pub gap: f64,
    pub state: MarketState,
}

/// Full account of a solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub method: Method,
    pub status: SolveStatus,
    pub records: Vec<TraceRecord>,
    pub final_state: MarketState,
    /// Clearing price estimates per commodity. For SGP/FPI these are the
    /// balance multipliers of the final projection step rescaled by
    /// `-1/theta_k` into price units; when no step was taken (or for PCGM)
    /// they come from the final linear-minimization multipliers.
    pub clearing: ClearingPrices,
    /// Per-commodity flags from the final linear minimization: true when the
    /// multiplier was only determined up to an interval.
    pub lambda_degenerate: Vec<bool>,
    pub final_objective: f64,
    pub final_gap: f64,
    /// Steps actually taken (trace rows can exceed this by the per-stage
    /// book-keeping rows).
    pub iterations: usize,
    /// Stages opened; 1 for the single-stage methods.
    pub stages: usize,
    pub restarts: Vec<RestartPoint>,
    /// True for methods without a convergence guarantee.
    pub experimental: bool,
    /// Largest column-sum imbalance over all visited iterates.
    pub max_balance_violation: f64,
    /// Largest global-box violation over all visited iterates.
    pub max_box_violation: f64,
    /// False if any iterate left its own feasible window by more than the
    /// feasibility tolerance.
    pub containment_ok: bool,
}

impl ConvergenceTrace {
    /// Serializes the per-iteration records as CSV with a fixed header.
    /// Floats carry 17 significant digits so the trace round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,iter,l,objective,gap,theta,accepted,restart\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{:.16e},{},{}",
                r.stage, r.iter, r.l, r.objective, r.gap, r.theta, r.accepted, r.restart
            );
        }
        out
    }
}

/// Stationary gap of `x` for its scenario: `g = <p(x), x - y>` where `p(x)`
/// stacks each agent's price (per its own pricing mode) and `y` minimizes
/// `<p(x), .>` over the moving balance set at `x`. Nonnegative on feasible
/// points, zero exactly at solutions. Also returns the minimizer `y`.
pub fn gap(
    x: &MarketState,
    scenario: &Scenario,
    policy: ExecPolicy,
) -> Result<(f64, MarketState), SolverError> {
    let polys = pricing::build_polytopes(scenario)?;
    let p = pricing::price_matrix(x, scenario, &polys, policy)?;
    let boxes = scenario.moving_boxes(x)?;
    let lmo = balance::lmo_market(&p, &boxes, policy)?;
    Ok((frob_dot(&p, x) - lmo.value, lmo.y))
}

pub(crate) fn frob_dot(a: &MarketState, b: &MarketState) -> f64 {
    (a * b).sum()
}

fn require_assumptions(scenario: &Scenario, mode: AssumptionMode) -> Result<(), SolverError> {
    let report = validate_assumptions(scenario, mode);
    match report.findings.first() {
        None => Ok(()),
        Some(f) => Err(SolverError::AssumptionViolation(f.to_string())),
    }
}

fn ensure_finite(x: &MarketState, what: &str) -> Result<(), SolverError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::Numerical(format!("{what} has non-finite entries")))
    }
}

fn ensure_finite_scalar(v: f64, what: &str) -> Result<(), SolverError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SolverError::Numerical(format!("{what} is non-finite ({v})")))
    }
}

/// Running feasibility account over all iterates a solver visits.
struct FeasibilityStats {
    max_balance: f64,
    max_box: f64,
    containment_ok: bool,
}

impl FeasibilityStats {
    fn new() -> Self {
        Self {
            max_balance: 0.0,
            max_box: 0.0,
            containment_ok: true,
        }
    }

    /// `global` is the stationary box family, `active` the balance-set boxes
    /// the current step actually uses (the same family for stationary runs).
    fn observe(&mut self, x: &MarketState, global: &[CommodityBox], active: &[CommodityBox]) {
        for j in 0..x.ncols() {
            let col: Vec<f64> = x.column(j).to_vec();
            self.max_balance = self.max_balance.max(col.iter().sum::<f64>().abs());
            self.max_box = self.max_box.max(global[j].violation(&col));
            if active[j].violation(&col) > FEASIBILITY_TOL {
                self.containment_ok = false;
            }
        }
    }
}

/// Price oracle a projection-type method iterates against.
enum Oracle<'a> {
    /// Set-valued LP pricing: value is the support function, gradient a
    /// chosen maximizing vertex.
    Support(&'a [PricePolytope]),
    /// Regularized pricing: value is the smoothed objective, gradient the
    /// unique regularized price.
    Smoothed(&'a [PricePolytope]),
}

impl Oracle<'_> {
    fn eval(
        &self,
        x: &MarketState,
        scenario: &Scenario,
        policy: ExecPolicy,
    ) -> Result<(f64, MarketState), PricingError> {
        match self {
            Oracle::Support(polys) => pricing::market_mu(x, scenario, polys, policy),
            Oracle::Smoothed(polys) => pricing::market_eta(x, scenario, polys, policy),
        }
    }
}

fn initial_state(
    scenario: &Scenario,
    x0: Option<&MarketState>,
    global: &[CommodityBox],
    policy: ExecPolicy,
) -> Result<MarketState, SolverError> {
    let mut x = match x0 {
        Some(x0) => {
            assert_eq!(x0.dim(), scenario.dims(), "initial state shape mismatch");
            x0.clone()
        }
        None => scenario.zero_state(),
    };
    ensure_finite(&x, "initial state")?;
    if !is_balanced_feasible(&x, &scenario.bounds(), FEASIBILITY_TOL) {
        x = balance::project_market(&x, global, policy)?.0;
    }
    Ok(x)
}

/// Shared core of the projection-type methods: repeat
/// `x <- project(x - theta_k p(x))` with `theta_k = theta0 / (k + 1)`,
/// projecting onto the stationary balance set or onto the moving one at the
/// current iterate.
fn run_projection_method(
    scenario: &Scenario,
    config: &SgpConfig,
    x0: Option<&MarketState>,
    policy: ExecPolicy,
    oracle: &Oracle<'_>,
    moving: bool,
    method: Method,
) -> Result<ConvergenceTrace, SolverError> {
    config
        .validate()
        .map_err(SolverError::AssumptionViolation)?;
    let global = scenario.stationary_boxes();
    let mut x = initial_state(scenario, x0, &global, policy)?;
    let mut stats = FeasibilityStats::new();
    let mut records: Vec<TraceRecord> = Vec::new();

    let mut last_step: Option<(ClearingPrices, f64)> = None;
    let mut k = 0usize;
    let status;
    let last_lmo;
    let final_objective;
    let final_gap;
    loop {
        let moving_storage;
        let boxes: &[CommodityBox] = if moving {
            moving_storage = scenario.moving_boxes(&x)?;
            &moving_storage
        } else {
            &global
        };
        stats.observe(&x, &global, boxes);

        let (objective, p) = oracle.eval(&x, scenario, policy)?;
        ensure_finite_scalar(objective, "objective")?;
        ensure_finite(&p, "price matrix")?;
        let lmo = balance::lmo_market(&p, boxes, policy)?;
        let g = frob_dot(&p, &x) - lmo.value;
        ensure_finite_scalar(g, "gap")?;
        let theta = config.theta0 / (k as f64 + 1.0);
        records.push(TraceRecord {
            stage: 0,
            iter: k,
            l: 0,
            objective,
            gap: g,
            theta,
            accepted: true,
            restart: false,
        });

        if g <= config.target_gap {
            status = SolveStatus::Converged;
            last_lmo = lmo;
            final_objective = objective;
            final_gap = g;
            break;
        }
        if k == config.max_iter {
            status = SolveStatus::MaxIterReached;
            last_lmo = lmo;
            final_objective = objective;
            final_gap = g;
            break;
        }

        let z = &x - &p.mapv(|v| v * theta);
        let (next, multipliers) = balance::project_market(&z, boxes, policy)?;
        x = next;
        ensure_finite(&x, "iterate")?;
        last_step = Some((multipliers, theta));
        k += 1;
    }

    // A projection step's balance multiplier sits in `-theta * price` units;
    // rescaled it is the clearing price estimate the step certifies. With no
    // step taken the linear-minimization multipliers are the only source.
    let clearing = match &last_step {
        Some((multipliers, theta)) => ClearingPrices {
            lambda: multipliers.lambda.iter().map(|&l| -l / theta).collect(),
        },
        None => last_lmo.clearing.clone(),
    };

    Ok(ConvergenceTrace {
        method,
        status,
        records,
        final_state: x,
        clearing,
        lambda_degenerate: last_lmo.degenerate,
        final_objective,
        final_gap,
        iterations: k,
        stages: 1,
        restarts: Vec::new(),
        experimental: method == Method::Fpi,
        max_balance_violation: stats.max_balance,
        max_box_violation: stats.max_box,
        containment_ok: stats.containment_ok,
    })
}

/// Subgradient projection method on the stationary balance set. Requires
/// set-valued LP pricing and stationary windows (infinite radii). Stops when
/// the stationary gap drops to `target_gap` or after `max_iter` steps.
pub fn solve_sgp(
    scenario: &Scenario,
    config: &SgpConfig,
    x0: Option<&MarketState>,
    policy: ExecPolicy,
) -> Result<ConvergenceTrace, SolverError> {
    require_assumptions(scenario, AssumptionMode::B)?;
    let polys = pricing::build_polytopes(scenario)?;
    run_projection_method(
        scenario,
        config,
        x0,
        policy,
        &Oracle::Support(&polys),
        false,
        Method::Sgp,
    )
}

/// Fixed-point iteration that projects onto the moving balance set at the
/// current iterate. No convergence guarantee is known; the trace is flagged
/// experimental. With infinite radii the iterates coincide with the
/// stationary projection method's, bit for bit. Requires regularized
/// pricing.
pub fn solve_fpi(
    scenario: &Scenario,
    config: &SgpConfig,
    x0: Option<&MarketState>,
    policy: ExecPolicy,
) -> Result<ConvergenceTrace, SolverError> {
    require_assumptions(scenario, AssumptionMode::C)?;
    let polys = pricing::build_polytopes(scenario)?;
    run_projection_method(
        scenario,
        config,
        x0,
        policy,
        &Oracle::Smoothed(&polys),
        true,
        Method::Fpi,
    )
}

/// Combined relaxation method for regularized pricing over moving windows.
///
/// Stage s keeps the gap threshold `delta_s`; each inner iteration takes the
/// conditional-gradient direction `d = y - x` over the moving set and the
/// step `theta` that doubles on accepted descent tests and drops a rung on
/// failures. When the gap falls below `delta_s` the stage closes at the
/// current iterate and the next stage halves the threshold, until
/// `delta_s <= delta_min`.
pub fn solve_pcgm(
    scenario: &Scenario,
    config: &PcgmConfig,
    x0: Option<&MarketState>,
    policy: ExecPolicy,
) -> Result<ConvergenceTrace, SolverError> {
    require_assumptions(scenario, AssumptionMode::C)?;
    config
        .validate()
        .map_err(SolverError::AssumptionViolation)?;
    let polys = pricing::build_polytopes(scenario)?;
    let global = scenario.stationary_boxes();
    let mut x = initial_state(scenario, x0, &global, policy)?;
    let mut stats = FeasibilityStats::new();
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut restarts: Vec<RestartPoint> = Vec::new();

    let mut stage = 1usize;
    let mut delta = config.delta0 * config.delta_decay;
    let mut theta = config.tau0;
    let mut l = 0usize;
    let mut iter_in_stage = 0usize;
    let mut total_steps = 0usize;

    let (mut objective, mut p) = pricing::market_eta(&x, scenario, &polys, policy)?;
    ensure_finite_scalar(objective, "objective")?;
    ensure_finite(&p, "price matrix")?;

    let status;
    let last_lmo;
    let final_gap;
    loop {
        let boxes = scenario.moving_boxes(&x)?;
        stats.observe(&x, &global, &boxes);
        let lmo = balance::lmo_market(&p, &boxes, policy)?;
        let g = frob_dot(&p, &x) - lmo.value;
        ensure_finite_scalar(g, "gap")?;

        if g < delta {
            // Stage closes: the gap certificate holds at this iterate.
            records.push(TraceRecord {
                stage,
                iter: iter_in_stage,
                l,
                objective,
                gap: g,
                theta,
                accepted: false,
                restart: true,
            });
            restarts.push(RestartPoint {
                stage,
                delta,
                gap: g,
                state: x.clone(),
            });
            if delta <= config.delta_min {
                status = SolveStatus::Converged;
                last_lmo = lmo;
                final_gap = g;
                break;
            }
            if stage == config.stage_cap {
                status = SolveStatus::StageCapExceeded;
                last_lmo = lmo;
                final_gap = g;
                break;
            }
            stage += 1;
            delta *= config.delta_decay;
            theta = config.tau0;
            l = 0;
            iter_in_stage = 0;
            continue;
        }

        if iter_in_stage >= config.iter_cap {
            records.push(TraceRecord {
                stage,
                iter: iter_in_stage,
                l,
                objective,
                gap: g,
                theta,
                accepted: false,
                restart: false,
            });
            status = SolveStatus::IterCapReached;
            last_lmo = lmo;
            final_gap = g;
            break;
        }

        let d = &lmo.y - &x;
        let next = &x + &d.mapv(|v| v * theta);
        let (next_objective, next_p) = pricing::market_eta(&next, scenario, &polys, policy)?;
        ensure_finite_scalar(next_objective, "objective")?;
        ensure_finite(&next_p, "price matrix")?;

        let accepted = frob_dot(&next_p, &d) <= config.beta * frob_dot(&p, &d);
        records.push(TraceRecord {
            stage,
            iter: iter_in_stage,
            l,
            objective,
            gap: g,
            theta,
            accepted,
            restart: false,
        });

        if accepted {
            theta = (2.0 * theta).min(config.tau_rung(l));
        } else {
            l += 1;
            theta = theta.min(config.tau_rung(l));
        }
        x = next;
        ensure_finite(&x, "iterate")?;
        objective = next_objective;
        p = next_p;
        iter_in_stage += 1;
        total_steps += 1;
    }

    Ok(ConvergenceTrace {
        method: Method::Pcgm,
        status,
        records,
        final_state: x,
        clearing: last_lmo.clearing,
        lambda_degenerate: last_lmo.degenerate,
        final_objective: objective,
        final_gap,
        iterations: total_steps,
        stages: stage,
        restarts,
        experimental: false,
        max_balance_violation: stats.max_balance,
        max_box_violation: stats.max_box,
        containment_ok: stats.containment_ok,
    })
}
