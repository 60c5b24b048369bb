//! Scenario data model: agents, commodities, transaction boxes, moving
//! windows, technologies, pricing modes, assumption validators, and the
//! deterministic instance generator.
//!
//! A scenario is an `m`-agent, `n`-commodity market. Agent `i` trades inside
//! the global box `[lower_ij, upper_ij]`; a finite window radius `r_ij`
//! narrows that to the moving box `[max(lower, x - r), min(upper, x + r)]`
//! around the current state. The balance set couples agents per commodity
//! through the zero-column-sum constraint.

use crate::balance::CommodityBox;
use crate::solvers::{PcgmConfig, SgpConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transaction volume matrix: one row per agent, one column per commodity.
/// Sales are positive, purchases negative.
pub type MarketState = Array2<f64>;

/// Version stamp written into every scenario/solution file.
pub const FORMAT_VERSION: u32 = 1;

/// Default absolute tolerance for feasibility membership tests. Chosen with
/// headroom over the solvers' 1e-6 convergence targets.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("agent {agent}: state {value} outside the global box in commodity {commodity}")]
    StateOutsideGlobalBox {
        agent: usize,
        commodity: usize,
        value: f64,
    },
    #[error("scenario schema: {0}")]
    Schema(String),
    #[error(
        "agent {agent}: price polytope is empty; the technology output set covers \
         every commodity (including {commodity}), leaving no input to carry price mass"
    )]
    EmptyPriceSet { agent: usize, commodity: usize },
}

/// Technology data of one agent: output commodities (`supply`), input
/// commodities (`demand`), and input-per-output rates `coeff[(s, j)] = a_sj`
/// meaning one unit of output `j` consumes `a_sj` units of input `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TechnologySpec {
    pub supply: Vec<usize>,
    pub demand: Vec<usize>,
    /// Sparse entries `(s, j, a_sj)` with `s` in `demand`, `j` in `supply`.
    pub coeff: Vec<(usize, usize, f64)>,
}

impl TechnologySpec {
    /// Technology with no constraints; the price set is the full simplex.
    pub fn unconstrained() -> Self {
        TechnologySpec {
            supply: Vec::new(),
            demand: Vec::new(),
            coeff: Vec::new(),
        }
    }
}

/// How an agent turns its current transaction row into price vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum PricingMode {
    /// Set-valued LP pricing: any maximizer of `<v, x_row>` over the price
    /// polytope is an admissible price.
    LpSetValued,
    /// Single-valued regularized pricing around a reference price vector:
    /// the unique maximizer of `<p, x_row> - beta/2 * |p - reference|^2`.
    Regularized { reference: Vec<f64>, beta: f64 },
}

/// Per-agent data: global box, window radii, technology, and pricing mode.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Window radius per commodity; `f64::INFINITY` means the box is
    /// stationary in that commodity.
    pub radius: Vec<f64>,
    pub technology: TechnologySpec,
    pub pricing: PricingMode,
}

impl AgentSpec {
    /// The moving window `[max(lower, x - r), min(upper, x + r)]` for one
    /// commodity, given an in-box state value.
    fn window_interval(&self, j: usize, x: f64) -> (f64, f64) {
        let r = self.radius[j];
        (self.lower[j].max(x - r), self.upper[j].min(x + r))
    }
}

/// Global box bounds as matrices, one row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

/// Aggregated pricing mode of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioPricing {
    AllLp,
    AllRegularized,
    Mixed,
}

/// Solver configuration blocks stored inside a scenario file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    #[serde(default)]
    pub sgp: SgpConfig,
    #[serde(default)]
    pub pcgm: PcgmConfig,
}

/// A complete market instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
    pub solver: SolverSettings,
}

/// Returns the moving window `[alpha_ij(x), beta_ij(x)]` per commodity for
/// one agent. The state row must lie in the agent's global box (up to
/// [`FEASIBILITY_TOL`]); numerical dust is clamped before windowing so the
/// returned intervals always contain the clamped state.
pub fn feasible_window(agent: &AgentSpec, x_row: &[f64]) -> Result<Vec<(f64, f64)>, ModelError> {
    assert_eq!(x_row.len(), agent.lower.len(), "state row length mismatch");
    let mut out = Vec::with_capacity(x_row.len());
    for (j, &x) in x_row.iter().enumerate() {
        if x < agent.lower[j] - FEASIBILITY_TOL || x > agent.upper[j] + FEASIBILITY_TOL {
            return Err(ModelError::StateOutsideGlobalBox {
                agent: usize::MAX,
                commodity: j,
                value: x,
            });
        }
        let xc = x.clamp(agent.lower[j], agent.upper[j]);
        out.push(agent.window_interval(j, xc));
    }
    Ok(out)
}

/// Membership test for the stationary balance set: column sums vanish and
/// every entry lies in the global box, both up to `tol`.
pub fn is_balanced_feasible(y: &MarketState, bounds: &BoxBounds, tol: f64) -> bool {
    assert_eq!(y.dim(), bounds.lower.dim(), "shape mismatch");
    for j in 0..y.ncols() {
        let col = y.column(j);
        if col.sum().abs() > tol {
            return false;
        }
        for i in 0..y.nrows() {
            if col[i] < bounds.lower[(i, j)] - tol || col[i] > bounds.upper[(i, j)] + tol {
                return false;
            }
        }
    }
    true
}

impl Scenario {
    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn zero_state(&self) -> MarketState {
        Array2::zeros((self.m, self.n))
    }

    pub fn bounds(&self) -> BoxBounds {
        let mut lower = Array2::zeros((self.m, self.n));
        let mut upper = Array2::zeros((self.m, self.n));
        for (i, agent) in self.agents.iter().enumerate() {
            for j in 0..self.n {
                lower[(i, j)] = agent.lower[j];
                upper[(i, j)] = agent.upper[j];
            }
        }
        BoxBounds { lower, upper }
    }

    /// Per-commodity slices of the global box (the stationary balance set).
    pub fn stationary_boxes(&self) -> Vec<CommodityBox> {
        (0..self.n)
            .map(|j| {
                CommodityBox::new(
                    self.agents.iter().map(|a| a.lower[j]).collect(),
                    self.agents.iter().map(|a| a.upper[j]).collect(),
                )
                .expect("global box bounds are ordered")
            })
            .collect()
    }

    /// Per-commodity slices of the moving boxes around `x`.
    pub fn moving_boxes(&self, x: &MarketState) -> Result<Vec<CommodityBox>, ModelError> {
        assert_eq!(x.dim(), (self.m, self.n), "state shape mismatch");
        let mut lower = Array2::zeros((self.m, self.n));
        let mut upper = Array2::zeros((self.m, self.n));
        for (i, agent) in self.agents.iter().enumerate() {
            let row: Vec<f64> = x.row(i).to_vec();
            let window = feasible_window(agent, &row).map_err(|e| match e {
                ModelError::StateOutsideGlobalBox {
                    commodity, value, ..
                } => ModelError::StateOutsideGlobalBox {
                    agent: i,
                    commodity,
                    value,
                },
                other => other,
            })?;
            for (j, (lo, hi)) in window.into_iter().enumerate() {
                lower[(i, j)] = lo;
                upper[(i, j)] = hi;
            }
        }
        Ok((0..self.n)
            .map(|j| {
                CommodityBox::new(lower.column(j).to_vec(), upper.column(j).to_vec())
                    .expect("window bounds are ordered around the clamped state")
            })
            .collect())
    }

    pub fn pricing_kind(&self) -> ScenarioPricing {
        let lp = self
            .agents
            .iter()
            .filter(|a| matches!(a.pricing, PricingMode::LpSetValued))
            .count();
        if lp == self.m {
            ScenarioPricing::AllLp
        } else if lp == 0 {
            ScenarioPricing::AllRegularized
        } else {
            ScenarioPricing::Mixed
        }
    }

    /// Serializes to the versioned scenario JSON document (pretty-printed,
    /// stable field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScenarioFile::from_scenario(self))
            .expect("scenario serialization cannot fail")
    }

    /// Parses and validates the versioned scenario JSON document. Unknown
    /// fields are rejected.
    pub fn from_json(text: &str) -> Result<Scenario, ModelError> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
        let scenario = file.into_scenario()?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Structural validation: shapes, bound order, finiteness, technology
    /// index hygiene, pricing parameters, solver configs, and nonemptiness of
    /// every price polytope.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m < 1 || self.n < 1 {
            return Err(ModelError::Schema("m and n must be positive".into()));
        }
        if self.agents.len() != self.m {
            return Err(ModelError::Schema(format!(
                "expected {} agents, found {}",
                self.m,
                self.agents.len()
            )));
        }
        for (i, agent) in self.agents.iter().enumerate() {
            let n = self.n;
            if agent.lower.len() != n || agent.upper.len() != n || agent.radius.len() != n {
                return Err(ModelError::Schema(format!(
                    "agent {i}: bound/radius vectors must have length {n}"
                )));
            }
            for j in 0..n {
                let (lo, hi) = (agent.lower[j], agent.upper[j]);
                if !lo.is_finite() || !hi.is_finite() {
                    return Err(ModelError::Schema(format!(
                        "agent {i}: non-finite bound in commodity {j}"
                    )));
                }
                if lo > hi {
                    return Err(ModelError::Schema(format!(
                        "agent {i}: lower bound {lo} exceeds upper bound {hi} in commodity {j}"
                    )));
                }
                let r = agent.radius[j];
                if r.is_nan() || r < 0.0 {
                    return Err(ModelError::Schema(format!(
                        "agent {i}: window radius must be nonnegative in commodity {j}"
                    )));
                }
            }
            validate_technology(i, n, &agent.technology)?;
            match &agent.pricing {
                PricingMode::LpSetValued => {}
                PricingMode::Regularized { reference, beta } => {
                    if reference.len() != n {
                        return Err(ModelError::Schema(format!(
                            "agent {i}: reference price must have length {n}"
                        )));
                    }
                    if reference.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(ModelError::Schema(format!(
                            "agent {i}: reference price entries must be finite and nonnegative"
                        )));
                    }
                    if !beta.is_finite() || *beta <= 0.0 {
                        return Err(ModelError::Schema(format!(
                            "agent {i}: regularization weight must be positive"
                        )));
                    }
                }
            }
        }
        self.solver
            .sgp
            .validate()
            .map_err(|e| ModelError::Schema(format!("sgp config: {e}")))?;
        self.solver
            .pcgm
            .validate()
            .map_err(|e| ModelError::Schema(format!("pcgm config: {e}")))?;
        Ok(())
    }
}

fn validate_technology(agent: usize, n: usize, tech: &TechnologySpec) -> Result<(), ModelError> {
    let check_set = |name: &str, set: &[usize]| -> Result<(), ModelError> {
        let mut seen = vec![false; n];
        for &j in set {
            if j >= n {
                return Err(ModelError::Schema(format!(
                    "agent {agent}: technology {name} index {j} out of range"
                )));
            }
            if seen[j] {
                return Err(ModelError::Schema(format!(
                    "agent {agent}: duplicate technology {name} index {j}"
                )));
            }
            seen[j] = true;
        }
        Ok(())
    };
    check_set("supply", &tech.supply)?;
    check_set("demand", &tech.demand)?;
    for &s in &tech.supply {
        if tech.demand.contains(&s) {
            return Err(ModelError::Schema(format!(
                "agent {agent}: commodity {s} appears in both supply and demand sets"
            )));
        }
    }
    if tech.supply.len() == n {
        return Err(ModelError::EmptyPriceSet {
            agent,
            commodity: tech.supply[0],
        });
    }
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(tech.coeff.len());
    for &(s, j, a) in &tech.coeff {
        if !tech.demand.contains(&s) {
            return Err(ModelError::Schema(format!(
                "agent {agent}: coefficient input {s} is not in the demand set"
            )));
        }
        if !tech.supply.contains(&j) {
            return Err(ModelError::Schema(format!(
                "agent {agent}: coefficient output {j} is not in the supply set"
            )));
        }
        if !a.is_finite() || a < 0.0 {
            return Err(ModelError::Schema(format!(
                "agent {agent}: coefficient for ({s}, {j}) must be finite and nonnegative"
            )));
        }
        if pairs.contains(&(s, j)) {
            return Err(ModelError::Schema(format!(
                "agent {agent}: duplicate coefficient for ({s}, {j})"
            )));
        }
        pairs.push((s, j));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Assumption validation

/// Assumption group a scenario is validated against. Mode A covers the
/// structural model requirements only; mode B additionally demands
/// stationary boxes with LP pricing (the subgradient projection setting);
/// mode C demands regularized pricing with well-formed moving windows (the
/// conditional gradient setting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssumptionMode {
    A,
    B,
    C,
}

/// One violated assumption, tagged with its group label.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub assumption: &'static str,
    pub agent: Option<usize>,
    pub commodity: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.assumption, self.message)
    }
}

/// Result of [`validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub mode: AssumptionMode,
    pub findings: Vec<Finding>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks the scenario against one assumption group and reports every
/// violation found (never errors).
pub fn validate_assumptions(s: &Scenario, mode: AssumptionMode) -> AssumptionReport {
    let mut findings = Vec::new();

    for (i, agent) in s.agents.iter().enumerate() {
        for j in 0..s.n.min(agent.lower.len().min(agent.upper.len())) {
            let (lo, hi) = (agent.lower[j], agent.upper[j]);
            if !lo.is_finite() || !hi.is_finite() {
                findings.push(Finding {
                    assumption: "A1",
                    agent: Some(i),
                    commodity: Some(j),
                    message: format!("agent {i}: non-finite box bound in commodity {j} (compactness)"),
                });
            } else if lo > hi {
                findings.push(Finding {
                    assumption: "A1",
                    agent: Some(i),
                    commodity: Some(j),
                    message: format!("agent {i}: inverted box [{lo}, {hi}] in commodity {j}"),
                });
            }
        }
        for (j, &r) in agent.radius.iter().enumerate().take(s.n) {
            if r.is_nan() || r < 0.0 {
                findings.push(Finding {
                    assumption: "C3",
                    agent: Some(i),
                    commodity: Some(j),
                    message: format!(
                        "agent {i}: negative window radius in commodity {j} breaks x in Y(x)"
                    ),
                });
            }
        }
    }

    // Nonemptiness of the balance set, commodity by commodity. Boxes that all
    // straddle zero are fine immediately; otherwise the interval-sum
    // feasibility rule of the balance module decides.
    for j in 0..s.n {
        let straddle = s
            .agents
            .iter()
            .all(|a| a.lower[j] <= 0.0 && a.upper[j] >= 0.0);
        if straddle {
            continue;
        }
        let sum_lo: f64 = s.agents.iter().map(|a| a.lower[j]).sum();
        let sum_hi: f64 = s.agents.iter().map(|a| a.upper[j]).sum();
        if sum_lo > 0.0 || sum_hi < 0.0 {
            findings.push(Finding {
                assumption: "A2",
                agent: None,
                commodity: Some(j),
                message: format!(
                    "commodity {j}: balance set is empty (lower sums to {sum_lo}, upper to {sum_hi})"
                ),
            });
        }
    }

    match mode {
        AssumptionMode::A => {}
        AssumptionMode::B => {
            for (i, agent) in s.agents.iter().enumerate() {
                if !matches!(agent.pricing, PricingMode::LpSetValued) {
                    findings.push(Finding {
                        assumption: "B2",
                        agent: Some(i),
                        commodity: None,
                        message: format!(
                            "agent {i} uses regularized pricing but mode B requires the \
                             set-valued LP price map"
                        ),
                    });
                }
                for (j, &r) in agent.radius.iter().enumerate().take(s.n) {
                    if r.is_finite() {
                        findings.push(Finding {
                            assumption: "B1'",
                            agent: Some(i),
                            commodity: Some(j),
                            message: format!(
                                "agent {i}: finite window radius {r} in commodity {j}; \
                                 mode B requires stationary boxes"
                            ),
                        });
                    }
                }
            }
        }
        AssumptionMode::C => {
            for (i, agent) in s.agents.iter().enumerate() {
                match &agent.pricing {
                    PricingMode::Regularized { reference, beta } => {
                        if !beta.is_finite() || *beta <= 0.0 {
                            findings.push(Finding {
                                assumption: "C2",
                                agent: Some(i),
                                commodity: None,
                                message: format!(
                                    "agent {i}: regularization weight must be positive"
                                ),
                            });
                        }
                        if reference.len() != s.n
                            || reference.iter().any(|v| !v.is_finite() || *v < 0.0)
                        {
                            findings.push(Finding {
                                assumption: "C2",
                                agent: Some(i),
                                commodity: None,
                                message: format!(
                                    "agent {i}: reference price must be finite and nonnegative"
                                ),
                            });
                        }
                    }
                    PricingMode::LpSetValued => {
                        findings.push(Finding {
                            assumption: "C2",
                            agent: Some(i),
                            commodity: None,
                            message: format!(
                                "agent {i} uses LP pricing but mode C requires the \
                                 regularized single-valued price map"
                            ),
                        });
                    }
                }
            }
        }
    }

    AssumptionReport { mode, findings }
}

// ---------------------------------------------------------------------------
// Instance generation

/// Pricing family for generated scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GenPricing {
    #[default]
    Lp,
    Regularized,
}

/// Generator knobs. `radius: None` picks the mode default: stationary boxes
/// (infinite radius) for LP pricing, radius 0.5 for regularized pricing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenParams {
    pub pricing: GenPricing,
    pub radius: Option<f64>,
}

/// Deterministically generates a random scenario that passes
/// [`validate_assumptions`] for its declared mode (B for LP pricing, C for
/// regularized pricing). Boxes always straddle zero so the zero state is
/// feasible.
pub fn random_scenario(
    seed: u64,
    m: usize,
    n: usize,
    params: &GenParams,
) -> Result<Scenario, ModelError> {
    if m < 2 {
        return Err(ModelError::InvalidParams(format!(
            "need at least 2 agents, got {m}"
        )));
    }
    if n < 1 {
        return Err(ModelError::InvalidParams(format!(
            "need at least 1 commodity, got {n}"
        )));
    }
    let radius = match (params.pricing, params.radius) {
        (_, Some(r)) if r.is_nan() || r < 0.0 => {
            return Err(ModelError::InvalidParams(format!(
                "window radius must be nonnegative, got {r}"
            )));
        }
        (GenPricing::Lp, Some(r)) if r.is_finite() => {
            return Err(ModelError::InvalidParams(
                "lp pricing requires stationary boxes; pass an infinite radius or none".into(),
            ));
        }
        (_, Some(r)) => r,
        (GenPricing::Lp, None) => f64::INFINITY,
        (GenPricing::Regularized, None) => 0.5,
    };

    // ChaCha8 keeps generated fixtures stable across upgrades of the rand
    // crate, whose default generator may change between versions.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = Vec::with_capacity(m);
    for _ in 0..m {
        let lower: Vec<f64> = (0..n).map(|_| -(0.5 + 1.5 * rng.gen::<f64>())).collect();
        let upper: Vec<f64> = (0..n).map(|_| 0.5 + 1.5 * rng.gen::<f64>()).collect();

        // Pick a random subset of commodities, split it into outputs and
        // inputs, and never let the outputs cover all commodities (that would
        // empty the price polytope).
        let k = rng.gen_range(0..=n);
        let mut pool: Vec<usize> = (0..n).collect();
        for t in 0..k {
            let pick = rng.gen_range(t..n);
            pool.swap(t, pick);
        }
        let mut supply = Vec::new();
        let mut demand = Vec::new();
        for &j in pool.iter().take(k) {
            if rng.gen_bool(0.5) {
                supply.push(j);
            } else {
                demand.push(j);
            }
        }
        if supply.len() == n {
            demand.push(supply.pop().expect("supply covers all commodities"));
        }
        supply.sort_unstable();
        demand.sort_unstable();
        let mut coeff = Vec::with_capacity(supply.len() * demand.len());
        for &j in &supply {
            for &s in &demand {
                coeff.push((s, j, 0.5 + 1.5 * rng.gen::<f64>()));
            }
        }

        let pricing = match params.pricing {
            GenPricing::Lp => PricingMode::LpSetValued,
            GenPricing::Regularized => {
                let mut reference: Vec<f64> = (0..n)
                    .map(|_| 1e-3 - (1.0 - rng.gen::<f64>()).ln())
                    .collect();
                let total: f64 = reference.iter().sum();
                for v in &mut reference {
                    *v /= total;
                }
                let beta = 0.5 + 1.5 * rng.gen::<f64>();
                PricingMode::Regularized { reference, beta }
            }
        };

        agents.push(AgentSpec {
            lower,
            upper,
            radius: vec![radius; n],
            technology: TechnologySpec {
                supply,
                demand,
                coeff,
            },
            pricing,
        });
    }

    let scenario = Scenario {
        m,
        n,
        seed,
        agents,
        solver: SolverSettings::default(),
    };
    scenario.validate()?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format_version: u32,
    m: usize,
    n: usize,
    seed: u64,
    agents: Vec<AgentFile>,
    #[serde(default)]
    solver: SolverSettings,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    lower: Vec<f64>,
    upper: Vec<f64>,
    radius: Vec<RadiusEntry>,
    technology: TechnologyFile,
    pricing: PricingFile,
}

/// One window radius: a nonnegative number or the keyword `"inf"` (JSON has
/// no literal for infinity).
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RadiusEntry {
    Finite(f64),
    Keyword(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TechnologyFile {
    supply: Vec<usize>,
    demand: Vec<usize>,
    coeff: Vec<(usize, usize, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PricingFile {
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

impl ScenarioFile {
    fn from_scenario(s: &Scenario) -> ScenarioFile {
        ScenarioFile {
            format_version: FORMAT_VERSION,
            m: s.m,
            n: s.n,
            seed: s.seed,
            agents: s
                .agents
                .iter()
                .map(|a| AgentFile {
                    lower: a.lower.clone(),
                    upper: a.upper.clone(),
                    radius: a
                        .radius
                        .iter()
                        .map(|&r| {
                            if r.is_finite() {
                                RadiusEntry::Finite(r)
                            } else {
                                RadiusEntry::Keyword("inf".into())
                            }
                        })
                        .collect(),
                    technology: TechnologyFile {
                        supply: a.technology.supply.clone(),
                        demand: a.technology.demand.clone(),
                        coeff: a.technology.coeff.clone(),
                    },
                    pricing: match &a.pricing {
                        PricingMode::LpSetValued => PricingFile {
                            mode: "lp".into(),
                            reference: None,
                            beta: None,
                        },
                        PricingMode::Regularized { reference, beta } => PricingFile {
                            mode: "regularized".into(),
                            reference: Some(reference.clone()),
                            beta: Some(*beta),
                        },
                    },
                })
                .collect(),
            solver: s.solver.clone(),
        }
    }

    fn into_scenario(self) -> Result<Scenario, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Schema(format!(
                "unsupported format_version {}, expected {}",
                self.format_version, FORMAT_VERSION
            )));
        }
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.into_iter().enumerate() {
            let mut radius = Vec::with_capacity(a.radius.len());
            for entry in a.radius {
                match entry {
                    RadiusEntry::Finite(r) => {
                        if !r.is_finite() || r < 0.0 {
                            return Err(ModelError::Schema(format!(
                                "agent {i}: radius entries must be nonnegative numbers or \"inf\""
                            )));
                        }
                        radius.push(r);
                    }
                    RadiusEntry::Keyword(word) => {
                        if word != "inf" {
                            return Err(ModelError::Schema(format!(
                                "agent {i}: unknown radius keyword {word:?}, expected \"inf\""
                            )));
                        }
                        radius.push(f64::INFINITY);
                    }
                }
            }
            let pricing = match a.pricing.mode.as_str() {
                "lp" => {
                    if a.pricing.reference.is_some() || a.pricing.beta.is_some() {
                        return Err(ModelError::Schema(format!(
                            "agent {i}: lp pricing takes no reference or beta"
                        )));
                    }
                    PricingMode::LpSetValued
                }
                "regularized" => {
                    let reference = a.pricing.reference.ok_or_else(|| {
                        ModelError::Schema(format!(
                            "agent {i}: regularized pricing requires a reference vector"
                        ))
                    })?;
                    let beta = a.pricing.beta.ok_or_else(|| {
                        ModelError::Schema(format!(
                            "agent {i}: regularized pricing requires a beta weight"
                        ))
                    })?;
                    PricingMode::Regularized { reference, beta }
                }
                other => {
                    return Err(ModelError::Schema(format!(
                        "agent {i}: unknown pricing mode {other:?}"
                    )));
                }
            };
            agents.push(AgentSpec {
                lower: a.lower,
                upper: a.upper,
                radius,
                technology: TechnologySpec {
                    supply: a.technology.supply,
                    demand: a.technology.demand,
                    coeff: a.technology.coeff,
                },
                pricing,
            });
        }
        Ok(Scenario {
            m: self.m,
            n: self.n,
            seed: self.seed,
            agents,
            solver: self.solver,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn box_agent(lower: f64, upper: f64, n: usize, radius: f64) -> AgentSpec {
        AgentSpec {
            lower: vec![lower; n],
            upper: vec![upper; n],
            radius: vec![radius; n],
            technology: TechnologySpec::unconstrained(),
            pricing: PricingMode::LpSetValued,
        }
    }

    fn two_agent_scenario(radius: f64) -> Scenario {
        Scenario {
            m: 2,
            n: 2,
            seed: 0,
            agents: vec![box_agent(-1.0, 1.0, 2, radius), box_agent(-1.0, 1.0, 2, radius)],
            solver: SolverSettings::default(),
        }
    }

    #[test]
    fn window_with_infinite_radius_is_the_global_box() {
        let agent = box_agent(-2.0, 2.0, 1, f64::INFINITY);
        let w = feasible_window(&agent, &[1.0]).unwrap();
        assert_eq!(w, vec![(-2.0, 2.0)]);
    }

    #[test]
    fn window_interior_and_clamped() {
        let agent = box_agent(-2.0, 2.0, 1, 0.5);
        assert_eq!(feasible_window(&agent, &[1.0]).unwrap(), vec![(0.5, 1.5)]);
        assert_eq!(feasible_window(&agent, &[1.8]).unwrap(), vec![(1.3, 2.0)]);
    }

    #[test]
    fn window_rejects_state_outside_box() {
        let agent = box_agent(-2.0, 2.0, 1, 0.5);
        let err = feasible_window(&agent, &[2.5]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::StateOutsideGlobalBox { commodity: 0, .. }
        ));
    }

    #[test]
    fn balanced_feasible_examples() {
        let s = two_agent_scenario(f64::INFINITY);
        let bounds = s.bounds();
        assert!(is_balanced_feasible(&s.zero_state(), &bounds, 1e-9));
        let unbalanced = array![[0.0, 0.25], [0.0, 0.25]];
        assert!(!is_balanced_feasible(&unbalanced, &bounds, 1e-9));
        let antisymmetric = array![[1.0, -1.0], [-1.0, 1.0]];
        assert!(is_balanced_feasible(&antisymmetric, &bounds, 1e-9));
    }

    #[test]
    fn validator_flags_inverted_interval() {
        let mut s = two_agent_scenario(f64::INFINITY);
        s.agents[0].lower[0] = 3.0;
        s.agents[0].upper[0] = 1.0;
        let report = validate_assumptions(&s, AssumptionMode::A);
        assert!(report.findings.iter().any(|f| f.assumption == "A1"));
    }

    #[test]
    fn validator_mode_b_passes_on_stationary_lp_boxes() {
        let s = two_agent_scenario(f64::INFINITY);
        assert!(validate_assumptions(&s, AssumptionMode::B).passed());
    }

    #[test]
    fn validator_flags_empty_balance_column() {
        let mut s = two_agent_scenario(f64::INFINITY);
        for agent in &mut s.agents {
            agent.lower[1] = 1.0;
            agent.upper[1] = 2.0;
        }
        let report = validate_assumptions(&s, AssumptionMode::A);
        assert!(report
            .findings
            .iter()
            .any(|f| f.assumption == "A2" && f.commodity == Some(1)));
    }

    #[test]
    fn validator_names_b2_for_regularized_agents() {
        let mut s = two_agent_scenario(f64::INFINITY);
        s.agents[1].pricing = PricingMode::Regularized {
            reference: vec![0.5, 0.5],
            beta: 1.0,
        };
        let report = validate_assumptions(&s, AssumptionMode::B);
        assert!(report.findings.iter().any(|f| f.assumption == "B2"));
    }

    #[test]
    fn validator_mode_c_requires_regularized() {
        let s = two_agent_scenario(0.5);
        let report = validate_assumptions(&s, AssumptionMode::C);
        assert!(report.findings.iter().all(|f| f.assumption == "C2"));
        assert_eq!(report.findings.len(), 2);
    }

    #[test]
    fn generator_is_deterministic() {
        let params = GenParams::default();
        let a = random_scenario(7, 4, 3, &params).unwrap();
        let b = random_scenario(7, 4, 3, &params).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = random_scenario(8, 4, 3, &params).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn generator_output_validates_declared_mode() {
        let lp = random_scenario(3, 3, 4, &GenParams::default()).unwrap();
        assert!(validate_assumptions(&lp, AssumptionMode::B).passed());
        let reg = random_scenario(
            3,
            3,
            4,
            &GenParams {
                pricing: GenPricing::Regularized,
                radius: None,
            },
        )
        .unwrap();
        assert!(validate_assumptions(&reg, AssumptionMode::C).passed());
    }

    #[test]
    fn generator_boxes_straddle_zero() {
        let s = random_scenario(42, 4, 3, &GenParams::default()).unwrap();
        assert!(is_balanced_feasible(&s.zero_state(), &s.bounds(), 1e-9));
    }

    #[test]
    fn generator_rejects_bad_params() {
        assert!(random_scenario(1, 1, 3, &GenParams::default()).is_err());
        assert!(random_scenario(1, 4, 0, &GenParams::default()).is_err());
        let finite_lp = GenParams {
            pricing: GenPricing::Lp,
            radius: Some(0.5),
        };
        assert!(random_scenario(1, 4, 3, &finite_lp).is_err());
    }

    #[test]
    fn json_round_trip_preserves_scenario() {
        for params in [
            GenParams::default(),
            GenParams {
                pricing: GenPricing::Regularized,
                radius: None,
            },
            GenParams {
                pricing: GenPricing::Regularized,
                radius: Some(f64::INFINITY),
            },
        ] {
            let s = random_scenario(11, 3, 2, &params).unwrap();
            let loaded = Scenario::from_json(&s.to_json()).unwrap();
            assert_eq!(s, loaded);
        }
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let s = random_scenario(11, 2, 2, &GenParams::default()).unwrap();
        let text = s.to_json().replace("\"seed\"", "\"sprouts\": 1, \"seed\"");
        assert!(matches!(
            Scenario::from_json(&text),
            Err(ModelError::Schema(_))
        ));
    }

    #[test]
    fn json_rejects_wrong_format_version() {
        let s = random_scenario(11, 2, 2, &GenParams::default()).unwrap();
        let text = s.to_json().replace("\"format_version\": 1", "\"format_version\": 2");
        let err = Scenario::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn json_infinite_radius_uses_keyword() {
        let s = random_scenario(11, 2, 2, &GenParams::default()).unwrap();
        let text = s.to_json();
        assert!(text.contains("\"inf\""));
        let loaded = Scenario::from_json(&text).unwrap();
        assert!(loaded.agents[0].radius[0].is_infinite());
    }

    #[test]
    fn json_rejects_bad_radius_keyword() {
        let s = random_scenario(11, 2, 2, &GenParams::default()).unwrap();
        let text = s.to_json().replace("\"inf\"", "\"unbounded\"");
        assert!(Scenario::from_json(&text).is_err());
    }

    #[test]
    fn schema_rejects_supply_covering_all_commodities() {
        let mut s = two_agent_scenario(f64::INFINITY);
        s.agents[0].technology = TechnologySpec {
            supply: vec![0, 1],
            demand: vec![],
            coeff: vec![],
        };
        let err = Scenario::from_json(&s.to_json()).unwrap_err();
        assert!(matches!(err, ModelError::EmptyPriceSet { agent: 0, .. }));
    }

    #[test]
    fn schema_rejects_out_of_range_technology_index() {
        let mut s = two_agent_scenario(f64::INFINITY);
        s.agents[1].technology = TechnologySpec {
            supply: vec![5],
            demand: vec![],
            coeff: vec![],
        };
        assert!(Scenario::from_json(&s.to_json()).is_err());
    }

    #[test]
    fn moving_boxes_wrap_the_state() {
        let s = two_agent_scenario(0.5);
        let x = array![[0.25, -1.0], [-0.25, 1.0]];
        let boxes = s.moving_boxes(&x).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].lower, vec![-0.25, -0.75]);
        assert_eq!(boxes[0].upper, vec![0.75, 0.25]);
        assert_eq!(boxes[1].lower, vec![-1.0, 0.5]);
        assert_eq!(boxes[1].upper, vec![-0.5, 1.0]);
    }

    #[test]
    fn pricing_kind_detects_mixtures() {
        let mut s = two_agent_scenario(f64::INFINITY);
        assert_eq!(s.pricing_kind(), ScenarioPricing::AllLp);
        s.agents[0].pricing = PricingMode::Regularized {
            reference: vec![0.5, 0.5],
            beta: 1.0,
        };
        assert_eq!(s.pricing_kind(), ScenarioPricing::Mixed);
        s.agents[1].pricing = PricingMode::Regularized {
            reference: vec![0.5, 0.5],
            beta: 1.0,
        };
        assert_eq!(s.pricing_kind(), ScenarioPricing::AllRegularized);
    }
}
