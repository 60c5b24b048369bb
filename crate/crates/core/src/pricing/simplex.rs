//! Dense two-phase simplex over the price polytope's standard form.
//!
//! The polytopes here are tiny (dimension n plus one surplus column per
//! technology row), so the implementation favors robustness: full tableau,
//! Bland's anti-cycling rule everywhere, artificial variables in phase one,
//! and lexicographic vertex refinement done as a sequence of restricted
//! re-optimizations.

use super::{PricePolytope, PricingError};

const RC_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const PIVOT_CAP: usize = 50_000;

/// How optimal-face ties are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum TieMode {
    /// First optimal vertex Bland's rule lands on (still deterministic).
    Any,
    /// Lexicographically smallest optimal vertex.
    LexMin,
    /// Lexicographically smallest optimal vertex, plus an exact uniqueness
    /// verdict (lex-min against lex-max when the cheap test is inconclusive).
    LexMinWithUnique,
}

pub(super) struct LpOutcome {
    pub vertex: Vec<f64>,
    pub value: f64,
    pub tight: bool,
}

/// Maximizes `<c, v>` over the polytope.
pub(super) fn maximize(
    poly: &PricePolytope,
    c: &[f64],
    tie: TieMode,
) -> Result<LpOutcome, PricingError> {
    assert_eq!(c.len(), poly.n(), "objective length mismatch");
    let mut t = Tableau::build(poly);
    t.phase_one()?;

    // Phase 2 minimizes -c over the structural columns.
    let mut cost = vec![0.0; t.ncols];
    for (j, &cj) in c.iter().enumerate() {
        cost[j] = -cj;
    }
    let mut forbidden = vec![false; t.ncols];
    t.run_bland(&cost, &forbidden, PIVOT_CAP)?;
    let value = dot(c, &t.solution()[..poly.n()]);

    // Unique optimum fast path: every nonbasic column strictly degrades the
    // objective, so the optimal face is this single vertex.
    let rc = t.reduced_costs(&cost);
    let unique_fast = (0..t.ncols).all(|j| t.in_basis(j) || rc[j] > RC_TOL);

    if tie == TieMode::Any || unique_fast {
        let vertex = t.solution()[..poly.n()].to_vec();
        return Ok(LpOutcome {
            vertex,
            value,
            tight: unique_fast,
        });
    }

    // Freeze the optimal face: columns that would degrade the optimum must
    // stay nonbasic from here on.
    for (j, f) in forbidden.iter_mut().enumerate() {
        if !t.in_basis(j) && rc[j] > RC_TOL {
            *f = true;
        }
    }

    let need_unique = tie == TieMode::LexMinWithUnique;
    let mut max_side = if need_unique {
        Some((t.clone(), forbidden.clone()))
    } else {
        None
    };

    lex_refine(&mut t, &mut forbidden, poly.n(), 1.0)?;
    let vertex = t.solution()[..poly.n()].to_vec();

    let tight = if let Some((mut tmax, mut fmax)) = max_side.take() {
        lex_refine(&mut tmax, &mut fmax, poly.n(), -1.0)?;
        let vmax = tmax.solution();
        vertex
            .iter()
            .zip(&vmax[..poly.n()])
            .all(|(a, b)| (a - b).abs() <= 1e-9)
    } else {
        false
    };

    Ok(LpOutcome {
        vertex,
        value,
        tight,
    })
}

/// Sequentially optimizes the coordinates over the current (frozen) face:
/// `sign = 1` minimizes each coordinate in turn (lex-min vertex), `-1`
/// maximizes (lex-max). After each pass the face shrinks accordingly.
fn lex_refine(
    t: &mut Tableau,
    forbidden: &mut [bool],
    n: usize,
    sign: f64,
) -> Result<(), PricingError> {
    for coord in 0..n {
        let mut cost = vec![0.0; t.ncols];
        cost[coord] = sign;
        t.run_bland(&cost, forbidden, PIVOT_CAP)?;
        let rc = t.reduced_costs(&cost);
        for (j, f) in forbidden.iter_mut().enumerate() {
            if !t.in_basis(j) && rc[j] > RC_TOL {
                *f = true;
            }
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `<cost, x>` over `{x >= 0 : A x = b}` with the same two-phase
/// tableau machinery. Rows with negative right-hand sides are sign-flipped
/// before phase one. Returns the minimizer and its objective value.
pub(super) fn minimize_standard(
    mut a: Vec<Vec<f64>>,
    mut b: Vec<f64>,
    cost: &[f64],
) -> Result<(Vec<f64>, f64), PricingError> {
    let ncols = cost.len();
    assert_eq!(a.len(), b.len(), "row/rhs count mismatch");
    for row in &a {
        assert_eq!(row.len(), ncols, "row width mismatch");
    }
    for r in 0..a.len() {
        if b[r] < 0.0 {
            for v in &mut a[r] {
                *v = -*v;
            }
            b[r] = -b[r];
        }
    }
    let mut t = Tableau {
        ncols,
        a,
        b,
        basis: Vec::new(),
    };
    t.phase_one()?;
    let forbidden = vec![false; t.ncols];
    t.run_bland(cost, &forbidden, PIVOT_CAP)?;
    let x = t.solution();
    let value = dot(cost, &x);
    Ok((x, value))
}

/// Canonical-form tableau: basis columns are kept as identity columns by the
/// pivots, `b` stays nonnegative.
#[derive(Clone)]
struct Tableau {
    ncols: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    /// Standard form of `{v >= 0, sum v = 1, G v >= 0}`: surplus column per
    /// technology row, right-hand side (1, 0, ..., 0).
    fn build(poly: &PricePolytope) -> Tableau {
        let n = poly.n();
        let k = poly.rows().len();
        let ncols = n + k;
        let mut a = Vec::with_capacity(1 + k);
        let mut row0 = vec![0.0; ncols];
        row0[..n].fill(1.0);
        a.push(row0);
        for (r, g) in poly.rows().iter().enumerate() {
            let mut row = vec![0.0; ncols];
            row[..n].copy_from_slice(g);
            row[n + r] = -1.0;
            a.push(row);
        }
        Tableau {
            ncols,
            a,
            b: {
                let mut b = vec![0.0; 1 + k];
                b[0] = 1.0;
                b
            },
            basis: Vec::new(),
        }
    }

    fn rows(&self) -> usize {
        self.a.len()
    }

    fn in_basis(&self, col: usize) -> bool {
        self.basis.contains(&col)
    }

    /// Adds one artificial column per row, drives their sum to zero, then
    /// strips them (pivoting or dropping rows where they linger at zero).
    fn phase_one(&mut self) -> Result<(), PricingError> {
        let m = self.rows();
        let nstruct = self.ncols;
        for (r, row) in self.a.iter_mut().enumerate() {
            row.extend((0..m).map(|k| if k == r { 1.0 } else { 0.0 }));
        }
        self.ncols += m;
        self.basis = (nstruct..nstruct + m).collect();

        let mut cost = vec![0.0; self.ncols];
        cost[nstruct..].fill(1.0);
        let forbidden = vec![false; self.ncols];
        self.run_bland(&cost, &forbidden, PIVOT_CAP)?;

        let residual: f64 = self
            .basis
            .iter()
            .zip(&self.b)
            .filter(|(&col, _)| col >= nstruct)
            .map(|(_, &bv)| bv)
            .sum();
        if residual > 1e-9 {
            return Err(PricingError::NumericalFailure(format!(
                "phase one ended infeasible (residual {residual:.3e})"
            )));
        }

        // Artificials still basic sit at zero; pivot them out on any usable
        // structural column, or drop the row as redundant.
        let mut r = 0;
        while r < self.rows() {
            if self.basis[r] >= nstruct {
                if let Some(col) = (0..nstruct).find(|&j| self.a[r][j].abs() > PIVOT_TOL) {
                    self.pivot(r, col);
                } else {
                    self.a.remove(r);
                    self.b.remove(r);
                    self.basis.remove(r);
                    continue;
                }
            }
            r += 1;
        }

        for row in &mut self.a {
            row.truncate(nstruct);
        }
        self.ncols = nstruct;
        Ok(())
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let cb: Vec<f64> = self.basis.iter().map(|&col| cost[col]).collect();
        (0..self.ncols)
            .map(|j| {
                let through_basis: f64 = self.a.iter().zip(&cb).map(|(row, c)| c * row[j]).sum();
                cost[j] - through_basis
            })
            .collect()
    }

    /// Bland's rule: enter the lowest-index improving column, leave on the
    /// lowest basis label among ratio ties. Terminates without cycling.
    fn run_bland(
        &mut self,
        cost: &[f64],
        forbidden: &[bool],
        cap: usize,
    ) -> Result<(), PricingError> {
        for _ in 0..cap {
            let rc = self.reduced_costs(cost);
            let entering = (0..self.ncols)
                .find(|&j| !forbidden[j] && !self.in_basis(j) && rc[j] < -RC_TOL);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows() {
                if self.a[r][col] > PIVOT_TOL {
                    let ratio = self.b[r] / self.a[r][col];
                    let better = match leave {
                        None => true,
                        Some((prev, best)) => {
                            ratio < best - 1e-12
                                || (ratio <= best + 1e-12 && self.basis[r] < self.basis[prev])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(PricingError::NumericalFailure(
                    "simplex objective unbounded on a bounded polytope".into(),
                ));
            };
            self.pivot(row, col);
        }
        Err(PricingError::NumericalFailure(
            "simplex pivot cap exceeded".into(),
        ))
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.a[row][col];
        for v in &mut self.a[row] {
            *v /= piv;
        }
        self.b[row] /= piv;
        for r in 0..self.rows() {
            if r == row {
                continue;
            }
            let factor = self.a[r][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..self.a[r].len() {
                let upd = self.a[row][j];
                self.a[r][j] -= factor * upd;
            }
            self.b[r] -= factor * self.b[row];
            if self.b[r].abs() < 1e-14 {
                self.b[r] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    fn solution(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.ncols];
        for (r, &col) in self.basis.iter().enumerate() {
            v[col] = self.b[r];
        }
        v
    }
}
