//! Steepest descent on the discretized control with the adjoint gradient,
//! and the finite-difference oracles for first and second variations.

use crate::error::{Error, Result};
use crate::problem::{Control, Family, Field, Problem};
use crate::quadrature::Grid;
use crate::{fredholm, volterra};

/// `J(u)`, solving the state equation of either family.
pub fn evaluate(problem: &Problem, grid: &Grid, u: &Control) -> Result<f64> {
    match problem.family() {
        Family::Fredholm => fredholm::evaluate(problem, grid, u),
        Family::Volterra => volterra::evaluate(problem, grid, u),
    }
}

/// `J(u)` and the adjoint gradient `∇_u H` at every node. The directional
/// derivative along `δu` is `Σ_i w_i ∇_u H(t_i)·δu_i`.
pub fn adjoint_gradient(problem: &Problem, grid: &Grid, u: &Control) -> Result<(f64, Field)> {
    match problem.family() {
        Family::Fredholm => {
            let sol = fredholm::solve(problem, grid, u)?;
            Ok((sol.cost, fredholm::gradient(problem, grid, &sol)?))
        }
        Family::Volterra => {
            let sol = volterra::solve(problem, grid, u)?;
            Ok((sol.cost, volterra::gradient(problem, grid, &sol)?))
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::Problem(format!("finite-difference step must be positive, got {eps}")));
    }
    Ok(())
}

/// `(J(u+εδu) − J(u−εδu)) / 2ε`.
pub fn fd_gradient(problem: &Problem, grid: &Grid, u: &Control, du: &Control, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let jp = evaluate(problem, grid, &u.plus_scaled(eps, du))?;
    let jm = evaluate(problem, grid, &u.plus_scaled(-eps, du))?;
    Ok((jp - jm) / (2.0 * eps))
}

/// `(J(u+εδu) − 2J(u) + J(u−εδu)) / ε²`.
pub fn fd_second(problem: &Problem, grid: &Grid, u: &Control, du: &Control, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let jp = evaluate(problem, grid, &u.plus_scaled(eps, du))?;
    let j0 = evaluate(problem, grid, u)?;
    let jm = evaluate(problem, grid, &u.plus_scaled(-eps, du))?;
    Ok((jp - 2.0 * j0 + jm) / (eps * eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTol,
    StepTol,
    MaxIters,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradientTol => "gradient-tol",
            Termination::StepTol => "step-tol",
            Termination::MaxIters => "max-iters",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iterate {
    pub cost: f64,
    pub grad_norm: f64,
    /// Accepted step length; 0 for the starting point.
    pub step: f64,
}

/// Adjoint directional derivative along `−∇_u H` against `fd_gradient`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    pub iteration: usize,
    pub adjoint: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct OptimRun {
    pub iterates: Vec<Iterate>,
    pub control: Control,
    pub termination: Termination,
    pub fd_checks: Vec<FdCheck>,
}

impl OptimRun {
    pub fn final_cost(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |it| it.cost)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub initial_step: f64,
    /// Compare the adjoint derivative with `fd_gradient` every this many
    /// iterations; 0 disables the check.
    pub fd_check_every: usize,
    pub fd_eps: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            step_tol: 1e-14,
            max_iters: 500,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            fd_check_every: 10,
            fd_eps: 1e-5,
        }
    }
}

pub fn minimize(problem: &Problem, grid: &Grid, u0: &Control) -> Result<OptimRun> {
    minimize_with(problem, grid, u0, &OptimOptions::default())
}

/// Steepest descent in the quadrature-weighted `L²` inner product with
/// Armijo backtracking. A trial point whose state solve fails counts as a
/// rejected step.
pub fn minimize_with(problem: &Problem, grid: &Grid, u0: &Control, opts: &OptimOptions) -> Result<OptimRun> {
    let mut u = u0.clone();
    let (mut j, mut g) = adjoint_gradient(problem, grid, &u)?;
    let mut iterates = vec![Iterate { cost: j, grad_norm: g.sup_norm(), step: 0.0 }];
    let mut fd_checks = Vec::new();
    for it in 0..opts.max_iters {
        let gnorm = g.sup_norm();
        if gnorm <= opts.grad_tol {
            return Ok(OptimRun { iterates, control: u, termination: Termination::GradientTol, fd_checks });
        }
        let slope = g.weighted_dot(&g, grid);
        if opts.fd_check_every > 0 && it % opts.fd_check_every == 0 {
            let dir = g.plus_scaled(-2.0, &g);
            let fd = fd_gradient(problem, grid, &u, &dir, opts.fd_eps)?;
            let adjoint = -slope;
            let rel_err = (fd - adjoint).abs() / adjoint.abs().max(f64::MIN_POSITIVE);
            fd_checks.push(FdCheck { iteration: it, adjoint, fd, rel_err });
        }
        let mut alpha = opts.initial_step;
        let mut failures = Vec::new();
        let mut evaluated = false;
        let accepted = loop {
            if alpha <= opts.step_tol {
                break None;
            }
            let trial = u.plus_scaled(-alpha, &g);
            match evaluate(problem, grid, &trial) {
                Ok(jt) if jt <= j - opts.armijo_c * alpha * slope => break Some((trial, alpha)),
                Ok(_) => evaluated = true,
                Err(e) => failures.push(format!("step {alpha:.3e}: {e}")),
            }
            alpha *= opts.shrink;
        };
        let Some((next, step)) = accepted else {
            if !evaluated && !failures.is_empty() {
                return Err(Error::NonConvergence {
                    what: format!(
                        "line search at iteration {it}: every trial state solve failed; last: {}",
                        failures.last().map(String::as_str).unwrap_or("")
                    ),
                    iterations: it,
                    residual: gnorm,
                });
            }
            return Ok(OptimRun { iterates, control: u, termination: Termination::StepTol, fd_checks });
        };
        u = next;
        let (jn, gn) = adjoint_gradient(problem, grid, &u)?;
        j = jn;
        g = gn;
        iterates.push(Iterate { cost: j, grad_norm: g.sup_norm(), step });
    }
    let termination = if g.sup_norm() <= opts.grad_tol { Termination::GradientTol } else { Termination::MaxIters };
    Ok(OptimRun { iterates, control: u, termination, fd_checks })
}
