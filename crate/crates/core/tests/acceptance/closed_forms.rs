use std::collections::BTreeMap;

use intcontrol::optimizer::adjoint_gradient;
use intcontrol::presets::build_preset;
use intcontrol::problem::{symmetrize, PairKernel};
use intcontrol::volterra::{causal_problem, solve_causal_nested, volterra_resolvent};
use intcontrol::{build_grid, fredholm, volterra, Family, Field, Kernel, Problem};
use nalgebra::DMatrix;

use crate::common::*;

/// With `Y = ∫_0^t y` the double-term preset reads `y = 1 + ½Y²`, so
/// `Y' = 1 + ½Y²`, `Y(0) = 0`; integrated by classical RK4 with `sub` steps
/// per grid interval.
fn double_term_oracle(times: &[f64], sub: usize) -> Vec<f64> {
    let rhs = |y: f64| 1.0 + 0.5 * y * y;
    let mut y = 0.0;
    let mut out = vec![1.0];
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / sub as f64;
        for _ in 0..sub {
            let k1 = rhs(y);
            let k2 = rhs(y + 0.5 * h * k1);
            let k3 = rhs(y + 0.5 * h * k2);
            let k4 = rhs(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(1.0 + 0.5 * y * y);
    }
    out
}

pub fn states() -> Result<String, String> {
    let mut t = Tally::default();

    let (p, g) = preset("volterra-exp", 256);
    let y = volterra::solve_state(&p, &Field::zeros(g.len(), 1), &g).unwrap();
    let e = (y.at(g.len() - 1)[0] - std::f64::consts::E).abs();
    t.record(e <= 1e-4, e, || format!("volterra-exp: y(1) off by {e:.3e}"));

    for lambda in [0.5, 0.25, -1.0, 0.9] {
        let mut params = BTreeMap::new();
        params.insert("lambda".to_string(), lambda);
        let p = build_preset("fredholm-constant", &params).unwrap().problem().unwrap();
        let g = build_grid(1.0, 32).unwrap();
        let phi = fredholm::solve_state(&p, &Field::zeros(g.len(), 1), &g).unwrap();
        let want = 1.0 / (1.0 - lambda);
        let e = phi.as_slice().iter().map(|v| (v - want).abs()).fold(0.0, f64::max);
        t.record(e <= 1e-10, e, || format!("fredholm-constant lambda={lambda}: off by {e:.3e}"));
    }

    let (p, g) = preset("volterra-double", 256);
    let y = volterra::solve_state(&p, &Field::zeros(g.len(), 1), &g).unwrap();
    let times: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0]).collect();
    let oracle = double_term_oracle(&times, 8);
    let e = oracle.iter().enumerate().map(|(i, v)| (y.at(i)[0] - v).abs()).fold(0.0, f64::max);
    t.record(e <= 1e-3, e, || format!("volterra-double: off the ODE oracle by {e:.3e}"));
    t.finish("abs error")
}

/// The preset with `f2`/`F2` replaced by their symmetrizations.
fn symmetrized_copy(p: &Problem) -> Problem {
    let mut b = Problem::builder(p.family(), p.n(), p.m())
        .forcing(p.forcing().clone())
        .f1(p.f1().clone())
        .f2(symmetrize(p.original_f2(), PairKernel::Dynamics))
        .running_cost(p.cost1().clone())
        .pair_cost(symmetrize(p.original_cost2(), PairKernel::Cost));
    if p.family() == Family::Volterra {
        b = b.terminal_cost(p.terminal().clone());
    }
    b.build().unwrap()
}

fn state_of(p: &Problem, g: &intcontrol::Grid, u: &Field) -> Field {
    match p.family() {
        Family::Fredholm => fredholm::solve_state(p, u, g).unwrap(),
        Family::Volterra => volterra::solve_state(p, u, g).unwrap(),
    }
}

pub fn symmetrization() -> Result<String, String> {
    let mut t = Tally::default();
    for name in ["fredholm-nonlinear", "volterra-nonlinear", "fredholm-coupled", "fredholm-box"] {
        let n = if name == "fredholm-box" { 6 } else { 24 };
        let (p, g) = preset(name, n);
        let q = symmetrized_copy(&p);
        let raw = p.with_raw_pair_kernels();
        let u = smooth_control(&g, p.m());
        let (jp, gp) = adjoint_gradient(&p, &g, &u).unwrap();
        let (jq, gq) = adjoint_gradient(&q, &g, &u).unwrap();
        let yp = state_of(&p, &g, &u);
        let jr = intcontrol::optimizer::evaluate(&raw, &g, &u).unwrap();
        let yr = state_of(&raw, &g, &u);
        let scale = |x: f64| x.abs().max(1.0);
        let checks = [
            ("J", (jp - jq).abs() / scale(jp)),
            ("state", yp.sup_distance(&state_of(&q, &g, &u)) / scale(yp.sup_norm())),
            ("gradient", gp.sup_distance(&gq) / scale(gp.sup_norm())),
            ("J raw", (jp - jr).abs() / scale(jp)),
            ("state raw", yp.sup_distance(&yr) / scale(yp.sup_norm())),
        ];
        for (what, e) in checks {
            t.record(e <= 1e-12, e, || format!("{name}: {what} changed by {e:.3e}"));
        }
    }
    t.finish("relative change")
}

pub fn nested_vs_folded() -> Result<String, String> {
    let mut t = Tally::default();
    let x0 = Kernel::new(1, &[], 2, |p, _| vec![1.0 + 0.5 * p[0][0], (2.0 * p[0][0]).cos()]);
    let f = Kernel::new(1, &[2], 2, |p, s| {
        let x = s[0];
        vec![0.4 * x[1] - 0.2 * x[0] * p[0][0], (x[0]).sin() * 0.3]
    });
    let g = Kernel::new(2, &[2, 2], 2, |p, s| {
        let (t, sg) = (p[0][0], p[1][0]);
        let (a, b) = (s[0], s[1]);
        vec![0.5 * (t - 2.0 * sg).cos() * a[0] * b[1], 0.3 * (1.0 + t * sg) * a[1] - 0.2 * b[0] * b[0]]
    });
    for n in [16, 64] {
        let grid = build_grid(1.0, n).unwrap();
        let nested = solve_causal_nested(&grid, &x0, &f, &g).unwrap();
        let p = causal_problem(x0.clone(), &f, &g, 1).unwrap();
        let folded = volterra::solve_state(&p, &Field::zeros(grid.len(), 1), &grid).unwrap();
        let e = nested.sup_distance(&folded);
        t.record(e <= 1e-10, e, || format!("N={n}: states differ by {e:.3e}"));
    }
    t.finish("state difference")
}

pub fn resolvents() -> Result<String, String> {
    let mut t = Tally::default();
    for lambda in [0.5, -0.75] {
        let g = build_grid(1.0, 32).unwrap();
        let nn = g.len();
        let a = vec![DMatrix::from_element(1, 1, lambda); nn * nn];
        let r = fredholm::fredholm_resolvent(&g, &a).unwrap();
        let want = lambda / (1.0 - lambda);
        let e = r.s.iter().map(|b| (b[(0, 0)] - want).abs()).fold(0.0, f64::max);
        t.record(e <= 1e-10, e, || format!("fredholm lambda={lambda}: S off by {e:.3e}"));
        t.record(r.residual <= 1e-10, r.residual, || format!("fredholm lambda={lambda}: residual {:.3e}", r.residual));
    }
    for lambda in [0.7, -1.2] {
        let g = build_grid(1.0, 256).unwrap();
        let nn = g.len();
        let a = vec![DMatrix::from_element(1, 1, lambda); nn * nn];
        let r = volterra_resolvent(&g, &a).unwrap();
        let mut e: f64 = 0.0;
        for i in 0..nn {
            for k in 0..=i {
                let want = lambda * (lambda * (g.point(i)[0] - g.point(k)[0])).exp();
                e = e.max((r.s[i * nn + k][(0, 0)] - want).abs());
            }
        }
        t.record(e <= 1e-3, e, || format!("volterra lambda={lambda}: S off by {e:.3e}"));
        t.record(r.residual <= 1e-10, r.residual, || format!("volterra lambda={lambda}: residual {:.3e}", r.residual));
    }
    t.finish("error")
}
