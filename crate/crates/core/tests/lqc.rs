use intcontrol::lqc::{coupled_preset, scalar_lq_preset, solve_lqc, solve_stationarity};
use intcontrol::{build_grid, fredholm, Field, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `∇_u H` of the coupled preset written out by hand from its blocks.
fn direct_gradient(g: &Grid, phi: &Field, psi: &Field, u: &Field) -> Vec<f64> {
    let p = coupled_preset();
    let nn = g.len();
    let x = |i: usize| g.point(i);
    let s = |i: usize| phi.at(i);
    let uu = |i: usize| u.at(i)[0];
    (0..nn)
        .map(|i| {
            let mut v = p.cost_f1.as_ref().unwrap()(x(i), s(i))[0]
                + p.cost_f2.as_ref().unwrap()(x(i), s(i))[(0, 0)] * uu(i);
            for z in 0..nn {
                let wz = g.weight(z);
                let f4 = p.cost_f4.as_ref().unwrap()(x(i), x(z), s(i), s(z))[0];
                let f5 = p.cost_f5.as_ref().unwrap()(x(i), x(z), s(i), s(z))[(0, 0)];
                let f6 = p.cost_f6.as_ref().unwrap()(x(i), x(z), s(i), s(z))[(0, 0)];
                let f6t = p.cost_f6.as_ref().unwrap()(x(z), x(i), s(z), s(i))[(0, 0)];
                v += 0.5 * wz * (f4 + f5 * uu(i) + 0.5 * f6 * uu(z)) + 0.25 * wz * f6t * uu(z);
            }
            for a in 0..nn {
                let mut b = p.f1.as_ref().unwrap()(x(a), x(i), s(i))[(0, 0)];
                for c in 0..nn {
                    b += 0.5 * g.weight(c) * p.g1.as_ref().unwrap()(x(a), x(i), x(c), s(i), s(c))[(0, 0)];
                }
                v += g.weight(a) * psi.at(a)[0] * b;
            }
            v
        })
        .collect()
}

#[test]
fn coupled_stationarity_against_direct_gradient() {
    let g = build_grid(1.0, 12).unwrap();
    let phi = Field::from_fn(&g, 1, |x| vec![1.0 + 0.3 * x[0]]);
    let psi = Field::from_fn(&g, 1, |x| vec![0.5 - x[0] * x[0]]);
    let (u, res) = solve_stationarity(&coupled_preset(), &g, &phi, &psi).unwrap();
    assert!(res <= 1e-10);
    let direct = direct_gradient(&g, &phi, &psi, &u);
    let worst = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn coupled_lqc_is_stationary_and_locally_minimal() {
    let g = build_grid(1.0, 12).unwrap();
    let lq = coupled_preset();
    let sol = solve_lqc(&lq, &g).unwrap();
    assert!(sol.stationarity_residual <= 1e-10);
    let direct = direct_gradient(&g, &sol.state, &sol.costate, &sol.control);
    assert!(direct.iter().all(|v| v.abs() <= 1e-10));

    let p = lq.to_problem().unwrap();
    let j0 = fredholm::evaluate(&p, &g, &sol.control).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let du = Field::from_vec(1, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let j = fredholm::evaluate(&p, &g, &sol.control.plus_scaled(1e-3, &du)).unwrap();
        assert!(j > j0, "{j} <= {j0}");
    }
}

#[test]
fn refreshed_costate_reproduces_control() {
    let g = build_grid(1.0, 12).unwrap();
    let lq = scalar_lq_preset(0.4, 0.5, 1.0);
    let sol = solve_lqc(&lq, &g).unwrap();
    let p = lq.to_problem().unwrap();
    let phi = fredholm::solve_state(&p, &sol.control, &g).unwrap();
    let psi = fredholm::solve_costate(&p, &g, &phi, &sol.control).unwrap();
    let (u, _) = solve_stationarity(&lq, &g, &phi, &psi).unwrap();
    assert!(u.sup_distance(&sol.control) < 1e-9);
}
