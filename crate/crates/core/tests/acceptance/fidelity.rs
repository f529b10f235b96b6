use std::time::Instant;

use intcontrol::optimizer::{adjoint_gradient, fd_gradient, fd_second};
use intcontrol::{fredholm, volterra, Family};

use crate::common::*;

/// `(preset, intervals per axis)`; the box preset is two-dimensional.
const PRESETS: &[(&str, usize)] = &[
    ("fredholm-nonlinear", 64),
    ("fredholm-lq", 64),
    ("fredholm-energy", 64),
    ("fredholm-box", 8),
    ("volterra-nonlinear", 64),
    ("volterra-lq", 64),
    ("bilinear-second", 64),
    ("lotka-harvest", 64),
];

pub fn gradient() -> Result<String, String> {
    let mut t = Tally::default();
    let mut slowest: f64 = 0.0;
    for (k, &(name, n)) in PRESETS.iter().enumerate() {
        let start = Instant::now();
        let (p, g) = preset(name, n);
        let u = smooth_control(&g, p.m());
        let (_, grad) = adjoint_gradient(&p, &g, &u).unwrap();
        let mut rng = rng(100 + k as u64);
        for _ in 0..5 {
            let du = random_field(&mut rng, g.len(), p.m());
            let adjoint = grad.weighted_dot(&du, &g);
            let fd = fd_gradient(&p, &g, &u, &du, 1e-5).unwrap();
            let e = rel_err(fd, adjoint);
            t.record(e <= 1e-4, e, || format!("{name}: adjoint {adjoint:.10e} vs fd {fd:.10e}"));
        }
        let secs = start.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        t.record(secs <= 30.0, 0.0, || format!("{name}: check took {secs:.1}s"));
    }
    let head = format!("{} checks, worst relative error {:.2e}, slowest preset {slowest:.1}s", t.checks, t.worst);
    t.finish_with(head)
}

pub fn second_variation() -> Result<String, String> {
    let mut t = Tally::default();
    for (k, &(name, n)) in PRESETS.iter().enumerate() {
        let (p, g) = preset(name, n);
        let u = smooth_control(&g, p.m());
        let mut rng = rng(200 + k as u64);
        let dirs: Vec<_> = (0..5).map(|_| random_field(&mut rng, g.len(), p.m())).collect();
        let values: Vec<f64> = match p.family() {
            Family::Fredholm => {
                let sol = fredholm::solve(&p, &g, &u).unwrap();
                dirs.iter().map(|du| fredholm::second_variation(&p, &g, &sol, du, None).unwrap().value).collect()
            }
            Family::Volterra => {
                let sol = volterra::solve(&p, &g, &u).unwrap();
                dirs.iter().map(|du| volterra::second_variation(&p, &g, &sol, du, None).unwrap().value).collect()
            }
        };
        for (du, sv) in dirs.iter().zip(values) {
            let fd = fd_second(&p, &g, &u, du, 1e-3).unwrap();
            let e = rel_err(fd, sv);
            t.record(e <= 1e-3, e, || format!("{name}: analytic {sv:.10e} vs fd {fd:.10e}"));
        }
    }
    t.finish("relative error")
}
