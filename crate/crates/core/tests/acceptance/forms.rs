use std::collections::BTreeMap;

use intcontrol::bilinear::{lambda_kernels, second_variation1, solve_nc1, solve_nc2, sufficiency2};
use intcontrol::presets::{build_preset, Preset};
use intcontrol::{fredholm, volterra, Family, Field, Grid, PDReport, Problem, QuadIntegralForm, Verdict};

use crate::common::*;

/// Reduced form, its PD report and the direct evaluation `δu ↦ δ²J` of the
/// accessory cost through the linearized state.
struct Reduced {
    form: QuadIntegralForm,
    /// `δ²J = form_scale · form.value`.
    form_scale: f64,
    report: PDReport,
    direct: Box<dyn Fn(&Field) -> f64>,
}

fn reduced_at(p: &Problem, g: &Grid, u: &Field) -> Reduced {
    match p.family() {
        Family::Fredholm => {
            let sol = fredholm::solve(p, g, u).unwrap();
            let data = fredholm::accessory_from_solution(p, g, &sol).unwrap();
            let form = fredholm::assemble_accessory(g, &data).unwrap();
            let report = fredholm::check_pd(&form, g).unwrap();
            let (p, g) = (p.clone(), g.clone());
            let direct = Box::new(move |du: &Field| {
                let dy = fredholm::linearized_state(&p, &g, &sol, du).unwrap();
                data.cost(&g, &dy, du, None)
            });
            Reduced { form, form_scale: 1.0, report, direct }
        }
        Family::Volterra => {
            let sol = volterra::solve(p, g, u).unwrap();
            let data = volterra::accessory_from_solution(p, g, &sol).unwrap();
            let acc = volterra::reduce_accessory(g, &data).unwrap();
            let report = volterra::check_pd_volterra(&acc.form, g).unwrap();
            let (p, g) = (p.clone(), g.clone());
            let last = g.len() - 1;
            let direct = Box::new(move |du: &Field| {
                let dy = volterra::linearized_state(&p, &g, &sol, du).unwrap();
                data.cost(&g, &dy, du, Some(last))
            });
            Reduced { form: acc.form, form_scale: 2.0, report, direct }
        }
    }
}

const PRESETS: &[&str] = &[
    "fredholm-nonlinear",
    "fredholm-coupled",
    "fredholm-lq",
    "fredholm-energy",
    "fredholm-box",
    "volterra-nonlinear",
    "volterra-lq",
    "volterra-energy",
    "bilinear-first",
    "bilinear-second",
    "lotka-harvest",
];

fn grid_for(name: &str) -> usize {
    if name == "fredholm-box" {
        5
    } else {
        16
    }
}

pub fn reduction() -> Result<String, String> {
    let mut t = Tally::default();
    for (k, name) in PRESETS.iter().enumerate() {
        let (p, g) = preset(name, grid_for(name));
        let r = reduced_at(&p, &g, &smooth_control(&g, p.m()));
        let mut rng = rng(300 + k as u64);
        for _ in 0..5 {
            let du = random_field(&mut rng, g.len(), p.m());
            let reduced = r.form_scale * r.form.value(&g, &du).unwrap();
            let direct = (r.direct)(&du);
            let e = rel_err(reduced, direct);
            t.record(e <= 1e-6, e, || format!("{name}: reduced {reduced:.10e} vs direct {direct:.10e}"));
        }
    }

    // the bilinear Λ-kernel form against its own second-variation formula
    let g = intcontrol::build_grid(1.0, 16).unwrap();
    let Preset::Bilinear1(p1) = build_preset("bilinear-first", &BTreeMap::new()).unwrap() else { unreachable!() };
    let sol = solve_nc1(&p1, &g).unwrap();
    let lk = lambda_kernels(&p1, &g, &sol).unwrap();
    let mut rng = rng(350);
    for _ in 0..5 {
        let du = random_field(&mut rng, g.len(), 1);
        let (a, b) = (lk.value(&g, &du).unwrap(), second_variation1(&p1, &g, &sol, &du).unwrap());
        let e = rel_err(a, b);
        t.record(e <= 1e-6, e, || format!("bilinear-first lambda form {a:.10e} vs {b:.10e}"));
    }
    t.finish("relative error")
}

/// `min δ²J / |δu|²` over random probes.
fn probe_min(r: &Reduced, g: &Grid, m: usize, probes: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..probes {
        let du = random_field(&mut rng, g.len(), m);
        worst = worst.min(r.form_scale * r.form.value(g, &du).unwrap() / du.weighted_dot(&du, g));
    }
    worst
}

pub fn sufficiency() -> Result<String, String> {
    let mut t = Tally::default();
    let mut fired = Vec::new();
    let mut gram_pd = 0;
    for (k, name) in PRESETS.iter().enumerate() {
        let (p, g) = preset(name, grid_for(name));
        let r = reduced_at(&p, &g, &smooth_control(&g, p.m()));
        let rep = r.report;
        if rep.pointwise_verdict.is_pd() {
            fired.push(*name);
            let ok = rep.min_eig_discrete > 0.0;
            t.record(ok, 0.0, || format!("{name}: pointwise PD but Gram min eigenvalue {:.3e}", rep.min_eig_discrete));
        }
        let probe = probe_min(&r, &g, p.m(), 10_000, 400 + k as u64);
        let agree = match rep.discrete_verdict {
            Verdict::PositiveDefinite => probe > 0.0,
            Verdict::Indefinite => probe < 0.0,
            Verdict::Inconclusive => true,
        };
        if rep.discrete_verdict.is_pd() {
            gram_pd += 1;
        }
        t.record(agree, 0.0, || {
            format!("{name}: Gram {} (min eig {:.3e}) but probes give {probe:.3e}", rep.discrete_verdict, rep.min_eig_discrete)
        });
    }

    // the second-order bilinear test on its reduced form
    let g = intcontrol::build_grid(1.0, 12).unwrap();
    let Preset::Bilinear2(p2) = build_preset("bilinear-second", &BTreeMap::new()).unwrap() else { unreachable!() };
    let sol = solve_nc2(&p2, &g).unwrap();
    let rep = sufficiency2(&p2, &g, &sol).unwrap();
    let r = Reduced { form: rep.reduced_form.clone(), form_scale: 2.0, report: rep.reduced, direct: Box::new(|_| 0.0) };
    let probe = probe_min(&r, &g, 1, 10_000, 499);
    let agree = rep.reduced.discrete_verdict.is_pd() == (probe > 0.0);
    t.record(agree, 0.0, || format!("bilinear-second M-bar: {} but probes give {probe:.3e}", rep.reduced.discrete_verdict));
    if rep.reduced.pointwise_verdict.is_pd() {
        fired.push("bilinear-second M-bar");
        t.record(rep.reduced.min_eig_discrete > 0.0, 0.0, || "bilinear-second M-bar: pointwise PD, Gram not".into());
    }
    if fired.is_empty() {
        t.record(false, 0.0, || "pointwise verdict fired on no preset".into());
    }
    let head = format!(
        "{} checks; Gram PD on {gram_pd}/{} presets; pointwise PD fired on {}",
        t.checks,
        PRESETS.len(),
        fired.join(", ")
    );
    t.finish_with(head)
}
