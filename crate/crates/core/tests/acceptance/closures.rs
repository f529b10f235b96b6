use std::collections::BTreeMap;

use intcontrol::lqc::solve_lqc;
use intcontrol::multiarray::{Index, IndexMap, Signature, Transposition, Tri3};
use intcontrol::optimizer::{adjoint_gradient, minimize};
use intcontrol::presets::{build_preset, Preset};
use intcontrol::{bilinear, build_grid, Field};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::common::*;

pub fn stationarity() -> Result<String, String> {
    let mut t = Tally::default();
    let g = build_grid(1.0, 32).unwrap();
    let mut reference = BTreeMap::new();
    for name in ["fredholm-lq", "fredholm-coupled", "volterra-lq", "bilinear-first", "bilinear-second", "lotka-harvest"] {
        let preset = build_preset(name, &BTreeMap::new()).unwrap();
        let (control, cost) = match &preset {
            Preset::Lqc(p) => {
                let s = solve_lqc(p, &g).unwrap();
                (s.control, s.cost)
            }
            Preset::Bilinear1(p) => {
                let s = bilinear::solve_nc1(p, &g).unwrap();
                (s.control, s.cost)
            }
            Preset::Bilinear2(p) => {
                let s = bilinear::solve_nc2(p, &g).unwrap();
                (s.control, s.cost)
            }
            Preset::Generic(_) => unreachable!(),
        };
        reference.insert(name, cost);
        let (_, grad) = adjoint_gradient(&preset.problem().unwrap(), &g, &control).unwrap();
        let e = grad.sup_norm();
        t.record(e <= 1e-8, e, || format!("{name}: |grad_u H| = {e:.3e}"));
    }
    for name in ["fredholm-lq", "volterra-lq"] {
        let p = build_preset(name, &BTreeMap::new()).unwrap().problem().unwrap();
        let run = minimize(&p, &g, &Field::zeros(g.len(), p.m())).unwrap();
        let e = (run.final_cost() - reference[name]).abs();
        t.record(e <= 1e-6, e, || {
            format!("{name}: optimizer J {:.12e} ({}) vs closure J {:.12e}", run.final_cost(), run.termination, reference[name])
        });
    }
    t.finish("gradient / cost gap")
}

fn random_tri3(rng: &mut rand_chacha::ChaCha8Rng, signature: Signature) -> Tri3 {
    let dims = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
    Tri3::from_fn(dims, signature, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn apply(a: &Tri3, s: Transposition) -> Tri3 {
    a.transpose(s).unwrap()
}

pub fn multiarray() -> Result<String, String> {
    let mut t = Tally::default();
    let mut rng = rng(500);
    let mut perms = vec![[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for case in 0..100 {
        let sig = if case % 2 == 0 { Signature::OneLowerTwoUpper } else { Signature::TwoLowerOneUpper };
        let a = random_tri3(&mut rng, sig);
        let mut same = |what: &str, b: &Tri3| t.record(b == &a, 0.0, || format!("case {case}: {what}"));
        let plus = apply(&a, Transposition::Plus);
        same("T+ has order 3", &apply(&apply(&plus, Transposition::Plus), Transposition::Plus));
        same("T- undoes T+", &apply(&plus, Transposition::Minus));
        same("T+ undoes T-", &apply(&apply(&a, Transposition::Minus), Transposition::Plus));
        same("T<-> is an involution", &apply(&apply(&a, Transposition::Swap), Transposition::Swap));
        same("flip is an involution", &apply(&apply(&a, Transposition::Flip), Transposition::Flip));
        perms.shuffle(&mut rng);
        let placement = [Index::Upper, Index::Lower, Index::Upper];
        let general = Transposition::General(IndexMap { perm: perms[0], placement });
        for s in [
            Transposition::Plus,
            Transposition::Minus,
            Transposition::Flip,
            Transposition::Swap,
            Transposition::Clockwise,
            Transposition::CounterClockwise,
            general,
        ] {
            let b = apply(&a, s);
            let inv = s.inverse(a.placement()).unwrap();
            same(&format!("{s:?} then its inverse"), &apply(&b, inv));
        }

        // (A^{T+})_k^{ij} = A_j^{ki} by explicit loops over storage (i, j, k)
        let [d0, d1, d2] = a.dims();
        let mut ok = plus.dims() == [d1, d2, d0];
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d0 {
                    ok &= plus.get(i, j, k) == a.get(k, i, j);
                }
            }
        }
        t.record(ok, 0.0, || format!("case {case}: T+ entries"));

        // w A u^(1) = u^T (A^{T+}) (w^T)^(2) on an A_i^{jk} array
        if sig == Signature::OneLowerTwoUpper {
            let u: Vec<f64> = (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let left: Vec<f64> = (0..d1)
                .map(|k| (0..d2).flat_map(|i| (0..d0).map(move |j| (i, j))).map(|(i, j)| w[i] * a.get(j, k, i) * u[j]).sum())
                .collect();
            let m = plus.act(&w, 2).unwrap();
            let right: Vec<f64> = (0..m.ncols()).map(|k| (0..m.nrows()).map(|c| u[c] * m[(c, k)]).sum()).collect();
            let scale = left.iter().fold(1.0f64, |s, v| s.max(v.abs()));
            let e = left.iter().zip(&right).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale;
            t.record(left.len() == right.len() && e <= 1e-14, e, || format!("case {case}: bilinear identity off by {e:.3e}"));

            let v: Vec<f64> = (0..d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bil = a.bilinear(&u, &v).unwrap();
            let e = (0..d2)
                .map(|i| {
                    let direct: f64 = (0..d0).flat_map(|j| (0..d1).map(move |k| (j, k))).map(|(j, k)| a.get(j, k, i) * u[j] * v[k]).sum();
                    (bil[i] - direct).abs()
                })
                .fold(0.0, f64::max);
            t.record(e <= 1e-14, e, || format!("case {case}: bilinear form off by {e:.3e}"));
        }
    }
    t.finish("relative error")
}
