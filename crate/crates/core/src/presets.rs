//! Built-in problem catalog. Every preset has a name, a family, a domain
//! and a set of numeric parameters with defaults.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;

use crate::bilinear::{self, BilinearProblem1, BilinearProblem2};
use crate::error::{Error, Result};
use crate::lqc::{self, LqcProblem};
use crate::multiarray::{Signature, Tri3};
use crate::problem::{Family, Kernel, Problem};
use crate::quadrature::{build_box_grid, build_grid, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetClass {
    Generic,
    Lqc,
    Bilinear1,
    Bilinear2,
}

#[derive(Debug, Clone, Copy)]
pub struct PresetInfo {
    pub name: &'static str,
    pub family: Family,
    pub class: PresetClass,
    /// Spatial dimension of the domain; 1 is the interval `[0, 1]`.
    pub domain_dim: usize,
    pub params: &'static [(&'static str, f64)],
    pub description: &'static str,
}

const CATALOG: &[PresetInfo] = &[
    PresetInfo {
        name: "fredholm-zero",
        family: Family::Fredholm,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[],
        description: "no kernels, forcing 1 + x",
    },
    PresetInfo {
        name: "fredholm-constant",
        family: Family::Fredholm,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("lambda", 0.5)],
        description: "f1 = lambda * phi, forcing 1",
    },
    PresetInfo {
        name: "fredholm-lq",
        family: Family::Fredholm,
        class: PresetClass::Lqc,
        domain_dim: 1,
        params: &[("a", 0.3), ("b", 0.5), ("r", 1.0)],
        description: "scalar linear-quadratic problem",
    },
    PresetInfo {
        name: "fredholm-coupled",
        family: Family::Fredholm,
        class: PresetClass::Lqc,
        domain_dim: 1,
        params: &[],
        description: "quasi-LQC problem with every block present",
    },
    PresetInfo {
        name: "fredholm-nonlinear",
        family: Family::Fredholm,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("scale", 1.0)],
        description: "two states, one control, nonlinear f1, f2, F1, F2",
    },
    PresetInfo {
        name: "fredholm-energy",
        family: Family::Fredholm,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("r", 1.0), ("b", 0.3)],
        description: "f1 = 0.3 phi + b u, cost 1/2 phi^2 + r/2 u^2",
    },
    PresetInfo {
        name: "fredholm-box",
        family: Family::Fredholm,
        class: PresetClass::Generic,
        domain_dim: 2,
        params: &[("scale", 1.0)],
        description: "scalar problem on the unit square",
    },
    PresetInfo {
        name: "volterra-zero",
        family: Family::Volterra,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[],
        description: "no kernels, forcing 1 + t",
    },
    PresetInfo {
        name: "volterra-exp",
        family: Family::Volterra,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("rate", 1.0)],
        description: "f1 = rate * y, forcing 1",
    },
    PresetInfo {
        name: "volterra-double",
        family: Family::Volterra,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[],
        description: "f2 = y1 * y2, forcing 1",
    },
    PresetInfo {
        name: "volterra-lq",
        family: Family::Volterra,
        class: PresetClass::Bilinear1,
        domain_dim: 1,
        params: &[("a", 0.5), ("b", 1.0), ("p", 1.0), ("r", 1.0)],
        description: "scalar linear-quadratic problem",
    },
    PresetInfo {
        name: "volterra-nonlinear",
        family: Family::Volterra,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("scale", 1.0)],
        description: "two states, one control, nonlinear f1, f2, F1, F2 and terminal cost",
    },
    PresetInfo {
        name: "volterra-energy",
        family: Family::Volterra,
        class: PresetClass::Generic,
        domain_dim: 1,
        params: &[("r", 1.0), ("b", 0.3)],
        description: "f1 = 0.3 y + b u, cost r/2 u^2 and terminal 1/2 y^2",
    },
    PresetInfo {
        name: "bilinear-first",
        family: Family::Volterra,
        class: PresetClass::Bilinear1,
        domain_dim: 1,
        params: &[],
        description: "first-order bilinear system with a coupling term",
    },
    PresetInfo {
        name: "bilinear-second",
        family: Family::Volterra,
        class: PresetClass::Bilinear2,
        domain_dim: 1,
        params: &[],
        description: "second-order bilinear system with two-point cost blocks",
    },
    PresetInfo {
        name: "lotka-harvest",
        family: Family::Volterra,
        class: PresetClass::Bilinear2,
        domain_dim: 1,
        params: &[],
        description: "predator-prey system with harvesting controls",
    },
];

pub fn catalog() -> &'static [PresetInfo] {
    CATALOG
}

pub fn info(name: &str) -> Result<&'static PresetInfo> {
    CATALOG
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Problem(format!("unknown preset '{name}'")))
}

/// A preset instantiated with concrete parameter values.
#[derive(Debug, Clone)]
pub enum Preset {
    Generic(Problem),
    Lqc(LqcProblem),
    Bilinear1(BilinearProblem1),
    Bilinear2(BilinearProblem2),
}

impl Preset {
    /// Generic encoding, for the adjoint pipeline of either family.
    pub fn problem(&self) -> Result<Problem> {
        match self {
            Preset::Generic(p) => Ok(p.clone()),
            Preset::Lqc(p) => p.to_problem(),
            Preset::Bilinear1(p) => p.to_problem(),
            Preset::Bilinear2(p) => p.to_problem(),
        }
    }
}

/// Grid on the preset's domain with `n` intervals per axis.
pub fn preset_grid(info: &PresetInfo, n: usize) -> Result<Grid> {
    match info.domain_dim {
        1 => build_grid(1.0, n),
        d => build_box_grid(&vec![(0.0, 1.0); d], &vec![n; d]),
    }
}

pub fn build_preset(name: &str, params: &BTreeMap<String, f64>) -> Result<Preset> {
    let info = info(name)?;
    let known: BTreeSet<&str> = info.params.iter().map(|(k, _)| *k).collect();
    if let Some(bad) = params.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Problem(format!("preset '{name}' has no parameter '{bad}'")));
    }
    let get = |key: &str| -> f64 {
        params.get(key).copied().unwrap_or_else(|| {
            info.params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).expect("parameter listed in catalog")
        })
    };
    let fam = info.family;
    let preset = match name {
        "fredholm-zero" => Preset::Generic(Problem::builder(fam, 1, 1).forcing_fn(|x| vec![1.0 + x[0]]).build()?),
        "fredholm-constant" => {
            let l = get("lambda");
            Preset::Generic(
                Problem::builder(fam, 1, 1)
                    .forcing_fn(|_| vec![1.0])
                    .f1(Kernel::new(2, &[1, 1], 1, move |_, s| vec![l * s[0][0]])
                        .with_jacobian(0, move |_, _| DMatrix::from_element(1, 1, l))
                        .with_zero_hessians())
                    .build()?,
            )
        }
        "fredholm-lq" => Preset::Lqc(lqc::scalar_lq_preset(get("a"), get("b"), get("r"))),
        "fredholm-coupled" => Preset::Lqc(lqc::coupled_preset()),
        "fredholm-nonlinear" => Preset::Generic(nonlinear(fam, get("scale"))?),
        "fredholm-energy" | "volterra-energy" => Preset::Generic(energy(fam, get("r"), get("b"))?),
        "fredholm-box" => Preset::Generic(box_problem(get("scale"))?),
        "volterra-zero" => Preset::Generic(Problem::builder(fam, 1, 1).forcing_fn(|t| vec![1.0 + t[0]]).build()?),
        "volterra-exp" => {
            let r = get("rate");
            Preset::Generic(
                Problem::builder(fam, 1, 1)
                    .forcing_fn(|_| vec![1.0])
                    .f1(Kernel::new(2, &[1, 1], 1, move |_, s| vec![r * s[0][0]]))
                    .build()?,
            )
        }
        "volterra-double" => Preset::Generic(
            Problem::builder(fam, 1, 1)
                .forcing_fn(|_| vec![1.0])
                .f2(Kernel::new(3, &[1, 1, 1, 1], 1, |_, s| vec![s[0][0] * s[1][0]]))
                .build()?,
        ),
        "volterra-lq" => {
            let (a, b, p, r) = (get("a"), get("b"), get("p"), get("r"));
            let mut q = BilinearProblem1::new(1, 1);
            q.y0 = std::sync::Arc::new(|_| vec![1.0]);
            q.a = std::sync::Arc::new(move |_, _| DMatrix::from_element(1, 1, a));
            q.b = std::sync::Arc::new(move |_, _| DMatrix::from_element(1, 1, b));
            q.p = std::sync::Arc::new(move |_| DMatrix::from_element(1, 1, p));
            q.r = std::sync::Arc::new(move |_| DMatrix::from_element(1, 1, r));
            Preset::Bilinear1(q)
        }
        "volterra-nonlinear" => Preset::Generic(nonlinear(fam, get("scale"))?),
        "bilinear-first" => Preset::Bilinear1(bilinear::first_order_preset()),
        "bilinear-second" => Preset::Bilinear2(bilinear::second_order_preset()),
        "lotka-harvest" => Preset::Bilinear2(bilinear::harvesting_preset()),
        _ => unreachable!("catalog and constructor disagree on '{name}'"),
    };
    Ok(preset)
}

/// Two states, one control; every kernel nonzero and nonlinear. First
/// derivatives are analytic, second derivatives fall back to differences.
fn nonlinear(family: Family, k: f64) -> Result<Problem> {
    let f1 = Kernel::new(2, &[2, 1], 2, move |p, s| {
        let (t, r) = (p[0][0], p[1][0]);
        let (y, u) = (s[0], s[1][0]);
        vec![
            k * (0.3 * (t - r).cos() * y[0].sin() + 0.2 * y[1] * u),
            k * (0.25 * y[0] * y[1] / (1.0 + y[0] * y[0]) + 0.4 * (1.0 + r) * u * u),
        ]
    })
    .with_jacobian(0, move |p, s| {
        let (t, y, u) = (p[0][0] - p[1][0], s[0], s[1][0]);
        let q = 1.0 + y[0] * y[0];
        DMatrix::from_row_slice(
            2,
            2,
            &[
                k * 0.3 * t.cos() * y[0].cos(),
                k * 0.2 * u,
                k * 0.25 * y[1] * (1.0 - y[0] * y[0]) / (q * q),
                k * 0.25 * y[0] / q,
            ],
        )
    })
    .with_jacobian(1, move |p, s| {
        DMatrix::from_column_slice(2, 1, &[k * 0.2 * s[0][1], k * 0.8 * (1.0 + p[1][0]) * s[1][0]])
    });
    let f2 = Kernel::new(3, &[2, 2, 1, 1], 2, move |p, s| {
        let (t, r, q) = (p[0][0], p[1][0], p[2][0]);
        let (y1, y2, u1, u2) = (s[0], s[1], s[2][0], s[3][0]);
        vec![
            k * (0.1 * (1.0 + t * r) * y1[0] * y2[1] + 0.05 * u1 * u2),
            k * (0.08 * (r - q).sin() * y1[1].cos() * y2[0] + 0.1 * u1 * y2[0]),
        ]
    })
    .with_jacobian(0, move |p, s| {
        let (a, c) = (0.1 * (1.0 + p[0][0] * p[1][0]), 0.08 * (p[1][0] - p[2][0]).sin());
        let (y1, y2) = (s[0], s[1]);
        DMatrix::from_row_slice(2, 2, &[k * a * y2[1], 0.0, 0.0, -k * c * y1[1].sin() * y2[0]])
    })
    .with_jacobian(1, move |p, s| {
        let (a, c) = (0.1 * (1.0 + p[0][0] * p[1][0]), 0.08 * (p[1][0] - p[2][0]).sin());
        let (y1, u1) = (s[0], s[2][0]);
        DMatrix::from_row_slice(2, 2, &[0.0, k * a * y1[0], k * (c * y1[1].cos() + 0.1 * u1), 0.0])
    })
    .with_jacobian(2, move |_, s| DMatrix::from_column_slice(2, 1, &[k * 0.05 * s[3][0], k * 0.1 * s[1][0]]))
    .with_jacobian(3, move |_, s| DMatrix::from_column_slice(2, 1, &[k * 0.05 * s[2][0], 0.0]));
    let cost1 = Kernel::new(1, &[2, 1], 1, |p, s| {
        let (y, u) = (s[0], s[1][0]);
        vec![0.5 * u * u + 0.3 * y[0] * y[0] + 0.1 * y[1].sin() * u + 0.05 * p[0][0] * y[1] * y[1]]
    })
    .with_jacobian(0, |p, s| {
        let (y, u) = (s[0], s[1][0]);
        DMatrix::from_row_slice(1, 2, &[0.6 * y[0], 0.1 * y[1].cos() * u + 0.1 * p[0][0] * y[1]])
    })
    .with_jacobian(1, |_, s| DMatrix::from_element(1, 1, s[1][0] + 0.1 * s[0][1].sin()));
    let cost2 = Kernel::new(2, &[2, 2, 1, 1], 1, |p, s| {
        let (y1, y2, u1, u2) = (s[0], s[1], s[2][0], s[3][0]);
        vec![0.1 * (p[0][0] - p[1][0]).cos() * y1[0] * y2[1] + 0.05 * u1 * u2 * y1[0] + 0.02 * u1 * y2[1]]
    })
    .with_jacobian(0, |p, s| {
        let c = 0.1 * (p[0][0] - p[1][0]).cos();
        DMatrix::from_row_slice(1, 2, &[c * s[1][1] + 0.05 * s[2][0] * s[3][0], 0.0])
    })
    .with_jacobian(1, |p, s| {
        let c = 0.1 * (p[0][0] - p[1][0]).cos();
        DMatrix::from_row_slice(1, 2, &[0.0, c * s[0][0] + 0.02 * s[2][0]])
    })
    .with_jacobian(2, |_, s| DMatrix::from_element(1, 1, 0.05 * s[3][0] * s[0][0] + 0.02 * s[1][1]))
    .with_jacobian(3, |_, s| DMatrix::from_element(1, 1, 0.05 * s[2][0] * s[0][0]));
    let mut b = Problem::builder(family, 2, 1)
        .forcing_fn(|t| vec![1.0 + 0.2 * t[0], (t[0] * 2.0).cos()])
        .f1(f1)
        .f2(f2)
        .running_cost(cost1)
        .pair_cost(cost2);
    if family == Family::Volterra {
        b = b.terminal_cost(
            Kernel::new(1, &[2], 1, |_, s| vec![0.5 * s[0][0] * s[0][0] + s[0][1].sin()])
                .with_jacobian(0, |_, s| DMatrix::from_row_slice(1, 2, &[s[0][0], s[0][1].cos()])),
        );
    }
    b.build()
}

/// `f1 = 0.3 y + c u`, cost `r/2 u²` plus a state term; `R1 ≡ r`.
fn energy(family: Family, r: f64, c: f64) -> Result<Problem> {
    let mut b = Problem::builder(family, 1, 1)
        .forcing_fn(|_| vec![1.0])
        .f1(Kernel::new(2, &[1, 1], 1, move |_, s| vec![0.3 * s[0][0] + c * s[1][0]])
            .with_jacobian(0, |_, _| DMatrix::from_element(1, 1, 0.3))
            .with_jacobian(1, move |_, _| DMatrix::from_element(1, 1, c))
            .with_zero_hessians());
    b = match family {
        Family::Fredholm => b.running_cost(Kernel::new(1, &[1, 1], 1, move |_, s| {
            vec![0.5 * s[0][0] * s[0][0] + 0.5 * r * s[1][0] * s[1][0]]
        })),
        Family::Volterra => b
            .running_cost(Kernel::new(1, &[1, 1], 1, move |_, s| vec![0.5 * r * s[1][0] * s[1][0]]))
            .terminal_cost(Kernel::new(1, &[1], 1, |_, s| vec![0.5 * s[0][0] * s[0][0]])),
    };
    b.build()
}

fn box_problem(k: f64) -> Result<Problem> {
    let gauss = |p: &[&[f64]]| (-((p[0][0] - p[1][0]).powi(2) + (p[0][1] - p[1][1]).powi(2))).exp();
    Problem::builder(Family::Fredholm, 1, 1)
        .forcing_fn(|x| vec![1.0 + 0.5 * x[0] * x[1]])
        .f1(Kernel::new(2, &[1, 1], 1, move |p, s| vec![k * (0.3 * gauss(p) * s[0][0].tanh() + 0.5 * s[1][0])])
            .with_jacobian(0, move |p, s| {
                let th = s[0][0].tanh();
                DMatrix::from_element(1, 1, k * 0.3 * gauss(p) * (1.0 - th * th))
            })
            .with_jacobian(1, move |_, _| DMatrix::from_element(1, 1, 0.5 * k)))
        .f2(Kernel::new(3, &[1, 1, 1, 1], 1, move |_, s| vec![k * 0.1 * s[0][0] * s[1][0] * s[2][0]])
            .with_jacobian(0, move |_, s| DMatrix::from_element(1, 1, k * 0.1 * s[1][0] * s[2][0]))
            .with_jacobian(1, move |_, s| DMatrix::from_element(1, 1, k * 0.1 * s[0][0] * s[2][0]))
            .with_jacobian(2, move |_, s| DMatrix::from_element(1, 1, k * 0.1 * s[0][0] * s[1][0]))
            .with_jacobian(3, |_, _| DMatrix::zeros(1, 1)))
        .running_cost(Kernel::new(1, &[1, 1], 1, |_, s| vec![0.5 * s[0][0] * s[0][0] + 0.5 * s[1][0] * s[1][0]])
            .with_jacobian(0, |_, s| DMatrix::from_element(1, 1, s[0][0]))
            .with_jacobian(1, |_, s| DMatrix::from_element(1, 1, s[1][0]))
            .with_zero_hessians()
            .with_hessian(0, 0, |_, _| Tri3::from_fn([1, 1, 1], Signature::OneLowerTwoUpper, |_, _, _| 1.0))
            .with_hessian(1, 1, |_, _| Tri3::from_fn([1, 1, 1], Signature::OneLowerTwoUpper, |_, _, _| 1.0)))
        .build()
}
