use std::collections::BTreeMap;

use intcontrol::presets::{build_preset, info, preset_grid};
use intcontrol::{Field, Grid, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(rng: &mut ChaCha8Rng, nodes: usize, dim: usize) -> Field {
    Field::from_vec(dim, (0..nodes * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Default-parameter preset, its generic encoding and a grid with `n`
/// intervals per axis.
pub fn preset(name: &str, n: usize) -> (Problem, Grid) {
    let p = build_preset(name, &BTreeMap::new()).unwrap().problem().unwrap();
    (p, preset_grid(info(name).unwrap(), n).unwrap())
}

/// A smooth, nonzero control to linearize around.
pub fn smooth_control(grid: &Grid, m: usize) -> Field {
    Field::from_fn(grid, m, |x| (0..m).map(|k| 0.3 * (3.0 * x[0] + k as f64).sin() + 0.1).collect())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Collects failures; `finish` turns them into the criterion result.
#[derive(Default)]
pub struct Tally {
    pub checks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err.is_finite() {
            self.worst = self.worst.max(err);
        }
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn finish(self, summary: &str) -> Result<String, String> {
        let head = format!("{} checks, worst {summary} {:.2e}", self.checks, self.worst);
        self.finish_with(head)
    }

    pub fn finish_with(self, head: String) -> Result<String, String> {
        if self.failures.is_empty() {
            Ok(head)
        } else {
            Err(format!("{head}; {}", self.failures.join("; ")))
        }
    }
}
