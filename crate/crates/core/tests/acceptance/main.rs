//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod closed_forms;
mod closures;
mod common;
mod fidelity;
mod forms;

use std::time::Instant;

type Check = fn() -> Result<String, String>;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("1 gradient fidelity", fidelity::gradient),
        ("2 second-variation fidelity", fidelity::second_variation),
        ("3 closed-form state solves", closed_forms::states),
        ("4 symmetrization invariance", closed_forms::symmetrization),
        ("5 nested vs folded causal form", closed_forms::nested_vs_folded),
        ("6 resolvent identities", closed_forms::resolvents),
        ("7 accessory reduction", forms::reduction),
        ("8 sufficiency tests", forms::sufficiency),
        ("9 stationarity closures", closures::stationarity),
        ("10 multiarray identities", closures::multiarray),
    ];
    // Optional positional arguments select criteria by number.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
