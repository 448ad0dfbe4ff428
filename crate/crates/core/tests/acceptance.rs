//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

mod common;

use std::process::ExitCode;

use common::checks::{self, Check};

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("pooling oracle equivalence", checks::pooling_oracle),
        ("gradient correctness", checks::gradients),
        ("normalization invariants", checks::normalization),
        ("bound invariants", checks::bounds),
        ("role-swap identity", checks::role_swap),
        ("empty-intersection rule", checks::empty_cells),
        ("sampling contract", checks::sampling),
        ("parameter scaling", checks::parameter_scaling),
        ("end-to-end weak learning", checks::end_to_end),
        ("benchmark", checks::benchmark),
        ("determinism", checks::determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
