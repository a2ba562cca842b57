//! Finite-difference checks of every differentiable module.
//!
//! `cargo run --release --example gradcheck -- [seed]`

use dv4d::diagnostics::{run_gradcheck, CheckTarget};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut failed = 0;
    for target in CheckTarget::ALL {
        for (name, r) in run_gradcheck(target, seed)? {
            println!(
                "{:<11} {:<28} rel {:.2e} abs {:.2e} over {:>4} {}",
                target.name(),
                name,
                r.max_rel_error,
                r.max_abs_error,
                r.checked,
                if r.passed { "ok" } else { "FAIL" }
            );
            failed += usize::from(!r.passed);
        }
    }
    if failed > 0 {
        return Err(format!("{failed} checks failed").into());
    }
    Ok(())
}
