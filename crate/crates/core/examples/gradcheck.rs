//! Finite-difference gradient checks for each module scope.
//!
//! ```text
//! cargo run --release --example gradcheck -- vlf 3
//! ```

use anyhow::Result;
use escnet::harness::gradcheck::{gradcheck, Scope};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let scopes: Vec<Scope> = match args.next() {
        Some(s) => vec![s.parse()?],
        None => Scope::ALL.to_vec(),
    };
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    for scope in scopes {
        let report = gradcheck(scope, seed)?;
        let (worst, err) = report
            .per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
            .unwrap_or(("-", 0.0));
        println!(
            "{:<12} max rel err {:.3e} (tol {:.0e}, {} coords, worst {worst} {err:.1e}) {}",
            scope.name(),
            report.max_relative_error,
            report.tolerance,
            report.checked,
            if report.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
