//! Verify every tensor op and the three composite training objectives
//! against central finite differences.
//!
//! Run with: cargo run --release --example gradient_check

fn main() -> Result<(), partview::Error> {
    let started = std::time::Instant::now();
    let report = partview::gradsuite::run_full_suite(1e-6, 1e-5)?;
    for item in &report.items {
        println!(
            "{} {:<55} max rel err {:.3e}",
            if item.passed { "PASS" } else { "FAIL" },
            item.name,
            item.max_rel_err
        );
    }
    println!(
        "worst {:.3e} over {} checks in {:.1}s",
        report.worst(),
        report.items.len(),
        started.elapsed().as_secs_f64()
    );
    assert!(report.all_passed());
    Ok(())
}
