//! The full acceptance suite: one line per criterion, then the verdict.
//! Criterion 10 reruns 1 to 9 and compares the serialized outcomes.
//! Runs without the libtest harness so the lines are never captured.

use std::process::ExitCode;

use homogenize::harness::suite::{format_line, run_acceptance};

fn main() -> ExitCode {
    let (report, _) = run_acceptance(42, |o, dt| println!("{}", format_line(o, dt)));
    let failed: Vec<_> = report
        .criteria
        .iter()
        .filter(|o| !o.pass)
        .map(|o| o.id)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed",
        report.criteria.len() - failed.len(),
        report.criteria.len()
    );
    if report.pass && failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
