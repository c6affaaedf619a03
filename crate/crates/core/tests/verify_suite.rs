use radd::verify::{run, VerifyOptions};

#[test]
fn all_checks_pass_within_a_minute() {
    let start = std::time::Instant::now();
    let report = run(&VerifyOptions::default()).unwrap();
    print!("{}", report.table());
    assert!(report.passed, "{}", report.table());
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn perturbed_score_is_caught() {
    let report = run(&VerifyOptions {
        score_perturbation: 1e-6,
        seed: 0,
    })
    .unwrap();
    let check = report
        .checks
        .iter()
        .find(|c| c.name == "score_factorization")
        .unwrap();
    assert!(!check.passed);
    assert!(!report.passed);
}
