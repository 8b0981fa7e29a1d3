mod common;

use common::FdReport;

fn assert_all(reports: Vec<FdReport>) {
    for r in &reports {
        eprintln!("{:<36} checked {:>4} max_abs {:.2e} max_rel {:.2e}", r.name, r.checked, r.max_abs, r.max_rel);
    }
    let bad: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:#?}");
}

#[test]
fn tape_ops_match_finite_differences() {
    assert_all(common::op_checks().unwrap());
}

#[test]
fn blocks_and_encoders_match_finite_differences() {
    assert_all(common::module_checks().unwrap());
}

#[test]
fn full_model_losses_match_finite_differences() {
    assert_all(common::model_checks().unwrap());
}

#[test]
fn checker_rejects_a_wrong_gradient() {
    let r = common::check_inputs("doubled", &[(vec![3], vec![0.3, -1.2, 2.0])], |t, v| {
        let x: Vec<f64> = t.value(v[0]).to_vec();
        let y = x.iter().map(|a| a * a).sum::<f64>();
        t.custom(&[v[0]], vec![y], &[1], Box::new(move |g: &[f64]| vec![Some(x.iter().map(|a| 4.0 * a * g[0]).collect())]))
    })
    .unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures, 3);
}
