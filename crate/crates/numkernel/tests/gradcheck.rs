//! Every analytic backward pass must agree with central finite differences
//! across a battery of randomized shapes.

use numkernel::gradcheck;

#[test]
fn standard_battery_stays_under_tolerance() {
    let results = gradcheck::standard_battery().expect("battery ran");
    assert_eq!(results.len(), 20);
    let mut worst = ("", 0.0f64);
    for (label, outcome) in &results {
        assert!(outcome.entries > 0, "{label} checked no entries");
        assert!(
            outcome.max_rel_err < gradcheck::REL_TOL,
            "{label}: rel err {} over tolerance {}",
            outcome.max_rel_err,
            gradcheck::REL_TOL
        );
        if outcome.max_rel_err > worst.1 {
            worst = (label, outcome.max_rel_err);
        }
    }
    println!("worst scenario: {} rel err {:.3e}", worst.0, worst.1);
}
