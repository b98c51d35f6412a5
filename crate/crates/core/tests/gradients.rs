//! Central finite-difference checks of every analytic gradient.

use docstruct_core::incremental::gradcheck::{self, GradCheck};

fn assert_passed(c: GradCheck) {
    assert_eq!(c.points, 100, "{}", c.name);
    assert!(
        c.passed(),
        "{}: {} of {} coordinates off, worst relative error {:.3e}",
        c.name,
        c.failures,
        c.coordinates,
        c.max_rel_error
    );
}

#[test]
fn softmax_gradient_matches_differences() {
    assert_passed(gradcheck::softmax(100, 1));
}

#[test]
fn asoftmax_gradient_matches_differences() {
    for (m, seed) in [(1, 2), (2, 3), (4, 4)] {
        assert_passed(gradcheck::asoftmax(m, 100, seed));
    }
}

#[test]
fn model_task_gradient_matches_differences() {
    assert_passed(gradcheck::task(100, 5));
}

#[test]
fn distillation_gradient_matches_differences() {
    assert_passed(gradcheck::distillation(100, 6));
}

#[test]
fn composite_gradient_matches_differences() {
    assert_passed(gradcheck::composite(100, 7));
}
