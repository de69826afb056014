#![allow(dead_code)]

use graspfield::math::Vec3;

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {} > {tol})",
        (a - b).abs()
    );
}

pub fn assert_vec_close(a: Vec3<f64>, b: Vec3<f64>, tol: f64, what: &str) {
    assert_close(a.x, b.x, tol, &format!("{what}.x"));
    assert_close(a.y, b.y, tol, &format!("{what}.y"));
    assert_close(a.z, b.z, tol, &format!("{what}.z"));
}

/// Max relative error with an absolute floor, the measure every gradient and
/// oracle comparison in this suite reports.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
