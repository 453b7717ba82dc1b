//! Axis-angle rotations: exponential and logarithm maps plus the Euler
//! decomposition used for view selection.
//!
//! Euler angles follow `R = Rx(pitch) * Ry(yaw) * Rz(roll)`. The camera looks
//! down the `+z` axis of the model frame with `y` pointing down the image.

use nalgebra::{Matrix3, Vector3};

const SMALL_ANGLE: f64 = 1e-7;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map. Below `1e-7` rad the second-order Taylor expansion is used.
pub fn exp_map(w: [f64; 3]) -> Matrix3<f64> {
    let w = Vector3::from(w);
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&w);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
    }
}

/// Logarithm map, returning the axis-angle vector with angle in `[0, pi]`.
pub fn log_map(r: &Matrix3<f64>) -> [f64; 3] {
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos = (r.trace() - 1.0) / 2.0;
    let theta = (0.5 * vee.norm()).atan2(cos);
    if theta < SMALL_ANGLE {
        return (0.5 * vee).into();
    }
    if theta < 3.0 {
        return (theta / vee.norm() * vee).into();
    }
    // close to a half turn: the symmetric part is cos(t) I + (1 - cos(t)) a a^T
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let col = (0..3).max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)])).unwrap_or(0);
    let mut axis = outer.column(col).normalize();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    (theta * axis).into()
}

/// Decomposes a rotation into `(pitch, yaw, roll)` radians.
pub fn euler_from_matrix(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let yaw = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let pitch = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let roll = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (pitch, yaw, roll)
}

pub fn matrix_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    exp_map([pitch, 0.0, 0.0]) * exp_map([0.0, yaw, 0.0]) * exp_map([0.0, 0.0, roll])
}

/// Global head yaw (radians) of an axis-angle rotation.
pub fn yaw_of(w: [f64; 3]) -> f64 {
    euler_from_matrix(&exp_map(w)).1
}
