//! Scalar activations and quaternion helpers shared by the geometry and
//! network code, each paired with its exact derivative.

use nalgebra::{Matrix3, Vector4};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid` on (0,1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus` on (0, inf).
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable on both tails.
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn d_softplus(x: f64) -> f64 {
    sigmoid(x)
}

/// Rotation matrix of a unit quaternion stored as [w, x, y, z].
pub fn quat_to_rot(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `quat_to_rot` w.r.t. the (unit) quaternion: contracts the
/// upstream dL/dR with each dR/dq_k.
pub fn quat_to_rot_backward(q: &Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    Vector4::new(
        d_rot.component_mul(&dw).sum(),
        d_rot.component_mul(&dx).sum(),
        d_rot.component_mul(&dy).sum(),
        d_rot.component_mul(&dz).sum(),
    )
}

/// Backward of q_hat = q / ||q||: maps dL/dq_hat to dL/dq.
pub fn quat_normalize_backward(
    q_hat: &Vector4<f64>,
    norm: f64,
    d_q_hat: &Vector4<f64>,
) -> Vector4<f64> {
    (d_q_hat - q_hat * q_hat.dot(d_q_hat)) / norm
}
