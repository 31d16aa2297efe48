//! Rotation parameterizations and their reverse-mode derivatives.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)`. Axis-angle vectors
//! encode the rotation angle as the vector norm (radians).

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(Error::DegenerateInput("non-finite quaternion".into()));
        }
        if n == 0.0 {
            return Err(Error::DegenerateInput("zero quaternion".into()));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Unit quaternion whose rotation matrix equals `m` (Shepperd's method).
    pub fn from_rotmat(m: &Matrix3<f64>) -> Quaternion {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n)
    }
}

/// Rotation matrix of `q`; the quaternion is normalized first.
pub fn quat_to_rotmat(q: Quaternion) -> Result<Matrix3<f64>> {
    let u = q.normalized()?;
    Ok(unit_quat_to_rotmat(u.to_array()))
}

/// Rotation matrix of a quaternion already known to be unit length.
pub fn unit_quat_to_rotmat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

/// Pulls `dL/dR` back to `dL/dq` for the unit-quaternion formula.
pub fn unit_quat_to_rotmat_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0
        * (-g[(0, 1)] * z + g[(0, 2)] * y + g[(1, 0)] * z - g[(1, 2)] * x - g[(2, 0)] * y
            + g[(2, 1)] * x);
    let gx = 2.0
        * (g[(0, 1)] * y + g[(0, 2)] * z + g[(1, 0)] * y - 2.0 * g[(1, 1)] * x - g[(1, 2)] * w
            + g[(2, 0)] * z
            + g[(2, 1)] * w
            - 2.0 * g[(2, 2)] * x);
    let gy = 2.0
        * (-2.0 * g[(0, 0)] * y + g[(0, 1)] * x + g[(0, 2)] * w + g[(1, 0)] * x + g[(1, 2)] * z
            - g[(2, 0)] * w
            + g[(2, 1)] * z
            - 2.0 * g[(2, 2)] * y);
    let gz = 2.0
        * (-2.0 * g[(0, 0)] * z - g[(0, 1)] * w + g[(0, 2)] * x + g[(1, 0)] * w
            - 2.0 * g[(1, 1)] * z
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    [gw, gx, gy, gz]
}

/// Rotation of a raw (possibly unnormalized) quaternion together with the
/// data needed for [`raw_quat_backward`].
pub fn raw_quat_to_rotmat(q: [f64; 4]) -> (Matrix3<f64>, [f64; 4], f64) {
    let n = Vector4::from(q).norm();
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    (unit_quat_to_rotmat(u), u, n)
}

/// `dL/dq` for a raw quaternion given `dL/dR`, the unit quaternion and the
/// raw norm returned by [`raw_quat_to_rotmat`].
pub fn raw_quat_backward(unit: [f64; 4], norm: f64, g: &Matrix3<f64>) -> [f64; 4] {
    let gu = unit_quat_to_rotmat_backward(unit, g);
    let dot = gu[0] * unit[0] + gu[1] * unit[1] + gu[2] * unit[2] + gu[3] * unit[3];
    [
        (gu[0] - dot * unit[0]) / norm,
        (gu[1] - dot * unit[1]) / norm,
        (gu[2] - dot * unit[2]) / norm,
        (gu[3] - dot * unit[3]) / norm,
    ]
}

const SMALL_ANGLE: f64 = 1e-3;

/// Quaternion of an axis-angle vector.
pub fn axis_angle_to_quat(v: &Vector3<f64>) -> [f64; 4] {
    let phi = v.norm();
    let (w, k) = if phi < SMALL_ANGLE {
        let p2 = phi * phi;
        (1.0 - p2 / 8.0 + p2 * p2 / 384.0, 0.5 - p2 / 48.0)
    } else {
        ((0.5 * phi).cos(), (0.5 * phi).sin() / phi)
    };
    [w, k * v.x, k * v.y, k * v.z]
}

/// `dL/dv` for [`axis_angle_to_quat`] given `dL/dq`.
pub fn axis_angle_to_quat_backward(v: &Vector3<f64>, gq: [f64; 4]) -> Vector3<f64> {
    let phi = v.norm();
    let (k, c2) = if phi < SMALL_ANGLE {
        let p2 = phi * phi;
        (0.5 - p2 / 48.0, -1.0 / 24.0 + p2 / 960.0)
    } else {
        let h = 0.5 * phi;
        (
            h.sin() / phi,
            (h * h.cos() - h.sin()) / (phi * phi * phi),
        )
    };
    let gxyz = Vector3::new(gq[1], gq[2], gq[3]);
    // dq_w/dv = -(k/2) v ; dq_xyz/dv = k I + c2 v vᵀ
    v * (-0.5 * k * gq[0]) + gxyz * k + v * (c2 * v.dot(&gxyz))
}

/// Rotation matrix of an axis-angle vector (exponential map).
pub fn axis_angle_to_rotmat(v: &Vector3<f64>) -> Matrix3<f64> {
    unit_quat_to_rotmat(axis_angle_to_quat(v))
}

/// `dL/dv` for [`axis_angle_to_rotmat`] given `dL/dR`.
pub fn axis_angle_to_rotmat_backward(v: &Vector3<f64>, g: &Matrix3<f64>) -> Vector3<f64> {
    let q = axis_angle_to_quat(v);
    let gq = unit_quat_to_rotmat_backward(q, g);
    axis_angle_to_quat_backward(v, gq)
}

/// Re-wraps an axis-angle vector so its magnitude stays below π while
/// describing the same rotation.
pub fn wrap_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    let phi = v.norm();
    if phi <= std::f64::consts::PI {
        return *v;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wrapped = phi % two_pi;
    if wrapped > std::f64::consts::PI {
        wrapped -= two_pi;
    }
    v * (wrapped / phi)
}

/// Nearest rotation to `m` in the Frobenius sense (polar factor).
///
/// Returns the rotation together with the symmetric stretch `S = Rᵀ M`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        // flip the axis of the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        for row in 0..3 {
            u2[(row, imin)] = -u2[(row, imin)];
        }
        r = u2 * vt;
    }
    let s = r.transpose() * m;
    (r, 0.5 * (s + s.transpose()))
}

/// Pulls `dL/dR` of the polar factor back to `dL/dM`.
///
/// With `M = R S`, the skew generator `Ω = Rᵀ dR` satisfies
/// `ΩS + SΩ = Rᵀ dM − dMᵀ R`, whose solution in vector form is
/// `ω = (tr(S) I − S)⁻¹ a`.
pub fn nearest_rotation_backward(
    r: &Matrix3<f64>,
    stretch: &Matrix3<f64>,
    g: &Matrix3<f64>,
) -> Matrix3<f64> {
    let b_mat = r.transpose() * g;
    let b = Vector3::new(
        b_mat[(2, 1)] - b_mat[(1, 2)],
        b_mat[(0, 2)] - b_mat[(2, 0)],
        b_mat[(1, 0)] - b_mat[(0, 1)],
    );
    let k = Matrix3::identity() * stretch.trace() - stretch;
    let c = match k.try_inverse() {
        Some(inv) => inv * b,
        None => Vector3::zeros(),
    };
    r * skew(&c)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = skew(&axis);
        Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, &b| a.max(b.abs()))
    }

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotmat(Quaternion::IDENTITY).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_x() {
        let h = 0.5_f64.sqrt();
        let r = quat_to_rotmat(Quaternion::new(h, h, 0.0, 0.0)).unwrap();
        let out = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((out - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let err = quat_to_rotmat(Quaternion::new(0.0, 0.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn random_quaternions_match_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle: f64 = rng.random_range(-3.0..3.0);
            let scale: f64 = rng.random_range(0.2..5.0);
            let q = Quaternion::new(
                scale * (angle / 2.0).cos(),
                scale * axis.x * (angle / 2.0).sin(),
                scale * axis.y * (angle / 2.0).sin(),
                scale * axis.z * (angle / 2.0).sin(),
            );
            let r = quat_to_rotmat(q).unwrap();
            assert!(max_abs(&(r * r.transpose() - Matrix3::identity())) < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!(max_abs(&(r - rodrigues(axis, angle))) < 1e-12);
            let neg = quat_to_rotmat(Quaternion::new(-q.w, -q.x, -q.y, -q.z)).unwrap();
            assert!(max_abs(&(r - neg)) < 1e-15);
        }
    }

    #[test]
    fn axis_angle_matches_rodrigues_including_small_angles() {
        for &angle in &[1e-9, 1e-5, 5e-4, 2e-3, 0.3, 2.5] {
            let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
            let r = axis_angle_to_rotmat(&(axis * angle));
            assert!(max_abs(&(r - rodrigues(axis, angle))) < 1e-13, "angle {angle}");
        }
    }

    fn fd_check_axis_angle(v: Vector3<f64>) {
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let f = |v: &Vector3<f64>| axis_angle_to_rotmat(v).component_mul(&g).sum();
        let analytic = axis_angle_to_rotmat_backward(&v, &g);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn axis_angle_backward_matches_finite_differences() {
        fd_check_axis_angle(Vector3::new(0.4, -0.2, 0.9));
        fd_check_axis_angle(Vector3::new(1e-4, 2e-4, -1e-4));
        fd_check_axis_angle(Vector3::zeros());
    }

    #[test]
    fn raw_quaternion_backward_matches_finite_differences() {
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let q = [0.9, -0.3, 0.4, 1.1];
        let f = |q: [f64; 4]| raw_quat_to_rotmat(q).0.component_mul(&g).sum();
        let (_, u, n) = raw_quat_to_rotmat(q);
        let analytic = raw_quat_backward(u, n, &g);
        for i in 0..4 {
            let mut p = q;
            let mut m = q;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(p) - f(m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn polar_backward_matches_finite_differences() {
        let a = axis_angle_to_rotmat(&Vector3::new(0.3, 0.1, -0.2));
        let b = axis_angle_to_rotmat(&Vector3::new(-0.5, 0.7, 0.2));
        let m = a * 0.3 + b * 0.7;
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let f = |m: &Matrix3<f64>| nearest_rotation(m).0.component_mul(&g).sum();
        let (r, s) = nearest_rotation(&m);
        let analytic = nearest_rotation_backward(&r, &s, &g);
        for i in 0..3 {
            for j in 0..3 {
                let mut p = m;
                let mut q = m;
                p[(i, j)] += 1e-6;
                q[(i, j)] -= 1e-6;
                let fd = (f(&p) - f(&q)) / 2e-6;
                assert!((fd - analytic[(i, j)]).abs() < 1e-7, "({i},{j})");
            }
        }
    }

    #[test]
    fn polar_of_simplex_blend_is_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut m = Matrix3::zeros();
            let mut total = 0.0;
            let ws: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let sum: f64 = ws.iter().sum();
            for w in ws {
                let v = Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                );
                m += axis_angle_to_rotmat(&v) * (w / sum);
                total += w / sum;
            }
            assert!((total - 1.0).abs() < 1e-12);
            let (r, _) = nearest_rotation(&m);
            assert!(max_abs(&(r * r.transpose() - Matrix3::identity())) < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_keeps_rotation() {
        let v = Vector3::new(2.0, 2.5, -1.0);
        let w = wrap_axis_angle(&v);
        assert!(w.norm() <= std::f64::consts::PI);
        assert!(max_abs(&(axis_angle_to_rotmat(&v) - axis_angle_to_rotmat(&w))) < 1e-12);
    }

    #[test]
    fn from_rotmat_round_trip() {
        let r = axis_angle_to_rotmat(&Vector3::new(0.2, -2.9, 0.4));
        let q = Quaternion::from_rotmat(&r);
        assert!(max_abs(&(quat_to_rotmat(q).unwrap() - r)) < 1e-12);
    }
}
