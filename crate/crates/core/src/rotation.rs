//! Quaternion helpers shared by splats, skinning and the positioning optimizer.
//!
//! Quaternions are stored as nalgebra `UnitQuaternion<f64>` and serialized as
//! `[w, x, y, z]`. The rotation-matrix formula here is the one every gradient
//! in the crate is derived against.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
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

pub fn unit_quat_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let c = q.quaternion();
    quat_matrix(c.w, c.i, c.j, c.k)
}

/// Pulls a gradient with respect to the rotation matrix back onto the
/// quaternion components `(w, x, y, z)`, treating the matrix formula as a
/// polynomial in those components.
pub fn quat_matrix_vjp(w: f64, x: f64, y: f64, z: f64, g: &Matrix3<f64>) -> Vector4<f64> {
    let dot = |m: Matrix3<f64>| m.component_mul(g).sum();
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    Vector4::new(dot(dw), dot(dx), dot(dy), dot(dz))
}

/// Rotation matrix of `q / |q|` for a raw `(w, x, y, z)` vector.
pub fn normalized_quat_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let u = q / q.norm();
    quat_matrix(u[0], u[1], u[2], u[3])
}

/// Vector-Jacobian product of [`normalized_quat_matrix`].
pub fn normalized_quat_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let gu = quat_matrix_vjp(u[0], u[1], u[2], u[3], g);
    (gu - u * u.dot(&gu)) / n
}

/// Rotation of `angle` radians about `axis`.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
    match nalgebra::Unit::try_new(axis, 1e-12) {
        Some(a) => UnitQuaternion::from_axis_angle(&a, angle),
        None => UnitQuaternion::identity(),
    }
}

/// Shortest-arc spherical interpolation.
pub fn slerp_shortest(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let b = if a.coords.dot(&b.coords) < 0.0 {
        UnitQuaternion::new_unchecked(-b.into_inner())
    } else {
        *b
    };
    let dot = a.coords.dot(&b.coords).clamp(-1.0, 1.0);
    if dot > 1.0 - 1e-12 {
        // nearly parallel: normalized lerp is exact to rounding
        let q = a.into_inner() * (1.0 - t) + b.into_inner() * t;
        return UnitQuaternion::new_normalize(q);
    }
    let theta = dot.acos();
    let sin = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / sin;
    let wb = (t * theta).sin() / sin;
    UnitQuaternion::new_normalize(a.into_inner() * wa + b.into_inner() * wb)
}

/// Checks that `m` is a proper rotation to `tol`.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
    orth <= tol && (m.determinant() - 1.0).abs() <= tol
}

pub fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let c = q.quaternion();
    [c.w, c.i, c.j, c.k]
}

pub fn from_wxyz(v: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(v[0], v[1], v[2], v[3]))
}

/// Serde adapter storing a unit quaternion as `[w, x, y, z]` without
/// renormalizing, so round trips are bit exact.
pub mod serde_wxyz {
    use super::*;

    pub fn serialize<S: Serializer>(q: &UnitQuaternion<f64>, s: S) -> Result<S::Ok, S::Error> {
        wxyz(q).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnitQuaternion<f64>, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(serde::de::Error::custom(format!("quaternion norm {n} is not 1")));
        }
        Ok(from_wxyz(v))
    }
}

pub mod serde_wxyz_vec {
    use super::*;

    pub fn serialize<S: Serializer>(qs: &[UnitQuaternion<f64>], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<[f64; 4]> = qs.iter().map(wxyz).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<UnitQuaternion<f64>>, D::Error> {
        let v = Vec::<[f64; 4]>::deserialize(d)?;
        v.into_iter()
            .map(|q| {
                let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    Err(serde::de::Error::custom(format!("quaternion norm {n} is not 1")))
                } else {
                    Ok(from_wxyz(q))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_matches_nalgebra() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1);
        let ours = unit_quat_matrix(&q);
        let theirs = q.to_rotation_matrix().into_inner();
        assert!((ours - theirs).abs().max() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let q = [0.8, 0.1, -0.3, 0.2];
        let g = Matrix3::new(0.3, -1.0, 0.5, 0.2, 0.7, -0.4, 1.1, 0.0, -0.6);
        let analytic = quat_matrix_vjp(q[0], q[1], q[2], q[3], &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fp = quat_matrix(qp[0], qp[1], qp[2], qp[3]).component_mul(&g).sum();
            let fm = quat_matrix(qm[0], qm[1], qm[2], qm[3]).component_mul(&g).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "component {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn normalized_vjp_matches_finite_differences() {
        let q = Vector4::new(1.3, 0.2, -0.5, 0.4);
        let g = Matrix3::new(0.3, -1.0, 0.5, 0.2, 0.7, -0.4, 1.1, 0.0, -0.6);
        let f = |p: &[f64]| {
            let v = Vector4::from_column_slice(p);
            let val = normalized_quat_matrix(&v).component_mul(&g).sum();
            (val, normalized_quat_matrix_vjp(&v, &g).as_slice().to_vec())
        };
        let r = crate::optim::check_gradient(f, q.as_slice(), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!(is_rotation(&normalized_quat_matrix(&q), 1e-12));
    }

    #[test]
    fn slerp_midpoint_of_quarter_turn() {
        let a = UnitQuaternion::identity();
        let b = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let m = slerp_shortest(&a, &b, 0.5);
        let expected = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_4);
        assert!(m.angle_to(&expected) < 1e-12);
    }

    #[test]
    fn slerp_takes_short_arc() {
        let a = axis_angle(Vector3::x(), 0.1);
        let b = UnitQuaternion::new_unchecked(-axis_angle(Vector3::x(), 0.3).into_inner());
        let m = slerp_shortest(&a, &b, 0.5);
        assert!(m.angle_to(&axis_angle(Vector3::x(), 0.2)) < 1e-12);
    }
}
