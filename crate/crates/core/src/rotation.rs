//! Axis-angle, quaternion and rotation-matrix helpers.

use crate::scalar::Real;

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];

#[inline]
pub fn add3<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<S: Real>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<S: Real>(a: Vec3<S>, s: S) -> Vec3<S> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm3<S: Real>(a: Vec3<S>) -> S {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn identity3<S: Real>() -> Mat3<S> {
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat_vec<S: Real>(m: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose3<S: Real>(m: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det3<S: Real>(m: &Mat3<S>) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix<S: Real>(v: Vec3<S>) -> Mat3<S> {
    let theta = norm3(v);
    if theta <= S::epsilon() {
        // first-order expansion keeps tiny rotations smooth
        let o = S::one();
        return [[o, -v[2], v[1]], [v[2], o, -v[0]], [-v[1], v[0], o]];
    }
    let k = scale3(v, S::one() / theta);
    let (s, c) = theta.sin_cos();
    let t = S::one() - c;
    [
        [
            c + k[0] * k[0] * t,
            k[0] * k[1] * t - k[2] * s,
            k[0] * k[2] * t + k[1] * s,
        ],
        [
            k[1] * k[0] * t + k[2] * s,
            c + k[1] * k[1] * t,
            k[1] * k[2] * t - k[0] * s,
        ],
        [
            k[2] * k[0] * t - k[1] * s,
            k[2] * k[1] * t + k[0] * s,
            c + k[2] * k[2] * t,
        ],
    ]
}

/// Unit quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat<S> {
    pub w: S,
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Quat<S> {
    pub fn identity() -> Self {
        Self {
            w: S::one(),
            x: S::zero(),
            y: S::zero(),
            z: S::zero(),
        }
    }

    pub fn from_axis_angle(v: Vec3<S>) -> Self {
        let theta = norm3(v);
        if theta <= S::epsilon() {
            let h = S::of(0.5);
            return Self {
                w: S::one(),
                x: v[0] * h,
                y: v[1] * h,
                z: v[2] * h,
            }
            .normalized();
        }
        let half = theta * S::of(0.5);
        let s = half.sin() / theta;
        Self {
            w: half.cos(),
            x: v[0] * s,
            y: v[1] * s,
            z: v[2] * s,
        }
    }

    /// Axis-angle with angle in `[0, π]`.
    pub fn to_axis_angle(self) -> Vec3<S> {
        let q = if self.w < S::zero() { self.neg() } else { self };
        let vn = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if vn <= S::epsilon() {
            let two = S::of(2.0);
            return [q.x * two, q.y * two, q.z * two];
        }
        let theta = S::of(2.0) * vn.atan2(q.w);
        let s = theta / vn;
        [q.x * s, q.y * s, q.z * s]
    }

    pub fn neg(self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, o: Self) -> S {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn normalized(self) -> Self {
        let n = self.dot(self).sqrt();
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn mul(self, o: Self) -> Self {
        Self {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Shortest-arc spherical interpolation.
    pub fn slerp(self, other: Self, t: S) -> Self {
        let mut cos = self.dot(other);
        let mut end = other;
        if cos < S::zero() {
            cos = -cos;
            end = other.neg();
        }
        if cos > S::one() - S::of(1e-9) {
            // nearly parallel: normalized lerp
            return Self {
                w: self.w + (end.w - self.w) * t,
                x: self.x + (end.x - self.x) * t,
                y: self.y + (end.y - self.y) * t,
                z: self.z + (end.z - self.z) * t,
            }
            .normalized();
        }
        let omega = cos.min(S::one()).acos();
        let sin = omega.sin();
        let a = ((S::one() - t) * omega).sin() / sin;
        let b = (t * omega).sin() / sin;
        Self {
            w: self.w * a + end.w * b,
            x: self.x * a + end.x * b,
            y: self.y * a + end.y * b,
            z: self.z * a + end.z * b,
        }
    }

    pub fn to_matrix(self) -> Mat3<S> {
        let Self { w, x, y, z } = self;
        let two = S::of(2.0);
        let o = S::one();
        [
            [o - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), o - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), o - two * (x * x + y * y)],
        ]
    }
}

/// Interpolates two axis-angle rotations along the shortest arc.
pub fn slerp_axis_angle<S: Real>(a: Vec3<S>, b: Vec3<S>, t: S) -> Vec3<S> {
    Quat::from_axis_angle(a)
        .slerp(Quat::from_axis_angle(b), t)
        .to_axis_angle()
}

/// Wraps the rotation angle into `[0, 2π)` while keeping the axis.
pub fn canonicalize_axis_angle<S: Real>(v: Vec3<S>) -> Vec3<S> {
    let theta = norm3(v);
    let two_pi = S::TAU();
    if theta < two_pi || theta == S::zero() {
        return v;
    }
    let wrapped = theta % two_pi;
    scale3(v, wrapped / theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Mat3<f64>, b: Mat3<f64>, tol: f64) -> bool {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rodrigues_matches_quaternion_matrix() {
        for v in [[0.3, -0.2, 1.1], [2.9, 0.1, 0.0], [0.0, 0.0, 3.0], [1e-10, 0.0, 0.0]] {
            let a = axis_angle_to_matrix(v);
            let b = Quat::from_axis_angle(v).to_matrix();
            assert!(close(a, b, 1e-12), "{v:?}");
            assert!((det3(&a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quaternion_axis_angle_round_trip() {
        let v = [0.4f64, -1.2, 0.7];
        let back = Quat::from_axis_angle(v).to_axis_angle();
        for i in 0..3 {
            assert!((v[i] - back[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = [0.0f64, 0.0, 0.2];
        let b = [0.0, 0.0, 1.0];
        let mid = slerp_axis_angle(a, b, 0.5);
        assert!((mid[2] - 0.6).abs() < 1e-12);
        let end = slerp_axis_angle(a, b, 1.0);
        assert!((end[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonicalization_wraps_full_turns() {
        let tau = std::f64::consts::TAU;
        let v = canonicalize_axis_angle([0.0, tau + 0.5, 0.0]);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert_eq!(canonicalize_axis_angle([0.1, 0.2, 0.3]), [0.1, 0.2, 0.3]);
    }
}
