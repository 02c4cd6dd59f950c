//! Quaternion algebra with analytic gradients.
//!
//! Rotations are parameterized as unit quaternions `(r, i, j, k)` with the
//! scalar part first. [`Quat::to_rotmat`] produces the matrix
//!
//! ```text
//! | 1-2(j^2+k^2)   2(ij+kr)      2(ik-jr)     |
//! | 2(ij-kr)       1-2(i^2+k^2)  2(jk+ir)     |
//! | 2(ik+jr)       2(jk-ir)      1-2(i^2+j^2) |
//! ```
//!
//! which is the transpose of the Hamilton active-rotation matrix: rotating
//! `(1,0,0)` by the quaternion for +90 degrees about `z` yields `(0,-1,0)`.
//! The convention is fixed by the oracle tests below and used consistently
//! by forward kinematics, preprocessing, and the synthetic generators.
//! A consequence of the transposed storage is that quaternion products
//! compose matrices in reverse: `R(a * b) == R(b) * R(a)`.
//!
//! Every backward function here is validated against centered finite
//! differences in the tests; the normalization epsilon and the gimbal
//! clamp for the twist derivative are pinned as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quaternions with squared norm below this cannot be safely normalized.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// 3-vector of `f64`; positions and offsets are centimeters.
pub type Vec3 = [f64; 3];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Wraps an angle in degrees to the half-open interval (-180, 180].
pub fn wrap_deg(x: f64) -> f64 {
    let mut w = x - 360.0 * (x / 360.0).round();
    if w <= -180.0 {
        w += 360.0;
    }
    w
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 3]; 3];
        for (row, out_row) in out.iter_mut().enumerate() {
            for (col, cell) in out_row.iter_mut().enumerate() {
                *cell = a[row][0] * b[0][col] + a[row][1] * b[1][col] + a[row][2] * b[2][col];
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation about +y by `deg` degrees, in this crate's convention:
    /// `yaw_deg(d).mul_vec([0,0,1])` has x-component `sin(d)`.
    pub fn yaw_deg(deg: f64) -> Mat3 {
        let rad = deg.to_radians();
        let (s, c) = rad.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }
}

/// Unit quaternion, scalar part first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub r: f64,
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { r: 1.0, i: 0.0, j: 0.0, k: 0.0 };

    pub fn new(r: f64, i: f64, j: f64, k: f64) -> Quat {
        Quat { r, i, j, k }
    }

    /// Checks all components are finite.
    pub fn validated(self) -> Result<Quat> {
        if [self.r, self.i, self.j, self.k].iter().all(|c| c.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFiniteQuaternion(self.r, self.i, self.j, self.k))
        }
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.r, self.i, self.j, self.k]
    }

    pub fn from_array(a: [f64; 4]) -> Quat {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm(self) -> f64 {
        (self.r * self.r + self.i * self.i + self.j * self.j + self.k * self.k).sqrt()
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.r, -self.i, -self.j, -self.k)
    }

    /// Quaternion for a rotation of `angle_rad` about `axis`.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Quat {
        let n = norm3(axis);
        assert!(n > 0.0, "axis must be nonzero");
        let half = 0.5 * angle_rad;
        let s = half.sin() / n;
        Quat::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    /// Hamilton product. Note the matrix-composition reversal documented
    /// in the module header: `R(a * b) == R(b) * R(a)`.
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.r * o.r - self.i * o.i - self.j * o.j - self.k * o.k,
            self.r * o.i + self.i * o.r + self.j * o.k - self.k * o.j,
            self.r * o.j - self.i * o.k + self.j * o.r + self.k * o.i,
            self.r * o.k + self.i * o.j - self.j * o.i + self.k * o.r,
        )
    }

    /// Rotation matrix in the crate convention. Assumes unit norm.
    pub fn to_rotmat(self) -> Mat3 {
        let Quat { r, i, j, k } = self;
        Mat3([
            [
                1.0 - 2.0 * (j * j + k * k),
                2.0 * (i * j + k * r),
                2.0 * (i * k - j * r),
            ],
            [
                2.0 * (i * j - k * r),
                1.0 - 2.0 * (i * i + k * k),
                2.0 * (j * k + i * r),
            ],
            [
                2.0 * (i * k + j * r),
                2.0 * (j * k - i * r),
                1.0 - 2.0 * (i * i + j * j),
            ],
        ])
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        self.to_rotmat().mul_vec(v)
    }

    /// Inverse of [`Quat::to_rotmat`] for proper rotations; returns the
    /// representative with non-negative scalar part. Stable for all
    /// rotation angles via the dominant-component branch.
    pub fn from_rotmat(m: &Mat3) -> Quat {
        let r = &m.0;
        let trace = r[0][0] + r[1][1] + r[2][2];
        let q = if trace >= r[0][0].max(r[1][1]).max(r[2][2]) {
            let s = (trace + 1.0).max(0.0).sqrt(); // 2r
            let inv = 0.5 / s;
            Quat::new(
                0.5 * s,
                (r[1][2] - r[2][1]) * inv,
                (r[2][0] - r[0][2]) * inv,
                (r[0][1] - r[1][0]) * inv,
            )
        } else if r[0][0] >= r[1][1].max(r[2][2]) {
            let s = (1.0 + 2.0 * r[0][0] - trace).max(0.0).sqrt(); // 2i
            let inv = 0.5 / s;
            Quat::new(
                (r[1][2] - r[2][1]) * inv,
                0.5 * s,
                (r[0][1] + r[1][0]) * inv,
                (r[0][2] + r[2][0]) * inv,
            )
        } else if r[1][1] >= r[2][2] {
            let s = (1.0 + 2.0 * r[1][1] - trace).max(0.0).sqrt(); // 2j
            let inv = 0.5 / s;
            Quat::new(
                (r[2][0] - r[0][2]) * inv,
                (r[0][1] + r[1][0]) * inv,
                0.5 * s,
                (r[1][2] + r[2][1]) * inv,
            )
        } else {
            let s = (1.0 + 2.0 * r[2][2] - trace).max(0.0).sqrt(); // 2k
            let inv = 0.5 / s;
            Quat::new(
                (r[0][1] - r[1][0]) * inv,
                (r[0][2] + r[2][0]) * inv,
                (r[1][2] + r[2][1]) * inv,
                0.5 * s,
            )
        };
        if q.r < 0.0 {
            Quat::new(-q.r, -q.i, -q.j, -q.k)
        } else {
            q
        }
    }
}

/// Backward pass of [`Quat::to_rotmat`]: contracts the loss gradient with
/// respect to each matrix entry into a gradient with respect to the four
/// quaternion components. Each entry is quadratic in the components, so
/// the partials below are exact.
pub fn to_rotmat_grad(q: Quat, d_rot: &Mat3) -> [f64; 4] {
    let Quat { r, i, j, k } = q;
    let d = &d_rot.0;
    let dr = 2.0
        * (d[0][1] * k - d[0][2] * j - d[1][0] * k + d[1][2] * i + d[2][0] * j - d[2][1] * i);
    let di = 2.0
        * (d[0][1] * j + d[0][2] * k + d[1][0] * j + d[1][2] * r + d[2][0] * k - d[2][1] * r)
        - 4.0 * i * (d[1][1] + d[2][2]);
    let dj = 2.0
        * (d[0][1] * i - d[0][2] * r + d[1][0] * i + d[1][2] * k + d[2][0] * r + d[2][1] * k)
        - 4.0 * j * (d[0][0] + d[2][2]);
    let dk = 2.0
        * (d[0][1] * r + d[0][2] * i - d[1][0] * r + d[1][2] * j + d[2][0] * i + d[2][1] * j)
        - 4.0 * k * (d[0][0] + d[1][1]);
    [dr, di, dj, dk]
}

/// Normalizes a raw 4-vector to a unit quaternion.
///
/// Errors on non-finite input and on norms below [`NORMALIZE_EPS`], where
/// the direction is numerically meaningless.
pub fn normalize(v: [f64; 4]) -> Result<Quat> {
    Quat::from_array(v).validated()?;
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    if norm < NORMALIZE_EPS {
        return Err(Error::DegenerateQuaternion { norm, eps: NORMALIZE_EPS });
    }
    Ok(Quat::new(v[0] / norm, v[1] / norm, v[2] / norm, v[3] / norm))
}

/// Backward pass of [`normalize`]: with `q = v / |v|`, the Jacobian is
/// `(I - q q^T) / |v|`, i.e. the component of the upstream gradient along
/// `q` is projected out and the rest shrinks with the input norm.
pub fn normalize_grad(v: [f64; 4], d_q: [f64; 4]) -> [f64; 4] {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    let q = [v[0] / norm, v[1] / norm, v[2] / norm, v[3] / norm];
    let dot = q[0] * d_q[0] + q[1] * d_q[1] + q[2] * d_q[2] + q[3] * d_q[3];
    [
        (d_q[0] - q[0] * dot) / norm,
        (d_q[1] - q[1] * dot) / norm,
        (d_q[2] - q[2] * dot) / norm,
        (d_q[3] - q[3] * dot) / norm,
    ]
}

/// Denominator floor for the twist derivative: the value of cos^2(pitch)
/// at 89.99 degrees. Past that the Euler factorization degenerates and
/// the derivative is held at its boundary magnitude.
pub fn twist_gimbal_floor() -> f64 {
    let c = (89.99f64).to_radians().cos();
    c * c
}

/// Rotation angle about the y axis, in degrees in (-180, 180].
///
/// The quaternion is factored as an intrinsic y-x-z Euler triple and the
/// outer y angle is returned: `atan2(2(ik + jr), 1 - 2(i^2 + j^2))`. Pure
/// x or z rotations up to 90 degrees report zero twist; a pure y rotation
/// of any magnitude reports its full signed angle. Assumes unit norm.
pub fn twist_angle_y_deg(q: Quat) -> f64 {
    let u = 2.0 * (q.i * q.k + q.j * q.r);
    let v = 1.0 - 2.0 * (q.i * q.i + q.j * q.j);
    u.atan2(v).to_degrees()
}

/// Backward pass of [`twist_angle_y_deg`] (degrees per component).
///
/// `atan2` is smooth except where both arguments vanish (pitch at 90
/// degrees); the denominator is floored at [`twist_gimbal_floor`] so the
/// derivative saturates instead of blowing up.
pub fn twist_angle_y_grad(q: Quat) -> [f64; 4] {
    let Quat { r, i, j, k } = q;
    let u = 2.0 * (i * k + j * r);
    let v = 1.0 - 2.0 * (i * i + j * j);
    let denom = (u * u + v * v).max(twist_gimbal_floor());
    let du = [2.0 * j, 2.0 * k, 2.0 * r, 2.0 * i];
    let dv = [0.0, -4.0 * i, -4.0 * j, 0.0];
    let scale = 180.0 / std::f64::consts::PI;
    let mut out = [0.0; 4];
    for c in 0..4 {
        out[c] = scale * (v * du[c] - u * dv[c]) / denom;
    }
    out
}
