//! SE(3) rigid transforms and their se(3) tangent parameterization.
//!
//! Poses are stored in matrix form ([`RigidTransform`]) and updated
//! left-multiplicatively, `T <- exp(delta) * T`, which matches the analytic
//! point Jacobian used for pose gradients: the derivative of
//! `exp(eps) * T [p]` with respect to `eps` at `eps = 0` is the 3x6 block
//! matrix `[I | -(T[p])^]`, with the translational block first.
//!
//! Interesting reads on the conventions used here:
//! - Ethan Eade, "Lie groups for 2D and 3D transformations"
//! - J.-L. Blanco, "A tutorial on SE(3) transformation parameterizations"

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Below this rotation magnitude, exp/log switch to 2nd-order Taylor series
/// to avoid catastrophic cancellation in the sin/cos coefficient ratios.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Element of se(3): translational part `v` first, rotational part `w`
/// (radians) second, matching the column order of [`point_jacobian`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist { v, w }
    }

    pub fn zero() -> Self {
        Twist { v: Vector3::zeros(), w: Vector3::zeros() }
    }

    pub fn from_vector6(x: &Vector6<f64>) -> Self {
        Twist {
            v: Vector3::new(x[0], x[1], x[2]),
            w: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::new(self.v[0], self.v[1], self.v[2], self.w[0], self.w[1], self.w[2])
    }
}

/// Rigid transform: rotation matrix `r` and translation `t` (scene units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

/// Validation failures for externally supplied transforms.
#[derive(Debug, thiserror::Error)]
pub enum Se3Error {
    #[error("rotation part is not orthonormal (|r^T r - I| = {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation part has determinant {0:.6} (expected +1)")]
    BadDeterminant(f64),
    #[error("transform contains non-finite entries")]
    NonFinite,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { r: Matrix3::identity(), t: Vector3::zeros() }
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        RigidTransform { r, t }
    }

    /// Checks the rotation invariants (orthonormality and determinant +1,
    /// both to 1e-9) for transforms read from files.
    pub fn validate(&self) -> Result<(), Se3Error> {
        if !self.r.iter().all(|x| x.is_finite()) || !self.t.iter().all(|x| x.is_finite()) {
            return Err(Se3Error::NonFinite);
        }
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(Se3Error::NotOrthonormal(ortho));
        }
        let det = self.r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Se3Error::BadDeterminant(det));
        }
        Ok(())
    }

    /// Serialization layout used by dataset and checkpoint files:
    /// the 3x4 matrix `[r | t]` flattened row-major.
    pub fn to_rows_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.r[(i, j)];
            }
            out[i * 4 + 3] = self.t[i];
        }
        out
    }

    pub fn from_rows_3x4(rows: &[f64; 12]) -> Self {
        let mut r = Matrix3::zeros();
        let mut t = Vector3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = rows[i * 4 + j];
            }
            t[i] = rows[i * 4 + 3];
        }
        RigidTransform { r, t }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Projects the rotation part back onto SO(3) (polar decomposition via
    /// SVD). Applied after every on-manifold pose update to stop drift.
    pub fn renormalize(&mut self) {
        let svd = self.r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // Flip the singular direction with the smallest singular value.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.r = r;
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = (self.r.trace() - 1.0) * 0.5;
        c.clamp(-1.0, 1.0).acos()
    }
}

/// Cross-product (skew-symmetric) matrix of `x`.
pub fn hat(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -x[2], x[1],
        x[2], 0.0, -x[0],
        -x[1], x[0], 0.0,
    )
}

/// Inverse of [`hat`] on antisymmetric matrices.
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map se(3) -> SE(3).
///
/// Rodrigues rotation from `w` and translation `V(w) * v` with the standard
/// left Jacobian `V`.
pub fn exp(xi: &Twist) -> RigidTransform {
    let theta2 = xi.w.norm_squared();
    let theta = theta2.sqrt();
    let wx = hat(&xi.w);
    let wx2 = wx * wx;
    // a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3
    let (a, b, c) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let r = Matrix3::identity() + a * wx + b * wx2;
    let v_mat = Matrix3::identity() + b * wx + c * wx2;
    RigidTransform { r, t: v_mat * xi.v }
}

/// Logarithm map SE(3) -> se(3). The returned rotation magnitude is in
/// [0, pi]; `exp(log(T))` reproduces `T` to 1e-8 elementwise away from the
/// angle-pi singularity.
pub fn log(t: &RigidTransform) -> Twist {
    let theta = t.rotation_angle();
    let w = if theta < SMALL_ANGLE {
        // w = vee(R - R^T) * (1/2 + theta^2/12)
        vee(&(t.r - t.r.transpose())) * (0.5 + theta * theta / 12.0)
    } else if theta > std::f64::consts::PI - 1e-6 {
        // Near pi, R + I ~= 2 n n^T: recover the axis from its largest column.
        let b = t.r + Matrix3::identity();
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].partial_cmp(&b[(j, j)]).unwrap())
            .unwrap();
        let mut n = b.column(col).into_owned();
        n /= n.norm();
        // Fix the sign using the off-diagonal antisymmetric part when it is
        // informative; at exactly pi either sign is valid.
        let v = vee(&(t.r - t.r.transpose()));
        if v.dot(&n) < 0.0 {
            n = -n;
        }
        n * theta
    } else {
        vee(&(t.r - t.r.transpose())) * (theta / (2.0 * theta.sin()))
    };

    let theta2 = w.norm_squared();
    let wx = hat(&w);
    let wx2 = wx * wx;
    // V^-1 = I - w^/2 + d * (w^)^2
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    let v_inv = Matrix3::identity() - 0.5 * wx + d * wx2;
    Twist { v: v_inv * t.t, w }
}

/// Applies the transform to a point: `r * p + t`.
pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.r * p + t.t
}

/// Analytic 3x6 Jacobian of `exp(eps) * T [p]` with respect to the
/// perturbation `eps` at `eps = 0`: `[I | -(T[p])^]`. Columns are ordered
/// (translation, rotation), matching the [`Twist`] field order.
pub fn point_jacobian(t: &RigidTransform, p: &Vector3<f64>) -> nalgebra::SMatrix<f64, 3, 6> {
    let q = transform_point(t, p);
    let mut j = nalgebra::SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&q)));
    j
}

/// Accumulates a pose-gradient contribution `J^T * g` for one transformed
/// point `q = T[p]`: translational part `g`, rotational part `q x g`.
pub fn accumulate_point_gradient(q: &Vector3<f64>, g: &Vector3<f64>, out: &mut Vector6<f64>) {
    // J = [I | -q^]  =>  J^T g = (g, q x g).
    let wg = q.cross(g);
    out[0] += g[0];
    out[1] += g[1];
    out[2] += g[2];
    out[3] += wg[0];
    out[4] += wg[1];
    out[5] += wg[2];
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform { r: a.r * b.r, t: a.r * b.t + a.t }
}

pub fn inverse(t: &RigidTransform) -> RigidTransform {
    let rt = t.r.transpose();
    RigidTransform { r: rt, t: -(rt * t.t) }
}

/// `relative(a, b) = a^-1 * b`, so that `a * relative(a, b) = b`.
pub fn relative(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    compose(&inverse(a), b)
}

/// Serde-friendly mirror of [`RigidTransform`] as a row-major 3x4 array,
/// used in dataset manifests and trajectory files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseRows(pub Vec<f64>);

impl PoseRows {
    pub fn from_transform(t: &RigidTransform) -> Self {
        PoseRows(t.to_rows_3x4().to_vec())
    }

    pub fn to_transform(&self) -> Result<RigidTransform, Se3Error> {
        if self.0.len() != 12 {
            return Err(Se3Error::NonFinite);
        }
        let mut rows = [0.0; 12];
        rows.copy_from_slice(&self.0);
        let t = RigidTransform::from_rows_3x4(&rows);
        t.validate()?;
        Ok(t)
    }
}
