//! Planar driving models: additive-odometry dynamics, body-frame point
//! measurements, rigid object motion about the cloud centroid, and the
//! second-difference smoothing residual, each with analytic Jacobians.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Matrix2x3, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type FeaturePosition = Vector2<f64>;

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose `(x, y, θ)` with θ kept in `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

pub type EgoPose = Pose2;
/// Rigid motion of an object relative to its reference configuration.
pub type ObjectPose = Pose2;

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Componentwise difference with the heading difference wrapped.
    pub fn delta(&self, from: &Pose2) -> Vector3<f64> {
        Vector3::new(self.x - from.x, self.y - from.y, wrap_angle(self.theta - from.theta))
    }
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `dR/dθ`.
pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Process, measurement, object-motion and smoothing covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Odometry noise `Σ_w` (m², m², rad²).
    pub process: Matrix3<f64>,
    /// Point measurement noise `Σ_v` (m²).
    pub measurement: Matrix2<f64>,
    /// Per-feature object motion noise `Σ_ξ` (m²).
    pub object: Matrix2<f64>,
    /// Second-difference smoothing noise `Σ_s`.
    pub smoothing: Matrix3<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::level(1, 1).expect("level (1, 1) exists")
    }
}

impl NoiseModel {
    /// Grid level `(i, j)` with `i, j ∈ {1, 2, 3}`: `Σ_w,i = diag(10^(i−7), 10^(i−7), 10^(i−9))`
    /// and `Σ_v,j = 10^(j−7) I`.
    pub fn level(process: u8, measurement: u8) -> Result<Self> {
        if !(1..=3).contains(&process) || !(1..=3).contains(&measurement) {
            return Err(Error::model(format!("noise level ({process}, {measurement}) outside {{1,2,3}}²")));
        }
        let w = 10f64.powi(process as i32 - 7);
        let v = 10f64.powi(measurement as i32 - 7);
        Ok(Self {
            process: Matrix3::from_diagonal(&Vector3::new(w, w, w * 1e-2)),
            measurement: Matrix2::identity() * v,
            object: Matrix2::identity() * 0.1,
            smoothing: Matrix3::identity() * 0.1,
        })
    }

    /// Same model with no odometry or measurement noise; used to generate
    /// exact data.
    pub fn noiseless(&self) -> Self {
        Self { process: Matrix3::zeros(), measurement: Matrix2::zeros(), ..self.clone() }
    }

    pub fn is_noiseless(&self) -> bool {
        self.process.iter().all(|v| *v == 0.0) && self.measurement.iter().all(|v| *v == 0.0)
    }

    /// All four covariances must be symmetric positive definite for filtering.
    pub fn validate(&self) -> Result<()> {
        check_spd("process", &DMatrix::from_column_slice(3, 3, self.process.as_slice()))?;
        check_spd("measurement", &DMatrix::from_column_slice(2, 2, self.measurement.as_slice()))?;
        check_spd("object", &DMatrix::from_column_slice(2, 2, self.object.as_slice()))?;
        check_spd("smoothing", &DMatrix::from_column_slice(3, 3, self.smoothing.as_slice()))
    }

    pub fn object_is_diagonal(&self) -> bool {
        self.object[(0, 1)] == 0.0 && self.object[(1, 0)] == 0.0
    }
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).norm() > 1e-12 * m.norm() {
        return Err(Error::model(format!("{name} covariance is not symmetric")));
    }
    if SymmetricEigen::new(m.clone()).eigenvalues.min() <= 0.0 {
        return Err(Error::model(format!("{name} covariance is not positive definite")));
    }
    Ok(())
}

/// `g(x, u) = x + u` with the heading re-wrapped.
pub fn ego_dynamics(x: &EgoPose, odom: &Vector3<f64>) -> EgoPose {
    Pose2::new(x.x + odom[0], x.y + odom[1], x.theta + odom[2])
}

/// `∂g/∂x`.
pub fn ego_dynamics_jacobian() -> Matrix3<f64> {
    Matrix3::identity()
}

/// World point `f` expressed in the body frame of `x`: `R(θ)ᵀ (f − p)`.
pub fn measure(x: &EgoPose, f: &FeaturePosition) -> Vector2<f64> {
    rotation(x.theta).transpose() * (f - x.translation())
}

/// `(∂h/∂x, ∂h/∂f)`.
pub fn measure_jacobians(x: &EgoPose, f: &FeaturePosition) -> (Matrix2x3<f64>, Matrix2<f64>) {
    let rt = rotation(x.theta).transpose();
    let d = f - x.translation();
    let (s, c) = x.theta.sin_cos();
    let mut hx = Matrix2x3::zeros();
    hx.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-rt));
    hx[(0, 2)] = -s * d[0] + c * d[1];
    hx[(1, 2)] = -c * d[0] - s * d[1];
    (hx, rt)
}

/// `ℓ(x, z) = p + R(θ) z`, the right inverse of [`measure`].
pub fn inverse_measure(x: &EgoPose, z: &Vector2<f64>) -> FeaturePosition {
    x.translation() + rotation(x.theta) * z
}

/// `(∂ℓ/∂x, ∂ℓ/∂z)`.
pub fn inverse_measure_jacobians(x: &EgoPose, z: &Vector2<f64>) -> (Matrix2x3<f64>, Matrix2<f64>) {
    let mut lx = Matrix2x3::zeros();
    lx.fixed_view_mut::<2, 2>(0, 0).copy_from(&Matrix2::identity());
    lx.fixed_view_mut::<2, 1>(0, 2).copy_from(&(rotation_derivative(x.theta) * z));
    (lx, rotation(x.theta))
}

pub fn centroid(cloud: &[FeaturePosition]) -> Result<FeaturePosition> {
    if cloud.is_empty() {
        return Err(Error::model("empty feature cloud"));
    }
    Ok(cloud.iter().sum::<Vector2<f64>>() / cloud.len() as f64)
}

/// `g^o(ξ, f)`: rotate the cloud by `ξ.θ` about its centroid, then translate by `(ξ.x, ξ.y)`.
pub fn object_transform(xi: &ObjectPose, cloud: &[FeaturePosition]) -> Result<Vec<FeaturePosition>> {
    let c = centroid(cloud)?;
    let r = rotation(xi.theta);
    let t = xi.translation();
    Ok(cloud.iter().map(|f| r * (f - c) + c + t).collect())
}

/// `∂g^o/∂ξ`, a `2n × 3` matrix.
pub fn object_transform_jacobian_pose(xi: &ObjectPose, cloud: &[FeaturePosition]) -> Result<DMatrix<f64>> {
    let c = centroid(cloud)?;
    let dr = rotation_derivative(xi.theta);
    let mut j = DMatrix::zeros(2 * cloud.len(), 3);
    for (i, f) in cloud.iter().enumerate() {
        j[(2 * i, 0)] = 1.0;
        j[(2 * i + 1, 1)] = 1.0;
        let col = dr * (f - c);
        j[(2 * i, 2)] = col[0];
        j[(2 * i + 1, 2)] = col[1];
    }
    Ok(j)
}

/// `∂g^o/∂f`, a `2n × 2n` matrix: `blockdiag(R) + (1/n) 𝟙𝟙ᵀ ⊗ (I − R)`.
pub fn object_transform_jacobian_cloud(xi: &ObjectPose, cloud: &[FeaturePosition]) -> Result<DMatrix<f64>> {
    if cloud.is_empty() {
        return Err(Error::model("empty feature cloud"));
    }
    let n = cloud.len();
    let r = rotation(xi.theta);
    let shared = (Matrix2::identity() - r) / n as f64;
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..n {
        for b in 0..n {
            let blk = if a == b { r + shared } else { shared };
            j.fixed_view_mut::<2, 2>(2 * a, 2 * b).copy_from(&blk);
        }
    }
    Ok(j)
}

/// Result of aligning two clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub pose: ObjectPose,
    /// The rotation is unobservable (single feature or coincident features);
    /// `pose.theta` is then 0.
    pub degenerate: bool,
}

/// Centered cross terms `C = Σ pᵢ × qᵢ`, `S = Σ pᵢ · qᵢ` and centroids.
struct CrossTerms {
    c0: Vector2<f64>,
    ct: Vector2<f64>,
    p: Vec<Vector2<f64>>,
    q: Vec<Vector2<f64>>,
    cross: f64,
    dot: f64,
    degenerate: bool,
}

fn cross_terms(f0: &[FeaturePosition], ft: &[FeaturePosition]) -> Result<CrossTerms> {
    if f0.len() != ft.len() {
        return Err(Error::model(format!("cloud sizes differ: {} vs {}", f0.len(), ft.len())));
    }
    let c0 = centroid(f0)?;
    let ct = centroid(ft)?;
    let p: Vec<_> = f0.iter().map(|f| f - c0).collect();
    let q: Vec<_> = ft.iter().map(|f| f - ct).collect();
    let (mut cross, mut dot, mut scale) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        cross += p[i][0] * q[i][1] - p[i][1] * q[i][0];
        dot += p[i].dot(&q[i]);
        // Judge against the raw coordinates: centering rounds at their scale.
        scale += f0[i].norm() * ft[i].norm();
    }
    let degenerate = cross.hypot(dot) <= 1e-12 * scale.max(f64::MIN_POSITIVE);
    Ok(CrossTerms { c0, ct, p, q, cross, dot, degenerate })
}

/// `γ(f₀, f_t)`: least-squares rigid alignment (2-D Wahba/Procrustes).
///
/// The rotation comes from the SVD of the centered cross-covariance with a
/// determinant correction; the translation is the centroid difference, since
/// [`object_transform`] rotates about the reference centroid.
pub fn inverse_object_transform(f0: &[FeaturePosition], ft: &[FeaturePosition]) -> Result<Alignment> {
    let terms = cross_terms(f0, ft)?;
    let shift = terms.ct - terms.c0;
    if terms.degenerate {
        return Ok(Alignment { pose: Pose2::new(shift[0], shift[1], 0.0), degenerate: true });
    }
    let mut h = Matrix2::zeros();
    for (p, q) in terms.p.iter().zip(&terms.q) {
        h += p * q.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix2::from_diagonal(&Vector2::new(1.0, d)) * u.transpose();
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    Ok(Alignment { pose: Pose2::new(shift[0], shift[1], theta), degenerate: false })
}

/// `(∂γ/∂f₀, ∂γ/∂f_t)`, each `3 × 2n`.
///
/// With `C`, `S` the centered cross and dot sums, `θ = atan2(C, S)` and
/// `dθ = (S dC − C dS)/(S² + C²)`; the centering terms cancel because the
/// centered clouds sum to zero.
pub fn inverse_object_transform_jacobians(
    f0: &[FeaturePosition],
    ft: &[FeaturePosition],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t = cross_terms(f0, ft)?;
    if t.degenerate {
        return Err(Error::model("rotation of a degenerate cloud has no derivative"));
    }
    let n = f0.len();
    let inv_n = 1.0 / n as f64;
    let denom = t.dot * t.dot + t.cross * t.cross;
    let mut j0 = DMatrix::zeros(3, 2 * n);
    let mut jt = DMatrix::zeros(3, 2 * n);
    for i in 0..n {
        let (p, q) = (t.p[i], t.q[i]);
        j0[(0, 2 * i)] = -inv_n;
        j0[(1, 2 * i + 1)] = -inv_n;
        jt[(0, 2 * i)] = inv_n;
        jt[(1, 2 * i + 1)] = inv_n;
        // ∂C/∂p = (q_y, −q_x), ∂S/∂p = q
        let dp = (Vector2::new(q[1], -q[0]) * t.dot - q * t.cross) / denom;
        // ∂C/∂q = (−p_y, p_x), ∂S/∂q = p
        let dq = (Vector2::new(-p[1], p[0]) * t.dot - p * t.cross) / denom;
        j0[(2, 2 * i)] = dp[0];
        j0[(2, 2 * i + 1)] = dp[1];
        jt[(2, 2 * i)] = dq[0];
        jt[(2, 2 * i + 1)] = dq[1];
    }
    Ok((j0, jt))
}

/// Second difference `(c − b) − (b − a)` with heading differences wrapped.
pub fn smoothing_residual(a: &ObjectPose, b: &ObjectPose, c: &ObjectPose) -> Vector3<f64> {
    c.delta(b) - b.delta(a)
}

/// `(∂s/∂a, ∂s/∂b, ∂s/∂c) = (I, −2I, I)`.
pub fn smoothing_jacobians() -> [Matrix3<f64>; 3] {
    let i = Matrix3::identity();
    [i, -2.0 * i, i]
}
