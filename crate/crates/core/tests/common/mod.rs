//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use dynslam_core::models::{self, Pose2};
use dynslam_core::optimization::{DynamicsFactor, MeasurementFactor, ObjectTransformFactor, SmoothingFactor};
use dynslam_core::quadcost::{LinearModel, ResidualModel, ResidualTerm, VariableKey, VariableLayout};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Central finite differences with step `h`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for c in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        j.set_column(c, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

/// Relative Frobenius error of an analytic Jacobian against finite differences.
pub fn jacobian_error(analytic: &DMatrix<f64>, f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> f64 {
    let fd = fd_jacobian(f, x, 1e-6);
    (analytic - &fd).norm() / fd.norm().max(1.0)
}

fn pose(v: &DVector<f64>, o: usize) -> Pose2 {
    Pose2 { x: v[o], y: v[o + 1], theta: v[o + 2] }
}

fn pt(v: &DVector<f64>, o: usize) -> Vector2<f64> {
    Vector2::new(v[o], v[o + 1])
}

fn flat(points: &[Vector2<f64>]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p[0], p[1]]))
}

fn cloud(v: &DVector<f64>, o: usize, n: usize) -> Vec<Vector2<f64>> {
    (0..n).map(|i| pt(v, o + 2 * i)).collect()
}

fn dmat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Every analytic Jacobian at one random point, with its finite-difference
/// error: `(name, relative error)`.
pub fn jacobian_errors(rng: &mut impl Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let x = DVector::from_vec(vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0)]);
    let f = DVector::from_vec(vec![rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]);
    let z = DVector::from_vec(vec![rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]);
    let u = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5)]);

    // g(x, u): wrap only matters at the branch cut, which random points avoid.
    let g = |v: &DVector<f64>| -> DVector<f64> {
        let p = models::ego_dynamics(&pose(v, 0), &Vector3::new(u[0], u[1], u[2]));
        DVector::from_vec(vec![p.x, p.y, v[2] + u[2]])
    };
    out.push(("dg/dx", jacobian_error(&dmat(&models::ego_dynamics_jacobian()), g, &x)));

    let (hx, hf) = models::measure_jacobians(&pose(&x, 0), &pt(&f, 0));
    out.push(("dh/dx", jacobian_error(&dmat(&hx), |v| flat(&[models::measure(&pose(v, 0), &pt(&f, 0))]), &x)));
    out.push(("dh/df", jacobian_error(&dmat(&hf), |v| flat(&[models::measure(&pose(&x, 0), &pt(v, 0))]), &f)));

    let (lx, lz) = models::inverse_measure_jacobians(&pose(&x, 0), &pt(&z, 0));
    out.push(("dl/dx", jacobian_error(&dmat(&lx), |v| flat(&[models::inverse_measure(&pose(v, 0), &pt(&z, 0))]), &x)));
    out.push(("dl/dz", jacobian_error(&dmat(&lz), |v| flat(&[models::inverse_measure(&pose(&x, 0), &pt(v, 0))]), &z)));

    let n = rng.random_range(2..=5usize);
    let f0 = DVector::from_fn(2 * n, |_, _| rng.random_range(-5.0..5.0));
    let xi = DVector::from_vec(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
    let go = |xi_v: &DVector<f64>, f_v: &DVector<f64>| flat(&models::object_transform(&pose(xi_v, 0), &cloud(f_v, 0, n)).unwrap());
    let gxi = models::object_transform_jacobian_pose(&pose(&xi, 0), &cloud(&f0, 0, n)).unwrap();
    let gf = models::object_transform_jacobian_cloud(&pose(&xi, 0), &cloud(&f0, 0, n)).unwrap();
    out.push(("dgo/dxi", jacobian_error(&gxi, |v| go(v, &f0), &xi)));
    out.push(("dgo/df0", jacobian_error(&gf, |v| go(&xi, v), &f0)));

    // γ at a noisy rigid motion, so the alignment is not exact.
    let ft = go(&xi, &f0) + normal_vec(rng, 2 * n) * 0.1;
    let gamma = |a: &DVector<f64>, b: &DVector<f64>| {
        let p = models::inverse_object_transform(&cloud(a, 0, n), &cloud(b, 0, n)).unwrap().pose;
        DVector::from_vec(vec![p.x, p.y, p.theta])
    };
    let (j0, jt) = models::inverse_object_transform_jacobians(&cloud(&f0, 0, n), &cloud(&ft, 0, n)).unwrap();
    out.push(("dgamma/df0", jacobian_error(&j0, |v| gamma(v, &ft), &f0)));
    out.push(("dgamma/dft", jacobian_error(&jt, |v| gamma(&f0, v), &ft)));

    // s at three poses with moderate heading steps (away from the wrap cut).
    let th = rng.random_range(-PI..PI);
    let poses = DVector::from_vec(vec![
        rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), th,
        rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), th + rng.random_range(-1.0..1.0),
        rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), th + rng.random_range(-1.0..1.0),
    ]);
    let s = |v: &DVector<f64>| DVector::from_column_slice(models::smoothing_residual(&pose(v, 0), &pose(v, 3), &pose(v, 6)).as_slice());
    let js = models::smoothing_jacobians();
    let mut jsm = DMatrix::zeros(3, 9);
    for (i, b) in js.iter().enumerate() {
        jsm.view_mut((0, 3 * i), (3, 3)).copy_from(b);
    }
    out.push(("ds/dxi", jacobian_error(&jsm, s, &poses)));

    // Residual models used by the optimization form.
    let models_under_test: Vec<(&'static str, Arc<dyn ResidualModel>, usize)> = vec![
        ("measurement factor", Arc::new(MeasurementFactor { z: pt(&z, 0) }), 5),
        ("object transform factor", Arc::new(ObjectTransformFactor { index: 1, cloud_size: n }), 5 + 2 * n),
        ("smoothing factor", Arc::new(SmoothingFactor), 9),
        ("dynamics factor", Arc::new(DynamicsFactor { odometry: Vector3::new(u[0], u[1], u[2]) }), 6),
    ];
    for (name, model, dim) in models_under_test {
        let mut p = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        if name == "smoothing factor" || name == "dynamics factor" {
            // keep heading differences inside (−π, π)
            for i in (2..dim).step_by(3) {
                p[i] = rng.random_range(-1.0..1.0);
            }
        }
        let err = jacobian_error(&model.jacobian(&p), |v| model.residual(v), &p);
        out.push((name, err));
    }
    out
}

/// A linear-Gaussian problem over `Generic` blocks: prior `x ~ N(m, P)` and
/// observations `y = A x + e`, `e ~ N(0, R)`.
pub struct LinearGaussian {
    pub layout: VariableLayout,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl LinearGaussian {
    pub fn random(rng: &mut impl Rng, max_dim: usize) -> Self {
        let mut dims = Vec::new();
        let target = rng.random_range(2..=max_dim);
        while dims.iter().sum::<usize>() < target {
            let left = target - dims.iter().sum::<usize>();
            // at least two blocks, so there is always something to marginalize
            let cap = if dims.is_empty() { left - 1 } else { left };
            dims.push(rng.random_range(1..=cap.min(3)));
        }
        let layout = VariableLayout::from_blocks(dims.iter().enumerate().map(|(i, d)| (VariableKey::Generic(i), *d))).unwrap();
        let d = layout.dim();
        let m = rng.random_range(1..=d + 2);
        Self {
            prior_mean: normal_vec(rng, d) * 3.0,
            prior_cov: random_spd(rng, d),
            a: DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0)),
            y: normal_vec(rng, m) * 3.0,
            r: random_spd(rng, m),
            layout,
        }
    }

    pub fn keys(&self) -> Vec<VariableKey> {
        self.layout.keys().collect()
    }

    pub fn terms(&self) -> Vec<ResidualTerm> {
        let keys = self.keys();
        vec![
            ResidualTerm::new(keys.clone(), Arc::new(LinearModel::anchor(self.prior_mean.clone())), &self.prior_cov).unwrap(),
            ResidualTerm::new(keys, Arc::new(LinearModel::new(self.a.clone(), self.y.clone())), &self.r).unwrap(),
        ]
    }

    /// Posterior by conditioning the joint Gaussian of `(x, y)` on `y`.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let p = &self.prior_cov;
        let s = &self.a * p * self.a.transpose() + &self.r;
        let s_inv = s.try_inverse().unwrap();
        let gain = p * self.a.transpose() * &s_inv;
        let mean = &self.prior_mean + &gain * (&self.y - &self.a * &self.prior_mean);
        let cov = p - &gain * &self.a * p;
        (mean, cov)
    }
}
