mod common;

use std::sync::Arc;

use approx::assert_relative_eq;
use dynslam_core::quadcost::{
    gauss_newton_step, marginalize, normal_equations, reorder, stack_residuals, GaussianBelief, LinearModel,
    ResidualTerm, SolveMode, VariableKey, VariableLayout,
};
use dynslam_core::Error;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;

use common::{random_spd, rel, rel_vec, LinearGaussian};

fn g(i: usize) -> VariableKey {
    VariableKey::Generic(i)
}

fn layout(dims: &[usize]) -> VariableLayout {
    VariableLayout::from_blocks(dims.iter().enumerate().map(|(i, d)| (g(i), *d))).unwrap()
}

fn linear(keys: Vec<VariableKey>, a: DMatrix<f64>, b: DVector<f64>, noise: DMatrix<f64>) -> ResidualTerm {
    ResidualTerm::new(keys, Arc::new(LinearModel::new(a, b)), &noise).unwrap()
}

#[test]
fn stacked_cost_of_unit_residuals() {
    // r = x − (1, −2) at x = 0 with identity noise: C = (−1, 2), cost 5.
    let l = layout(&[2]);
    let term = linear(vec![g(0)], DMatrix::identity(2, 2), dvector![1.0, -2.0], DMatrix::identity(2, 2));
    let (c, j) = stack_residuals(std::slice::from_ref(&term), &l, &DVector::zeros(2)).unwrap();
    assert_relative_eq!(c, dvector![-1.0, 2.0], epsilon = 1e-15);
    assert_relative_eq!(j, DMatrix::identity(2, 2), epsilon = 1e-15);
    assert_relative_eq!(c.norm_squared(), 5.0, epsilon = 1e-14);
    assert_relative_eq!(term.cost(&l, &DVector::zeros(2)).unwrap(), 5.0, epsilon = 1e-14);
}

#[test]
fn prior_term_whitens_by_covariance() {
    let mut rng = common::rng(1);
    let cov = random_spd(&mut rng, 4);
    let l = layout(&[2, 2]);
    let mu = dvector![1.0, -1.0, 0.5, 3.0];
    let belief = GaussianBelief::new(l.clone(), mu.clone(), cov.clone()).unwrap();
    let prior = ResidualTerm::prior(&belief).unwrap();
    let (c, j) = stack_residuals(std::slice::from_ref(&prior), &l, &mu).unwrap();
    assert!(c.norm() < 1e-14);
    // JᵀJ = Σ⁻¹ for any square-root choice.
    assert!(rel(&(j.transpose() * &j), &cov.clone().try_inverse().unwrap()) < 1e-10);

    let x = dvector![0.0, 2.0, -1.0, 1.0];
    let e = &x - &mu;
    let mahal = (e.transpose() * cov.try_inverse().unwrap() * &e)[(0, 0)];
    assert_relative_eq!(prior.cost(&l, &x).unwrap(), mahal, max_relative = 1e-10);
    assert_relative_eq!(belief.mahalanobis(&x).unwrap(), mahal, max_relative = 1e-10);
}

#[test]
fn gauss_newton_fuses_two_scalar_observations() {
    // Prior N(1, 1) and observation 2 with variance 1: N(1.5, 0.5).
    let l = layout(&[1]);
    let terms = vec![
        linear(vec![g(0)], dmatrix![1.0], dvector![1.0], dmatrix![1.0]),
        linear(vec![g(0)], dmatrix![1.0], dvector![2.0], dmatrix![1.0]),
    ];
    let b = gauss_newton_step(&terms, &l, &dvector![-7.0], SolveMode::Strict).unwrap();
    assert_relative_eq!(b.mean()[0], 1.5, epsilon = 1e-14);
    assert_relative_eq!(b.covariance()[(0, 0)], 0.5, epsilon = 1e-14);
}

#[test]
fn gauss_newton_on_prior_alone_returns_prior() {
    let mut rng = common::rng(2);
    let l = layout(&[3, 2]);
    let belief = GaussianBelief::new(l.clone(), common::normal_vec(&mut rng, 5), random_spd(&mut rng, 5)).unwrap();
    let out = gauss_newton_step(&[ResidualTerm::prior(&belief).unwrap()], &l, belief.mean(), SolveMode::Strict).unwrap();
    assert!(rel_vec(out.mean(), belief.mean()) < 1e-12);
    assert!(rel(out.covariance(), belief.covariance()) < 1e-12);
}

#[test]
fn gauss_newton_is_idempotent_for_linear_costs() {
    let mut rng = common::rng(3);
    let case = LinearGaussian::random(&mut rng, 6);
    let terms = case.terms();
    let first = gauss_newton_step(&terms, &case.layout, &case.prior_mean, SolveMode::Strict).unwrap();
    let second = gauss_newton_step(&terms, &case.layout, first.mean(), SolveMode::Strict).unwrap();
    assert!(rel_vec(second.mean(), first.mean()) < 1e-10);
    assert!(rel(second.covariance(), first.covariance()) < 1e-10);
    // The gradient vanishes at the solution.
    let ne = normal_equations(&terms, &case.layout, first.mean()).unwrap();
    assert!(ne.gradient.norm() < 1e-8 * (1.0 + ne.information.norm()));
}

#[test]
fn gauss_newton_matches_weighted_least_squares() {
    // Two-parameter line fit y = a + b t with heteroscedastic noise.
    let ts = [0.0, 1.0, 2.0, 3.0, 4.0];
    let ys = [1.1, 2.9, 5.2, 7.1, 8.8];
    let vars = [0.1, 0.2, 0.1, 0.4, 0.3];
    let l = layout(&[2]);
    let terms: Vec<_> = ts
        .iter()
        .zip(ys)
        .zip(vars)
        .map(|((t, y), v)| linear(vec![g(0)], dmatrix![1.0, *t], dvector![y], dmatrix![v]))
        .collect();
    let b = gauss_newton_step(&terms, &l, &DVector::zeros(2), SolveMode::Strict).unwrap();

    let a = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { ts[i] });
    let w = DMatrix::from_diagonal(&DVector::from_iterator(5, vars.iter().map(|v| 1.0 / v)));
    let y = DVector::from_column_slice(&ys);
    let info = a.transpose() * &w * &a;
    let cov = info.clone().try_inverse().unwrap();
    let mean = &cov * a.transpose() * &w * y;
    assert!(rel_vec(b.mean(), &mean) < 1e-12);
    assert!(rel(b.covariance(), &cov) < 1e-12);
}

#[test]
fn strict_mode_reports_rank_loss() {
    let l = layout(&[2]);
    let terms = vec![linear(vec![g(0)], dmatrix![1.0, 1.0], dvector![1.0], dmatrix![1.0])];
    match gauss_newton_step(&terms, &l, &DVector::zeros(2), SolveMode::Strict) {
        Err(Error::Singular { dim, .. }) => assert_eq!(dim, 2),
        other => panic!("expected a singular solve, got {other:?}"),
    }
    // The pseudo-inverse picks the minimum-norm solution.
    let b = gauss_newton_step(&terms, &l, &DVector::zeros(2), SolveMode::Pseudo).unwrap();
    assert_relative_eq!(b.mean(), &dvector![0.5, 0.5], epsilon = 1e-12);
}

#[test]
fn marginalizing_a_random_walk_adds_variances() {
    // x0 ~ N(0, 1), x1 = x0 + w, w ~ N(0, 1): x1 ~ N(0, 2).
    let l = layout(&[1, 1]);
    let terms = vec![
        linear(vec![g(0)], dmatrix![1.0], dvector![0.0], dmatrix![1.0]),
        linear(vec![g(0), g(1)], dmatrix![-1.0, 1.0], dvector![0.0], dmatrix![1.0]),
    ];
    let b = marginalize(&terms, &l, &[g(1)], &[g(0)], &dvector![0.3, -0.2]).unwrap();
    assert_relative_eq!(b.mean()[0], 0.0, epsilon = 1e-14);
    assert_relative_eq!(b.covariance()[(0, 0)], 2.0, epsilon = 1e-14);
}

#[test]
fn marginalizing_an_independent_variable_leaves_the_rest() {
    let l = layout(&[1, 1]);
    let terms = vec![
        linear(vec![g(0)], dmatrix![1.0], dvector![4.0], dmatrix![3.0]),
        linear(vec![g(1)], dmatrix![1.0], dvector![-1.0], dmatrix![0.5]),
    ];
    let b = marginalize(&terms, &l, &[g(1)], &[g(0)], &DVector::zeros(2)).unwrap();
    assert_relative_eq!(b.mean()[0], -1.0, epsilon = 1e-14);
    assert_relative_eq!(b.covariance()[(0, 0)], 0.5, epsilon = 1e-14);
}

#[test]
fn marginalization_equals_dense_joint_marginal() {
    // A 6-variable chain; the marginal of the joint posterior keeps blocks 1, 3, 5.
    let mut rng = common::rng(4);
    let l = layout(&[1; 6]);
    let mut terms = vec![linear(vec![g(0)], dmatrix![1.0], dvector![0.5], dmatrix![2.0])];
    for i in 1..6 {
        let v = 0.2 + rand::Rng::random_range(&mut rng, 0.0..1.0);
        terms.push(linear(vec![g(i - 1), g(i)], dmatrix![-1.0, 1.0], dvector![0.3 * i as f64], dmatrix![v]));
        terms.push(linear(vec![g(i)], dmatrix![1.0], dvector![i as f64], dmatrix![1.5]));
    }
    let full = gauss_newton_step(&terms, &l, &DVector::zeros(6), SolveMode::Strict).unwrap();
    let keep = [g(5), g(1), g(3)];
    let b = marginalize(&terms, &l, &keep, &[g(0), g(2), g(4)], &DVector::zeros(6)).unwrap();
    let idx = [5, 1, 3];
    let mean = DVector::from_iterator(3, idx.iter().map(|&i| full.mean()[i]));
    let cov = DMatrix::from_fn(3, 3, |r, c| full.covariance()[(idx[r], idx[c])]);
    assert_eq!(b.layout().keys().collect::<Vec<_>>(), keep.to_vec());
    assert!(rel_vec(b.mean(), &mean) < 1e-12);
    assert!(rel(b.covariance(), &cov) < 1e-12);
}

#[test]
fn marginalize_rejects_bad_partitions() {
    let l = layout(&[1, 1]);
    let terms = vec![linear(vec![g(0), g(1)], DMatrix::identity(2, 2), DVector::zeros(2), DMatrix::identity(2, 2))];
    assert!(marginalize(&terms, &l, &[], &[g(0), g(1)], &DVector::zeros(2)).is_err());
    assert!(marginalize(&terms, &l, &[g(0)], &[g(0), g(1)], &DVector::zeros(2)).is_err());
    assert!(marginalize(&terms, &l, &[g(0)], &[], &DVector::zeros(2)).is_err());
}

#[test]
fn linear_gaussian_posterior_matches_conditioning() {
    let mut rng = common::rng(5);
    for _ in 0..20 {
        let case = LinearGaussian::random(&mut rng, 8);
        let b = gauss_newton_step(&case.terms(), &case.layout, &case.prior_mean, SolveMode::Strict).unwrap();
        let (mean, cov) = case.posterior();
        assert!(rel_vec(b.mean(), &mean) < 1e-9);
        assert!(rel(b.covariance(), &cov) < 1e-9);
    }
}

#[test]
fn reorder_identity_and_swap() {
    let mut rng = common::rng(6);
    let l = layout(&[2, 1, 3]);
    let b = GaussianBelief::new(l.clone(), common::normal_vec(&mut rng, 6), random_spd(&mut rng, 6)).unwrap();
    let same = reorder(&b, &l).unwrap();
    assert_eq!(same.mean(), b.mean());
    assert_eq!(same.covariance(), b.covariance());

    let swapped = VariableLayout::from_blocks([(g(2), 3), (g(0), 2), (g(1), 1)]).unwrap();
    let r = reorder(&b, &swapped).unwrap();
    let perm = [3, 4, 5, 0, 1, 2];
    for (i, &pi) in perm.iter().enumerate() {
        assert_eq!(r.mean()[i], b.mean()[pi]);
        for (j, &pj) in perm.iter().enumerate() {
            assert_eq!(r.covariance()[(i, j)], b.covariance()[(pi, pj)]);
        }
    }
    // Round trip and Mahalanobis invariance.
    let back = reorder(&r, &l).unwrap();
    assert_eq!(back.mean(), b.mean());
    let x = common::normal_vec(&mut rng, 6);
    let xr = DVector::from_iterator(6, perm.iter().map(|&p| x[p]));
    assert_relative_eq!(b.mahalanobis(&x).unwrap(), r.mahalanobis(&xr).unwrap(), max_relative = 1e-10);
}

#[test]
fn reorder_swaps_scalar_blocks() {
    let b = GaussianBelief::new(layout(&[1, 1]), dvector![1.0, 2.0], dmatrix![1.0, 2.0; 2.0, 5.0]).unwrap();
    let r = reorder(&b, &VariableLayout::from_blocks([(g(1), 1), (g(0), 1)]).unwrap()).unwrap();
    assert_eq!(r.mean(), &dvector![2.0, 1.0]);
    assert_eq!(r.covariance(), &dmatrix![5.0, 2.0; 2.0, 1.0]);
}

#[test]
fn reorder_rejects_foreign_layouts() {
    let b = GaussianBelief::new(layout(&[1, 1]), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    assert!(reorder(&b, &layout(&[1, 1, 1])).is_err());
    assert!(reorder(&b, &VariableLayout::from_blocks([(g(0), 1), (g(7), 1)]).unwrap()).is_err());
    assert!(reorder(&b, &VariableLayout::from_blocks([(g(0), 2)]).unwrap()).is_err());
}

#[test]
fn layout_rejects_duplicates_and_wrong_dims() {
    assert!(VariableLayout::from_blocks([(g(0), 1), (g(0), 2)]).is_err());
    assert!(VariableLayout::from_blocks([(VariableKey::EgoPose, 2)]).is_err());
    assert!(VariableLayout::from_blocks([(VariableKey::StaticFeature(0), 3)]).is_err());
}

proptest! {
    #[test]
    fn layout_offsets_tile_the_state(dims in prop::collection::vec(1usize..5, 1..10)) {
        let l = layout(&dims);
        prop_assert_eq!(l.dim(), dims.iter().sum::<usize>());
        prop_assert_eq!(l.len(), dims.len());
        let mut next = 0;
        for (i, b) in l.blocks().iter().enumerate() {
            prop_assert_eq!(b.offset, next);
            prop_assert_eq!(b.dim, dims[i]);
            prop_assert_eq!(l.range(&g(i)), Some(next..next + dims[i]));
            next += dims[i];
        }
        let dropped = l.without(&[g(0)]);
        prop_assert_eq!(dropped.dim(), l.dim() - dims[0]);
        prop_assert!(!dropped.contains(&g(0)));
    }

    #[test]
    fn canonical_order_is_a_sorted_permutation(keys in prop::collection::btree_set(0usize..20, 1..8), shuffle in any::<u64>()) {
        let mut keys: Vec<_> = keys.into_iter().map(VariableKey::StaticFeature).collect();
        let n = keys.len();
        keys.rotate_left((shuffle as usize) % n);
        let l = VariableLayout::from_keys(keys.clone()).unwrap();
        let c = l.canonical();
        prop_assert!(c.is_canonical());
        prop_assert!(c.is_permutation_of(&l));
        let mut sorted = keys;
        sorted.sort();
        prop_assert_eq!(c.keys().collect::<Vec<_>>(), sorted);
    }
}
