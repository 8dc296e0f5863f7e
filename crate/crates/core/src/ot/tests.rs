use super::*;
use crate::numeric::grad_check;
use crate::rng::Rng;
use proptest::prelude::*;

fn cloud(rows: &[&[f64]]) -> PointCloud {
    let d = rows[0].len();
    PointCloud::uniform(Matrix::from_rows(rows, d).unwrap()).unwrap()
}

fn random_cloud(rng: &mut Rng, n: usize, d: usize) -> PointCloud {
    let data = (0..n * d).map(|_| rng.uniform()).collect();
    PointCloud::uniform(Matrix::from_vec(n, d, data).unwrap()).unwrap()
}

fn tight(epsilon: f64, debiased: bool) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iters: 100_000,
        convergence_tol: 1e-13,
        debiased,
    }
}

#[test]
fn single_atoms_forced_plan() {
    let a = cloud(&[&[0., 0.]]);
    let b = cloud(&[&[1., 0.]]);
    for eps in [1e-3, 0.1, 10.0] {
        for debiased in [false, true] {
            let cfg = SinkhornConfig { epsilon: eps, debiased, ..Default::default() };
            let out = sinkhorn_cost(&a, &b, &cfg).unwrap();
            assert!((out.value - 1.0).abs() < 1e-12, "eps={eps}: {}", out.value);
            assert!(out.converged);
        }
    }
}

#[test]
fn identical_clouds_have_zero_divergence() {
    let a = cloud(&[&[0., 0.], &[1., 0.5], &[-0.3, 2.]]);
    let out = sinkhorn_cost(&a, &a, &SinkhornConfig::default()).unwrap();
    assert!(out.value.abs() < 1e-6, "{}", out.value);
}

#[test]
fn small_epsilon_matches_exact_two_by_two() {
    let a = cloud(&[&[0., 0.], &[1., 0.]]);
    let b = cloud(&[&[0., 1.], &[1., 1.]]);
    let cfg = SinkhornConfig { epsilon: 1e-3, max_iters: 10_000, ..Default::default() };
    let out = sinkhorn_cost(&a, &b, &cfg).unwrap();
    let exact = exact_ot_oracle(&a, &b).unwrap();
    assert_eq!(exact, 1.0);
    assert!((out.value - exact).abs() < 5e-2, "{}", out.value);
}

#[test]
fn dimension_mismatch_is_error() {
    let a = cloud(&[&[0., 0.]]);
    let b = cloud(&[&[0., 0., 1.]]);
    assert!(matches!(sinkhorn_cost(&a, &b, &SinkhornConfig::default()), Err(Error::Shape(_))));
}

#[test]
fn invalid_config_rejected() {
    let a = cloud(&[&[0.]]);
    let bad = SinkhornConfig { epsilon: 0.0, ..Default::default() };
    assert!(sinkhorn_cost(&a, &a, &bad).is_err());
    let bad = SinkhornConfig { max_iters: 0, ..Default::default() };
    assert!(sinkhorn_cost(&a, &a, &bad).is_err());
}

#[test]
fn non_convergence_is_reported_not_raised() {
    let mut rng = Rng::new(9);
    let a = random_cloud(&mut rng, 5, 2);
    let b = random_cloud(&mut rng, 4, 2);
    let cfg = SinkhornConfig { epsilon: 1e-3, max_iters: 1, convergence_tol: 1e-12, debiased: false };
    let out = sinkhorn_cost(&a, &b, &cfg).unwrap();
    assert!(!out.converged);
    assert_eq!(out.iterations, 1);
    assert!(out.value.is_finite());
}

#[test]
fn weights_validated() {
    let pts = Matrix::from_vec(2, 1, vec![0., 1.]).unwrap();
    assert!(PointCloud::with_weights(pts.clone(), vec![0.5, 0.6]).is_err());
    assert!(PointCloud::with_weights(pts.clone(), vec![1.0]).is_err());
    assert!(PointCloud::with_weights(pts, vec![0.25, 0.75]).is_ok());
    assert!(PointCloud::uniform(Matrix::zeros(0, 2)).is_err());
}

#[test]
fn gradient_single_atoms() {
    let a = cloud(&[&[0., 0.]]);
    let b = cloud(&[&[1., 0.]]);
    let g = sinkhorn_grad_points(&a, &b, &SinkhornConfig::default()).unwrap();
    assert!((g.grad_a.get(0, 0) + 2.0).abs() < 1e-12);
    assert!(g.grad_a.get(0, 1).abs() < 1e-12);
    assert!((g.grad_b.get(0, 0) - 2.0).abs() < 1e-12);
}

#[test]
fn gradient_vanishes_for_identical_clouds() {
    let mut rng = Rng::new(2);
    let a = random_cloud(&mut rng, 4, 3);
    let g = sinkhorn_grad_points(&a, &a, &tight(0.1, true)).unwrap();
    for v in g.grad_a.as_slice().iter().chain(g.grad_b.as_slice()) {
        assert!(v.abs() < 1e-4, "{v}");
    }
}

fn check_grads(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig, tol: f64) {
    let g = sinkhorn_grad_points(a, b, cfg).unwrap();
    let (n, d) = (a.len(), a.dim());
    let mut params = a.points().as_slice().to_vec();
    params.extend_from_slice(b.points().as_slice());
    let mut analytic = g.grad_a.as_slice().to_vec();
    analytic.extend_from_slice(g.grad_b.as_slice());
    let objective = |p: &[f64]| {
        let pa = PointCloud::uniform(Matrix::from_vec(n, d, p[..n * d].to_vec()).unwrap()).unwrap();
        let pb = PointCloud::uniform(Matrix::from_vec(b.len(), d, p[n * d..].to_vec()).unwrap()).unwrap();
        sinkhorn_cost(&pa, &pb, cfg).unwrap().value
    };
    let report = grad_check(objective, &analytic, &params, tol).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn gradient_random_three_by_two_clouds() {
    let mut rng = Rng::new(17);
    for _ in 0..5 {
        let a = random_cloud(&mut rng, 3, 2);
        let b = random_cloud(&mut rng, 3, 2);
        check_grads(&a, &b, &tight(0.1, true), 1e-3);
        check_grads(&a, &b, &tight(0.1, false), 1e-3);
    }
}

#[test]
fn gradient_random_epsilons() {
    let mut rng = Rng::new(23);
    for eps in [0.05, 0.1, 0.5] {
        for _ in 0..3 {
            let n = 1 + rng.below(4);
            let m = 1 + rng.below(4);
            let a = random_cloud(&mut rng, n, 3);
            let b = random_cloud(&mut rng, m, 3);
            check_grads(&a, &b, &tight(eps, true), 1e-3);
        }
    }
}

#[test]
fn small_epsilon_approaches_exact_ot() {
    let mut rng = Rng::new(31);
    let cfg = SinkhornConfig { epsilon: 1e-3, max_iters: 20_000, convergence_tol: 1e-6, debiased: false };
    for _ in 0..20 {
        let n = 1 + rng.below(8);
        let m = 1 + rng.below(8);
        let d = 1 + rng.below(3);
        let a = random_cloud(&mut rng, n, d);
        let b = random_cloud(&mut rng, m, d);
        let approx = sinkhorn_cost(&a, &b, &cfg).unwrap().value;
        let exact = exact_ot_oracle(&a, &b).unwrap();
        assert!((approx - exact).abs() < 5e-2, "n={n} m={m}: {approx} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn divergence_symmetric_nonnegative(seed in 0u64..10_000, n in 1usize..6, m in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a = random_cloud(&mut rng, n, 2);
        let b = random_cloud(&mut rng, m, 2);
        let cfg = SinkhornConfig::default();
        let ab = sinkhorn_cost(&a, &b, &cfg).unwrap().value;
        let ba = sinkhorn_cost(&b, &a, &cfg).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ab >= -1e-6);
        let aa = sinkhorn_cost(&a, &a, &tight(0.1, true)).unwrap().value;
        prop_assert!(aa.abs() <= 1e-8, "S(a,a) = {}", aa);
    }
}
