use iterflow_core::numerics::{dot, matmul, norm, Rng, SpdMatrix, Tensor};
use iterflow_core::problems::{
    InverseProblem, LinearConfig, LinearGaussianProblem, NonlinearToyProblem, Problem, ProblemConfig, ProblemKind,
    ToyConfig,
};
use proptest::prelude::*;

fn linear() -> LinearGaussianProblem {
    LinearGaussianProblem::replication(&LinearConfig::default(), 2024).unwrap()
}

fn toy() -> NonlinearToyProblem {
    NonlinearToyProblem::new(ToyConfig::default()).unwrap()
}

fn fd_gradient(p: &dyn InverseProblem, x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            (p.log_likelihood(&xp, y).unwrap() - p.log_likelihood(&xm, y).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b)
}

#[test]
fn linear_score_matches_finite_differences() {
    let p = linear();
    let mut rng = Rng::new(1);
    for _ in 0..3 {
        let x_true = p.sample_prior(&mut rng);
        let y = p.simulate(&x_true, &mut rng).unwrap();
        let x0 = p.sample_prior(&mut rng);
        let s = p.score(&x0, &y).unwrap();
        assert!(relative_error(&s, &fd_gradient(&p, &x0, &y, 1e-4)) <= 1e-5);
    }
}

#[test]
fn toy_score_matches_finite_differences() {
    let p = toy();
    let mut rng = Rng::new(2);
    for _ in 0..3 {
        let x_true = p.sample_prior(&mut rng);
        let y = p.simulate(&x_true, &mut rng).unwrap();
        let x0 = p.sample_prior(&mut rng);
        let s = p.score(&x0, &y).unwrap();
        assert!(relative_error(&s, &fd_gradient(&p, &x0, &y, 1e-5)) <= 1e-5);
    }
}

#[test]
fn toy_jacobian_adjoint_identity() {
    let p = toy();
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let x = p.sample_prior(&mut rng);
        let u: Vec<f64> = (0..p.x_dim()).map(|_| rng.standard_normal()).collect();
        let v: Vec<f64> = (0..p.y_dim()).map(|_| rng.standard_normal()).collect();
        let lhs = dot(&p.jacobian(&x, &u).unwrap(), &v);
        let rhs = dot(&u, &p.jacobian_t(&x, &v).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }
}

#[test]
fn toy_jacobian_matches_forward_differences() {
    let p = toy();
    let mut rng = Rng::new(4);
    let x = p.sample_prior(&mut rng);
    let u: Vec<f64> = (0..p.x_dim()).map(|_| rng.standard_normal()).collect();
    let h = 1e-6;
    let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
    let (fp, fm) = (p.forward(&xp).unwrap(), p.forward(&xm).unwrap());
    let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    assert!(relative_error(&p.jacobian(&x, &u).unwrap(), &fd) < 1e-7);
}

#[test]
fn toy_observed_rows_only_see_the_top() {
    let p = toy();
    let cfg = p.config();
    let g = cfg.grid;
    let mut x = p.default_fiducial();
    let base = p.forward(&x).unwrap();
    // a pixel more than one row below the mask cannot reach the data
    x[(cfg.observed_rows + 1) * g + g / 2] += 0.3;
    assert_eq!(p.forward(&x).unwrap(), base);
    assert_eq!(p.observed_region().unwrap().iter().filter(|&&m| m).count(), cfg.observed_rows * g);
}

#[test]
fn posterior_precision_identity() {
    let p = linear();
    let y = p.simulate(&p.sample_prior(&mut Rng::new(5)), &mut Rng::new(6)).unwrap();
    let post = p.analytic_posterior(&y).unwrap();
    let prod = matmul(&post.covariance, &p.posterior_precision()).unwrap();
    assert!(prod.sub(&Tensor::identity(p.x_dim())).unwrap().max_abs() <= 1e-8);
}

/// `x | y` from the joint Gaussian by Schur complement.
fn joint_conditioning(p: &LinearGaussianProblem, y: &[f64]) -> (Vec<f64>, Tensor) {
    let a = p.operator();
    let sx = p.prior_cov().dense();
    let sxy = matmul(&sx, &a.transpose()).unwrap();
    let syy = matmul(a, &sxy).unwrap().add(&p.noise().dense()).unwrap();
    let syy = SpdMatrix::new(&syy).unwrap();
    let my: Vec<f64> = (0..a.rows()).map(|i| dot(a.row(i), p.prior_mean())).collect();
    let r: Vec<f64> = y.iter().zip(&my).map(|(a, b)| a - b).collect();
    let w = syy.solve_vec(&r).unwrap();
    let mean: Vec<f64> = (0..p.x_dim()).map(|i| p.prior_mean()[i] + dot(sxy.row(i), &w)).collect();
    let k = syy.solve(&sxy.transpose()).unwrap();
    let cov = sx.sub(&matmul(&sxy, &k).unwrap()).unwrap();
    (mean, cov)
}

#[test]
fn analytic_posterior_equals_joint_conditioning() {
    let p = linear();
    let y = p.simulate(&p.sample_prior(&mut Rng::new(7)), &mut Rng::new(8)).unwrap();
    let post = p.analytic_posterior(&y).unwrap();
    let (m, c) = joint_conditioning(&p, &y);
    assert!(relative_error(&post.mean, &m) < 1e-8);
    assert!(post.covariance.sub(&c).unwrap().max_abs() < 1e-8 * c.max_abs());
}

#[test]
fn analytic_posterior_matches_monte_carlo_joint_draws() {
    let p = linear();
    let (d, m) = (p.x_dim(), p.y_dim());
    // the posterior mean is affine in y: K·y + b
    let zero = vec![0.0; m];
    let base = p.analytic_posterior(&zero).unwrap();
    let cov = base.covariance.clone();
    let k = Tensor::from_fn(d, m, |_, _| 0.0);
    let mut k = k;
    for j in 0..m {
        let mut e = zero.clone();
        e[j] = 1.0;
        let mj = p.analytic_posterior(&e).unwrap().mean;
        for i in 0..d {
            k.set(i, j, mj[i] - base.mean[i]);
        }
    }
    let y_probe: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
    let direct = p.analytic_posterior(&y_probe).unwrap().mean;
    let affine: Vec<f64> = (0..d).map(|i| dot(k.row(i), &y_probe) + base.mean[i]).collect();
    assert!(relative_error(&affine, &direct) < 1e-9);

    // residuals x − E[x | y] over joint draws are N(0, C) independent of y
    let n = 1_000_000usize;
    let mut rng = Rng::new(9);
    let mut sum = vec![0.0; d];
    let mut outer = vec![0.0; d * d];
    for _ in 0..n {
        let x = p.sample_prior(&mut rng);
        let y = p.simulate(&x, &mut rng).unwrap();
        let r: Vec<f64> = (0..d).map(|i| x[i] - dot(k.row(i), &y) - base.mean[i]).collect();
        for i in 0..d {
            sum[i] += r[i];
            for j in 0..d {
                outer[i * d + j] += r[i] * r[j];
            }
        }
    }
    let nf = n as f64;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mean = sum[i] / nf;
        let se = (cov.at(i, i) / nf).sqrt();
        worst = worst.max(mean.abs() / se);
        for j in 0..d {
            let c = (outer[i * d + j] - nf * (sum[i] / nf) * (sum[j] / nf)) / (nf - 1.0);
            let se = ((cov.at(i, i) * cov.at(j, j) + cov.at(i, j).powi(2)) / nf).sqrt();
            worst = worst.max((c - cov.at(i, j)).abs() / se);
        }
    }
    assert!(worst < 4.0, "largest deviation {worst}σ");
}

#[test]
fn prior_draws_respect_configured_structure() {
    let p = toy();
    let cfg = p.config();
    let mut rng = Rng::new(10);
    for _ in 0..20 {
        let x = p.sample_prior(&mut rng);
        for (i, v) in x.iter().enumerate() {
            if p.is_rim(i) {
                assert!(*v >= cfg.rim_band[0] && *v <= cfg.rim_band[1]);
            } else {
                assert!(*v < cfg.rim_band[0]);
            }
        }
    }
}

#[test]
fn problem_enum_delegates() {
    let cfg = ProblemConfig {
        kind: ProblemKind::Toy,
        ..ProblemConfig::default()
    };
    let p = Problem::from_config(&cfg).unwrap();
    let t = toy();
    assert_eq!(p.x_dim(), t.x_dim());
    assert_eq!(p.default_fiducial(), t.default_fiducial());
    assert_eq!(p.observed_region(), t.observed_region());
    assert!(!p.has_analytic_posterior());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_adjoint_holds_at_random_points(seed in any::<u64>()) {
        let p = toy();
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..p.x_dim()).map(|_| rng.uniform_range(-1.0, 1.5)).collect();
        let u: Vec<f64> = (0..p.x_dim()).map(|_| rng.standard_normal()).collect();
        let v: Vec<f64> = (0..p.y_dim()).map(|_| rng.standard_normal()).collect();
        let lhs = dot(&p.jacobian(&x, &u).unwrap(), &v);
        let rhs = dot(&u, &p.jacobian_t(&x, &v).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    #[test]
    fn prop_linear_score_is_affine_in_y(seed in any::<u64>(), t in -3.0f64..3.0) {
        let p = linear();
        let mut rng = Rng::new(seed);
        let x0 = p.sample_prior(&mut rng);
        let y1: Vec<f64> = (0..p.y_dim()).map(|_| rng.standard_normal()).collect();
        let y2: Vec<f64> = (0..p.y_dim()).map(|_| rng.standard_normal()).collect();
        let mix: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let s1 = p.score(&x0, &y1).unwrap();
        let s2 = p.score(&x0, &y2).unwrap();
        let sm = p.score(&x0, &mix).unwrap();
        let want: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        prop_assert!(relative_error(&sm, &want) < 1e-10);
    }
}
