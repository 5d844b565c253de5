use iterflow_core::eval::{psnr, rmse, ssim, SsimParams};
use iterflow_core::flow::{train_flow, CouplingFlow, FlowConfig, Normalization, TrainConfig};
use iterflow_core::numerics::{norm, Rng, Tensor};
use iterflow_core::pipeline::{
    infer, infer_all_stages, intermediate_trajectory, train_pipeline, PipelineSettings, PosteriorEnsemble,
};
use iterflow_core::problems::{InverseProblem, LinearConfig, LinearGaussianProblem, ProblemConfig, ProblemKind};
use iterflow_core::summary::{advance_stage, build_stage0, load_dataset, save_dataset, Split};
use proptest::prelude::*;

fn small_linear() -> LinearGaussianProblem {
    let cfg = LinearConfig {
        x_dim: 4,
        y_dim: 8,
        ..LinearConfig::default()
    };
    LinearGaussianProblem::replication(&cfg, 5).unwrap()
}

fn mean_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| norm(r)).sum::<f64>() / rows.len() as f64
}

#[test]
fn stage_zero_dataset_invariants() {
    let p = small_linear();
    let ds = build_stage0(&p, 50, &Rng::new(1)).unwrap();
    assert_eq!(ds.len(), 50);
    assert_eq!(ds.records().iter().filter(|r| r.split == Split::Validation).count(), 5);
    for r in ds.records() {
        assert!(r.fiducial.iter().all(|&v| v == 0.0));
        assert_eq!(r.residual, r.x_true);
    }
    ds.verify(&p).unwrap();
}

#[test]
fn advancing_contracts_residuals_and_keeps_data() {
    let p = LinearGaussianProblem::replication(&LinearConfig::default(), 2024).unwrap();
    let ds = build_stage0(&p, 1000, &Rng::new(2)).unwrap();
    let (tx, tc) = ds.pairs(Split::Train).unwrap();
    let val = ds.pairs(Split::Validation).unwrap();
    let mut flow = CouplingFlow::new(16, 16, &FlowConfig::default(), &mut Rng::new(3)).unwrap();
    flow.set_normalization(Some(Normalization::fit(&tx, &tc))).unwrap();
    train_flow(&mut flow, (&tx, &tc), Some((&val.0, &val.1)), &TrainConfig::default(), &mut Rng::new(4), |_| {})
        .unwrap();
    let adv = advance_stage(&ds, &flow, &p, 64, &Rng::new(5)).unwrap();
    let next = adv.dataset;
    assert_eq!(next.stage(), 1);
    assert!(adv.flagged.is_empty());
    next.verify(&p).unwrap();
    for (a, b) in ds.records().iter().zip(next.records()) {
        assert_eq!(a.x_true, b.x_true);
        assert_eq!(a.y, b.y);
        assert_eq!(a.split, b.split);
        for ((x, f), d) in b.x_true.iter().zip(&b.fiducial).zip(&b.residual) {
            assert!((d + f - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f.abs()));
        }
    }
    let before: Vec<Vec<f64>> = ds.records().iter().map(|r| r.residual.clone()).collect();
    let after: Vec<Vec<f64>> = next.records().iter().map(|r| r.residual.clone()).collect();
    assert!(mean_norm(&after) < mean_norm(&before));

    let bytes = save_dataset(&next);
    assert_eq!(save_dataset(&load_dataset(&bytes).unwrap()), bytes);
}

#[test]
fn trained_linear_pipeline_shrinks_summaries_and_agrees_with_infer() {
    let pc = ProblemConfig {
        kind: ProblemKind::Linear,
        ..ProblemConfig::default()
    };
    let settings = PipelineSettings {
        n_train: 1000,
        stages: 2,
        ..PipelineSettings::default()
    };
    let rng = Rng::new(6);
    let pipe = train_pipeline(&pc, &settings, &FlowConfig::default(), &TrainConfig::default(), &rng, &mut ()).unwrap();
    assert_eq!(pipe.flows.len(), 3);
    let p = &pipe.problem;
    let mut totals = vec![0.0; 3];
    for t in 0..20u64 {
        let x = p.sample_prior(&mut Rng::new(100 + t));
        let y = p.simulate(&x, &mut Rng::new(200 + t)).unwrap();
        let traj = intermediate_trajectory(&pipe, &y, &Rng::new(t)).unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(traj[0].fiducial, p.default_fiducial());
        for (tot, pt) in totals.iter_mut().zip(&traj) {
            *tot += norm(&pt.summary);
        }
        if t < 3 {
            let ens = infer(&pipe, &y, 300, &Rng::new(t)).unwrap();
            assert_eq!(ens.fiducial, traj[2].fiducial);
            let all = infer_all_stages(&pipe, &y, 300, &Rng::new(t)).unwrap();
            assert_eq!(all.last().unwrap().ensemble, ens);
        }
    }
    assert!(totals[1] < totals[0] && totals[2] < totals[1], "summary norms {totals:?}");
}

#[test]
fn ensemble_covariance_two_ways() {
    let mut rng = Rng::new(7);
    let draws = Tensor::from_fn(2000, 5, |_, j| (j as f64 + 1.0) * rng.standard_normal() + 3.0);
    let ens = PosteriorEnsemble::from_draws(vec![1.0, 2.0, 3.0, 4.0, 5.0], draws);
    let diff = ens.covariance.sub(&ens.covariance_accumulated()).unwrap();
    assert!(diff.max_abs() <= 1e-10);
    for (j, s) in ens.std.iter().enumerate() {
        assert!((s * s - ens.covariance.at(j, j)).abs() < 1e-12);
    }
}

/// SSIM by direct 2-D windowed sums, no separable filtering.
fn ssim_oracle(a: &[f64], b: &[f64], rows: usize, cols: usize, p: &SsimParams) -> f64 {
    let k = p.window;
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            w[i * k + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * p.sigma * p.sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((p.k1 * p.range).powi(2), (p.k2 * p.range).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - k {
        for c0 in 0..=cols - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let idx = (r0 + i) * cols + c0 + j;
                    let wt = w[i * k + j];
                    mx += wt * a[idx];
                    my += wt * b[idx];
                    xx += wt * a[idx] * a[idx];
                    yy += wt * b[idx] * b[idx];
                    xy += wt * a[idx] * b[idx];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_direct_formula() {
    let mut rng = Rng::new(8);
    let (rows, cols) = (16, 19);
    let a: Vec<f64> = (0..rows * cols).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 0.1 * rng.standard_normal()).collect();
    let p = SsimParams::default();
    let fast = ssim(&a, &b, (rows, cols), &p).unwrap();
    assert!((fast - ssim_oracle(&a, &b, rows, cols, &p)).abs() <= 1e-10);
    assert!((ssim(&a, &a, (rows, cols), &p).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_matches_mse_definition() {
    let a = [0.1, 0.5, 0.9, 0.3];
    let b = [0.2, 0.4, 1.0, 0.3];
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 4.0;
    assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-10);
    assert!((psnr(&a, &b, 2.0).unwrap() - 10.0 * (4.0 / mse).log10()).abs() < 1e-10);
    assert!((rmse(&a, &b).unwrap() - mse.sqrt()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_ssim_symmetric_and_bounded(seed in any::<u64>(), rows in 11usize..18, cols in 11usize..18) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..rows * cols).map(|_| rng.uniform()).collect();
        let p = SsimParams::default();
        let ab = ssim(&a, &b, (rows, cols), &p).unwrap();
        let ba = ssim(&b, &a, (rows, cols), &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn prop_psnr_symmetric(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap().to_bits(), psnr(&b, &a, 1.0).unwrap().to_bits());
    }

    #[test]
    fn prop_dataset_round_trip(seed in any::<u64>(), n in 1usize..30) {
        let p = small_linear();
        let ds = build_stage0(&p, n, &Rng::new(seed)).unwrap();
        let bytes = save_dataset(&ds);
        let back = load_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        let residual_ok = back.records().iter().all(|r| r.residual.iter().zip(&r.x_true).zip(&r.fiducial).all(|((d, x), f)| *d == x - f));
        prop_assert!(residual_ok);
    }
}
