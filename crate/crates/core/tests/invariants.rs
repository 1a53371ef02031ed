use std::sync::Arc;

use cmi_dps_core::linalg::{min_eigenvalue, symmetrize};
use cmi_dps_core::rng::{standard_normal, stream};
use cmi_dps_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn random_spd(d: usize, seed: u64, floor: f64) -> DMatrix<f64> {
    let mut rng = stream(seed, 0);
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let mut m = &b * b.transpose() / d as f64 + DMatrix::identity(d, d) * floor;
    symmetrize(&mut m);
    m
}

fn random_dense_operator(m: usize, d: usize, seed: u64) -> DenseOperator {
    let mut rng = stream(seed, 1);
    DenseOperator::new(DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
}

fn as_cov(m: &DMatrix<f64>) -> PosteriorCov {
    PosteriorCov { sigma: m.clone(), factor: SpdFactor::new(m, "test").unwrap(), jitter: 0.0 }
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    SpdFactor::new(m, "test").unwrap().log_det()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmi_is_nonnegative_and_information_shrinks_covariance(
        d in 1usize..10, m in 1usize..10, sigma in 0.01f64..2.0, seed in 0u64..10_000,
    ) {
        let sp = random_spd(d, seed, 0.05);
        let a = random_dense_operator(m, d, seed);
        let gram = InformationGram::new(&a, &NoiseModel::scalar(sigma).unwrap()).unwrap();
        let py = measurement_posterior_cov(&as_cov(&sp), &gram).unwrap();
        prop_assert!(cmi_value(&sp, &py.sigma).unwrap() >= 0.0);
        let mut gap = &sp - &py.sigma;
        symmetrize(&mut gap);
        prop_assert!(min_eigenvalue(&gap) >= -1e-8 * sp.amax().max(1.0));
    }

    #[test]
    fn determinant_lemma_duality(d in 1usize..17, m in 1usize..17, sigma in 0.05f64..1.0, seed in 0u64..10_000) {
        let sp = random_spd(d, seed, 0.1);
        let a = random_dense_operator(m, d, seed);
        let noise = NoiseModel::scalar(sigma).unwrap();
        let py = measurement_posterior_cov(&as_cov(&sp), &InformationGram::new(&a, &noise).unwrap()).unwrap();
        let ad = a.to_dense().unwrap();
        let noise_cov = noise.covariance(m).unwrap();
        let mut outer = &ad * &sp * ad.transpose() + &noise_cov;
        symmetrize(&mut outer);
        let dual = 0.5 * (log_det(&outer) - log_det(&noise_cov));
        prop_assert!((cmi_value(&sp, &py.sigma).unwrap() - dual).abs() < 1e-8);
    }

    #[test]
    fn cmi_strictly_decreases_with_noise(d in 1usize..8, seed in 0u64..10_000) {
        let sp = random_spd(d, seed, 0.05);
        let mask = make_random_mask(d, 0.5, &mut stream(seed, 2)).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.03, 0.1, 0.3, 1.0, 3.0] {
            let gram = InformationGram::new(&mask, &NoiseModel::scalar(sigma).unwrap()).unwrap();
            let value = cmi_value(&sp, &measurement_posterior_cov(&as_cov(&sp), &gram).unwrap().sigma).unwrap();
            prop_assert!(value < last);
            last = value;
        }
    }

    #[test]
    fn third_derivative_is_permutation_symmetric(d in 1usize..6, k in 1usize..4, t in 1usize..100, seed in 0u64..10_000) {
        let schedule = Arc::new(NoiseSchedule::ddpm_equivalent(100).unwrap());
        let prior = GaussianMixturePrior::random(d, k, 1.0, &mut stream(seed, 0)).unwrap();
        let model = DiffusedGmm::new(prior, schedule);
        let x = standard_normal(&mut stream(seed, 1), d);
        let third = model.third_tensor(&x, t).unwrap();
        prop_assert!(third.symmetry_defect() <= 1e-8 * third.max_abs().max(1.0));
    }

    #[test]
    fn selection_and_downsample_adjoints(w in 1usize..6, h in 1usize..6, f in 1usize..3, keep in 0.1f64..1.0, seed in 0u64..10_000) {
        let (w, h) = (w * f, h * f);
        let ops: Vec<Box<dyn LinearOperator>> = vec![
            Box::new(make_random_mask(w * h, keep, &mut stream(seed, 0)).unwrap()),
            Box::new(make_downsample(w, h, f).unwrap()),
        ];
        let mut rng = stream(seed, 5);
        for op in ops {
            let x = standard_normal(&mut rng, op.in_dim());
            let y = standard_normal(&mut rng, op.out_dim());
            let lhs = op.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&op.adjoint(&y).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conjugate_covariance_does_not_depend_on_y(d in 1usize..6, seed in 0u64..10_000, scale in -3.0f64..3.0) {
        let prior = GaussianDist::new(DVector::zeros(d), random_spd(d, seed, 0.1)).unwrap();
        let mask = make_random_mask(d, 0.6, &mut stream(seed, 9)).unwrap();
        let noise = NoiseModel::scalar(0.2).unwrap();
        let y = standard_normal(&mut stream(seed, 4), mask.out_dim());
        let p1 = conjugate_gaussian_posterior(&prior, &mask, &noise, &y).unwrap();
        let p2 = conjugate_gaussian_posterior(&prior, &mask, &noise, &(&y * scale)).unwrap();
        prop_assert_eq!(p1.cov, p2.cov);
    }
}
