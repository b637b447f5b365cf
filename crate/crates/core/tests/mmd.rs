mod common;

use cmmd::autograd::{grad_check, Tensor};
use cmmd::mmd::{gaussian_kernel, mmd_sq, mmd_sq_value, Bandwidth, Estimator, KernelConfig};
use common::{random_matrix, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal_matrix(rows: usize, cols: usize, shift: f64, r: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn kernel_matches_direct_formula() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let s2 = r.random_range(0.5..4.0);
        let scales = [0.5, 1.0, 3.0];
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let direct = scales.iter().map(|s| (-d / (2.0 * s2 * s)).exp()).sum::<f64>() / 3.0;
        let k = gaussian_kernel(&a, &b, s2, &scales).unwrap();
        assert!((k - direct).abs() < 1e-12);
        assert!(k > 0.0 && k <= 1.0);
    }
}

#[test]
fn kernel_at_two_sigma_squared_is_inverse_e() {
    let s2: f64 = 1.5;
    let a = [0.0, 0.0];
    let b = [(2.0 * s2).sqrt(), 0.0];
    let k = gaussian_kernel(&a, &b, s2, &[1.0]).unwrap();
    assert!((k - (-1.0f64).exp()).abs() < 1e-15);
}

#[test]
fn u_statistic_is_centered_on_same_distribution_data() {
    let cfg = KernelConfig::default();
    let mut r = rng(2);
    let vals: Vec<f64> = (0..200)
        .map(|_| {
            let a = normal_matrix(256, 4, 0.0, &mut r);
            let b = normal_matrix(256, 4, 0.0, &mut r);
            mmd_sq_value(&a, &b, &cfg, Estimator::UStatistic).unwrap()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean} se {}", sd / n.sqrt());
}

#[test]
fn estimate_grows_with_shift() {
    let cfg = KernelConfig::default();
    let mut r = rng(3);
    let mut prev = f64::NEG_INFINITY;
    for delta in [0.5, 1.0, 2.0] {
        let mean = (0..50)
            .map(|_| {
                let a = normal_matrix(256, 4, 0.0, &mut r);
                let b = normal_matrix(256, 4, delta, &mut r);
                mmd_sq_value(&a, &b, &cfg, Estimator::UStatistic).unwrap()
            })
            .sum::<f64>()
            / 50.0;
        assert!(mean > prev, "{delta}: {mean} <= {prev}");
        prev = mean;
    }
}

#[test]
fn small_sets_rejected_for_u_statistic() {
    let a = Tensor::zeros(&[1, 2]);
    let b = Tensor::zeros(&[3, 2]);
    assert!(mmd_sq_value(&a, &b, &KernelConfig::default(), Estimator::UStatistic).is_err());
    assert!(mmd_sq_value(&a, &b, &KernelConfig::default(), Estimator::VStatistic).is_ok());
}

#[test]
fn gradient_wrt_samples_passes_grad_check() {
    let mut r = rng(4);
    let b = random_matrix(5, 3, 1.0, &mut r);
    let a = random_matrix(4, 3, 1.0, &mut r);
    for est in [Estimator::UStatistic, Estimator::VStatistic] {
        let cfg = KernelConfig { bandwidth: Bandwidth::LatentDim, scales: vec![0.5, 2.0] };
        let e = grad_check(
            |t, x| {
                let bv = t.constant(b.clone());
                mmd_sq(t, x, bv, &cfg, est)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}

fn configs() -> Vec<KernelConfig> {
    vec![
        KernelConfig::default(),
        KernelConfig { bandwidth: Bandwidth::Fixed(0.7), scales: vec![0.25, 1.0, 4.0] },
        KernelConfig { bandwidth: Bandwidth::MedianHeuristic, scales: vec![1.0] },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_in_arguments(seed in any::<u64>(), n in 2usize..9, m in 2usize..9, d in 1usize..5) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, 2.0, &mut r);
        let b = random_matrix(m, d, 2.0, &mut r);
        for cfg in configs() {
            for est in [Estimator::UStatistic, Estimator::VStatistic] {
                let ab = mmd_sq_value(&a, &b, &cfg, est).unwrap();
                let ba = mmd_sq_value(&b, &a, &cfg, est).unwrap();
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
            }
        }
    }

    #[test]
    fn v_statistic_is_non_negative_and_zero_on_identical_sets(seed in any::<u64>(), n in 1usize..9, d in 1usize..5) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, 2.0, &mut r);
        let b = random_matrix(n + 1, d, 2.0, &mut r);
        for cfg in configs() {
            if n >= 2 || cfg.bandwidth != Bandwidth::MedianHeuristic {
                prop_assert_eq!(mmd_sq_value(&a, &a, &cfg, Estimator::VStatistic).unwrap(), 0.0);
            }
            prop_assert!(mmd_sq_value(&a, &b, &cfg, Estimator::VStatistic).unwrap() >= -1e-15);
        }
    }
}
