use proptest::prelude::*;

use stepq::metrics::frechet_distance;
use stepq::numerics::{gaussian_stats, matmul, psd_sqrt, trace_sqrt_product, GaussianStats, Rng, Tensor};

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
    let d = mean.len();
    GaussianStats { mean, cov: Tensor::new(vec![d, d], cov).unwrap() }
}

/// `A·Aᵀ + jitter·I`: a random symmetric positive definite matrix.
fn random_spd(d: usize, rng: &mut Rng) -> Tensor {
    let a = Tensor::new(vec![d, d], rng.normals(d * d)).unwrap();
    let mut m = matmul(&a, &a.transpose().unwrap()).unwrap();
    for i in 0..d {
        m.set(i, i, m.get(i, i) + 1e-3);
    }
    m
}

fn random_stats(d: usize, rng: &mut Rng) -> GaussianStats {
    GaussianStats { mean: rng.normals(d), cov: random_spd(d, rng) }
}

/// For 2×2 PSD `A`, `B`: `Tr √(AB) = √(tr(AB) + 2√det(AB))`, since `AB` has
/// non-negative real eigenvalues `λ₁, λ₂` with `(√λ₁ + √λ₂)² = λ₁ + λ₂ + 2√(λ₁λ₂)`.
fn oracle_trace_sqrt_2d(a: &Tensor, b: &Tensor) -> f64 {
    let p = matmul(a, b).unwrap();
    let tr = p.get(0, 0) + p.get(1, 1);
    let det = p.get(0, 0) * p.get(1, 1) - p.get(0, 1) * p.get(1, 0);
    (tr + 2.0 * det.max(0.0).sqrt()).sqrt()
}

fn oracle_frechet_2d(r: &GaussianStats, g: &GaussianStats) -> f64 {
    let mean: f64 = r.mean.iter().zip(&g.mean).map(|(a, b)| (a - b).powi(2)).sum();
    mean + r.cov.trace().unwrap() + g.cov.trace().unwrap() - 2.0 * oracle_trace_sqrt_2d(&r.cov, &g.cov)
}

#[test]
fn worked_examples() {
    let a = stats(vec![0.3, -1.0], vec![2.0, 0.4, 0.4, 1.0]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let one = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap();
    assert!((one - 1.0).abs() < 1e-9, "{one}");
    let three = frechet_distance(
        &stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
        &stats(vec![1.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]),
    )
    .unwrap();
    assert!((three - 3.0).abs() < 1e-9, "{three}");
    assert!(frechet_distance(&stats(vec![0.0], vec![1.0]), &a).is_err());
}

#[test]
fn symmetry_and_scaling_on_random_pairs() {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let d = 1 + rng.below(4);
        let (r, g) = (random_stats(d, &mut rng), random_stats(d, &mut rng));
        let fwd = frechet_distance(&r, &g).unwrap();
        let bwd = frechet_distance(&g, &r).unwrap();
        assert!((fwd - bwd).abs() <= 1e-10 * fwd.max(1.0), "{fwd} vs {bwd}");
        assert!(fwd >= 0.0);
        let c = 0.5 + 2.5 * rng.uniform();
        let scale = |s: &GaussianStats| GaussianStats {
            mean: s.mean.iter().map(|m| c * m).collect(),
            cov: s.cov.scale(c * c),
        };
        let scaled = frechet_distance(&scale(&r), &scale(&g)).unwrap();
        assert!((scaled - c * c * fwd).abs() <= 1e-8 * scaled.max(1.0), "{scaled} vs {}", c * c * fwd);
    }
}

#[test]
fn scaling_sample_sets_scales_distance() {
    let mut rng = Rng::new(6);
    let a = Tensor::new(vec![500, 2], rng.normals(1000)).unwrap();
    let b = Tensor::new(vec![500, 2], rng.normals(1000).iter().map(|v| 1.5 * v + 0.7).collect()).unwrap();
    let base = frechet_distance(&gaussian_stats(&a).unwrap(), &gaussian_stats(&b).unwrap()).unwrap();
    let c = 3.0;
    let scaled = frechet_distance(&gaussian_stats(&a.scale(c)).unwrap(), &gaussian_stats(&b.scale(c)).unwrap()).unwrap();
    assert!((scaled - c * c * base).abs() < 1e-9 * scaled);
}

proptest! {
    #[test]
    fn matches_closed_form_in_two_dims(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (r, g) = (random_stats(2, &mut rng), random_stats(2, &mut rng));
        let ours = frechet_distance(&r, &g).unwrap();
        let oracle = oracle_frechet_2d(&r, &g).max(0.0);
        prop_assert!((ours - oracle).abs() <= 1e-8 * oracle.max(1.0), "{} vs {}", ours, oracle);
        let t = trace_sqrt_product(&r.cov, &g.cov).unwrap();
        prop_assert!((t - oracle_trace_sqrt_2d(&r.cov, &g.cov)).abs() <= 1e-9 * t.max(1.0));
    }

    #[test]
    fn psd_sqrt_squares_back(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let m = random_spd(d, &mut rng);
        let s = psd_sqrt(&m).unwrap();
        prop_assert_eq!(s.clone(), s.transpose().unwrap());
        let back = matmul(&s, &s).unwrap();
        let err = back.max_abs_diff(&m).unwrap();
        prop_assert!(err <= 1e-9 * m.frobenius().max(1.0), "err {}", err);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, l in 1usize..6, m in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a = Tensor::new(vec![n, k], rng.normals(n * k)).unwrap();
        let b = Tensor::new(vec![k, l], rng.normals(k * l)).unwrap();
        let c = Tensor::new(vec![l, m], rng.normals(l * m)).unwrap();
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12 * (1.0 + left.frobenius()));
    }

    #[test]
    fn sample_covariance_is_symmetric_psd(seed in any::<u64>(), rows in 2usize..50, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(vec![rows, d], rng.normals(rows * d)).unwrap();
        let s = gaussian_stats(&x).unwrap();
        prop_assert_eq!(s.cov.clone(), s.cov.transpose().unwrap());
        for i in 0..d {
            prop_assert!(s.cov.get(i, i) >= 0.0);
        }
        prop_assert!(frechet_distance(&s, &s).unwrap() <= 1e-8 * (1.0 + s.cov.trace().unwrap()));
    }
}
