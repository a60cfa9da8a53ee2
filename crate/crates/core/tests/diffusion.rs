use std::sync::OnceLock;

use proptest::prelude::*;

use stepq::diffusion::{calibration_set, fit, sample, sample_with, GaussianMixture, NoiseSchedule, SamplerConfig, TrainConfig};
use stepq::metrics::{evaluate_fitness, frechet_distance};
use stepq::nn::{DenoiserNet, NetConfig};
use stepq::numerics::{gaussian_stats, GaussianStats, Rng, Tensor};
use stepq::quant::{calibrate_all, uniform_policy, CalibConfig, QuantContext, QuantizerBank};

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

struct Trained {
    net: DenoiserNet,
    untrained: DenoiserNet,
    data: Tensor,
    reference: GaussianStats,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = GaussianMixture::default().sample(4096, &mut Rng::new(1)).unwrap();
        let untrained = DenoiserNet::new(&NetConfig::default(), &mut Rng::new(2)).unwrap();
        let mut net = untrained.clone();
        fit(&mut net, &sched(), &data, &TrainConfig { steps: 3000, ..Default::default() }, &mut Rng::new(3)).unwrap();
        let reference = gaussian_stats(&data).unwrap();
        Trained { net, untrained, data, reference }
    })
}

/// ε that the forward process used to reach `x` from the known `x0` at `t`.
fn exact_eps(sched: &NoiseSchedule, x0: &Tensor, x: &Tensor, t: usize) -> Tensor {
    let ab = sched.alpha_bar()[t];
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(x0.data()).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect(),
    )
    .unwrap()
}

#[test]
fn full_subsequence_with_exact_noise_composes_and_recovers_data() {
    let s = sched();
    let mut rng = Rng::new(4);
    let x0 = Tensor::new(vec![16, 2], rng.normals(32)).unwrap();
    let eps = Tensor::new(vec![16, 2], rng.normals(32)).unwrap();
    let top = 999;
    let x_top = s.noise_with(&x0, &[top], &eps).unwrap();
    let oracle = |x: &Tensor, t: usize| Ok(exact_eps(&s, &x0, x, t));
    let all = SamplerConfig::new((0..1000).collect());
    let got = sample_with(&s, &all, x_top.clone(), oracle).unwrap();

    let mut nested = x_top;
    for t in (0..1000).rev() {
        let e = exact_eps(&s, &x0, &nested, t);
        nested = s.ddim_step(&nested, &e, t, t.checked_sub(1)).unwrap();
    }
    assert_eq!(got, nested);
    assert!(got.max_abs_diff(&x0).unwrap() < 1e-6, "{}", got.max_abs_diff(&x0).unwrap());
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let t = trained();
    let cfg = SamplerConfig::uniform(1000, 10).unwrap();
    let a = sample(&t.net, &sched(), &cfg, None, 64, &mut Rng::new(5)).unwrap();
    let b = sample(&t.net, &sched(), &cfg, None, 64, &mut Rng::new(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample(&t.net, &sched(), &cfg, None, 64, &mut Rng::new(6)).unwrap());
    assert_eq!(sample(&t.net, &sched(), &cfg, None, 0, &mut Rng::new(5)).unwrap().rows(), 0);
    assert!(sample(&t.net, &sched(), &SamplerConfig::new(vec![]), None, 4, &mut Rng::new(5)).is_err());
}

#[test]
fn training_improves_sample_quality_tenfold() {
    let t = trained();
    let steps: Vec<usize> = SamplerConfig::uniform(1000, 100).unwrap().subsequence;
    let trained_fd = evaluate_fitness(&t.net, &sched(), None, &steps, &t.reference, 2048, 7).unwrap().frechet;
    let untrained_fd = evaluate_fitness(&t.untrained, &sched(), None, &steps, &t.reference, 2048, 7).unwrap().frechet;
    assert!(trained_fd * 10.0 <= untrained_fd, "trained {trained_fd} vs untrained {untrained_fd}");
    // Held-out real data sets the reference floor for this sample size.
    let fresh = GaussianMixture::default().sample(2048, &mut Rng::new(8)).unwrap();
    let floor = frechet_distance(&t.reference, &gaussian_stats(&fresh).unwrap()).unwrap();
    assert!(floor < trained_fd);
    let full: Vec<usize> = (0..1000).collect();
    let full_fd = evaluate_fitness(&t.net, &sched(), None, &full, &t.reference, 2048, 7).unwrap().frechet;
    assert!(full_fd <= trained_fd * 2.0 + 0.05, "full {full_fd} vs 100 steps {trained_fd}");
}

#[test]
fn fewer_bits_degrade_fitness() {
    let t = trained();
    let s = sched();
    let calib = calibration_set(&s, &t.data, 256, &mut Rng::new(9)).unwrap();
    let mut bank = QuantizerBank::init_minmax(&t.net, &[5, 8], &calib.x, &calib.ts).unwrap();
    calibrate_all(&t.net, &mut bank, &calib, &CalibConfig { iterations: 300, ..Default::default() }).unwrap();
    let steps = SamplerConfig::uniform(1000, 10).unwrap().subsequence;
    let fit_at = |b: u8, seed: u64| {
        let policy = uniform_policy(t.net.slots().len(), b);
        evaluate_fitness(&t.net, &s, Some(&QuantContext::new(&bank, &policy)), &steps, &t.reference, 1024, seed).unwrap().frechet
    };
    let (a, b) = (fit_at(8, 10), fit_at(8, 10));
    assert_eq!(a, b);
    let median = |b: u8| {
        let mut v: Vec<f64> = (0..5).map(|seed| fit_at(b, 100 + seed)).collect();
        v.sort_by(f64::total_cmp);
        v[2]
    };
    let (five, eight) = (median(5), median(8));
    assert!(five >= eight, "5-bit {five} vs 8-bit {eight}");
}

proptest! {
    #[test]
    fn alpha_bar_is_the_running_product(betas in prop::collection::vec(1e-5f64..0.5, 1..400)) {
        let s = NoiseSchedule::from_betas(betas.clone()).unwrap();
        let mut prod = 1.0;
        for (t, b) in betas.iter().enumerate() {
            prod *= 1.0 - b;
            prop_assert!((s.alpha_bar()[t] - prod).abs() <= 1e-15);
            prop_assert_eq!(s.alpha()[t], 1.0 - b);
            if t > 0 {
                prop_assert!(s.alpha_bar()[t] < s.alpha_bar()[t - 1]);
            }
        }
    }

    #[test]
    fn ddim_with_exact_noise_lands_on_the_marginal(t_cur in 1usize..1000, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let s = sched();
        let t_prev = (frac * t_cur as f64) as usize;
        let mut rng = Rng::new(seed);
        let x0 = Tensor::new(vec![4, 2], rng.normals(8)).unwrap();
        let eps = Tensor::new(vec![4, 2], rng.normals(8)).unwrap();
        let x = s.noise_with(&x0, &[t_cur], &eps).unwrap();
        let stepped = s.ddim_step(&x, &eps, t_cur, Some(t_prev)).unwrap();
        let want = s.noise_with(&x0, &[t_prev], &eps).unwrap();
        prop_assert!(stepped.max_abs_diff(&want).unwrap() <= 1e-9);
    }
}
