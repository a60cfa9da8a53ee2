use stepq::diffusion::{training_batch, GaussianMixture, NoiseSchedule};
use stepq::nn::{noise_mse, train_step, Adam, Block, DenoiserNet, Linear, NetConfig, Tape, TrainingBatch};
use stepq::numerics::{Rng, Tensor};
use stepq::quant::{uniform_policy, Grid, QuantContext, QuantParams, QuantizerBank};

fn net(seed: u64) -> DenoiserNet {
    DenoiserNet::new(&NetConfig::default(), &mut Rng::new(seed)).unwrap()
}

fn batch(rows: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = Tensor::new(vec![rows, 2], rng.normals(rows * 2).iter().map(|v| 3.0 * v).collect()).unwrap();
    let ts = (0..rows).map(|_| rng.below(1000)).collect();
    (x, ts)
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let n = net(1);
    let (x, ts) = batch(32, 2);
    let a = n.forward(&x, &ts, None).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_eq!(a, n.forward(&x, &ts, None).unwrap());
    assert_eq!(net(1).forward(&x, &ts, None).unwrap(), a);
    assert!(n.forward(&x, &ts[..3], None).is_err());
}

#[test]
fn fine_grid_context_is_transparent() {
    // Scale 2⁻⁴⁶ with zero point 2⁵¹ keeps every grid sum an exact integer
    // below 2⁵³, so the only error is rounding v/s, at most 2⁻⁴⁷ per value.
    let n = net(3);
    let (x, ts) = batch(64, 4);
    let mut bank = QuantizerBank::init_minmax(&n, &[16], &x, &ts).unwrap();
    for slot in bank.slots_mut() {
        for q in &mut slot.quantizers {
            let zero_point = match q.grid {
                Grid::Unsigned => 2f64.powi(51),
                Grid::Signed => 0.0,
            };
            q.entries.insert(16, QuantParams { scale: 2f64.powi(-46), zero_point, bits: 53 });
        }
    }
    let policy = uniform_policy(n.slots().len(), 16);
    let exact = n.forward(&x, &ts, None).unwrap();
    let hooked = n.forward(&x, &ts, Some(&QuantContext::new(&bank, &policy))).unwrap();
    let diff = hooked.max_abs_diff(&exact).unwrap();
    assert!(diff <= 1e-12, "max deviation {diff}");
}

#[test]
fn on_grid_dense_layer_quantizes_exactly() {
    let mut rng = Rng::new(5);
    let mut weight: Vec<f64> = (0..12).map(|_| (rng.below(255) as f64 - 127.0) / 127.0).collect();
    weight[0] = -1.0;
    let linear = Linear { in_dim: 4, out_dim: 3, weight, bias: vec![0.5, 0.0, -0.25] };
    let n = DenoiserNet::from_blocks(vec![Block::Dense { linear, silu: false }]).unwrap();
    let mut xs: Vec<f64> = (0..40).map(|_| rng.below(256) as f64 / 64.0).collect();
    xs[0] = 0.0;
    xs[1] = 255.0 / 64.0;
    let x = Tensor::new(vec![10, 4], xs).unwrap();
    let bank = QuantizerBank::init_minmax(&n, &[8], &x, &[0]).unwrap();
    let policy = uniform_policy(1, 8);
    let exact = n.forward(&x, &[0], None).unwrap();
    let hooked = n.forward(&x, &[0], Some(&QuantContext::new(&bank, &policy))).unwrap();
    assert!(hooked.max_abs_diff(&exact).unwrap() <= 1e-12);
}

#[test]
fn zero_adjoint_gives_zero_gradients() {
    let n = net(6);
    let (x, ts) = batch(8, 7);
    let mut tape = Tape::new();
    let out = n.forward_recorded(&x, &ts, None, &mut tape).unwrap();
    let g = n.backward(&tape, &Tensor::zeros(out.shape().to_vec())).unwrap();
    assert_eq!(g.params.len(), n.param_count());
    assert!(g.params.iter().all(|&v| v == 0.0));
    assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_linear_layer_matches_closed_form() {
    let mut rng = Rng::new(8);
    let (i, o, rows) = (3, 2, 5);
    let linear = Linear { in_dim: i, out_dim: o, weight: rng.normals(i * o), bias: rng.normals(o) };
    let n = DenoiserNet::from_blocks(vec![Block::Dense { linear: linear.clone(), silu: false }]).unwrap();
    let x = Tensor::new(vec![rows, i], rng.normals(rows * i)).unwrap();
    let y = Tensor::new(vec![rows, o], rng.normals(rows * o)).unwrap();
    let mut tape = Tape::new();
    let out = n.forward_recorded(&x, &[0], None, &mut tape).unwrap();
    // L = Σ_rows ‖W x + b − y‖², so ∂L/∂W = Σ 2(Wx + b − y) xᵀ and ∂L/∂b = Σ 2(Wx + b − y).
    let residual: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..o)
                .map(|k| (0..i).map(|c| linear.weight[k * i + c] * x.get(r, c)).sum::<f64>() + linear.bias[k] - y.get(r, k))
                .collect()
        })
        .collect();
    let adjoint = out.sub(&y).unwrap().scale(2.0);
    let g = n.backward(&tape, &adjoint).unwrap();
    for k in 0..o {
        for c in 0..i {
            let want: f64 = (0..rows).map(|r| 2.0 * residual[r][k] * x.get(r, c)).sum();
            assert!((g.params[k * i + c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        let want: f64 = (0..rows).map(|r| 2.0 * residual[r][k]).sum();
        assert!((g.params[o * i + k] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn initial_loss_is_about_one_per_dimension() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let data = GaussianMixture::default().sample(2048, &mut Rng::new(9)).unwrap();
    for seed in 0..3 {
        let n = net(10 + seed);
        let b = training_batch(&sched, &data, 2048, &mut Rng::new(20 + seed)).unwrap();
        let (loss, _) = noise_mse(&n.forward(&b.x_t, &b.ts, None).unwrap(), &b.eps).unwrap();
        assert!((loss - 1.0).abs() <= 0.2, "seed {seed}: initial loss {loss}");
    }
}

#[test]
fn overfitting_one_example_decreases_loss() {
    let mut n = net(11);
    let b = TrainingBatch {
        x_t: Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap(),
        ts: vec![321],
        eps: Tensor::new(vec![1, 2], vec![0.4, 1.1]).unwrap(),
    };
    // Adam oscillates around the exact minimum of a single example, so
    // descent is checked until the loss is within 1e-4 of it.
    let mut opt = Adam::new(1e-4);
    let losses: Vec<f64> = (0..1000).map(|_| train_step(&mut n, &b, &mut opt).unwrap()).collect();
    let settled = losses.iter().position(|&l| l < 1e-4).expect("loss never fell below 1e-4");
    assert!(settled > 10);
    for (k, w) in losses[..settled].windows(2).enumerate().skip(10) {
        assert!(w[1] <= w[0] + 1e-6, "step {}: {} -> {}", k + 1, w[0], w[1]);
    }
    assert!(losses[999] < 1e-6 * losses[0]);

    let frozen = net(12);
    let mut m = frozen.clone();
    train_step(&mut m, &b, &mut Adam::new(0.0)).unwrap();
    assert_eq!(m.params(), frozen.params());
}

#[test]
fn training_is_reproducible() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let data = GaussianMixture::default().sample(512, &mut Rng::new(13)).unwrap();
    let run = || {
        let mut n = net(14);
        let mut opt = Adam::new(1e-3);
        let mut rng = Rng::new(15);
        for _ in 0..20 {
            let b = training_batch(&sched, &data, 64, &mut rng).unwrap();
            train_step(&mut n, &b, &mut opt).unwrap();
        }
        n.params()
    };
    assert_eq!(run(), run());
}
