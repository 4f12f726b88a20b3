use super::*;
use crate::channel::{rayleigh_channel, ChannelRng};
use crate::system::SystemConfig;
use proptest::{prop_assert, proptest};
use rand::{Rng, SeedableRng};

fn arch44() -> Arch {
    Arch::new(4, 4)
}

fn channel(arch: Arch, seed: u64) -> CMat {
    rayleigh_channel(arch.nt, arch.k, &mut ChannelRng::seed_from_u64(seed))
}

fn random_simplex<R: Rng>(k: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| p * v / s).collect()
}

fn labelled_set(arch: Arch, n: usize, p: f64, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChannelRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let h = channel(arch, seed * 1000 + i as u64);
            TrainSample::new(h, Some(random_simplex(arch.k, p, &mut rng))).unwrap()
        })
        .collect()
}

/// Perturbs every parameter, including running statistics, so no layer is
/// at its initial symmetric point.
fn jittered(arch: Arch, p: f64, seed: u64) -> EmbeddingParams {
    let mut params = EmbeddingParams::init(arch, p, seed);
    let mut rng = ChannelRng::seed_from_u64(seed ^ 0xFF);
    for t in [Tensor::Bn1Gamma, Tensor::Bn2Gamma, Tensor::Bn1Beta, Tensor::Bn2Beta, Tensor::FcBias] {
        for v in params.tensor_mut(t) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for c in 0..CHANNELS {
        params.bn1.mean[c] = rng.random_range(-0.2..0.2);
        params.bn1.var[c] = rng.random_range(0.5..2.0);
        params.bn2.mean[c] = rng.random_range(-0.2..0.2);
        params.bn2.var[c] = rng.random_range(0.5..2.0);
    }
    params
}

// Independent, index-by-index re-implementation of the forward pass.
fn naive_forward(p: &EmbeddingParams, xs: &[NetInput], train: bool) -> Vec<Vec<f64>> {
    let w = p.arch.width();
    let at = |img: &Vec<Vec<Vec<f64>>>, c: usize, y: isize, x: isize| -> f64 {
        if !(0..=1).contains(&y) || x < 0 || x >= w as isize {
            0.0
        } else {
            img[c][y as usize][x as usize]
        }
    };
    let conv = |imgs: &Vec<Vec<Vec<Vec<f64>>>>, weight: &[f64], cin: usize| {
        imgs.iter()
            .map(|img| {
                (0..CHANNELS)
                    .map(|co| {
                        (0..2)
                            .map(|y| {
                                (0..w)
                                    .map(|x| {
                                        let mut acc = 0.0;
                                        for ci in 0..cin {
                                            for ky in 0..3 {
                                                for kx in 0..3 {
                                                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                                                    acc += wv
                                                        * at(img, ci, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                                }
                                            }
                                        }
                                        acc
                                    })
                                    .collect::<Vec<_>>()
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let bn_relu = |z: &Vec<Vec<Vec<Vec<f64>>>>, gamma: &[f64], beta: &[f64], run: &RunningStats| {
        let mut out = z.clone();
        for c in 0..CHANNELS {
            let vals: Vec<f64> = z.iter().flat_map(|s| s[c].iter().flatten().cloned()).collect();
            let (m, v) = if train {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v)
            } else {
                (run.mean[c], run.var[c])
            };
            for (s, zs) in z.iter().enumerate() {
                for y in 0..2 {
                    for x in 0..w {
                        let n = gamma[c] * (zs[c][y][x] - m) / (v + BN_EPS).sqrt() + beta[c];
                        out[s][c][y][x] = if n > 0.0 { n } else { 0.0 };
                    }
                }
            }
        }
        out
    };
    let imgs: Vec<Vec<Vec<Vec<f64>>>> = xs
        .iter()
        .map(|x| vec![vec![x.data[..w].to_vec(), x.data[w..].to_vec()]])
        .collect();
    let a1 = bn_relu(
        &conv(&imgs, p.tensor(Tensor::Conv1Weight), 1),
        p.tensor(Tensor::Bn1Gamma),
        p.tensor(Tensor::Bn1Beta),
        &p.bn1,
    );
    let a2 = bn_relu(
        &conv(&a1, p.tensor(Tensor::Conv2Weight), CHANNELS),
        p.tensor(Tensor::Bn2Gamma),
        p.tensor(Tensor::Bn2Beta),
        &p.bn2,
    );
    let fw = p.tensor(Tensor::FcWeight);
    let fb = p.tensor(Tensor::FcBias);
    let f = p.arch.flat_features();
    a2.iter()
        .map(|img| {
            let flat: Vec<f64> = img.iter().flatten().flatten().cloned().collect();
            let s: Vec<f64> = (0..p.arch.k)
                .map(|k| {
                    let z: f64 = fb[k] + (0..f).map(|i| fw[k * f + i] * flat[i]).sum::<f64>();
                    1.0 / (1.0 + (-z).exp())
                })
                .collect();
            let tot: f64 = s.iter().sum();
            s.iter().map(|v| p.power_budget * v / tot).collect()
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn input_layout_is_user_major_real_then_imag() {
    let h = channel(Arch::new(3, 2), 8);
    let x = NetInput::from_channel(&h).unwrap();
    let scale = channel_scale(&h);
    assert_eq!(x.data.len(), 12);
    assert_eq!(x.data[3 + 1], h[(1, 1)].re / scale);
    assert_eq!(x.data[6 + 3 + 2], h[(2, 1)].im / scale);
}

#[test]
fn zero_parameters_give_uniform_split() {
    let p = EmbeddingParams::zeros(arch44(), 2.0);
    let x = NetInput::from_channel(&channel(arch44(), 1)).unwrap();
    for q in p.predict(&x).unwrap() {
        assert!((q - 0.5).abs() < 1e-15);
    }
}

#[test]
fn eval_is_pure() {
    let p = jittered(arch44(), 1.0, 3);
    let x = NetInput::from_channel(&channel(arch44(), 2)).unwrap();
    assert_eq!(p.predict(&x).unwrap(), p.predict(&x).unwrap());
}

#[test]
fn train_forward_updates_running_stats_only_in_train_mode() {
    let mut p = jittered(arch44(), 1.0, 3);
    let x = NetInput::from_channel(&channel(arch44(), 2)).unwrap();
    let before = p.clone();
    p.forward(&x, Mode::Eval).unwrap();
    assert_eq!(p, before);
    p.forward(&x, Mode::Train).unwrap();
    assert_eq!(p.theta, before.theta);
    assert_ne!(p.bn1, before.bn1);
    assert!(p.bn1.var.iter().chain(&p.bn2.var).all(|&v| v > 0.0));
}

#[test]
fn forward_matches_naive_reference() {
    for (arch, seed) in [(arch44(), 5), (Arch::new(3, 2), 6), (Arch::new(8, 4), 7)] {
        let p = jittered(arch, 1.7, seed);
        let xs: Vec<NetInput> = (0..5)
            .map(|i| NetInput::from_channel(&channel(arch, seed * 10 + i)).unwrap())
            .collect();
        for (mode, train) in [(Mode::Eval, false), (Mode::Train, true)] {
            let cache = p.forward_batch(&xs, mode).unwrap();
            let reference = naive_forward(&p, &xs, train);
            for (i, r) in reference.iter().enumerate() {
                assert!(max_rel(cache.output(i), r) < 1e-10, "{arch:?} {mode:?}");
            }
        }
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let p = EmbeddingParams::zeros(arch44(), 1.0);
    let x = NetInput::from_channel(&channel(Arch::new(3, 4), 1)).unwrap();
    assert!(matches!(p.predict(&x), Err(Error::DimensionMismatch(_))));
}

#[test]
fn parameter_count_matches_layout() {
    let arch = arch44();
    let p = EmbeddingParams::init(arch, 1.0, 0);
    let c = p.param_count();
    assert_eq!(c.total, p.theta.len());
    assert_eq!(c.conv, 72 + 576);
    assert_eq!(c.batch_norm, 32);
    // K^2 Nt F + K with F = 16 feature maps per antenna-user entry.
    assert_eq!(c.fc, 4 * 4 * 4 * 16 + 4);
    assert_eq!(p.fc_range().len(), c.fc);
}

fn supervised_loss(p: &EmbeddingParams, batch: &[&TrainSample]) -> (f64, Vec<bool>) {
    let (loss, _, cache) = p.loss_and_grad(Objective::SupervisedMse, batch, &[], Mode::Train).unwrap();
    (loss, cache.activation_pattern())
}

/// Central differences on `count` random coordinates. Coordinates whose
/// perturbation flips a ReLU are redrawn: the loss is not differentiable
/// across the kink.
fn check_gradient<F>(p: &EmbeddingParams, analytic: &[f64], loss: F, count: usize, seed: u64, restrict: Option<Range<usize>>)
where
    F: Fn(&EmbeddingParams) -> (f64, Vec<bool>),
{
    let h = 1e-5;
    let mut rng = ChannelRng::seed_from_u64(seed);
    let base_pattern = loss(p).1;
    let range = restrict.unwrap_or(0..p.theta.len());
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut attempts = 0;
    while checked < count {
        attempts += 1;
        assert!(attempts < 10 * count, "too many kink crossings");
        let i = rng.random_range(range.clone());
        let mut up = p.clone();
        let mut dn = p.clone();
        up.theta[i] += h;
        dn.theta[i] -= h;
        let (lu, pu) = loss(&up);
        let (ld, pd) = loss(&dn);
        if pu != base_pattern || pd != base_pattern {
            continue;
        }
        let fd = (lu - ld) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "coordinate {i}: fd {fd:e} analytic {:e}", analytic[i]);
        checked += 1;
    }
    assert!(worst < 1e-4);
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let arch = arch44();
    let p = jittered(arch, 1.0, 11);
    let data = labelled_set(arch, 6, 1.0, 3);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let grad = backward_supervised(&p, &batch).unwrap();
    check_gradient(&p, &grad, |q| supervised_loss(q, &batch), 200, 1, None);
    // Normalisation-layer parameters specifically (batch-statistics path).
    let bn = Tensor::Bn1Gamma.range(arch).start..Tensor::Conv2Weight.range(arch).start;
    check_gradient(&p, &grad, |q| supervised_loss(q, &batch), 16, 2, Some(bn));
    let bn2 = Tensor::Bn2Gamma.range(arch).start..Tensor::FcWeight.range(arch).start;
    check_gradient(&p, &grad, |q| supervised_loss(q, &batch), 16, 3, Some(bn2));
}

#[test]
fn eval_mode_gradient_matches_finite_differences() {
    let arch = Arch::new(3, 2);
    let p = jittered(arch, 1.0, 12);
    let data = labelled_set(arch, 4, 1.0, 4);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let loss = |q: &EmbeddingParams| {
        let (l, _, c) = q.loss_and_grad(Objective::SupervisedMse, &batch, &[], Mode::Eval).unwrap();
        (l, c.activation_pattern())
    };
    let (_, grad, _) = p.loss_and_grad(Objective::SupervisedMse, &batch, &[], Mode::Eval).unwrap();
    check_gradient(&p, &grad, loss, 200, 5, None);
}

#[test]
fn unsupervised_gradient_matches_finite_differences() {
    let arch = arch44();
    let sys = SystemConfig::new(4, 4, 10.0, 1.0).unwrap();
    let p = jittered(arch, sys.power_budget, 13);
    let data: Vec<TrainSample> = (0..5)
        .map(|i| TrainSample::new(channel(arch, 300 + i), None).unwrap())
        .collect();
    let batch: Vec<&TrainSample> = data.iter().collect();
    let grad = backward_unsupervised(&p, &batch, &sys.noise_power).unwrap();
    let loss = |q: &EmbeddingParams| {
        let (l, _, c) = q
            .loss_and_grad(Objective::UnsupervisedSumRate, &batch, &sys.noise_power, Mode::Train)
            .unwrap();
        (l, c.activation_pattern())
    };
    check_gradient(&p, &grad, loss, 200, 7, None);
}

#[test]
fn zero_loss_has_zero_gradient() {
    let arch = arch44();
    let p = jittered(arch, 1.0, 14);
    let inputs: Vec<TrainSample> = (0..4)
        .map(|i| TrainSample::new(channel(arch, 50 + i), None).unwrap())
        .collect();
    let xs: Vec<NetInput> = inputs.iter().map(|s| s.input.clone()).collect();
    let cache = p.forward_batch(&xs, Mode::Train).unwrap();
    let data: Vec<TrainSample> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.label = Some(cache.output(i).to_vec());
            s
        })
        .collect();
    let batch: Vec<&TrainSample> = data.iter().collect();
    let grad = backward_supervised(&p, &batch).unwrap();
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm <= 1e-12, "{norm}");
}

#[test]
fn zero_fc_gradient_is_the_constant_output_chain() {
    let arch = arch44();
    let sys = SystemConfig::new(4, 4, 4.0, 0.5).unwrap();
    let mut p = jittered(arch, sys.power_budget, 15);
    p.tensor_mut(Tensor::FcWeight).fill(0.0);
    p.tensor_mut(Tensor::FcBias).fill(0.0);
    let data: Vec<TrainSample> = (0..3)
        .map(|i| TrainSample::new(channel(arch, 70 + i), None).unwrap())
        .collect();
    let batch: Vec<&TrainSample> = data.iter().collect();
    let grad = backward_unsupervised(&p, &batch, &sys.noise_power).unwrap();

    let kk = arch.k as f64;
    let q0 = vec![sys.power_budget / kk; arch.k];
    let mut expect = vec![0.0; arch.k];
    for s in &data {
        let (_, g) = sumrate_and_grad_q(&s.channel, &q0, &sys.noise_power).unwrap();
        let gq: Vec<f64> = g.iter().map(|v| -v / (2.0 * kk * data.len() as f64)).collect();
        let mean: f64 = gq.iter().sum::<f64>() / kk;
        // s = 1/2 everywhere: dq/ds = (2P/K)(I - 11^T/K), ds/dz = 1/4.
        for k in 0..arch.k {
            expect[k] += 2.0 * sys.power_budget / kk * (gq[k] - mean) * 0.25;
        }
    }
    let fb = &grad[Tensor::FcBias.range(arch)];
    for k in 0..arch.k {
        assert!((fb[k] - expect[k]).abs() < 1e-12 * expect[k].abs().max(1e-3));
    }
    assert!(grad[..Tensor::FcWeight.range(arch).start].iter().all(|&g| g == 0.0));
}

#[test]
fn single_sample_overfit() {
    let arch = arch44();
    let data = labelled_set(arch, 1, 1.0, 20);
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        early_stop: None,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&EmbeddingParams::init(arch, 1.0, 2), &data, Objective::SupervisedMse, &[], &cfg).unwrap();
    assert_eq!(out.passes, 2000);
    assert!(*out.loss_trace.last().unwrap() * 2.0 < 1e-4);
}

#[test]
fn unsupervised_training_reduces_loss() {
    let arch = arch44();
    let sys = SystemConfig::new(4, 4, 10.0, 1.0).unwrap();
    let data: Vec<TrainSample> = (0..64)
        .map(|i| TrainSample::new(channel(arch, 900 + i), None).unwrap())
        .collect();
    let theta0 = EmbeddingParams::init(arch, sys.power_budget, 4);
    let refs: Vec<&TrainSample> = data.iter().collect();
    let before = theta0.eval_loss(Objective::UnsupervisedSumRate, &refs, &sys.noise_power).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 64,
        early_stop: None,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&theta0, &data, Objective::UnsupervisedSumRate, &sys.noise_power, &cfg).unwrap();
    let after = out.params.eval_loss(Objective::UnsupervisedSumRate, &refs, &sys.noise_power).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
}

#[test]
fn zero_epochs_is_identity() {
    let arch = arch44();
    let theta0 = EmbeddingParams::init(arch, 1.0, 3);
    let data = labelled_set(arch, 10, 1.0, 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(&theta0, &data, Objective::SupervisedMse, &[], &cfg).unwrap();
    assert_eq!(out.params, theta0);
    assert_eq!(out.passes, 0);
}

#[test]
fn early_stopping_halts() {
    let arch = Arch::new(2, 2);
    let data = labelled_set(arch, 40, 1.0, 9);
    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: 12,
        adam: AdamConfig::with_lr(1e-2),
        early_stop: Some(EarlyStop {
            patience: 20,
            val_fraction: 0.1,
        }),
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&EmbeddingParams::init(arch, 1.0, 1), &data, Objective::SupervisedMse, &[], &cfg).unwrap();
    assert!(out.stopped_early);
    assert!(out.epochs_run < 3000);
    assert_eq!(out.val_trace.len(), out.epochs_run);
    let best = out.best_epoch.unwrap();
    assert_eq!(out.epochs_run, best + 21);
}

#[test]
fn fc_only_training_freezes_the_rest() {
    let arch = arch44();
    let theta0 = jittered(arch, 1.0, 4);
    let data = labelled_set(arch, 20, 1.0, 6);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 20,
        early_stop: None,
        params: ParamGroup::FcOnly,
        ..TrainConfig::default()
    };
    let out = train(&theta0, &data, Objective::SupervisedMse, &[], &cfg).unwrap();
    let fc = theta0.fc_range();
    assert_eq!(out.params.theta[..fc.start], theta0.theta[..fc.start]);
    assert_eq!(out.params.bn1, theta0.bn1);
    assert_eq!(out.params.bn2, theta0.bn2);
    assert_ne!(out.params.theta[fc.clone()], theta0.theta[fc]);
}

#[test]
fn divergence_is_reported() {
    let arch = Arch::new(2, 2);
    let mut theta0 = EmbeddingParams::init(arch, 1.0, 1);
    theta0.tensor_mut(Tensor::FcBias)[0] = f64::NAN;
    let data = labelled_set(arch, 4, 1.0, 1);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        early_stop: None,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&theta0, &data, Objective::SupervisedMse, &[], &cfg),
        Err(Error::Divergence(_))
    ));
}

#[test]
fn model_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let p = jittered(Arch::new(4, 3), 0.316, 21);
    p.save(&path).unwrap();
    assert_eq!(EmbeddingParams::load(&path).unwrap(), p);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"version\": 1", "\"version\": 9")).unwrap();
    assert!(matches!(EmbeddingParams::load(&path), Err(Error::Version { found: 9, .. })));
}

#[test]
fn adam_matches_hand_computed_first_step() {
    let mut theta = vec![1.0, -2.0];
    let mut adam = Adam::new(2, AdamConfig::default());
    adam.step(&mut theta, &[0.5, -4.0], 0..2);
    // First bias-corrected step moves each coordinate by lr * sign(g).
    assert!((theta[0] - (1.0 - 1e-3)).abs() < 1e-10);
    assert!((theta[1] - (-2.0 + 1e-3)).abs() < 1e-10);
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

    #[test]
    fn output_lies_on_scaled_simplex(seed in 0u64..10_000, p in 0.01f64..100.0) {
        let arch = Arch::new(3, 3);
        let params = jittered(arch, p, seed);
        let x = NetInput::from_channel(&channel(arch, seed + 1)).unwrap();
        let q = params.predict(&x).unwrap();
        prop_assert!(q.iter().all(|&v| v >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - p).abs() <= 1e-9 * p.max(1.0));
    }
}
