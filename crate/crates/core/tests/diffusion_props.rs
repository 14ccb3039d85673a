use graspldp::latent_diffusion::{
    ddim_loop, gaussian_tensor, q_sample, LdpConfig, LdpModel, NoiseSchedule, Observation, CUE_CHANNELS,
    IMAGE_CHANNELS, IMAGE_SIZE, PROPRIO_DIM, SAMPLE_CLIP,
};
use graspldp::netcore::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cosine_level(t: f64, k: usize) -> f64 {
    let s = 0.008;
    (((t / k as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

#[test]
fn schedule_matches_telescoped_closed_form() {
    let k = 100;
    let s = NoiseSchedule::squared_cosine(k).unwrap();
    let f0 = cosine_level(0.0, k);
    for i in 0..k {
        let expected = cosine_level(i as f64, k) / f0;
        assert!((s.alpha_bar(i) - expected).abs() <= 1e-12, "{i}");
    }
    // the final ratio is zero, so its noise level is capped
    assert!((s.alpha_bar(k) - s.alpha_bar(k - 1) * (1.0 - 0.999)).abs() <= 1e-15);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(k) < 0.05);
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn forward_noise_has_the_scheduled_moments() {
    let s = NoiseSchedule::squared_cosine(100).unwrap();
    let n = 10_000;
    let z0 = Tensor::full(&[n], 0.8);
    let eps = gaussian_tensor(&[n], &mut ChaCha8Rng::seed_from_u64(5));
    let (_, eps_var) = moments(eps.data());
    for k in [1, 10, 50, 90, 100] {
        let (mean, var) = moments(q_sample(&z0, k, &eps, &s).unwrap().data());
        let noise = 1.0 - s.alpha_bar(k);
        assert!((var - noise).abs() / noise < 0.03, "k={k}: {var} vs {noise}");
        assert!((var - noise * eps_var).abs() <= 1e-9 * noise, "k={k}");
        assert!((mean - 0.8 * s.alpha_bar(k).sqrt()).abs() <= 4.0 * (noise / n as f64).sqrt(), "k={k}");
    }
}

#[test]
fn forward_marginal_second_moment() {
    let s = NoiseSchedule::squared_cosine(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 32;
    let z0 = Tensor::from_vec(&[dim], (0..dim).map(|i| 0.1 * i as f64 - 1.0).collect()).unwrap();
    let z0_sq = z0.sq_norm();
    let trials = 4000;
    for k in [5, 40, 80] {
        let mean_sq = (0..trials)
            .map(|_| q_sample(&z0, k, &gaussian_tensor(&[dim], &mut rng), &s).unwrap().sq_norm())
            .sum::<f64>()
            / trials as f64;
        let expected = s.alpha_bar(k) * z0_sq + (1.0 - s.alpha_bar(k)) * dim as f64;
        assert!((mean_sq - expected).abs() / expected < 0.03, "k={k}: {mean_sq} vs {expected}");
    }
}

#[test]
fn zero_denoiser_rescales_the_start_noise() {
    let s = NoiseSchedule::squared_cosine(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [1, 5, 10, 37] {
        let steps = s.inference_timesteps(n).unwrap();
        let x = gaussian_tensor(&[2, 3, 4], &mut rng);
        let out = ddim_loop(x.clone(), &s, &steps, None, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
        let scale = 1.0 / s.alpha_bar(steps[0]).sqrt();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i * scale).abs() <= 1e-9 * scale, "{n}");
        }
    }
}

/// One deterministic DDIM update per training step, from the update rule.
fn full_ddim_oracle(x: &[f64], s: &NoiseSchedule, eps_fn: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    for k in (1..=s.steps()).rev() {
        let (ab, prev) = (s.alpha_bar(k), s.alpha_bar(k - 1));
        for v in &mut x {
            let e = eps_fn(*v, k);
            let x0 = (*v - (1.0 - ab).sqrt() * e) / ab.sqrt();
            *v = prev.sqrt() * x0 + (1.0 - prev).sqrt() * e;
        }
    }
    x
}

#[test]
fn full_sub_schedule_reproduces_every_step() {
    let s = NoiseSchedule::squared_cosine(20).unwrap();
    let eps = |v: f64, k: usize| 0.3 * v + 0.05 * (k as f64).sin();
    let x = gaussian_tensor(&[16], &mut ChaCha8Rng::seed_from_u64(8));
    let steps = s.inference_timesteps(20).unwrap();
    let got = ddim_loop(x.clone(), &s, &steps, None, |x, k| {
        Ok(Tensor::from_vec(x.shape(), x.data().iter().map(|&v| eps(v, k)).collect()).unwrap())
    })
    .unwrap();
    let expected = full_ddim_oracle(x.data(), &s, eps);
    for (a, b) in got.data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn clipped_sampling_stays_in_range() {
    let s = NoiseSchedule::squared_cosine(100).unwrap();
    let steps = s.inference_timesteps(10).unwrap();
    let x = gaussian_tensor(&[64], &mut ChaCha8Rng::seed_from_u64(9));
    let out = ddim_loop(x, &s, &steps, Some(SAMPLE_CLIP), |x, _| Ok(x.map(|v| -0.5 * v))).unwrap();
    assert!(out.data().iter().all(|v| v.abs() <= SAMPLE_CLIP + 1e-12));
}

fn tiny_config() -> LdpConfig {
    LdpConfig {
        latent_channels: 2,
        latent_len: 4,
        down_dims: vec![4, 8],
        kernel_size: 3,
        n_groups: 2,
        step_embed_dim: 4,
        obs_feature_dim: 34,
        train_timesteps: 10,
        inference_steps: 5,
        use_cue: true,
        use_recon: true,
        recon_weight: 0.2,
        condition_guidance: false,
    }
}

fn observation(seed: u64) -> Observation {
    let g = gaussian_tensor(&[IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE + PROPRIO_DIM], &mut ChaCha8Rng::seed_from_u64(seed));
    let (img, pro) = g.data().split_at(IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    let mut proprio = [0.0f32; PROPRIO_DIM];
    for (p, &v) in proprio.iter_mut().zip(pro) {
        *p = v as f32;
    }
    Observation {
        images: img.iter().map(|&v| v as f32).collect(),
        proprio,
        cue_target: vec![0.0; CUE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampling_is_a_function_of_the_seed(model_seed in 0u64..1000, obs_seed in 0u64..1000, seed in any::<u64>()) {
        let m = LdpModel::init(tiny_config(), model_seed).unwrap();
        let obs = observation(obs_seed);
        let a = m.sample(&obs, None, seed).unwrap();
        let b = m.sample(&obs, None, seed).unwrap();
        prop_assert_eq!(a.shape(), &[1, 2, 4]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn q_sample_with_zero_noise_scales_the_input(k in 1usize..=100, v in -3.0..3.0f64) {
        let s = NoiseSchedule::squared_cosine(100).unwrap();
        let z = Tensor::from_vec(&[1], vec![v]).unwrap();
        let out = q_sample(&z, k, &Tensor::zeros(&[1]), &s).unwrap();
        prop_assert!((out.data()[0] - s.alpha_bar(k).sqrt() * v).abs() <= 1e-15);
    }
}
