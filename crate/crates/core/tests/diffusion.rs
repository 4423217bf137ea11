use lmlp_core::backbone::{BackboneConfig, HeadKind, UlMlpModel, NULL_TOKEN};
use lmlp_core::blocks::{Module, Preset, SkipMode};
use lmlp_core::diffusion::{
    cfg_eps, denoising_loss, draw_training_batch, sample, training_loss, GuidanceConfig, NoiseSchedule, SamplerConfig,
};
use lmlp_core::gradcheck::{self, randomize};
use lmlp_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> BackboneConfig {
    BackboneConfig {
        image_side: 4,
        in_channels: 1,
        patch: 2,
        embed_dim: 8,
        depth: 4,
        text_tokens: 2,
        vocab_size: 5,
        num_timesteps: 1000,
        preset: Preset::F2,
        mlp_scale: 2.0,
        skip_mode: SkipMode::SecondStage,
        head_kind: HeadKind::Linear,
    }
}

fn zero_model(x: &Tensor<f64>, _: &[Vec<usize>], _: &[usize]) -> Result<Tensor<f64>> {
    Ok(Tensor::zeros(x.shape()))
}

#[test]
fn zero_model_loss_is_unit_variance() {
    let sched = NoiseSchedule::default();
    let x0 = Tensor::<f64>::full(&[4, 1, 5, 5], 0.3);
    let ids = vec![vec![1, 2]; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100;
    let total: f64 = (0..draws)
        .map(|_| training_loss(&zero_model, &x0, &ids, &sched, &GuidanceConfig::default(), &mut rng).unwrap().item())
        .sum();
    // 100 draws x 100 scalars = 10^4 noise samples
    let mean = total / draws as f64;
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
}

#[test]
fn perfect_oracle_loss_is_exactly_zero() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = Tensor::<f64>::randn(&[3, 1, 4, 4], &mut rng);
    let batch = draw_training_batch(&x0, &vec![vec![3, 4]; 3], &sched, &GuidanceConfig::default(), &mut rng).unwrap();
    let eps = batch.eps.clone();
    let oracle = move |_: &Tensor<f64>, _: &[Vec<usize>], _: &[usize]| -> Result<Tensor<f64>> { Ok(eps.clone()) };
    assert_eq!(denoising_loss(&oracle, &batch).unwrap().item(), 0.0);
}

#[test]
fn caption_drop_rate_matches_keep_probability() {
    let sched = NoiseSchedule::default();
    let x0 = Tensor::<f64>::zeros(&[1000, 1, 1, 1]);
    let ids = vec![vec![2, 3]; 1000];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = draw_training_batch(&x0, &ids, &sched, &GuidanceConfig::default(), &mut rng).unwrap();
    let dropped = b.dropped.iter().filter(|d| **d).count();
    assert!((60..=140).contains(&dropped), "{dropped}");
    for (row, d) in b.text_ids.iter().zip(&b.dropped) {
        assert_eq!(row == &vec![NULL_TOKEN; 2], *d);
    }
    let never = GuidanceConfig { caption_keep_prob: 1.0, ..GuidanceConfig::default() };
    let b = draw_training_batch(&x0, &ids, &sched, &never, &mut rng).unwrap();
    assert!(b.dropped.iter().all(|d| !d));
    assert!(b.ts.iter().all(|&t| t < 1000));
}

#[test]
fn training_loss_gradient_check() {
    let cfg = tiny();
    let model = UlMlpModel::<f64>::new(&cfg, 3).unwrap();
    let params = model.parameters();
    randomize(&params, 8, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Tensor::<f64>::randn(&[2, 1, 4, 4], &mut rng);
    let ids = vec![vec![1, 5], vec![2, 0]];
    let sched = NoiseSchedule::default();
    let guidance = GuidanceConfig::default();
    let loss = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        training_loss(&model, &x0, &ids, &sched, &guidance, &mut rng)
    };
    let report = gradcheck::check(&params, loss, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn batch_errors() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
    let r = training_loss(&zero_model, &x0, &[vec![1]], &sched, &GuidanceConfig::default(), &mut rng);
    assert!(matches!(r, Err(Error::Usage(_))));
    let bad = GuidanceConfig { caption_keep_prob: 1.5, ..GuidanceConfig::default() };
    assert!(matches!(training_loss(&zero_model, &x0, &[vec![1], vec![1]], &sched, &bad, &mut rng), Err(Error::Config(_))));
}

#[test]
fn cfg_is_affine_in_scale() {
    let cfg = tiny();
    let model = UlMlpModel::<f64>::new(&cfg, 4).unwrap();
    randomize(&model.parameters(), 11, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::randn(&[2, 1, 4, 4], &mut rng);
    let ids = vec![vec![1, 2], vec![4, 3]];
    let ts = [400, 17];
    let cond = model.forward(&x, &ids, &ts).unwrap().to_vec();
    let uncond = model.forward(&x, &vec![vec![NULL_TOKEN; 2]; 2], &ts).unwrap().to_vec();
    assert_ne!(cond, uncond);
    for w in [-1.0, 0.0, 2.0] {
        let g = cfg_eps(&model, &x, &ids, &ts, w, NULL_TOKEN).unwrap().to_vec();
        for i in 0..g.len() {
            let expect = cond[i] + w * (cond[i] - uncond[i]);
            assert!((g[i] - expect).abs() <= 1e-12, "w={w}");
        }
    }
    let g0 = cfg_eps(&model, &x, &ids, &ts, 0.0, NULL_TOKEN).unwrap().to_vec();
    assert_eq!(g0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), cond.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn zero_eps_trajectory_matches_scalar_recurrence() {
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig::default();
    let seed = 13;
    let ids = vec![vec![1, 2]; 2];
    let out = sample(&zero_model, &ids, [1, 3, 3], &sched, &sampler, &GuidanceConfig::default(), seed).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut rng).to_vec();
    // each step multiplies by sqrt(abar_next / abar_t); the product telescopes
    let ts: Vec<usize> = (0..=50).map(|i| (999.0 * (50 - i) as f64 / 50.0).round() as usize).collect();
    let mut factor = 1.0;
    for w in ts.windows(2) {
        factor *= (sched.alpha_bar(w[1]) / sched.alpha_bar(w[0])).sqrt();
    }
    let telescoped = (sched.alpha_bar(0) / sched.alpha_bar(999)).sqrt();
    assert!((factor / telescoped - 1.0).abs() < 1e-12);
    for (o, s) in out.to_vec().iter().zip(start) {
        assert!((o - s * factor).abs() <= 1e-10 * (s * factor).abs().max(1.0));
    }
}

#[test]
fn sampling_is_deterministic_and_finite() {
    let cfg = tiny();
    let model = UlMlpModel::<f64>::new(&cfg, 5).unwrap();
    randomize(&model.parameters(), 14, 0.2).unwrap();
    let sched = NoiseSchedule::default();
    let ids = vec![vec![1, 2], vec![3, 4]];
    let run = |seed| {
        sample(&model, &ids, [1, 4, 4], &sched, &SamplerConfig::default(), &GuidanceConfig::default(), seed)
            .unwrap()
            .to_vec()
    };
    let a = run(21);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&run(21)));
    assert_ne!(bits(&a), bits(&run(22)));
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn divergence_reports_step() {
    let sched = NoiseSchedule::default();
    let blowup = |x: &Tensor<f64>, _: &[Vec<usize>], ts: &[usize]| -> Result<Tensor<f64>> {
        if ts[0] < 500 {
            x.mul_scalar(f64::INFINITY)
        } else {
            Ok(Tensor::zeros(x.shape()))
        }
    };
    let r = sample(&blowup, &[vec![1]], [1, 2, 2], &sched, &SamplerConfig::default(), &GuidanceConfig::default(), 1);
    match r {
        Err(Error::Diverged { step, t }) => {
            assert!(t < 500);
            assert_eq!((step, t), (26, 480));
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.shape().to_vec())),
    }
}
