use lmlp_core::backbone::{patchify, BackboneConfig, HeadKind, TokenSequence, UlMlpModel, NULL_TOKEN};
use lmlp_core::blocks::{Module, Preset, SkipMode};
use lmlp_core::gradcheck::{self, randomize, zero_all};
use lmlp_core::tensor::no_grad;
use lmlp_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(preset: Preset, skip: SkipMode, depth: usize) -> BackboneConfig {
    BackboneConfig {
        image_side: 4,
        in_channels: 2,
        patch: 2,
        embed_dim: 8,
        depth,
        text_tokens: 2,
        vocab_size: 5,
        num_timesteps: 1000,
        preset,
        mlp_scale: 2.0,
        skip_mode: skip,
        head_kind: HeadKind::Linear,
    }
}

fn image(cfg: &BackboneConfig, b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[b, cfg.in_channels, cfg.image_side, cfg.image_side], &mut rng)
}

#[test]
fn output_shape_matches_input() {
    for head in [HeadKind::Linear, HeadKind::Conv3x3Postprocess] {
        let cfg = BackboneConfig { head_kind: head, ..tiny(Preset::F2, SkipMode::SecondStage, 4) };
        let m = UlMlpModel::<f64>::new(&cfg, 1).unwrap();
        let x = image(&cfg, 3, 2);
        let y = m.forward(&x, &[vec![1, 2], vec![0, 0], vec![5, 3]], &[0, 10, 999]).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn zero_head_gives_zero_image() {
    let cfg = tiny(Preset::D2, SkipMode::None, 1);
    let m = UlMlpModel::<f64>::new(&cfg, 3).unwrap();
    zero_all(&m.blocks[0].parameters()).unwrap();
    zero_all(&m.head.parameters()).unwrap();
    let y = m.forward(&image(&cfg, 2, 4), &[vec![1, 1], vec![2, 2]], &[5, 6]).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_head_matches_per_patch_matmul() {
    let cfg = tiny(Preset::F2, SkipMode::SecondStage, 2);
    let m = UlMlpModel::<f64>::new(&cfg, 5).unwrap();
    randomize(&m.head.parameters(), 6, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l = cfg.seq_len();
    let tokens = Tensor::<f64>::randn(&[2, l, cfg.embed_dim], &mut rng);
    let seq = TokenSequence { tokens: tokens.clone(), time: 0..1, text: 1..3, image: 3..l };
    let out = m.output_head(&seq).unwrap().to_vec();

    let (w, b) = (m.head.weight.to_vec(), m.head.bias.to_vec());
    let (p, c, side, d) = (cfg.patch, cfg.in_channels, cfg.image_side, cfg.embed_dim);
    let grid = side / p;
    let tv = tokens.to_vec();
    for bi in 0..2 {
        for n in 0..grid * grid {
            let tok = &tv[(bi * l + 3 + n) * d..(bi * l + 3 + n + 1) * d];
            let (gy, gx) = (n / grid, n % grid);
            for f in 0..p * p * c {
                let v: f64 = b[f] + (0..d).map(|k| w[f * d + k] * tok[k]).sum::<f64>();
                let (py, px, ch) = (f / (p * c), (f / c) % p, f % c);
                let (y, x) = (gy * p + py, gx * p + px);
                let got = out[((bi * c + ch) * side + y) * side + x];
                assert!((got - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny(Preset::F2, SkipMode::SecondStage, 4);
    let m = UlMlpModel::<f64>::new(&cfg, 8).unwrap();
    let params = m.parameters();
    randomize(&params, 9, 0.3).unwrap();
    let x = image(&cfg, 2, 10);
    let w = image(&cfg, 2, 11);
    let ids = vec![vec![1, 4], vec![NULL_TOKEN, 2]];
    let r = gradcheck::check(&params, || m.forward(&x, &ids, &[3, 700])?.mul(&w)?.sum(), 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn first_stage_skip_and_conv_head_gradient_check() {
    let cfg = BackboneConfig { head_kind: HeadKind::Conv3x3Postprocess, ..tiny(Preset::F1, SkipMode::FirstStage, 3) };
    let m = UlMlpModel::<f64>::new(&cfg, 12).unwrap();
    let params = m.parameters();
    randomize(&params, 13, 0.3).unwrap();
    let x = image(&cfg, 1, 14);
    let w = image(&cfg, 1, 15);
    let r = gradcheck::check(&params, || m.forward(&x, &[vec![2, 3]], &[42])?.mul(&w)?.sum(), 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn captions_reach_image_outputs() {
    for preset in [Preset::F2, Preset::A2, Preset::A3, Preset::Transformer] {
        let cfg = tiny(preset, preset.skip_mode(), 2);
        let m = UlMlpModel::<f64>::new(&cfg, 16).unwrap();
        randomize(&m.parameters(), 17, 0.3).unwrap();
        let x = image(&cfg, 1, 18);
        let a = no_grad(|| m.forward(&x, &[vec![1, 2]], &[100])).unwrap().to_vec();
        let b = no_grad(|| m.forward(&x, &[vec![3, 2]], &[100])).unwrap().to_vec();
        assert!(a.iter().zip(&b).any(|(u, v)| (u - v).abs() > 1e-9), "{preset}");
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = tiny(Preset::F2, SkipMode::SecondStage, 2);
    let m = UlMlpModel::<f64>::new(&cfg, 19).unwrap();
    let x = image(&cfg, 1, 20);
    assert!(matches!(m.forward(&x, &[vec![6, 0]], &[1]), Err(Error::Usage(_))));
    assert!(matches!(m.forward(&x, &[vec![1]], &[1]), Err(Error::Usage(_))));
    assert!(matches!(m.forward(&x, &[vec![1, 1]], &[1000]), Err(Error::Usage(_))));
    let wrong = Tensor::<f64>::zeros(&[1, 2, 6, 6]);
    assert!(matches!(m.forward(&wrong, &[vec![1, 1]], &[1]), Err(Error::Shape(_))));
}

#[test]
fn token_ranges_follow_the_layout() {
    let cfg = tiny(Preset::F2, SkipMode::SecondStage, 2);
    let m = UlMlpModel::<f64>::new(&cfg, 21).unwrap();
    let seq = m.embed(&image(&cfg, 1, 22), &[vec![1, 2]], &[0]).unwrap();
    assert_eq!((seq.time, seq.text, seq.image), (0..1, 1..3, 3..7));
    assert_eq!(seq.tokens.shape(), &[1, 7, 8]);
    let patches = patchify(&image(&cfg, 1, 22), 2).unwrap();
    assert_eq!(patches.shape(), &[1, 4, 8]);
}

#[test]
fn construction_is_deterministic() {
    let cfg = BackboneConfig::desk();
    let a = UlMlpModel::<f32>::new(&cfg, 5).unwrap();
    let b = UlMlpModel::<f32>::new(&cfg, 5).unwrap();
    for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.to_vec(), tb.to_vec());
    }
}
