//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lmlp_cli::checkpoint::Checkpoint;
use lmlp_cli::config::RunConfig;
use lmlp_cli::train::{load_model, loss_ratio, train, FINAL_CHECKPOINT, LOSS_LOG};
use lmlp_core::analysis::{normalize_unit, region_stats, WeightMap};
use lmlp_core::backbone::{BackboneConfig, HeadKind, UlMlpModel, NULL_TOKEN};
use lmlp_core::blocks::{build_block, BlockKind, MergeProjection, Module, Preset, SkipMode};
use lmlp_core::complexity::{lmlp_cost, measure};
use lmlp_core::diffusion::{cfg_eps, sample, training_loss, GuidanceConfig, NoiseSchedule, SamplerConfig};
use lmlp_core::gradcheck::{self, randomize, zero_all};
use lmlp_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> std::result::Result<(), String> {
    ensure(elapsed <= limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_lmlp")).args(["bench", "--paper", "--format", "csv"]).output().map_err(e)?;
    let elapsed = start.elapsed();
    ensure(out.status.success(), "bench --paper failed")?;
    let csv = String::from_utf8(out.stdout).map_err(e)?;
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    ensure(rows.len() == 3, "expected three rows")?;
    let macs: Vec<f64> = rows.iter().map(|r| r[4].parse::<f64>().unwrap()).collect();
    let sig3 = |v: f64| format!("{:.3}", v / 1e9);
    let got: Vec<String> = macs.iter().map(|&m| sig3(m)).collect();
    ensure(got == ["1.165", "1.143", "0.933"], format!("MACs {got:?}"))?;
    let params: f64 = rows[2][5].parse().map_err(e)?;
    let rel = (params / 2.74e6 - 1.0).abs();
    ensure(rel < 0.01, format!("L-MLP params {params} vs 2.74M ({:.2}%)", rel * 100.0))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("1.165B / 1.143B / 0.933B; params {params} ({:.2}% from 2.74M); {elapsed:.0?}", rel * 100.0))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (l, d, s) in [(6usize, 8usize, 2.0), (334, 512, 4.0)] {
        let blk = build_block::<f32>(&Preset::D2.config(l, d, s), 0).map_err(e)?;
        let m = measure(&blk, 1).map_err(e)?;
        let a = lmlp_cost(l, d, s);
        ensure(m.macs as f64 == a.macs, format!("L={l} D={d}: measured {} vs analytic {}", m.macs, a.macs))?;
        let leading = (2.0 + 2.0 * s) * (d * d) as f64 + (l * l) as f64;
        ensure(m.weight_params as f64 == leading, format!("L={l} D={d}: params {} vs {leading}", m.weight_params))?;
        notes.push(format!("({l},{d},{s}) {} MACs", m.macs));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{}; {:.1?}", notes.join(", "), start.elapsed()))
}

fn tiny_backbone(depth: usize) -> BackboneConfig {
    BackboneConfig {
        image_side: 4,
        in_channels: 2,
        patch: 2,
        embed_dim: 8,
        depth,
        text_tokens: 2,
        vocab_size: 5,
        num_timesteps: 1000,
        preset: Preset::F2,
        mlp_scale: 2.0,
        skip_mode: SkipMode::SecondStage,
        head_kind: HeadKind::Linear,
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (b, l, d) = (2, 6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[b, l, d], &mut rng);
    let w = Tensor::<f64>::randn(&[b, l, d], &mut rng);
    let mut worst: f64 = 0.0;
    for p in Preset::ALL {
        let blk = build_block::<f64>(&p.config(l, d, 2.0), 11).map_err(e)?;
        let params = blk.parameters();
        randomize(&params, 17, 0.4).map_err(e)?;
        let r = gradcheck::check(&params, || blk.forward(&x)?.mul(&w)?.sum(), 1e-5).map_err(e)?;
        ensure(r.max_rel_error <= 1e-4, format!("{p}: {:.2e} at {}", r.max_rel_error, r.worst))?;
        worst = worst.max(r.max_rel_error);
    }

    let cfg = tiny_backbone(4);
    let model = UlMlpModel::<f64>::new(&cfg, 1).map_err(e)?;
    let params = model.parameters();
    randomize(&params, 5, 0.3).map_err(e)?;
    let img = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng);
    let wo = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng);
    let ids = vec![vec![1, 5], vec![0, 3]];
    let r = gradcheck::check(&params, || model.forward(&img, &ids, &[3, 750])?.mul(&wo)?.sum(), 1e-5).map_err(e)?;
    ensure(r.max_rel_error <= 1e-4, format!("UL-MLP: {:.2e} at {}", r.max_rel_error, r.worst))?;
    worst = worst.max(r.max_rel_error);

    let sched = NoiseSchedule::default();
    let guidance = GuidanceConfig::default();
    let loss = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        training_loss(&model, &img, &ids, &sched, &guidance, &mut rng)
    };
    let r = gradcheck::check(&params, loss, 1e-5).map_err(e)?;
    ensure(r.max_rel_error <= 1e-4, format!("training_loss: {:.2e} at {}", r.max_rel_error, r.worst))?;
    worst = worst.max(r.max_rel_error);
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{} presets + depth-4 UL-MLP + loss; max rel error {worst:.2e}; {:.1?}", Preset::ALL.len(), start.elapsed()))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(&[2, 6, 8], &mut rng);
    let mut zeroed = 0;
    let mut fresh = 0;
    for p in Preset::ALL {
        let cfg = p.config(6, 8, 2.0);
        if cfg.kind != BlockKind::Lmlp {
            continue;
        }
        let blk = build_block::<f64>(&cfg, 2).map_err(e)?;
        if cfg.merge_projection == MergeProjection::Linear {
            ensure(blk.forward(&x).map_err(e)?.to_vec() == x.to_vec(), format!("fresh {p} is not the identity"))?;
            fresh += 1;
        }
        zero_all(&blk.parameters()).map_err(e)?;
        ensure(blk.forward(&x).map_err(e)?.to_vec() == x.to_vec(), format!("zeroed {p} is not the identity"))?;
        zeroed += 1;
    }
    Ok(format!("{zeroed} zeroed and {fresh} fresh L-MLP blocks return their input exactly"))
}

fn criterion_5() -> Outcome {
    let cfg = tiny_backbone(4);
    let model = UlMlpModel::<f64>::new(&cfg, 7).map_err(e)?;
    randomize(&model.parameters(), 8, 0.3).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng);
    let ids = vec![vec![2, 4], vec![1, 1]];
    let ts = [120, 870];
    let cond = model.forward(&x, &ids, &ts).map_err(e)?.to_vec();
    let uncond = model.forward(&x, &vec![vec![NULL_TOKEN; 2]; 2], &ts).map_err(e)?.to_vec();
    ensure(cond != uncond, "conditional and unconditional predictions coincide")?;
    let mut worst: f64 = 0.0;
    for w in [-1.0, 0.0, 2.0] {
        let g = cfg_eps(&model, &x, &ids, &ts, w, NULL_TOKEN).map_err(e)?.to_vec();
        for i in 0..g.len() {
            worst = worst.max((g[i] - (cond[i] + w * (cond[i] - uncond[i]))).abs());
        }
        if w == 0.0 {
            let same = g.iter().zip(&cond).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, "omega = 0 differs from the conditional branch")?;
        }
    }
    ensure(worst <= 1e-12, format!("affine identity off by {worst:.2e}"))?;
    Ok(format!("max deviation {worst:.1e}; omega = 0 bitwise conditional"))
}

fn zero_model(x: &Tensor<f64>, _: &[Vec<usize>], _: &[usize]) -> Result<Tensor<f64>> {
    Ok(Tensor::zeros(x.shape()))
}

fn criterion_6() -> Outcome {
    let cfg = tiny_backbone(4);
    let model = UlMlpModel::<f64>::new(&cfg, 3).map_err(e)?;
    randomize(&model.parameters(), 4, 0.2).map_err(e)?;
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig { num_steps: 50 };
    let guidance = GuidanceConfig::default();
    let ids = vec![vec![1, 2], vec![3, 0]];
    let run = || sample(&model, &ids, [2, 4, 4], &sched, &sampler, &guidance, 42).map(|t| t.to_vec());
    let (a, b) = (run().map_err(e)?, run().map_err(e)?);
    ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "samples differ between runs")?;
    ensure(a.iter().all(|v| v.is_finite()), "non-finite sample")?;

    let out = sample(&zero_model, &ids, [2, 4, 4], &sched, &sampler, &guidance, 42).map_err(e)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let start = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng).to_vec();
    let ts = sampler.timesteps(1000).map_err(e)?;
    let mut worst: f64 = 0.0;
    for (o, x0) in out.iter().zip(start) {
        let mut x = x0;
        for w in ts.windows(2) {
            x *= (sched.alpha_bar(w[1]) / sched.alpha_bar(w[0])).sqrt();
        }
        worst = worst.max((o - x).abs());
    }
    ensure(worst <= 1e-10, format!("zero-eps trajectory off by {worst:.2e}"))?;
    Ok(format!("50-step samples bitwise equal; zero-eps recurrence error {worst:.1e}"))
}

fn desk_config(out: &Path, preset: Preset) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.preset = preset;
    cfg.train.steps = 2000;
    cfg.train.checkpoint_every = 0;
    cfg.train.log_every = 500;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn criterion_7(dir: &Path) -> Outcome {
    let start = Instant::now();
    let f2 = train(&desk_config(&dir.join("f2"), Preset::F2), None, |_| {}).map_err(e)?;
    let (first, last) = loss_ratio(&f2.losses, 100).ok_or("short loss log")?;
    ensure(last <= 0.5 * first, format!("final-100 mean {last:.4} vs first-100 mean {first:.4}"))?;
    let mut notes = vec![format!("F2 first-100 {first:.4} -> final-100 {last:.4} (ratio {:.3})", last / first)];
    for p in [Preset::A2, Preset::A3] {
        let run = train(&desk_config(&dir.join(p.name()), p), None, |_| {}).map_err(|err| format!("{p}: {err}"))?;
        ensure(run.losses.len() == 2000, format!("{p}: {} steps", run.losses.len()))?;
        ensure(run.losses.iter().all(|(_, l)| l.is_finite()), format!("{p}: non-finite loss"))?;
        let (a, b) = loss_ratio(&run.losses, 100).ok_or("short loss log")?;
        notes.push(format!("{p} {a:.4} -> {b:.4}"));
    }
    within(start.elapsed(), Duration::from_secs(1800))?;
    Ok(format!("{}; {:.0?}", notes.join("; "), start.elapsed()))
}

fn criterion_8(dir: &Path) -> Outcome {
    let mk = |name: &str, steps: usize| {
        let mut cfg = desk_config(&dir.join(name), Preset::F2);
        cfg.train.steps = steps;
        cfg.train.batch_size = 8;
        cfg.train.warmup_steps = 4;
        cfg
    };
    let full = mk("full", 10);
    train(&full, None, |_| {}).map_err(e)?;
    let mut part = mk("part", 5);
    train(&part, None, |_| {}).map_err(e)?;
    part.train.steps = 10;
    train(&part, Some(&part.out_dir.join(FINAL_CHECKPOINT)), |_| {}).map_err(e)?;
    let a = std::fs::read_to_string(full.out_dir.join(LOSS_LOG)).map_err(e)?;
    let b = std::fs::read_to_string(part.out_dir.join(LOSS_LOG)).map_err(e)?;
    ensure(a.lines().count() == 11 && a == b, "resumed loss log differs from the uninterrupted one")?;

    let path = full.out_dir.join(FINAL_CHECKPOINT);
    let bytes = std::fs::read(&path).map_err(e)?;
    let ckpt = Checkpoint::load(&path).map_err(e)?;
    let model = load_model(&ckpt).map_err(e)?;
    let again = Checkpoint::capture(&ckpt.config, ckpt.step, &model.parameters(), ckpt.optimizer_step, &ckpt.moments);
    ensure(again.to_bytes() == bytes, "checkpoint save/load is not bitwise")?;
    Ok(format!("{}-byte checkpoint round-trips bitwise; 5+5 resumed log equals 10-step log", bytes.len()))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(3..20);
        let mut m = WeightMap::new(n, n, (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect()).map_err(e)?;
        m.boundaries = vec![1, rng.random_range(1..n)];
        let norm = normalize_unit(&m);
        let twice = normalize_unit(&norm);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let affine = normalize_unit(&WeightMap { matrix: m.matrix.iter().map(|v| a * v + b).collect(), ..m.clone() });
        for i in 0..norm.matrix.len() {
            worst = worst.max((twice.matrix[i] - norm.matrix[i]).abs());
            worst = worst.max((affine.matrix[i] - norm.matrix[i]).abs());
        }

        let split = m.boundaries[1];
        let stats = region_stats(&m).map_err(e)?;
        let blocks = [(0..split, 0..split), (0..split, split..n), (split..n, 0..split), (split..n, split..n)];
        for ((name, st), (rows, cols)) in stats.named().iter().zip(blocks) {
            let mut sum = 0.0;
            let mut count = 0;
            for r in rows {
                for c in cols.clone() {
                    sum += m.get(r, c);
                    count += 1;
                }
            }
            let mean = if count == 0 { 0.0 } else { sum / count as f64 };
            ensure(st.mean == mean && st.count == count, format!("{name}: {} vs {mean}", st.mean))?;
        }
    }
    ensure(worst <= 1e-12, format!("normalization deviation {worst:.2e}"))?;
    Ok(format!("20 random maps; normalization deviation {worst:.1e}; region means exact"))
}

fn criterion_10() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).map_err(|err| format!("{}: {err}", readme.display()))?.to_lowercase();
    for needle in ["8.62", "fid", "clip", "wall-clock", "not reproduced"] {
        ensure(text.contains(needle), format!("README does not mention {needle}"))?;
    }
    Ok("FID 8.62, FID/CLIP curves and wall-clock throughput documented as out of reach; nothing asserts them".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("complexity table reproduction", Box::new(criterion_1)),
        ("analytic vs measured MACs and parameters", Box::new(criterion_2)),
        ("gradient correctness", Box::new(criterion_3)),
        ("identity at init", Box::new(criterion_4)),
        ("guidance algebra", Box::new(criterion_5)),
        ("sampler determinism and zero-eps recurrence", Box::new(criterion_6)),
        ("toy training signal", Box::new(|| criterion_7(dir.path()))),
        ("checkpoint persistence and resume", Box::new(|| criterion_8(dir.path()))),
        ("analysis pipeline", Box::new(criterion_9)),
        ("non-reproducible results documented", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
