//! Training loop: seeded batches from the toy dataset, noise-prediction loss,
//! gradient accumulation, AdamW updates, `step,loss` log and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lmlp_core::backbone::UlMlpModel;
use lmlp_core::blocks::Module;
use lmlp_core::diffusion::training_loss;
use lmlp_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::ToyDataset;
use crate::optim::AdamW;

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.lmlp";
pub const CONFIG_FILE: &str = "run.cfg";

/// Salt separating the batch stream from the model initialization stream.
const BATCH_STREAM_SALT: u64 = 0x6261_7463_6865_73;

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.lmlp")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// `(step, loss)` for the steps run in this call.
    pub losses: Vec<(u64, f32)>,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
}

pub fn dataset_for(cfg: &RunConfig) -> Result<ToyDataset> {
    let ds = ToyDataset::new(cfg.data.seed, cfg.model.image_side, cfg.model.in_channels)?;
    if cfg.model.vocab_size < ds.max_token() {
        return Err(Error::Config(format!(
            "model.vocab_size {} is smaller than the dataset vocabulary ({})",
            cfg.model.vocab_size,
            ds.max_token()
        )));
    }
    Ok(ds)
}

/// Builds the `[B, C, H, W]` batch and caption rows for examples `indices`.
pub fn batch(ds: &ToyDataset, indices: &[u64], text_tokens: usize) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let mut data = Vec::with_capacity(indices.len() * ds.channels * ds.side * ds.side);
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = ds.example(i);
        data.extend_from_slice(&ex.image);
        ids.push(ds.caption_for(&ex, text_tokens));
    }
    Ok((Tensor::from_vec(&[indices.len(), ds.channels, ds.side, ds.side], data)?, ids))
}

/// Rebuilds a model from a checkpoint, using the checkpoint's own config.
pub fn load_model(ckpt: &Checkpoint) -> Result<UlMlpModel<f32>> {
    let model = UlMlpModel::<f32>::new(&ckpt.config.model, ckpt.config.train.seed)?;
    ckpt.restore(&model.parameters())?;
    Ok(model)
}

fn open_log(path: &Path, start: u64) -> Result<fs::File> {
    let kept = if start > 0 && path.exists() {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("step,loss");
        let mut kept = format!("{header}\n");
        for line in lines {
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s < start) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        kept
    } else {
        "step,loss\n".to_string()
    };
    fs::write(path, kept)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Runs training to `cfg.train.steps`, optionally resuming from a checkpoint.
/// `progress` receives one line every `log_every` steps.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = dataset_for(cfg)?;
    let sched = cfg.schedule()?;
    let tc = &cfg.train;
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;

    let model = UlMlpModel::<f32>::new(&cfg.model, tc.seed)?;
    let params = model.parameters();
    let mut opt = AdamW::new(&params, tc);
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config.model != cfg.model {
            return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
        }
        ckpt.restore(&params)?;
        if ckpt.moments.iter().map(|m| &m.name).ne(opt.state.iter().map(|m| &m.name)) {
            return Err(Error::Config(format!("{}: optimizer state does not match the model", path.display())));
        }
        opt.state = ckpt.moments;
        opt.step = ckpt.optimizer_step;
        start = ckpt.step;
    }

    let mut log = open_log(&cfg.out_dir.join(LOSS_LOG), start)?;
    let mut losses = Vec::new();
    let accum = tc.grad_accumulation;
    for step in start..tc.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ BATCH_STREAM_SALT);
        rng.set_stream(step);
        for (_, p) in &params {
            p.zero_grad();
        }
        let mut total = 0.0f32;
        for _ in 0..accum {
            let indices: Vec<u64> = (0..tc.batch_size).map(|_| rng.random_range(0..cfg.data.size as u64)).collect();
            let (x0, ids) = batch(&ds, &indices, cfg.model.text_tokens)?;
            let loss = training_loss(&model, &x0, &ids, &sched, &cfg.guidance, &mut rng)?;
            total += loss.item();
            loss.mul_scalar(1.0 / accum as f32)?.backward()?;
        }
        opt.update(&params)?;
        let mean = total / accum as f32;
        writeln!(log, "{step},{mean}")?;
        losses.push((step, mean));
        if (step + 1) % tc.log_every as u64 == 0 {
            progress(&format!("step {} loss {mean:.5} lr {:.3e}", step + 1, opt.rate_at(step)));
        }
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every as u64 == 0 {
            Checkpoint::capture(cfg, step + 1, &params, opt.step, &opt.state)
                .save(&cfg.out_dir.join(checkpoint_name(step + 1)))?;
        }
    }
    let final_step = start.max(tc.steps as u64);
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    Checkpoint::capture(cfg, final_step, &params, opt.step, &opt.state).save(&final_checkpoint)?;
    Ok(TrainOutcome { losses, final_step, final_checkpoint })
}

/// Mean of the first and last `window` logged losses.
pub fn loss_ratio(losses: &[(u64, f32)], window: usize) -> Option<(f64, f64)> {
    if losses.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[(u64, f32)]| s.iter().map(|(_, l)| *l as f64).sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}
