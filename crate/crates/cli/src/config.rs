//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. Unknown keys and bad values are reported with their line.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lmlp_core::backbone::BackboneConfig;
use lmlp_core::diffusion::{
    GuidanceConfig, NoiseSchedule, SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_SAMPLE_STEPS,
};
use lmlp_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub grad_accumulation: usize,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-4,
            weight_decay: 0.03,
            beta1: 0.9,
            beta2: 0.9,
            adam_eps: 1e-8,
            warmup_steps: 100,
            grad_accumulation: 1,
            checkpoint_every: 500,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    /// Number of distinct examples training draws from.
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 1, size: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: BackboneConfig::desk(),
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig { num_steps: DEFAULT_SAMPLE_STEPS },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "diffusion", "train", "data", "output"];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.model.num_timesteps, self.beta_start, self.beta_end)
    }

    /// `(section, key, value)` for every key, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("model", "preset", m.preset.to_string()),
            ("model", "image_side", m.image_side.to_string()),
            ("model", "in_channels", m.in_channels.to_string()),
            ("model", "patch", m.patch.to_string()),
            ("model", "embed_dim", m.embed_dim.to_string()),
            ("model", "depth", m.depth.to_string()),
            ("model", "text_tokens", m.text_tokens.to_string()),
            ("model", "vocab_size", m.vocab_size.to_string()),
            ("model", "mlp_scale", m.mlp_scale.to_string()),
            ("model", "skip_mode", m.skip_mode.to_string()),
            ("model", "head", m.head_kind.to_string()),
            ("diffusion", "num_timesteps", m.num_timesteps.to_string()),
            ("diffusion", "beta_start", self.beta_start.to_string()),
            ("diffusion", "beta_end", self.beta_end.to_string()),
            ("diffusion", "sample_steps", self.sampler.num_steps.to_string()),
            ("diffusion", "guidance_scale", self.guidance.scale.to_string()),
            ("diffusion", "caption_keep_prob", self.guidance.caption_keep_prob.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "steps", t.steps.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "learning_rate", t.learning_rate.to_string()),
            ("train", "weight_decay", t.weight_decay.to_string()),
            ("train", "beta1", t.beta1.to_string()),
            ("train", "beta2", t.beta2.to_string()),
            ("train", "adam_eps", t.adam_eps.to_string()),
            ("train", "warmup_steps", t.warmup_steps.to_string()),
            ("train", "grad_accumulation", t.grad_accumulation.to_string()),
            ("train", "checkpoint_every", t.checkpoint_every.to_string()),
            ("train", "log_every", t.log_every.to_string()),
            ("data", "seed", self.data.seed.to_string()),
            ("data", "size", self.data.size.to_string()),
            ("output", "dir", self.out_dir.display().to_string()),
        ]
    }

    /// Sets one key; the error message describes the value problem only.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match (section, key) {
            ("model", "preset") => m.preset = parse(value)?,
            ("model", "image_side") => m.image_side = parse(value)?,
            ("model", "in_channels") => m.in_channels = parse(value)?,
            ("model", "patch") => m.patch = parse(value)?,
            ("model", "embed_dim") => m.embed_dim = parse(value)?,
            ("model", "depth") => m.depth = parse(value)?,
            ("model", "text_tokens") => m.text_tokens = parse(value)?,
            ("model", "vocab_size") => m.vocab_size = parse(value)?,
            ("model", "mlp_scale") => m.mlp_scale = parse(value)?,
            ("model", "skip_mode") => m.skip_mode = parse(value)?,
            ("model", "head") => m.head_kind = parse(value)?,
            ("diffusion", "num_timesteps") => m.num_timesteps = parse(value)?,
            ("diffusion", "beta_start") => self.beta_start = parse(value)?,
            ("diffusion", "beta_end") => self.beta_end = parse(value)?,
            ("diffusion", "sample_steps") => self.sampler.num_steps = parse(value)?,
            ("diffusion", "guidance_scale") => self.guidance.scale = parse(value)?,
            ("diffusion", "caption_keep_prob") => self.guidance.caption_keep_prob = parse(value)?,
            ("train", "seed") => t.seed = parse(value)?,
            ("train", "steps") => t.steps = parse(value)?,
            ("train", "batch_size") => t.batch_size = parse(value)?,
            ("train", "learning_rate") => t.learning_rate = parse(value)?,
            ("train", "weight_decay") => t.weight_decay = parse(value)?,
            ("train", "beta1") => t.beta1 = parse(value)?,
            ("train", "beta2") => t.beta2 = parse(value)?,
            ("train", "adam_eps") => t.adam_eps = parse(value)?,
            ("train", "warmup_steps") => t.warmup_steps = parse(value)?,
            ("train", "grad_accumulation") => t.grad_accumulation = parse(value)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse(value)?,
            ("train", "log_every") => t.log_every = parse(value)?,
            ("data", "seed") => self.data.seed = parse(value)?,
            ("data", "size") => self.data.size = parse(value)?,
            ("output", "dir") => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) =
            spec.split_once('=').ok_or_else(|| Error::Usage(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Usage(format!("override key `{path}` is not section.key")))?;
        self.set(section, key, value.trim()).map_err(|e| Error::Config(format!("override `{spec}`: {e}")))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                let Some(known) = SECTIONS.iter().find(|s| **s == name) else {
                    return Err(Error::Config(format!("line {n}: unknown section [{name}]")));
                };
                section = Some(known);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {n}: expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            let Some(sec) = section else {
                return Err(Error::Config(format!("line {n}: key `{key}` appears before any [section]")));
            };
            cfg.set(sec, key, value.trim())
                .map_err(|e| Error::Config(format!("line {n}: key `{key}`: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.guidance.validate()?;
        self.sampler.timesteps(self.model.num_timesteps)?;
        let t = &self.train;
        let positive = [
            ("train.batch_size", t.batch_size),
            ("train.grad_accumulation", t.grad_accumulation),
            ("train.log_every", t.log_every),
            ("data.size", self.data.size),
            ("model.vocab_size", self.model.vocab_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(t.learning_rate > 0.0) || t.weight_decay < 0.0 || !(t.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be positive, weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = RunConfig::parse_str("[train]\nsteps = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
        let err = RunConfig::parse_str("[train]\nsteps = many\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("steps"), "{err}");
        assert!(RunConfig::parse_str("steps = 1\n").is_err());
        assert!(RunConfig::parse_str("[nope]\n").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::parse_str("# run\n[model]\npreset = D2 # ablation\n").unwrap();
        assert_eq!(cfg.model.preset.to_string(), "D2");
        cfg.apply_override("train.steps=7").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert!(matches!(cfg.apply_override("train.nope=1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_override("steps"), Err(Error::Usage(_))));
    }
}
