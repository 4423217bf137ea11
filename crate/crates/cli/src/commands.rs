//! Sampling, cost tables, weight inspection and dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use lmlp_core::analysis::{export_map, extract_first_stage, normalize_unit, region_stats, MapFormat, Side};
use lmlp_core::backbone::NULL_TOKEN;
use lmlp_core::blocks::{build_block, Preset};
use lmlp_core::complexity::{cost_table, measure, reference_rows, CostKind, CostRow, CostTable};
use lmlp_core::diffusion::{sample, GuidanceConfig, SamplerConfig};
use lmlp_core::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::data::{parse_caption, ToyDataset};
use crate::image;
use crate::train::load_model;

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub captions: PathBuf,
    pub omega: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub fn sample_output_stem(index: usize, seed: u64, omega: f64) -> String {
    format!("sample-{index:03}-seed{seed}-w{omega}")
}

/// One image (plus raw CSV) per non-empty caption line. Returns the image paths.
pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = &ckpt.config;
    let t = cfg.model.text_tokens;
    let text = fs::read_to_string(&args.captions)?;
    let mut captions = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut ids = parse_caption(line, cfg.model.vocab_size)
            .map_err(|e| Error::Usage(format!("{}:{}: {e}", args.captions.display(), i + 1)))?;
        if ids.len() > t {
            return Err(Error::Usage(format!(
                "{}:{}: caption has {} tokens, the model takes {t}",
                args.captions.display(),
                i + 1,
                ids.len()
            )));
        }
        ids.resize(t, NULL_TOKEN);
        captions.push(ids);
    }
    let model = load_model(&ckpt)?;
    let sched = cfg.schedule()?;
    let sampler = SamplerConfig { num_steps: args.steps.unwrap_or(cfg.sampler.num_steps) };
    let guidance = GuidanceConfig { scale: args.omega.unwrap_or(cfg.guidance.scale), ..cfg.guidance };
    fs::create_dir_all(&args.out_dir)?;
    if captions.is_empty() {
        return Ok(Vec::new());
    }
    let (c, side) = (cfg.model.in_channels, cfg.model.image_side);
    let out = sample(&model, &captions, [c, side, side], &sched, &sampler, &guidance, args.seed)?;
    let values = out.to_vec();
    let per = c * side * side;
    let mut paths = Vec::new();
    for (i, img) in values.chunks(per).enumerate() {
        let stem = sample_output_stem(i, args.seed, guidance.scale);
        let path = args.out_dir.join(format!("{stem}.{}", image::extension(c)));
        image::write_image(&path, img, c, side, side)?;
        image::write_csv(&args.out_dir.join(format!("{stem}.csv")), img, side)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchFormat {
    Text,
    Csv,
}

/// Parses `name,L,D,s,kind` with kind `transformer` or `lmlp`.
pub fn parse_row(spec: &str) -> Result<CostRow> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let bad = || Error::Usage(format!("row `{spec}` is not name,L,D,s,kind"));
    let [name, l, d, s, kind] = parts.as_slice() else { return Err(bad()) };
    let kind = match kind.to_ascii_lowercase().as_str() {
        "transformer" => CostKind::Transformer,
        "lmlp" | "l-mlp" => CostKind::Lmlp,
        _ => return Err(bad()),
    };
    Ok(CostRow::new(
        name,
        l.parse().map_err(|_| bad())?,
        d.parse().map_err(|_| bad())?,
        s.parse().map_err(|_| bad())?,
        kind,
    ))
}

fn render(table: &CostTable, format: BenchFormat) -> String {
    match format {
        BenchFormat::Text => table.to_string(),
        BenchFormat::Csv => table.to_csv(),
    }
}

pub fn cmd_bench_table(paper: bool, rows: &[String], format: BenchFormat) -> Result<String> {
    let mut all = if paper { reference_rows() } else { Vec::new() };
    for r in rows {
        all.push(parse_row(r)?);
    }
    Ok(render(&cost_table(&all), format))
}

/// Builds `preset` at `(L, D, s)`, runs it once, and compares counted MACs and
/// weight parameters with the analytic formula.
pub fn cmd_bench_measure(preset: Preset, l: usize, d: usize, s: f64) -> Result<(String, bool)> {
    let cfg = preset.config(l, d, s);
    let kind = CostKind::try_from(cfg.kind)?;
    let block = build_block::<f32>(&cfg, 0)?;
    let m = measure(&block, 1)?;
    let a = kind.cost(l, d, s);
    let agree = m.macs as f64 == a.macs && m.weight_params as f64 == a.params;
    let text = format!(
        "preset {preset} L={l} D={d} s={s}\n\
         macs      analytic {:.0}  measured {}  (attention {})\n\
         params    analytic {:.0}  measured {}  (all scalars {})\n\
         {}\n",
        a.macs,
        m.macs,
        m.attention_macs,
        a.params,
        m.weight_params,
        m.params,
        if agree { "analytic == measured" } else { "analytic != measured" }
    );
    Ok((text, agree))
}

#[derive(Debug, Clone)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    pub layer: Option<usize>,
    pub all_layers: bool,
    pub sides: Vec<Side>,
    pub format: MapFormat,
    pub mark_boundaries: bool,
    pub out_dir: PathBuf,
}

pub const REGION_STATS_FILE: &str = "region_stats.csv";

/// Writes normalized first-stage maps and raw-weight region statistics.
/// Returns the map paths.
pub fn cmd_inspect(args: &InspectArgs) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = load_model(&ckpt)?;
    let layers: Vec<usize> = if args.all_layers {
        (0..model.blocks.len()).filter(|&i| model.blocks[i].as_lmlp().is_some()).collect()
    } else {
        vec![args.layer.ok_or_else(|| Error::Usage("give --layer or --all-layers".into()))?]
    };
    if layers.is_empty() {
        return Err(Error::Unsupported("the model has no L-MLP layers".into()));
    }
    fs::create_dir_all(&args.out_dir)?;
    let ext = match args.format {
        MapFormat::Csv => "csv",
        MapFormat::Pgm => "pgm",
    };
    let mut stats = String::from("layer,region,mean,std,count\n");
    let mut paths = Vec::new();
    for &layer in &layers {
        for &side in &args.sides {
            let map = extract_first_stage(&model, layer, side)?;
            if side == Side::Left {
                for (name, s) in region_stats(&map)?.named() {
                    stats.push_str(&format!("{layer},{name},{},{},{}\n", s.mean, s.std, s.count));
                }
            }
            let path = args.out_dir.join(format!("layer{layer:02}-{side}.{ext}"));
            export_map(&normalize_unit(&map), &path, args.format, args.mark_boundaries)?;
            paths.push(path);
        }
    }
    if args.sides.contains(&Side::Left) {
        fs::write(args.out_dir.join(REGION_STATS_FILE), stats)?;
    }
    Ok(paths)
}

pub fn cmd_gen_data(seed: u64, count: usize, side: usize, channels: usize, out_dir: &Path) -> Result<()> {
    ToyDataset::new(seed, side, channels)?.write(count, out_dir)
}
