use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmlp_core::analysis::{MapFormat, Side};
use lmlp_core::blocks::Preset;
use lmlp_core::{Error, Result};

use lmlp_cli::commands::{self, BenchFormat, InspectArgs, SampleArgs};
use lmlp_cli::config::RunConfig;
use lmlp_cli::{check_deterministic_env, exit_code, train, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "lmlp", version, about = "Train, sample, benchmark and inspect UL-MLP diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the procedural dataset.
    Train(TrainArgs),
    /// Generate images from a checkpoint, one per caption line.
    Sample(SampleCli),
    /// Print analytic block costs or compare them with counted MACs.
    Bench(BenchArgs),
    /// Export first-stage weight maps and region statistics.
    Inspect(InspectCli),
    /// Write the procedural dataset as image files and captions.tsv.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (`key = value` with [sections]); defaults are used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct SampleCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One caption per line, words or token ids.
    #[arg(long)]
    captions: PathBuf,
    /// Guidance scale; defaults to the checkpoint config.
    #[arg(long, allow_hyphen_values = true)]
    omega: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// The three reference rows at L=334, D=512.
    #[arg(long)]
    paper: bool,
    /// Extra row `name,L,D,s,kind` (kind: transformer or lmlp). Repeatable.
    #[arg(long = "row")]
    rows: Vec<String>,
    /// Build a block and compare counted MACs with the formula.
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value = "D2")]
    preset: Preset,
    #[arg(long, default_value_t = 6)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Left,
    Right,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapFormatArg {
    Pgm,
    Csv,
}

#[derive(Args)]
struct InspectCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    all_layers: bool,
    #[arg(long, value_enum, default_value_t = SideArg::Both)]
    side: SideArg,
    #[arg(long, value_enum, default_value_t = MapFormatArg::Pgm)]
    format: MapFormatArg,
    /// Draw token-region boundaries at full intensity in PGM output.
    #[arg(long)]
    mark_boundaries: bool,
    #[arg(long, default_value = "inspect")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    check_deterministic_env()?;
    match cli.command {
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for o in &a.overrides {
                cfg.apply_override(o)?;
            }
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(o) = a.out {
                cfg.out_dir = o;
            }
            if a.print_config {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let quiet = a.quiet;
            let out = train::train(&cfg, a.resume.as_deref(), |line| {
                if !quiet {
                    eprintln!("{line}");
                }
            })?;
            println!("step {} checkpoint {}", out.final_step, out.final_checkpoint.display());
        }
        Command::Sample(a) => {
            let paths = commands::cmd_sample(&SampleArgs {
                checkpoint: a.checkpoint,
                captions: a.captions,
                omega: a.omega,
                steps: a.steps,
                seed: a.seed,
                out_dir: a.out,
            })?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Bench(a) => {
            if !a.paper && !a.measure && a.rows.is_empty() {
                return Err(Error::Usage("bench needs --paper, --row or --measure".into()));
            }
            let format = match a.format {
                Format::Text => BenchFormat::Text,
                Format::Csv => BenchFormat::Csv,
            };
            if a.paper || !a.rows.is_empty() {
                print!("{}", commands::cmd_bench_table(a.paper, &a.rows, format)?);
            }
            if a.measure {
                let (text, agree) = commands::cmd_bench_measure(a.preset, a.seq_len, a.embed_dim, a.scale)?;
                print!("{text}");
                if !agree {
                    return Err(Error::Unsupported("measured costs differ from the formula".into()));
                }
            }
        }
        Command::Inspect(a) => {
            let sides = match a.side {
                SideArg::Left => vec![Side::Left],
                SideArg::Right => vec![Side::Right],
                SideArg::Both => vec![Side::Left, Side::Right],
            };
            let format = match a.format {
                MapFormatArg::Pgm => MapFormat::Pgm,
                MapFormatArg::Csv => MapFormat::Csv,
            };
            let paths = commands::cmd_inspect(&InspectArgs {
                checkpoint: a.checkpoint,
                layer: a.layer,
                all_layers: a.all_layers,
                sides,
                format,
                mark_boundaries: a.mark_boundaries,
                out_dir: a.out,
            })?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::GenData(a) => commands::cmd_gen_data(a.seed, a.count, a.side, a.channels, &a.out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lmlp: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
