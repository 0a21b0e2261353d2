use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mutransfer_core::data::{synth_corpus, tokenize_bytes, write_shards, ShardSet};
use mutransfer_core::harness::{
    coord_check, desk_run, desk_sweep, lr_sweep, render_text, train, transfer_report,
    write_csv, write_run_dir, CellStore, DeskScale, RunConfig, SweepConfig, SweepOptions,
    SweepRecord,
};
use mutransfer_core::Parameterization;

#[derive(Parser)]
#[command(name = "mutransfer", version, about = "Width-transfer experiments for small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-tensor initialization and learning-rate table.
    Plan(PlanArgs),
    /// Build token shards from a synthetic source or a byte file.
    MakeData(MakeDataArgs),
    /// Write a desk-scale run or sweep config to start from.
    Preset(PresetArgs),
    /// Train a single run.
    Train(TrainArgs),
    /// Run a width by learning-rate grid and judge transfer.
    Sweep(SweepArgs),
    /// Compare activation sizes across widths after a few steps.
    Coordcheck(CoordArgs),
    /// Re-render tables and the verdict of a finished sweep.
    Report(ReportArgs),
}

/// Flags that override fields of a run config file.
#[derive(Args, Clone, Default)]
struct RunOverrides {
    /// Model width M. Heads follow as M / head_dim.
    #[arg(long)]
    width: Option<usize>,
    /// Base learning rate α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Width the base learning rate was tuned at.
    #[arg(long)]
    proxy_width: Option<usize>,
    /// Parameterization used to derive init and per-tensor rates.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run seed; drives init and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop early after this many steps, keeping the full schedule.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Shard directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weight decay coefficient λ.
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    MupRelative,
    MupAbsolute,
    Stp,
}

impl From<ModeArg> for Parameterization {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MupRelative => Parameterization::MupRelative,
            ModeArg::MupAbsolute => Parameterization::MupAbsolute,
            ModeArg::Stp => Parameterization::Stp,
        }
    }
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(w) = self.width {
            cfg.model = cfg.model.clone().with_width(w);
        }
        if let Some(a) = self.alpha {
            cfg.plan.alpha = a;
        }
        if let Some(p) = self.proxy_width {
            cfg.plan.proxy_width = p;
        }
        if let Some(m) = self.mode {
            cfg.plan.mode = m.into();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.max_steps {
            cfg.max_steps = Some(s);
        }
        if let Some(d) = &self.data {
            cfg.data = d.clone();
        }
        if let Some(l) = self.weight_decay {
            cfg.optimizer.weight_decay = l;
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
    /// Emit CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output directory for shards and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Tokens per record minus one.
    #[arg(long, default_value_t = 64)]
    context: usize,
    /// Records per shard file.
    #[arg(long, default_value_t = 8192)]
    records_per_shard: usize,
    /// Byte file to tokenize instead of the synthetic source.
    #[arg(long)]
    bytes: Option<PathBuf>,
    /// Byte value that separates documents in `--bytes` input.
    #[arg(long)]
    delimiter: Option<u8>,
    /// Synthetic corpus length in tokens.
    #[arg(long, default_value_t = 5_000_000)]
    tokens: usize,
    /// Synthetic vocabulary size.
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Synthetic source seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetKind {
    Run,
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Reduced,
}

#[derive(Args)]
struct PresetArgs {
    #[arg(value_enum)]
    kind: PresetKind,
    /// Shard directory the config points at.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    scale: ScaleArg,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for the config snapshot, record and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
    /// Save a checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Save a checkpoint after the last step.
    #[arg(long)]
    final_checkpoint: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for cell records, tables and the verdict. Finished cells
    /// found here are not rerun.
    #[arg(long)]
    out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Allowed argmin distance between widths, in grid cells.
    #[arg(long, default_value_t = 0)]
    tolerance: usize,
    /// Shard directory, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CoordArgs {
    /// Run config (TOML); its width is replaced by each of `--widths`.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 256])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    steps: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `sweep.json` written by `sweep`.
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long, default_value_t = 0)]
    tolerance: usize,
    /// Emit the long CSV table instead of text.
    #[arg(long)]
    csv: bool,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_run(path: &Path, overrides: &RunOverrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_toml(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn open_shards(dir: &Path) -> Result<ShardSet> {
    ShardSet::open(dir).with_context(|| format!("opening shards in {}", dir.display()))
}

fn render_report(record: &SweepRecord, tolerance: usize) -> Result<String> {
    let verdict = transfer_report(record, tolerance)?;
    let mut out = render_text(record);
    out.push('\n');
    for (w, v) in &verdict.per_width {
        out.push_str(&format!("width {w}: {v:?}\n"));
    }
    out.push_str(&format!(
        "verdict (tolerance {} cells): {:?}\n",
        tolerance, verdict.overall
    ));
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(args) => {
            let cfg = load_run(&args.config, &args.overrides)?;
            let plan = cfg.plan.build(&cfg.model)?;
            if args.csv {
                plan.write_csv(std::io::stdout())?;
            } else {
                print!("{}", plan.to_text());
            }
        }
        Command::MakeData(args) => {
            let stream = match &args.bytes {
                Some(path) => {
                    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                    tokenize_bytes(&raw, args.delimiter)
                }
                None => synth_corpus(args.seed, args.tokens, args.vocab)?,
            };
            let manifest = write_shards(&stream, args.context, &args.out, args.records_per_shard)?;
            println!(
                "wrote {} records in {} shards to {}",
                manifest.total_records,
                manifest.shards.len(),
                args.out.display()
            );
        }
        Command::Preset(args) => {
            let scale = match args.scale {
                ScaleArg::Full => DeskScale::FULL,
                ScaleArg::Reduced => DeskScale::REDUCED,
            };
            let text = match args.kind {
                PresetKind::Run => toml::to_string(&desk_run(&args.data, scale))?,
                PresetKind::Sweep => toml::to_string(&desk_sweep(&args.data, scale))?,
            };
            match args.out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Train(args) => {
            let mut cfg = load_run(&args.config, &args.overrides)?;
            if args.checkpoint_every.is_some() {
                cfg.checkpoint.interval = args.checkpoint_every;
            }
            cfg.checkpoint.final_checkpoint |= args.final_checkpoint;
            cfg.validate()?;
            let shards = open_shards(&cfg.data)?;
            let record = train(&cfg, &shards, Some(&args.out))?;
            write_run_dir(&args.out, &cfg, &record)?;
            for (step, loss) in &record.evals {
                println!("step {step:>7}  val {loss:.4}");
            }
            println!(
                "best {:?}  diverged {}  {:.1}s",
                record.best_val_loss, record.diverged, record.wall_clock_secs
            );
        }
        Command::Sweep(args) => {
            let mut cfg: SweepConfig = read_toml(&args.config)?;
            if let Some(d) = args.data {
                cfg.base.data = d;
            }
            cfg.validate()?;
            let shards = open_shards(&cfg.base.data)?;
            fs::create_dir_all(&args.out)?;
            let store = CellStore::new(args.out.join("cells"));
            let options = SweepOptions {
                workers: args.workers,
                progress: true,
            };
            let record = lr_sweep(&cfg, &shards, &store, options)?;
            write_json(&args.out.join("sweep.json"), &record)?;
            let verdict = transfer_report(&record, args.tolerance)?;
            write_json(&args.out.join("verdict.json"), &verdict)?;
            let mut csv = Vec::new();
            write_csv(&record, &mut csv)?;
            fs::write(args.out.join("table.csv"), csv)?;
            let text = render_report(&record, args.tolerance)?;
            fs::write(args.out.join("table.txt"), &text)?;
            print!("{text}");
        }
        Command::Coordcheck(args) => {
            let cfg = load_run(&args.config, &args.overrides)?;
            let shards = open_shards(&cfg.data)?;
            let report = coord_check(&cfg, &args.widths, args.steps, &shards)?;
            print!("{}", report.to_text());
            if let Some(p) = args.json {
                write_json(&p, &report)?;
            }
        }
        Command::Report(args) => {
            let text = fs::read_to_string(&args.sweep)
                .with_context(|| format!("reading {}", args.sweep.display()))?;
            let record: SweepRecord = serde_json::from_str(&text)?;
            if record.cells.len() != record.widths.len() * record.alphas.len() {
                bail!("{} has an incomplete grid", args.sweep.display());
            }
            if args.csv {
                write_csv(&record, std::io::stdout())?;
            } else {
                print!("{}", render_report(&record, args.tolerance)?);
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
