use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spa_core::analytics::{self, RatioInput};
use spa_core::harness::regression::load_cases;
use spa_core::harness::{self, FitConfig, GradcheckOptions, SyntheticVideoSpec, Teacher};
use spa_core::{golden, manifest, CompressorConfig, ParamGroup, Scalar, SpaError, SpaModel};

/// Hierarchical scene/event token compressor toolkit.
#[derive(Parser)]
#[command(name = "spa", version)]
struct Cli {
    /// Overrides the seed of the config (and of generated data).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    /// INI file with a [compressor] section.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Compression ratio and token reduction of a scene/event budget.
    Ratio(RatioArgs),
    /// Compress a video manifest and write the flattened tokens.
    Run(RunArgs),
    /// Finite-difference check of every parameter group.
    Gradcheck(GradcheckArgs),
    /// Toy compressor-only fitting loop; writes the loss curve as CSV.
    Fit(FitArgs),
    /// Golden-file regression.
    #[command(subcommand)]
    Golden(GoldenCommand),
    /// Write a synthetic video (manifest plus tensor files).
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RatioArgs {
    #[arg(long, default_value_t = 64)]
    s: usize,
    #[arg(long, default_value_t = 32)]
    e: usize,
    #[arg(long, default_value_t = analytics::DEFAULT_FRAMES_PER_SENTENCE)]
    n_avg: f64,
    #[arg(long, default_value_t = analytics::DEFAULT_VISUAL_TOKENS)]
    dv: f64,
    /// Sweep `s1,s2,...xe1,e2,...` (`×` also accepted).
    #[arg(long, conflicts_with = "table4")]
    grid: Option<String>,
    /// Sweep the seven published ablation settings.
    #[arg(long)]
    table4: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output tensor file.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the block-boundary report (stdout if absent).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VideoArgs {
    #[arg(long, default_value_t = 2)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    sentences: usize,
    /// Seed of the synthetic video.
    #[arg(long, default_value_t = 0)]
    video_seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    video: VideoArgs,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Parameter group to hold fixed (repeatable).
    #[arg(long = "freeze")]
    frozen: Vec<ParamGroup>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TeacherKind {
    Random,
    #[value(name = "self")]
    SelfInitial,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    video: VideoArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = TeacherKind::Random)]
    teacher: TeacherKind,
    #[arg(long)]
    teacher_seed: Option<u64>,
    /// Also update the time encoder.
    #[arg(long)]
    train_time_encoder: bool,
    /// CSV destination (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GoldenCommand {
    /// Recompute every case and write its tensor file.
    Emit(GoldenArgs),
    /// Recompute every case and compare with the stored file.
    Verify(GoldenArgs),
}

#[derive(Args)]
struct GoldenArgs {
    /// Case list.
    #[arg(long, default_value = "golden/cases.ini")]
    cases: PathBuf,
    /// Directory of tensor files (defaults to the case list's directory).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    sentences: usize,
    #[arg(long, default_value_t = 16)]
    l_v: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    l_s_min: usize,
    #[arg(long, default_value_t = 4)]
    l_s_max: usize,
    #[arg(long, default_value_t = 1.0)]
    frame_step: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a subcommand that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            let divergence = err
                .downcast_ref::<SpaError>()
                .is_some_and(|e| matches!(e, SpaError::Divergence { .. }));
            ExitCode::from(if divergence { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<Status> {
    match &cli.command {
        Command::Ratio(args) => ratio(args),
        Command::Run(args) => match cli.precision {
            Precision::F32 => run::<f32>(cli, args),
            Precision::F64 => run::<f64>(cli, args),
        },
        Command::Gradcheck(args) => gradcheck(cli, args),
        Command::Fit(args) => fit(cli, args),
        Command::Golden(cmd) => golden_cmd(cmd),
        Command::Generate(args) => match cli.precision {
            Precision::F32 => generate::<f32>(cli, args),
            Precision::F64 => generate::<f64>(cli, args),
        },
    }
}

/// Config from `--config` (toy or default otherwise) with `--seed` applied.
fn load_config(cli: &Cli, fallback: CompressorConfig) -> anyhow::Result<CompressorConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            CompressorConfig::from_ini_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => fallback,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn ratio(args: &RatioArgs) -> anyhow::Result<Status> {
    let rows = if args.table4 {
        analytics::published_sweep()?
    } else if let Some(grid) = &args.grid {
        let (s, e) = analytics::parse_grid(grid)?;
        analytics::sweep(&s, &e, args.n_avg, args.dv)?
    } else {
        let input = RatioInput {
            s: args.s as f64,
            e: args.e as f64,
            n_avg: args.n_avg,
            d_v: args.dv,
        };
        if args.format == Format::Table {
            let r = analytics::compression_ratio(input)?;
            println!("S          {}", input.s);
            println!("E          {}", input.e);
            println!("N_avg      {}", input.n_avg);
            println!("D_v        {}", input.d_v);
            println!("ratio      {}  (exact {})", r.display_ratio(), r.ratio);
            println!("reduction  {}  (exact {})", r.display_reduction(), r.reduction_percent);
            return Ok(Status::Ok);
        }
        analytics::sweep(&[args.s], &[args.e], args.n_avg, args.dv)?
    };
    match args.format {
        Format::Table => print!("{}", analytics::render_table(&rows)),
        Format::Csv => analytics::write_csv(&rows, io::stdout().lock())?,
    }
    Ok(Status::Ok)
}

fn run<T: Scalar>(cli: &Cli, args: &RunArgs) -> anyhow::Result<Status> {
    let config = load_config(cli, CompressorConfig::default())?;
    let (frames, sentences) = manifest::load_video::<T>(&args.manifest)
        .with_context(|| format!("loading {}", args.manifest.display()))?;
    let model = SpaModel::<T>::new(&config)?;
    let out = model.forward(&frames, &sentences)?;
    golden::write_tensor(&args.out, out.flattened())
        .with_context(|| format!("writing {}", args.out.display()))?;

    let mut report = format!(
        "tokens {} (S {} + N {} x (1 + E {})), dim {}, mode {}, seed {}\n",
        out.token_count(),
        config.s,
        out.frame_count(),
        config.e,
        config.d,
        config.mode.as_str(),
        config.seed
    );
    for block in out.blocks() {
        report.push_str(&format!("{:<20} {:>7} {:>7}\n", block.label, block.start, block.end));
    }
    write_text(args.report.as_deref(), &report)?;
    Ok(Status::Ok)
}

fn write_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().lock().write_all(text.as_bytes())?),
    }
}

fn video_spec(config: &CompressorConfig, video: &VideoArgs) -> SyntheticVideoSpec {
    SyntheticVideoSpec::new(video.frames, video.sentences, config.l_v, config.d, video.video_seed)
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> anyhow::Result<Status> {
    if cli.precision != Precision::F64 {
        bail!("gradcheck runs in double precision only");
    }
    let config = load_config(cli, CompressorConfig::toy())?;
    let options = GradcheckOptions {
        tolerance: args.tolerance,
        step: args.step,
        frozen: args.frozen.clone(),
        ..Default::default()
    };
    let report = harness::gradcheck(&config, &video_spec(&config, &args.video), &options)?;
    println!("{report}");
    Ok(if report.passed() { Status::Ok } else { Status::CheckFailed })
}

fn fit(cli: &Cli, args: &FitArgs) -> anyhow::Result<Status> {
    if cli.precision != Precision::F64 {
        bail!("fit runs in double precision only");
    }
    let config = load_config(cli, CompressorConfig::toy())?;
    let defaults = FitConfig::default();
    let teacher = match args.teacher {
        TeacherKind::SelfInitial => Teacher::SelfInitial,
        TeacherKind::Random => match (args.teacher_seed, defaults.teacher) {
            (Some(seed), _) => Teacher::Random { seed },
            (None, t) => t,
        },
    };
    let fit_config = FitConfig {
        steps: args.steps,
        learning_rate: args.lr,
        teacher,
        frozen: if args.train_time_encoder { Vec::new() } else { defaults.frozen },
    };
    let result = harness::fit(&config, &video_spec(&config, &args.video), &fit_config)?;
    match &args.out {
        Some(p) => result.write_csv(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => result.write_csv(io::stdout().lock())?,
    }
    eprintln!(
        "loss {:.6e} -> {:.6e} ({:.4} of initial) over {} steps",
        result.initial_loss(),
        result.final_loss(),
        result.final_loss() / result.initial_loss(),
        args.steps
    );
    if result.frozen_digest_before != result.frozen_digest_after {
        eprintln!("frozen parameters changed");
        return Ok(Status::CheckFailed);
    }
    eprintln!("frozen groups unchanged (sha256 {})", result.frozen_digest_after);
    Ok(Status::Ok)
}

fn golden_cmd(cmd: &GoldenCommand) -> anyhow::Result<Status> {
    let args = match cmd {
        GoldenCommand::Emit(a) | GoldenCommand::Verify(a) => a,
    };
    let cases = load_cases(&args.cases).with_context(|| format!("loading {}", args.cases.display()))?;
    let dir = args
        .dir
        .clone()
        .unwrap_or_else(|| args.cases.parent().map(Path::to_path_buf).unwrap_or_default());
    match cmd {
        GoldenCommand::Emit(_) => {
            for path in harness::emit(&cases, &dir)? {
                println!("wrote {}", path.display());
            }
            Ok(Status::Ok)
        }
        GoldenCommand::Verify(_) => {
            let results = harness::verify(&cases, &dir)?;
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed();
            }
            println!("{} of {} cases match", results.iter().filter(|r| r.passed()).count(), results.len());
            Ok(if ok { Status::Ok } else { Status::CheckFailed })
        }
    }
}

fn generate<T: Scalar>(cli: &Cli, args: &GenerateArgs) -> anyhow::Result<Status> {
    let spec = SyntheticVideoSpec {
        l_s_min: args.l_s_min,
        l_s_max: args.l_s_max,
        frame_step: args.frame_step,
        ..SyntheticVideoSpec::new(args.frames, args.sentences, args.l_v, args.d, cli.seed.unwrap_or(0))
    };
    let (frames, sentences) = harness::generate::<T>(&spec)?;
    let path = manifest::write_video(&args.out, &frames, &sentences)?;
    println!("{}", path.display());
    Ok(Status::Ok)
}
