use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stllr_core::cost::{runtime_memory_audit, CostReport};
use stllr_core::data::{
    bin_events, bin_events_fixed, gen_pattern_task, gen_regression_task, BinMode, BinnedTensor, EventStream,
    PatternTask, RegressionTask, Sample,
};
use stllr_core::engine::LearningConfig;
use stllr_core::experiment::{cmd_ablate, cmd_train, parse_csv, plot_data, ExperimentConfig, SweepGrid};
use stllr_core::loss::{LossKind, Target};
use stllr_core::network::{LayerKind, LayerSpec, NetworkSpec, Weights};
use stllr_core::neuron::NeuronParams;
use stllr_core::psi::PsiKind;
use stllr_core::signal::SignalMode;
use stllr_core::verify::{verify, VerifyOptions};

/// Writes to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(s: &str) {
    use std::io::{ErrorKind, Write};
    if let Err(e) = std::io::stdout().lock().write_all(s.as_bytes()) {
        if e.kind() == ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(&format!($($arg)*)) };
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

#[derive(Parser)]
#[command(name = "stllr", version, about = "Train spiking networks with local eligibility traces")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `bin` and `plot`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config; writes epochs.csv and summary.json.
    Train,
    /// Sweep STDP and learning-signal settings over a grid.
    Ablate(AblateArgs),
    /// Memory and MAC counts for a layer stack.
    Cost(CostArgs),
    /// Run the self-check suite; exits non-zero on any failure.
    Verify(VerifyArgs),
    /// Bin an event CSV (`t_us,x,y,p`) into a frame tensor file.
    Bin(BinArgs),
    /// Generate a synthetic dataset as tensor files.
    Gen(GenArgs),
    /// Turn an epochs.csv into gnuplot data blocks.
    Plot(PlotArgs),
}

#[derive(Args)]
struct AblateArgs {
    /// Grid as JSON (`{"alpha_post": [-1, 0, 1], "psi": [...]}`).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alpha_post: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lambda_pre: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lambda_post: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    psi: Vec<PsiKind>,
    #[arg(long, value_delimiter = ',')]
    mode: Vec<SignalMode>,
}

#[derive(Args)]
struct CostArgs {
    /// Widths `N_0,...,N_L` including the input; defaults to the config's network.
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    /// Sequence length T.
    #[arg(long = "time-steps", short = 't')]
    time_steps: Option<usize>,
    /// Learning-signal onset T_l.
    #[arg(long)]
    onset: Option<usize>,
    /// Bytes per element for the byte columns.
    #[arg(long)]
    element_bytes: Option<usize>,
    /// Also run both engines once and report measured counts.
    #[arg(long)]
    audit: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller case counts for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Count,
    Binary,
}

#[derive(Args)]
struct BinArgs {
    /// Event CSV file.
    events: PathBuf,
    #[arg(long)]
    bins: usize,
    #[arg(long, value_enum, default_value = "binary")]
    mode: ModeArg,
    /// Fixed window width in microseconds instead of spanning the stream.
    #[arg(long)]
    bin_us: Option<u64>,
    /// Sensor size; defaults to the observed extent.
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
    #[arg(long)]
    label: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Pattern,
    Regression,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "pattern")]
    task: TaskArg,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    width: usize,
    #[arg(long = "time-steps", short = 't', default_value_t = 50)]
    time_steps: usize,
    #[arg(long, default_value_t = 250)]
    spikes: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 5)]
    test_per_class: usize,
    /// Regression only.
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Merged or per-seed epochs CSV.
    csv: PathBuf,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("this command needs --config PATH")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let summary = cmd_train(&cfg)?;
    outln!("train accuracy {}", summary.train_accuracy.percent());
    if let Some(t) = summary.test_accuracy {
        outln!("test accuracy  {}", t.percent());
    }
    outln!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut grid = match &args.grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        None => SweepGrid::default(),
    };
    grid.alpha_post.extend(&args.alpha_post);
    grid.lambda_pre.extend(&args.lambda_pre);
    grid.lambda_post.extend(&args.lambda_post);
    grid.psi.extend(&args.psi);
    grid.mode.extend(&args.mode);
    let summary = cmd_ablate(&cfg, &grid)?;
    out!("{}", summary.to_table());
    Ok(())
}

/// Dense spiking layers for every width but the last, which is a readout.
fn audit_network(widths: &[usize]) -> NetworkSpec {
    let p = NeuronParams::default();
    let last = widths.len() - 1;
    let layers = widths[1..]
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let kind = if i + 1 == last { LayerKind::Readout } else { LayerKind::Dense };
            LayerSpec::new(kind, w, p)
        })
        .collect();
    NetworkSpec::new(widths[0], layers)
}

fn cost(cli: &Cli, args: &CostArgs) -> Result<()> {
    let from_config = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let widths = if !args.widths.is_empty() {
        args.widths.clone()
    } else if let Some(c) = &from_config {
        c.network.widths()
    } else {
        bail!("give --widths N0,N1,... or --config PATH");
    };
    let t = args.time_steps.or(from_config.as_ref().map(|c| c.learning.time_steps)).context("give --time-steps T")?;
    let t_l = args.onset.or(from_config.as_ref().map(|c| c.learning.signal_onset)).unwrap_or(0);
    let mut report = CostReport::new(&widths, t, t_l)?;
    if let Some(b) = args.element_bytes {
        report = report.with_element_bytes(b);
    }
    if args.audit {
        let net = match &from_config {
            Some(c) if args.widths.is_empty() => c.network.clone(),
            _ => audit_network(&widths),
        };
        let data = gen_regression_task(&RegressionTask {
            input_width: widths[0],
            time_steps: t,
            num_samples: 1,
            density: 0.5,
            seed: cli.seed.unwrap_or(0),
        })?;
        let mut sample: Sample = data.train.into_iter().next().context("empty audit sample")?;
        sample.target = Target::Values(ndarray_zeros(net.output_width()));
        let learning = LearningConfig {
            mode: SignalMode::Bp,
            time_steps: t,
            signal_onset: t_l.min(t),
            learning_rate: 1e-3,
            stdp: Default::default(),
            loss: LossKind::Mse,
            optimizer: Default::default(),
        };
        let weights = Weights::init(&net, cli.seed.unwrap_or(0));
        report = report.with_audit(runtime_memory_audit(&net, &weights, &sample, &learning)?);
    }
    let json = report.to_json()?;
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cost.json"), &json)?;
    }
    if args.json {
        outln!("{json}");
    } else {
        out!("{}", report.to_text());
    }
    Ok(())
}

fn ndarray_zeros(n: usize) -> stllr_core::ndarray::Array1<f64> {
    stllr_core::ndarray::Array1::zeros(n)
}

fn run_verify(cli: &Cli, args: &VerifyArgs) -> Result<bool> {
    let mut opts = if args.quick {
        VerifyOptions { eligibility_cases: 200, bptt_instances: 20, fd_nets: 3, fd_coords: 100, seed: 0 }
    } else {
        VerifyOptions::default()
    };
    if let Some(seed) = cli.seed {
        opts.seed = seed;
    }
    let report = verify(&opts)?;
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if args.json {
        outln!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        out!("{}", report.to_text());
    }
    Ok(report.passed())
}

fn bin(cli: &Cli, args: &BinArgs) -> Result<()> {
    let dims = args.width.zip(args.height);
    let stream =
        EventStream::load_csv(&args.events, dims).with_context(|| format!("reading {}", args.events.display()))?;
    let mode = match args.mode {
        ModeArg::Count => BinMode::Count,
        ModeArg::Binary => BinMode::Binary,
    };
    let mut tensor = match args.bin_us {
        Some(us) => bin_events_fixed(&stream, us, args.bins, mode)?,
        None => bin_events(&stream, args.bins, mode)?,
    };
    tensor.label = args.label;
    let out = cli.out.clone().unwrap_or_else(|| args.events.with_extension("bin"));
    tensor.save(&out)?;
    outln!(
        "{} events -> {:?} ({:.3} ms bins) -> {}",
        stream.events.len(),
        tensor.data.shape(),
        tensor.bin_ms,
        out.display()
    );
    Ok(())
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let label = match s.target {
            Target::Class(c) => Some(c),
            Target::Values(_) => None,
        };
        let tensor = BinnedTensor { data: s.frames.mapv(|v| v as f32).into_dyn(), label, bin_ms: 1.0 };
        tensor.save(&dir.join(format!("{i:06}.bin")))?;
    }
    Ok(())
}

fn gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.clone().context("gen needs --out DIR")?;
    match args.task {
        TaskArg::Pattern => {
            let task = PatternTask {
                classes: args.classes,
                width: args.width,
                time_steps: args.time_steps,
                spikes_per_pattern: args.spikes,
                noise_flip_prob: args.noise,
                train_per_class: args.train_per_class,
                test_per_class: args.test_per_class,
                seed,
            };
            let data = gen_pattern_task(&task)?;
            write_split(&out.join("train"), &data.train)?;
            write_split(&out.join("test"), &data.test)?;
            fs::write(out.join("task.json"), serde_json::to_string_pretty(&task)?)?;
            outln!("{} train / {} test samples -> {}", data.train.len(), data.test.len(), out.display());
        }
        TaskArg::Regression => {
            let task = RegressionTask {
                input_width: args.width,
                time_steps: args.time_steps,
                num_samples: args.samples,
                density: 0.5,
                seed,
            };
            let data = gen_regression_task(&task)?;
            fs::create_dir_all(&out)?;
            let rows: Vec<_> = data
                .train
                .iter()
                .map(|s| {
                    let target = match &s.target {
                        Target::Values(v) => v.to_vec(),
                        Target::Class(c) => vec![*c as f64],
                    };
                    serde_json::json!({ "input": s.frames.row(0).to_vec(), "target": target })
                })
                .collect();
            fs::write(out.join("regression.json"), serde_json::to_string(&rows)?)?;
            fs::write(out.join("task.json"), serde_json::to_string_pretty(&task)?)?;
            outln!("{} samples -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn plot(cli: &Cli, args: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.csv).with_context(|| format!("reading {}", args.csv.display()))?;
    let data = plot_data(&parse_csv(&text)?);
    match &cli.out {
        Some(p) => fs::write(p, data)?,
        None => out!("{data}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => train(cli)?,
        Command::Ablate(a) => ablate(cli, a)?,
        Command::Cost(a) => cost(cli, a)?,
        Command::Verify(a) => return run_verify(cli, a),
        Command::Bin(a) => bin(cli, a)?,
        Command::Gen(a) => gen(cli, a)?,
        Command::Plot(a) => plot(cli, a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
