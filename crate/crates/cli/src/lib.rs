//! `eegfm` command line. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use toml::Value;

mod commands;
pub mod settings;

use settings::{parse_assignment, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

/// Library errors that can only come from the resolved settings are usage
/// errors; everything else (I/O, data, numerics) is a runtime failure.
impl From<eegfm::Error> for CliError {
    fn from(e: eegfm::Error) -> Self {
        use eegfm::Error as E;
        match e {
            E::ConfigInvalid(_)
            | E::InvalidBand(_)
            | E::OddEmbedDim(_)
            | E::InsufficientDim { .. }
            | E::InvalidWindow { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eegfm",
    version,
    about = "Cross-scale EEG encoder: preprocessing, pretraining, fine-tuning and benchmarks"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat dotted-key TOML file (e.g. `ssa.window = 5`); flags win over it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, masks and synthetic data
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any setting, e.g. `--set pretrain.lr=1e-3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and resample a recording directory into a prepared directory
    Preprocess(PreprocessArgs),
    /// Write planted-class synthetic recordings and a manifest
    GenSynthetic(GenSyntheticArgs),
    /// Masked-reconstruction pretraining
    Pretrain(PretrainArgs),
    /// Attach a task head and fine-tune
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on one split
    Eval(EvalArgs),
    /// Finite-difference check of every pretraining gradient
    Gradcheck(GradcheckArgs),
    /// Score-entry counts and wall-clock of dense, criss-cross and sparse attention
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Directory with manifest.csv and raw recordings
    #[arg(long)]
    input: PathBuf,
    /// Destination directory (created if missing)
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    band_lo: Option<f64>,
    #[arg(long)]
    band_hi: Option<f64>,
    /// Notch frequency in Hz; 0 disables
    #[arg(long)]
    notch: Option<f64>,
    /// Target sample rate in Hz
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    patch_len: Option<usize>,
}

#[derive(Debug, Args)]
struct GenSyntheticArgs {
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated 10-20 labels
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Recording length in seconds
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Dataset directory; synthetic recordings are generated when absent
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "runs/pretrain")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Dataset directory; synthetic recordings are generated when absent
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained checkpoint; random initialization when absent
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "runs/finetune")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// classification or regression
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Fine-tuned checkpoint (with a task head)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the metrics as JSON here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Finite-difference step
    #[arg(long)]
    eps: Option<f64>,
    /// central or five_point
    #[arg(long)]
    stencil: Option<String>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated CxN sizes, strictly increasing in C*N
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<String>>,
    /// Comma-separated subset of dense, criss_cross, ssa
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Collects `(dotted key, value)` overrides from optional flags.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put<T: Into<Value>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn put_usize(&mut self, key: &str, v: Option<usize>) {
        self.put(key, v.map(|v| v as i64));
    }

    fn put_list(&mut self, key: &str, v: Option<Vec<String>>) {
        self.put(
            key,
            v.map(|l| Value::Array(l.into_iter().map(Value::String).collect())),
        );
    }
}

fn flag_overrides(command: &Command) -> Overrides {
    let mut o = Overrides::default();
    match command {
        Command::Preprocess(a) => {
            o.put("preprocess.band_lo", a.band_lo);
            o.put("preprocess.band_hi", a.band_hi);
            o.put("preprocess.notch", a.notch);
            o.put("preprocess.rate", a.rate);
            o.put_usize("preprocess.patch_len", a.patch_len);
        }
        Command::GenSynthetic(a) => {
            o.put_list("synthetic.channels", a.channels.clone());
            o.put("synthetic.duration_s", a.duration);
            o.put("synthetic.sample_rate", a.sample_rate);
            o.put_usize("synthetic.classes", a.classes);
            o.put_usize("synthetic.train", a.train);
            o.put_usize("synthetic.val", a.val);
            o.put_usize("synthetic.test", a.test);
        }
        Command::Pretrain(a) => {
            o.put_usize("pretrain.steps", a.steps);
            o.put_usize("pretrain.epochs", a.epochs);
            o.put_usize("pretrain.batch_size", a.batch_size);
            o.put("pretrain.lr", a.lr);
        }
        Command::Finetune(a) => {
            o.put_usize("finetune.epochs", a.epochs);
            o.put_usize("finetune.batch_size", a.batch_size);
            o.put("finetune.lr", a.lr);
            o.put("finetune.task", a.task.clone());
            o.put_usize("finetune.classes", a.classes);
        }
        Command::Eval(_) => {}
        Command::Gradcheck(a) => {
            o.put("gradcheck.eps", a.eps);
            o.put("gradcheck.stencil", a.stencil.clone());
            o.put("gradcheck.tolerance", a.tolerance);
        }
        Command::Bench(a) => {
            o.put_list("bench.sizes", a.sizes.clone());
            o.put_list("bench.variants", a.variants.clone());
            o.put_usize("bench.d", a.d);
            o.put_usize("bench.window", a.window);
            o.put_usize("bench.repeats", a.repeats);
        }
    }
    o
}

fn resolve(cli: &Cli) -> Result<Settings, CliError> {
    let mut overrides = Vec::new();
    for text in &cli.common.set {
        overrides.push(parse_assignment(text)?);
    }
    overrides.extend(flag_overrides(&cli.command).0);
    if let Some(seed) = cli.common.seed {
        let seed = i64::try_from(seed)
            .map_err(|_| CliError::Usage(format!("--seed {seed} exceeds {}", i64::MAX)))?;
        overrides.push(("seed".into(), Value::Integer(seed)));
    }
    Settings::resolve(cli.common.config.as_deref(), &overrides)
}

fn execute(cli: &Cli, settings: &Settings) -> Result<(), CliError> {
    match &cli.command {
        Command::Preprocess(a) => commands::preprocess(settings, &a.input, &a.output),
        Command::GenSynthetic(a) => commands::gen_synthetic(settings, &a.output),
        Command::Pretrain(a) => commands::pretrain(settings, a.data.as_deref(), &a.out),
        Command::Finetune(a) => {
            commands::finetune(settings, a.data.as_deref(), a.checkpoint.as_deref(), &a.out)
        }
        Command::Eval(a) => {
            let split = a
                .split
                .parse()
                .map_err(|e: eegfm::Error| CliError::Usage(e.to_string()))?;
            commands::eval(
                settings,
                &a.checkpoint,
                a.data.as_deref(),
                split,
                a.out.as_deref(),
            )
        }
        Command::Gradcheck(a) => commands::gradcheck(settings, a.out.as_deref()),
        Command::Bench(a) => commands::bench(settings, a.out.as_deref()),
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .try_init();
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                // clap routes bare `eegfm` here; it is still a usage error
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging();
    let outcome = resolve(&cli).and_then(|settings| {
        log::info!(
            "resolved configuration:\n{}",
            settings.to_dotted().trim_end()
        );
        execute(&cli, &settings)
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `eegfm --help` for usage.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
