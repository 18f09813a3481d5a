//! Command-line entry points: `train`, `sample`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort,
//! 1 anything else.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{run_preset, summarize, Preset};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::sampler::{DecodeMode, Generator, SampleConfig, StepMode};
use crate::trainer::{fit, LogRecord, Observer, TrainState};

pub const METRICS_HEADER: &str = "# vqlcmd-metrics 1";
pub const SAMPLES_HEADER: &str = "# vqlcmd-samples 1";
pub const ABLATE_HEADER: &str = "# vqlcmd-ablate 1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vqlcmd", version, about = "Latent diffusion over jointly learned embeddings of discrete token sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a config file (or resume a checkpoint).
    Train(TrainArgs),
    /// Draw token sequences from a checkpoint.
    Sample(SampleArgs),
    /// Score samples from a checkpoint against its synthetic spec.
    Eval(EvalArgs),
    /// Run an ablation grid and report per-run metrics.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Continue from this checkpoint; `--steps` is then the total target.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shift: Option<f64>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SamplingFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mode: Option<StepMode>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    decode: Option<DecodeMode>,
    /// Use the EMA weights and table.
    #[arg(long)]
    ema: bool,
}

impl SamplingFlags {
    fn apply(&self, base: &SampleConfig) -> Result<SampleConfig> {
        let cfg = SampleConfig {
            steps: self.steps.unwrap_or(base.steps),
            mode: self.mode.unwrap_or(base.mode),
            guidance: self.guidance.unwrap_or(base.guidance),
            decode: self.decode.unwrap_or(base.decode),
            seed: self.seed.unwrap_or(base.seed),
            use_ema: self.ema || base.use_ema,
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    num_samples: usize,
    #[command(flatten)]
    flags: SamplingFlags,
    /// Write samples here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    num_samples: usize,
    #[command(flatten)]
    flags: SamplingFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    preset: Preset,
    /// Base run; defaults to the desk config for the preset's data.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    num_samples: usize,
    #[arg(long, default_value_t = 50)]
    sample_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

macro_rules! clap_value_enum {
    ($t:ty) => {
        impl clap::builder::ValueParserFactory for $t {
            type Parser = clap::builder::ValueParser;
            fn value_parser() -> Self::Parser {
                clap::builder::ValueParser::new(|s: &str| s.parse::<$t>().map_err(|e| e.to_string()))
            }
        }
    };
}

clap_value_enum!(StepMode);
clap_value_enum!(DecodeMode);
clap_value_enum!(Preset);

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_numeric() => EXIT_NUMERIC,
        Error::Config(_) | Error::Format(_) => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

struct RunObserver {
    log: BufWriter<File>,
    dir: PathBuf,
}

impl Observer<f32> for RunObserver {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        writeln!(self.log, "{record}")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>) -> Result<()> {
        self.log.flush()?;
        state.save(&self.dir.join(format!("ckpt-{:08}.bin", state.step)))
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut state = match (&a.config, &a.resume) {
        (_, Some(ckpt)) => TrainState::<f32>::load(ckpt)?,
        (Some(cfg), None) => {
            let mut cfg = RunConfig::load(cfg)?;
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            if let Some(shift) = a.shift {
                cfg.schedule.shift = shift;
                cfg.schedule.validate()?;
            }
            TrainState::new(cfg)?
        }
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
    };
    if let Some(steps) = a.steps {
        state.config.train.steps = steps;
    }
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("metrics.log");
    let fresh = a.resume.is_none() || !log_path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(file, "{METRICS_HEADER}")?;
    }
    let mut obs = RunObserver {
        log: BufWriter::new(file),
        dir: a.out.clone(),
    };
    let spec = state.config.data.build()?;
    let result = fit(&mut state, &spec, &mut obs);
    obs.log.flush()?;
    result?;
    let final_path = a.out.join("final.ckpt");
    state.save(&final_path)?;
    println!("step={} checkpoint={}", state.step, final_path.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let state = TrainState::<f32>::load(&a.ckpt)?;
    let cfg = a.flags.apply(&state.config.sample)?;
    let gen = Generator {
        model: &state.model,
        params: if cfg.use_ema { &state.ema } else { &state.model.params },
        table: if cfg.use_ema { &state.codebook.ema_table } else { &state.codebook.table },
        schedule: state.schedule(),
    };
    let out = gen.sample(a.num_samples, a.flags.class, &cfg)?;
    let mut w = output(a.out.as_deref())?;
    let m = &state.config.model;
    writeln!(w, "{SAMPLES_HEADER} seq_len={} categories={}", m.seq_len, m.categories)?;
    for seq in out.tokens {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a sample dump back into sequences.
pub fn read_samples(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with(SAMPLES_HEADER) => {}
        _ => return Err(Error::Format(format!("sample dump must start with {SAMPLES_HEADER:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad token id {v:?}"))))
                .collect()
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = TrainState::<f32>::load(&a.ckpt)?;
    let cfg = a.flags.apply(&state.config.sample)?;
    let spec = state.config.data.build()?;
    let report = evaluate(&state, &spec, a.num_samples, &cfg, a.flags.class)?;
    let mut w = output(a.out.as_deref())?;
    w.write_all(report.to_text().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_data("desk", a.preset.default_data(), 16)?,
    };
    if let Some(steps) = a.steps {
        base.train.steps = steps;
    }
    if a.seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let sample = SampleConfig {
        steps: a.sample_steps,
        ..base.sample.clone()
    };
    sample.validate()?;
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{ABLATE_HEADER} preset={}", a.preset)?;
    let mut write_err = None;
    let rows = run_preset(a.preset, &base, &a.seeds, a.num_samples, &sample, |row| {
        if let Err(e) = writeln!(w, "{row}").and_then(|_| w.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    for (run, tv, ratio) in summarize(&rows) {
        writeln!(w, "summary run={run} mean_tv_marginal={tv} mean_collapse_ratio={ratio}")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
