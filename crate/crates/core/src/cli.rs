//! Command-line front end: `simulate`, `train`, `separate`, `evaluate`,
//! `analyze` and `count`.
//!
//! Every subcommand reads an optional TOML file with `[model]`, `[data]` and
//! `[train]` tables (see [`RunConfig`]), applies `--set section.key=value`
//! overrides and echoes the effective configuration as `run.toml`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{capture_set, offset_study, write_block_stats};
use crate::dtcn::{macs_for_config, Checkpoint, DtcnConfig, ParamTally, SeparatorModel};
use crate::error::{Error, Result};
use crate::frames::{read_wav, write_wav};
use crate::mixsim::{derive_seed, simulate_manifest, Manifest, SimConfig};
use crate::trainer::{evaluate, load_checkpoint, train, RunPaths, TrainConfig, TrainState};

/// Contents of a configuration file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and simulated data.
    pub seed: u64,
    /// Mixtures in the evaluation set `train` simulates when no eval manifest is given.
    pub eval_count: usize,
    pub model: DtcnConfig,
    pub data: SimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_count: 50,
            model: DtcnConfig::toy(),
            data: SimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `file` (if any), then applies `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.eval_count == 0 {
            return Err(Error::Config("eval_count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "dtcn",
    version,
    about = "Deformable temporal convolutional networks for speech separation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file with [model], [data] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a mixture manifest and, optionally, its WAV files.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of mixtures (overrides data.count).
        #[arg(long)]
        count: Option<usize>,
        /// Also write mixture and direct-path target WAVs.
        #[arg(long)]
        wav: bool,
    },
    /// Train a separator, writing best.ckpt, last.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Training manifest; simulated from [data] when absent.
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        /// Evaluation manifest; simulated from [data] when absent.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Separate a WAV file into `<stem>_spk<c>.wav`, one per speaker.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-example SI-SDR and improvement over a manifest, written to eval.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offset statistics per block and scatter tables for the block with the
    /// highest offset variance.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and MAC counts of the [model] configuration and its variants.
    Count {
        #[command(flatten)]
        common: Common,
        /// Input length in samples for the MAC count.
        #[arg(long, default_value_t = 8000)]
        input_len: usize,
        /// Also write count.csv and run.toml here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Simulate {
            common,
            out,
            count,
            wav,
        } => {
            let mut common = common;
            if let Some(c) = count {
                common.overrides.push(format!("data.count={c}"));
            }
            let cfg = common.resolve().map_err(usage)?;
            Ok(cmd_simulate(&cfg, &out, wav)?)
        }
        Command::Train {
            common,
            out,
            train_manifest,
            eval_manifest,
            resume,
        } => {
            let cfg = common.resolve().map_err(usage)?;
            Ok(cmd_train(
                &cfg,
                &out,
                train_manifest.as_deref(),
                eval_manifest.as_deref(),
                resume,
            )?)
        }
        Command::Separate {
            common,
            checkpoint,
            input,
            out,
        } => {
            let cfg = common.resolve().map_err(usage)?;
            Ok(cmd_separate(&cfg, &checkpoint, &input, &out)?)
        }
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = common.resolve().map_err(usage)?;
            Ok(cmd_evaluate(&cfg, &checkpoint, &manifest, &out)?)
        }
        Command::Analyze {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = common.resolve().map_err(usage)?;
            Ok(cmd_analyze(&cfg, &checkpoint, &manifest, &out)?)
        }
        Command::Count { common, input_len, out } => {
            let cfg = common.resolve().map_err(usage)?;
            if input_len == 0 {
                return Err(Failure::Usage("--input-len must be positive".into()));
            }
            Ok(cmd_count(&cfg, input_len, out.as_deref())?)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `manifest.txt` and, with `wav`, `wav/<id>_mix.wav` and
/// `wav/<id>_s<c>.wav` direct-path targets.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, wav: bool) -> Result<()> {
    create_dir(out)?;
    cfg.echo(out)?;
    let manifest = simulate_manifest(&cfg.data, cfg.seed)?;
    manifest.save(&out.join("manifest.txt"))?;
    if wav {
        let dir = out.join("wav");
        create_dir(&dir)?;
        for (spec, ex) in manifest.entries.iter().zip(manifest.realize_all()?) {
            write_wav(&dir.join(format!("{}_mix.wav", spec.id)), &ex.mixture)?;
            for (c, t) in ex.direct_targets.iter().enumerate() {
                write_wav(&dir.join(format!("{}_s{}.wav", spec.id, c + 1)), t)?;
            }
        }
    }
    println!(
        "wrote {} mixtures to {}",
        manifest.len(),
        out.join("manifest.txt").display()
    );
    Ok(())
}

fn eval_data(cfg: &RunConfig) -> SimConfig {
    SimConfig {
        count: cfg.eval_count,
        ..cfg.data.clone()
    }
}

pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    train_manifest: Option<&Path>,
    eval_manifest: Option<&Path>,
    resume: bool,
) -> Result<()> {
    create_dir(out)?;
    cfg.echo(out)?;
    let train_set = match train_manifest {
        Some(p) => Manifest::load(p)?,
        None => simulate_manifest(&cfg.data, cfg.seed)?,
    };
    let eval_set = match eval_manifest {
        Some(p) => Manifest::load(p)?,
        None => simulate_manifest(&eval_data(cfg), derive_seed(cfg.seed, 1))?,
    };
    let paths = RunPaths::new(out);
    let mut state = if resume {
        let s = load_checkpoint(&paths.last())?;
        if s.model.config != cfg.model {
            return Err(Error::Config(format!(
                "{} was trained with a different [model] configuration",
                paths.last().display()
            )));
        }
        println!("resuming at epoch {} (step {})", s.epoch, s.step);
        s
    } else {
        for p in [paths.log(), paths.best(), paths.last()] {
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        TrainState::new(&cfg.model, cfg.seed, cfg.train.learning_rate)?
    };
    let eval = eval_set.realize_all()?;
    let outcome = train(&mut state, &train_set, &eval, &cfg.train, Some(&paths))?;
    for summary in &outcome.epochs {
        let done = summary.epoch + 1;
        let mut line = format!("epoch {done:>3}  train loss {:>8.3}", summary.mean_loss);
        if let Some((_, r)) = outcome.evaluations.iter().find(|(e, _)| *e == done) {
            let _ = write!(
                line,
                "  eval loss {:>8.3}  eval dSISDR {:>7.3} dB",
                r.mean_loss, r.mean_delta
            );
        }
        println!("{line}");
    }
    println!(
        "best eval dSISDR {:.3} dB; checkpoints in {}",
        state.best_delta,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<SeparatorModel> {
    SeparatorModel::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn cmd_separate(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = read_wav(input)?;
    let estimates = model.separate(&x)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let stem = input
        .file_stem()
        .map_or("output".into(), |s| s.to_string_lossy().into_owned());
    for (c, est) in estimates.iter().enumerate() {
        let path = out.join(format!("{stem}_spk{}.wav", c + 1));
        write_wav(&path, est)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn check_compatible(model: &SeparatorModel, manifest: &Manifest) -> Result<()> {
    let (m, d) = (&model.config, &manifest.config);
    if m.speakers != d.speakers || m.sample_rate != d.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "model separates {} speakers at {} Hz, manifest has {} speakers at {} Hz",
            m.speakers, m.sample_rate, d.speakers, d.sample_rate
        )));
    }
    if manifest.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    check_compatible(&model, &manifest)?;
    let report = evaluate(&model, &manifest.realize_all()?)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let path = out.join("eval.csv");
    report.write_csv(&path)?;
    println!(
        "{} examples  mean dSISDR {:.3} dB  (std {:.3}, min {:.3}, max {:.3})  -> {}",
        report.rows.len(),
        report.mean_delta,
        report.std_delta,
        report.min_delta,
        report.max_delta,
        path.display()
    );
    Ok(())
}

/// Writes `block_stats.csv` and `scatter_<p>_<q>.csv` for the selected block.
pub fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    if !model.config.deformable {
        return Err(Error::InvalidArgument(format!(
            "{} holds a non-deformable model; there are no offsets to analyze",
            checkpoint.display()
        )));
    }
    let manifest = Manifest::load(manifest)?;
    check_compatible(&model, &manifest)?;
    let examples = manifest.realize_all()?;
    let mixtures: Vec<_> = examples.iter().map(|e| &e.mixture).collect();
    let study = offset_study(&capture_set(&model, &mixtures)?)?;
    create_dir(out)?;
    cfg.echo(out)?;
    write_block_stats(&out.join("block_stats.csv"), &study.summary)?;
    let x = model.config.x;
    println!(
        "selected block {} (repeat {}, block {} of the stack; numbered from 1)",
        study.selected + 1,
        study.selected / x + 1,
        study.selected % x + 1
    );
    for s in &study.scatters {
        let path = out.join(format!("scatter_{}_{}.csv", s.p + 1, s.q + 1));
        s.write_csv(&path)?;
        println!(
            "rho(tau_{}, tau_{}) = {:+.4}  slope {:+.4}  -> {}",
            s.p + 1,
            s.q + 1,
            s.rho,
            s.slope,
            path.display()
        );
    }
    Ok(())
}

/// Parameter and MAC counts for the eight deformable / shared / skip variants.
pub fn count_report(model: &DtcnConfig, input_len: usize) -> Vec<(String, usize, u64)> {
    let mut rows = Vec::new();
    for deformable in [false, true] {
        for shared in [false, true] {
            for skip in [false, true] {
                let c = model
                    .with_deformable(deformable)
                    .with_shared_weights(shared)
                    .with_skip_connections(skip);
                let mut name = String::from(if deformable { "DTCN" } else { "TCN" });
                if shared {
                    name.push_str("+SW");
                }
                if skip {
                    name.push_str("+SC");
                }
                rows.push((name, ParamTally::new(&c).total(), macs_for_config(&c, input_len)));
            }
        }
    }
    rows
}

pub fn cmd_count(cfg: &RunConfig, input_len: usize, out: Option<&Path>) -> Result<()> {
    let rows = count_report(&cfg.model, input_len);
    let mut text = String::new();
    let _ = writeln!(text, "{:<12} {:>12} {:>16}", "variant", "params", "MACs");
    for (name, p, m) in &rows {
        let _ = writeln!(text, "{name:<12} {p:>12} {m:>16}");
    }
    let mut stdout = std::io::stdout().lock();
    match out {
        Some(dir) => {
            let _ = stdout.write_all(text.as_bytes());
            create_dir(dir)?;
            cfg.echo(dir)?;
            let path = dir.join("count.csv");
            let mut csv = format!("variant,params,macs_{input_len}\n");
            for (name, p, m) in &rows {
                let _ = writeln!(csv, "{name},{p},{m}");
            }
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
        }
        None => {
            let _ = write!(text, "# effective configuration\n{}", cfg.to_toml());
            let _ = stdout.write_all(text.as_bytes());
            Ok(())
        }
    }
}
