//! Command-line interface: `train`, `eval`, `count`, `analyze`, `gradcheck`.
//!
//! Flags are folded into the same key/value map a `--config` file produces, so
//! both paths share validation. Exit codes: 0 success, 1 other failure,
//! 2 configuration error, 3 data error, 4 divergence, 5 gradient-check failure.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accounting;
use crate::analysis;
use crate::attention::AttentionKind;
use crate::backbone::Network;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigMap, DataSource, RunConfig};
use crate::data::{self, Dataset};
use crate::error::Error;
use crate::gradcheck::{self, Faults, Scope};
use crate::rng::Rng;
use crate::train::{self, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Seed offset of the held-out synthetic split.
const SYNTH_VAL_STREAM: u64 = 0x5EED;

#[derive(Debug, Parser)]
#[command(
    name = "lct",
    version,
    about = "Channel attention (LCT, SE, SE+) on residual networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in network: resnet-mini, resnet50, resnet101.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "KIND", value_parser = ["none", "se", "lct", "se+"])]
    pub attention: Option<String>,
    /// Group count for normalisation (clamped to the channel count).
    #[arg(long, value_name = "G")]
    pub groups: Option<usize>,
    /// SE reduction ratio.
    #[arg(long, value_name = "R")]
    pub reduction: Option<usize>,
    /// Initial LCT affine parameters.
    #[arg(long, value_name = "MODE", value_parser = ["w0_b1", "w0_b0", "w1_b0"])]
    pub init: Option<String>,
    #[arg(long)]
    pub skip_normalize: bool,
    #[arg(long)]
    pub skip_transform: bool,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoints plus a per-epoch log.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// CIFAR-10 binary file or directory; synthetic data when omitted.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (top-1, top-5, loss).
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and multiply-add counts.
    Count {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-block context and attention statistics as CSV.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Blocks: all, first-of-each-stage, or ids like stage1.block1,stage3.block2.
        #[arg(long, value_name = "S")]
        scope: Option<String>,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long, value_name = "S", default_value = "layers", value_parser = ["layers", "blocks", "end2end"])]
        scope: String,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

/// Exit code for a library error raised outside data loading.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. }
        | Error::InvalidGroups { .. }
        | Error::InvalidGeometry { .. }
        | Error::CheckpointMismatch(_)
        | Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::ChecksumMismatch { .. }
        | Error::EmptySelection
        | Error::DuplicateParam(_) => EXIT_CONFIG,
        Error::TruncatedRecord { .. } | Error::LabelOutOfRange { .. } => EXIT_DATA,
        Error::Diverged { .. } | Error::NumericOverflow(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(exit_code(&e), e.to_string())
    }
}

fn data_error(e: Error) -> CliError {
    let code = match e {
        Error::Io { .. } => EXIT_DATA,
        ref other => exit_code(other),
    };
    CliError::new(code, e.to_string())
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

struct Resolved {
    cfg: RunConfig,
    explicit_out: bool,
}

fn resolve(model: &ModelArgs, extra: &[(&str, Option<String>)]) -> CliResult<Resolved> {
    let mut map = match &model.config {
        Some(p) => ConfigMap::load(p).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?,
        None => ConfigMap::default(),
    };
    let explicit_out = model.out.is_some() || map.get("out").is_some();
    let flags: [(&str, Option<String>); 9] = [
        ("preset", model.preset.clone()),
        ("attention.kind", model.attention.clone()),
        ("attention.groups", model.groups.map(|v| v.to_string())),
        (
            "attention.reduction",
            model.reduction.map(|v| v.to_string()),
        ),
        ("attention.init", model.init.clone()),
        (
            "attention.skip_normalize",
            model.skip_normalize.then(|| "true".into()),
        ),
        (
            "attention.skip_transform",
            model.skip_transform.then(|| "true".into()),
        ),
        ("seed", model.seed.map(|v| v.to_string())),
        ("out", model.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in flags.into_iter().chain(extra.iter().cloned()) {
        if let Some(v) = value {
            if key == "data.path" {
                // a flag-supplied path replaces any configured data source
                map.set("data.source", "cifar10");
            }
            map.set(key, v);
        }
    }
    let cfg = RunConfig::from_map(map)?;
    Ok(Resolved { cfg, explicit_out })
}

fn path_arg(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Training and held-out splits for `cfg`.
fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    let (train, val) = match &cfg.data {
        DataSource::Synth {
            seed,
            n,
            classes,
            val_n,
        } => {
            let train = data::synth_dataset(*seed, *n, *classes)?;
            let val = if *val_n > 0 {
                Some(data::synth_split(
                    seed.wrapping_add(SYNTH_VAL_STREAM),
                    *val_n,
                    &train,
                )?)
            } else {
                None
            };
            (train, val)
        }
        DataSource::Cifar10 { path } => {
            if !path.exists() {
                return Err(CliError::new(
                    EXIT_DATA,
                    format!("data path not found: {}", path.display()),
                ));
            }
            let (files, test) = data::cifar10_files(path).map_err(data_error)?;
            let train = data::load_cifar10_binary(&files).map_err(data_error)?;
            let val = match test {
                Some(t) => Some(
                    data::load_cifar10_binary_with_stats(&[t], &train.stats).map_err(data_error)?,
                ),
                None => None,
            };
            (train, val)
        }
    };
    let geo = train.geometry();
    if geo != cfg.spec.input || train.classes() > cfg.spec.classes {
        return Err(CliError::new(
            EXIT_CONFIG,
            format!(
                "data ({:?}, {} classes) does not fit network `{}` ({:?}, {} classes)",
                geo,
                train.classes(),
                cfg.spec.name,
                cfg.spec.input,
                cfg.spec.classes
            ),
        ));
    }
    Ok((train, val))
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot create {}: {e}", dir.display())))
}

fn check_exists(p: &Option<PathBuf>, code: i32, what: &str) -> CliResult {
    match p {
        Some(p) if !p.exists() => Err(CliError::new(
            code,
            format!("{what} not found: {}", p.display()),
        )),
        _ => Ok(()),
    }
}

fn build(cfg: &RunConfig) -> CliResult<Network<f32>> {
    Ok(Network::build(&cfg.spec, &mut Rng::new(cfg.seed))?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
}

fn cmd_train(
    model: &ModelArgs,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    out: &mut dyn Write,
) -> CliResult {
    let r = resolve(
        model,
        &[
            ("data.path", path_arg(data)),
            ("checkpoint", path_arg(checkpoint)),
        ],
    )?;
    let cfg = r.cfg;
    check_exists(&cfg.checkpoint, EXIT_CONFIG, "checkpoint")?;
    if let DataSource::Cifar10 { path } = &cfg.data {
        check_exists(&Some(path.clone()), EXIT_DATA, "data path")?;
    }
    ensure_dir(&cfg.out)?;
    let (train_set, val_set) = load_data(&cfg)?;
    let net = build(&cfg)?;
    let mut trainer = match &cfg.checkpoint {
        Some(p) => Trainer::restore(net, cfg.train.clone(), &load_checkpoint(p)?)?,
        None => Trainer::new(net, cfg.train.clone())?,
    };
    let log_path = cfg.out.join("train_log.csv");
    let mut best = f64::NEG_INFINITY;
    while !trainer.finished() {
        let rec = match trainer.run_epoch(&train_set, val_set.as_ref()) {
            Ok(rec) => rec,
            Err(e) => {
                trainer.log.write_csv(&log_path)?;
                return Err(e.into());
            }
        };
        let _ = writeln!(
            out,
            "epoch {:>3}  lr {:.5}  loss {:.4}  train_top1 {:.4}{}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.train_top1,
            rec.val_top1
                .map_or_else(String::new, |v| format!("  val_top1 {v:.4}"))
        );
        let score = rec.val_top1.unwrap_or(rec.train_top1);
        if score > best {
            best = score;
            save_checkpoint(&cfg.out.join("best.ckpt"), &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&cfg.out.join("final.ckpt"), &trainer.checkpoint())?;
    trainer.log.write_csv(&log_path)?;
    let _ = writeln!(out, "wrote {}", cfg.out.display());
    Ok(())
}

fn cmd_eval(
    model: &ModelArgs,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    out: &mut dyn Write,
) -> CliResult {
    let r = resolve(
        model,
        &[
            ("data.path", path_arg(data)),
            ("checkpoint", path_arg(checkpoint)),
        ],
    )?;
    let cfg = r.cfg;
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::new(EXIT_CONFIG, "eval needs --checkpoint"))?;
    check_exists(&Some(ckpt_path.clone()), EXIT_CONFIG, "checkpoint")?;
    let (train_set, val_set) = load_data(&cfg)?;
    let mut net = build(&cfg)?;
    train::load_model_tensors(&mut net, &load_checkpoint(&ckpt_path)?)?;
    let (name, set) = match &val_set {
        Some(v) => ("held-out", v),
        None => ("train", &train_set),
    };
    let report = train::evaluate(&mut net, set, cfg.train.batch_size)?;
    let _ = writeln!(
        out,
        "{name} split ({} samples): top1 {:.4}  top5 {:.4}  loss {:.6}",
        set.len(),
        report.top1,
        report.top5,
        report.loss
    );
    Ok(())
}

fn cmd_count(model: &ModelArgs, out: &mut dyn Write) -> CliResult {
    let r = resolve(model, &[])?;
    let report = accounting::cost_report(&r.cfg.spec)?;
    let _ = write!(out, "{}", report.to_text());
    if r.explicit_out {
        ensure_dir(&r.cfg.out)?;
        let path = r.cfg.out.join("costs.csv");
        std::fs::write(&path, report.to_csv()).map_err(io_err(&path))?;
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(())
}

fn cmd_analyze(
    model: &ModelArgs,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    scope: &Option<String>,
    out: &mut dyn Write,
) -> CliResult {
    let r = resolve(
        model,
        &[
            ("data.path", path_arg(data)),
            ("checkpoint", path_arg(checkpoint)),
            ("analyze.blocks", scope.clone()),
        ],
    )?;
    let cfg = r.cfg;
    check_exists(&cfg.checkpoint, EXIT_CONFIG, "checkpoint")?;
    let mut net = build(&cfg)?;
    if let Some(p) = &cfg.checkpoint {
        train::load_model_tensors(&mut net, &load_checkpoint(p)?)?;
    }
    if cfg.spec.attention.kind == AttentionKind::None {
        let _ = writeln!(out, "no attention blocks in `{}`", cfg.spec.name);
        return Ok(());
    }
    let (train_set, val_set) = load_data(&cfg)?;
    let set = val_set.as_ref().unwrap_or(&train_set);
    let stats = analysis::collect(&mut net, set, &cfg.analyze_blocks, cfg.train.batch_size)?;
    ensure_dir(&cfg.out)?;
    let paths = analysis::export_stats(&stats, &cfg.out)?;
    let summary = analysis::summary(&stats);
    let summary_path = cfg.out.join("summary.csv");
    std::fs::write(&summary_path, &summary).map_err(io_err(&summary_path))?;
    let _ = write!(out, "{summary}");
    if let Some(deepest) = stats.last() {
        let verdict = match deepest.spearman_rho {
            Some(r) if r < 0.0 => "negative: larger |context| goes with smaller attention",
            Some(_) => "non-negative",
            None => "undefined",
        };
        let _ = writeln!(
            out,
            "deepest block {}: rank correlation {verdict}",
            deepest.id
        );
    }
    let _ = writeln!(
        out,
        "wrote {} block files to {}",
        paths.len(),
        cfg.out.display()
    );
    Ok(())
}

/// Runs the finite-difference suite for `scope`; a failing unit maps to exit
/// code 5 naming the unit and its worst coordinate.
pub fn cmd_gradcheck(scope: Scope, faults: Faults, out: &mut dyn Write) -> CliResult {
    let reports = gradcheck::run(scope, faults)?;
    for r in &reports {
        let _ = writeln!(out, "{r}");
    }
    if let Some(f) = gradcheck::first_failure(&reports) {
        return Err(CliError::new(
            EXIT_GRADCHECK,
            format!(
                "gradient check failed: unit `{}`, max relative error {:.3e} at {}",
                f.unit, f.max_rel_error, f.worst
            ),
        ));
    }
    let _ = writeln!(out, "{} units passed", reports.len());
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Train {
            model,
            data,
            checkpoint,
        } => cmd_train(model, data, checkpoint, out),
        Command::Eval {
            model,
            data,
            checkpoint,
        } => cmd_eval(model, data, checkpoint, out),
        Command::Count { model } => cmd_count(model, out),
        Command::Analyze {
            model,
            data,
            checkpoint,
            scope,
        } => cmd_analyze(model, data, checkpoint, scope, out),
        Command::Gradcheck { scope } => {
            let scope: Scope = scope
                .parse()
                .map_err(|e: String| CliError::new(EXIT_CONFIG, e))?;
            cmd_gradcheck(scope, Faults::default(), out)
        }
    }
}

/// Worker count from `LCT_THREADS`, if set.
pub fn thread_limit() -> CliResult<Option<usize>> {
    match std::env::var("LCT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::new(
                EXIT_CONFIG,
                format!("LCT_THREADS must be a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Parses `args`, runs the command inside a pool capped by `LCT_THREADS`, and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let threads = match thread_limit() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(|| execute(&cli, out)),
        Err(e) => Err(CliError::new(EXIT_FAILURE, format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("lct").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn count_resnet50_prints_totals() {
        let (code, out) = run_capture(&["count", "--preset", "resnet50"]);
        assert_eq!(code, 0);
        assert!(out.contains("25557032"), "{out}");
        assert!(out.contains("mac-v1"));
    }

    #[test]
    fn bad_flags_and_config_are_exit_2() {
        assert_eq!(run_capture(&["count", "--bogus"]).0, EXIT_CONFIG);
        assert_eq!(
            run_capture(&["count", "--attention", "cbam"]).0,
            EXIT_CONFIG
        );
        assert_eq!(run_capture(&["count", "--preset", "vgg"]).0, EXIT_CONFIG);
        assert_eq!(
            run_capture(&["count", "--config", "/nonexistent/run.cfg"]).0,
            EXIT_CONFIG
        );
        assert_eq!(
            run_capture(&["count", "--attention", "lct", "--groups", "3"]).0,
            EXIT_CONFIG
        );
    }

    #[test]
    fn missing_data_is_exit_3_naming_path() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let mut buf = Vec::new();
        let cli = Cli::try_parse_from([
            "lct",
            "train",
            "--data",
            "/no/such/cifar",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let err = execute(&cli, &mut buf).unwrap_err();
        assert_eq!(err.code, EXIT_DATA);
        assert!(err.message.contains("/no/such/cifar"));
    }

    #[test]
    fn help_lists_every_flag() {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let help = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        for flag in [
            "--config",
            "--preset",
            "--attention",
            "--groups",
            "--reduction",
            "--init",
            "--skip-normalize",
            "--skip-transform",
            "--seed",
            "--out",
            "--checkpoint",
            "--data",
        ] {
            assert!(help.contains(flag), "{flag} missing from help");
        }
    }
}
