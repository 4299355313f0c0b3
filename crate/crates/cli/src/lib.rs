//! Command-line front end: `gen`, `train`, `eval`, `gradcheck`, `inspect`.
//!
//! Exit codes: 0 on success, 1 on a domain error (one-line diagnostic on
//! stderr), 2 on a usage error.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use mmfuse::datamodel::{load_manifest, read_header, ModalityStream, STREAM_HEADER_LEN};
use mmfuse::evaluation::{
    aggregate_runs, evaluate_records, metrics_text, single_run_summary, summarize, write_metrics, write_predictions,
    write_window_predictions, Metrics, VoteResult,
};
use mmfuse::synthgen::generate_dataset;
use mmfuse::training::{grad_check, history_text, train, Checkpoint, GradCheckConfig, TrainOutcome};
use mmfuse::{DatasetManifest, Error, Model, ModalityDescriptor, Split};

pub use config::{load_config, parse_config, Config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmfuse", version, about = "Multi-modal temporal fusion for long multi-rate recordings")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "MMFUSE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides paths.output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the train split, validating on the val split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train R runs with seeds seed..seed+R-1 into run_<i> subdirectories.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints on the test split by window voting.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// A checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate run_0..run_{R-1} under the checkpoint directory.
        #[arg(long)]
        runs: Option<usize>,
        /// Also decide each record from its first K windows.
        #[arg(long)]
        n_prime: Option<usize>,
        /// Checkpoint to pick from a training directory.
        #[arg(long, value_enum, default_value_t = Which::Final)]
        which: Which,
    },
    /// Finite-difference check of the analytic gradients on a toy model.
    Gradcheck {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Negate one gradient tensor to demonstrate a failing check.
        #[arg(long)]
        corrupt: bool,
    },
    /// Print a stream file's header and presence ratio.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Final,
    Best,
}

impl Which {
    fn file_name(self) -> &'static str {
        match self {
            Which::Final => "final.ckpt",
            Which::Best => "best.ckpt",
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Gen { config, out } => gen(config.as_deref(), out),
        Command::Train { config, manifest, out, runs, seed } => {
            train_command(config.as_deref(), manifest, out, runs, seed)
        }
        Command::Eval { config, manifest, checkpoint, out, runs, n_prime, which } => {
            eval_command(config.as_deref(), manifest, checkpoint, out, runs, n_prime, which)
        }
        Command::Gradcheck { samples, seed, epsilon, tolerance, corrupt } => {
            let mut cfg = GradCheckConfig { corrupt, ..GradCheckConfig::default() };
            cfg.samples = samples.unwrap_or(cfg.samples);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.tolerance = tolerance.unwrap_or(cfg.tolerance);
            let report = grad_check(&cfg)?;
            for g in &report.groups {
                println!("{}\t{}\t{:.3e}", g.name, g.checked, g.max_rel_error);
            }
            println!("{}", report.summary());
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Failed(format!("gradient check failed: {}", report.summary())))
            }
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn read_config(path: Option<&Path>) -> CliResult<Config> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => Config::default(),
    })
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config)")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn gen(config: Option<&Path>, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = read_config(config)?;
    if cfg.preset != "synth" {
        return Err(CliError::Core(Error::Config(format!(
            "gen writes the synth layout, but dataset.preset is {:?}",
            cfg.preset
        ))));
    }
    let out = required(out, &cfg.paths.output, "--out")?;
    let manifest = generate_dataset(&cfg.synth, &out)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        out.join(mmfuse::synthgen::MANIFEST_FILE).display()
    );
    Ok(())
}

fn open_manifest(cfg: &Config, flag: Option<PathBuf>) -> CliResult<(DatasetManifest, Vec<ModalityDescriptor>)> {
    let path = required(flag, &cfg.paths.manifest, "--manifest")?;
    let modalities = cfg.modalities()?;
    let manifest = load_manifest(&path, &modalities)?;
    Ok((manifest, modalities))
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_run(outcome: &TrainOutcome, dir: &Path, log: &str) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join("history.tsv"), &history_text(&outcome.epochs))?;
    outcome.final_checkpoint.save(dir.join(Which::Final.file_name()))?;
    if let Some(best) = &outcome.best_checkpoint {
        best.save(dir.join(Which::Best.file_name()))?;
    }
    // Wall-clock details live only here so the other outputs stay
    // byte-reproducible.
    write_file(&dir.join("train.log"), log)
}

fn train_command(
    config: Option<&Path>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    runs: Option<usize>,
    seed: Option<u64>,
) -> CliResult<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = required(out, &cfg.paths.output, "--out")?;
    let (manifest, _) = open_manifest(&cfg, manifest)?;
    let seeds: Vec<(Option<usize>, u64)> = match runs {
        None => vec![(None, cfg.train.seed)],
        Some(0) => return Err(CliError::Usage("--runs must be at least 1".into())),
        Some(r) => (0..r).map(|i| (Some(i), cfg.train.seed + i as u64)).collect(),
    };
    for (run, seed) in seeds {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let started = unix_seconds();
        let clock = Instant::now();
        let outcome = train(&manifest, &train_cfg)?;
        let dir = match run {
            Some(i) => out.join(format!("run_{i}")),
            None => out.clone(),
        };
        let mut log = format!("started_unix\t{started}\nseed\t{seed}\nelapsed_s\t{:.3}\n", clock.elapsed().as_secs_f64());
        log.push_str(&history_text(&outcome.epochs));
        write_run(&outcome, &dir, &log)?;
        let last = outcome.epochs.last().expect("at least one epoch");
        println!(
            "seed {seed}: {} epochs, final train loss {:.4}, val f1 {} -> {}",
            last.epoch,
            last.train_loss,
            last.val_f1.map_or("-".into(), |v| format!("{v:.4}")),
            dir.display()
        );
    }
    Ok(())
}

/// Checkpoint file for one run: `path` itself if it is a file, otherwise
/// `path/[run_i/]<which>`.
fn checkpoint_path(path: &Path, run: Option<usize>, which: Which) -> PathBuf {
    match run {
        Some(i) => path.join(format!("run_{i}")).join(which.file_name()),
        None if path.is_dir() => path.join(which.file_name()),
        None => path.to_path_buf(),
    }
}

fn prefix_text(results: &[VoteResult], n_prime: usize) -> String {
    let mut out = String::from("record_id\ttrue_label\tn_prime\tprefix_label\tfinal_label\n");
    for r in results {
        let k = n_prime.clamp(1, r.n_windows());
        let _ = writeln!(out, "{}\t{}\t{k}\t{}\t{}", r.record_id, r.true_label, r.prefix_labels[k - 1], r.final_label);
    }
    out
}

fn eval_one(
    cfg: &Config,
    modalities: &[ModalityDescriptor],
    test: &[mmfuse::VideoRecord],
    checkpoint: &Path,
    out: &Path,
    n_prime: Option<usize>,
) -> CliResult<(Metrics, Option<Metrics>)> {
    if !checkpoint.is_file() {
        return Err(CliError::Core(Error::Config(format!("checkpoint {} does not exist", checkpoint.display()))));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = Model::new(modalities.to_vec(), cfg.train.model.clone(), cfg.train.seed)?;
    ckpt.restore_into(&mut model)?;
    let results = evaluate_records(test, &model, &cfg.eval)?;
    create_dir(out)?;
    write_predictions(&results, &out.join("predictions.tsv"))?;
    write_window_predictions(&results, &out.join("window_predictions.tsv"))?;
    let metrics = summarize(&results, None)?;
    write_metrics(&single_run_summary(&metrics), &out.join("metrics.tsv"))?;
    let prefix = match n_prime {
        Some(k) => {
            write_file(&out.join("prefix_predictions.tsv"), &prefix_text(&results, k))?;
            let m = summarize(&results, Some(k))?;
            write_metrics(&single_run_summary(&m), &out.join("prefix_metrics.tsv"))?;
            Some(m)
        }
        None => None,
    };
    Ok((metrics, prefix))
}

fn eval_command(
    config: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    runs: Option<usize>,
    n_prime: Option<usize>,
    which: Which,
) -> CliResult<()> {
    let cfg = read_config(config)?;
    let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "--checkpoint")?;
    if !checkpoint.exists() {
        return Err(CliError::Core(Error::Config(format!("checkpoint {} does not exist", checkpoint.display()))));
    }
    let n_prime = n_prime.or(cfg.n_prime);
    if n_prime == Some(0) {
        return Err(CliError::Usage("--n-prime must be at least 1".into()));
    }
    let out = match out.or_else(|| cfg.paths.output.clone()) {
        Some(o) => o,
        None if checkpoint.is_dir() => checkpoint.clone(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (manifest, modalities) = open_manifest(&cfg, manifest)?;
    let test = manifest.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(CliError::Core(Error::Dataset("manifest has no test records".into())));
    }

    match runs {
        None => {
            let (metrics, prefix) = eval_one(&cfg, &modalities, &test, &checkpoint_path(&checkpoint, None, which), &out, n_prime)?;
            print!("{}", metrics_text(&single_run_summary(&metrics)));
            if let (Some(k), Some(p)) = (n_prime, prefix) {
                println!("# decisions after {k} windows");
                print!("{}", metrics_text(&single_run_summary(&p)));
            }
        }
        Some(r) if r < 2 => return Err(CliError::Usage("--runs needs at least 2 runs to aggregate".into())),
        Some(r) => {
            let (mut finals, mut prefixes) = (Vec::new(), Vec::new());
            for i in 0..r {
                let path = checkpoint_path(&checkpoint, Some(i), which);
                let (m, p) = eval_one(&cfg, &modalities, &test, &path, &out.join(format!("run_{i}")), n_prime)?;
                finals.push(m);
                prefixes.extend(p);
            }
            let summary = aggregate_runs(&finals)?;
            create_dir(&out)?;
            write_metrics(&summary, &out.join("metrics.tsv"))?;
            print!("{}", metrics_text(&summary));
            if let Some(k) = n_prime {
                let summary = aggregate_runs(&prefixes)?;
                write_metrics(&summary, &out.join("prefix_metrics.tsv"))?;
                println!("# decisions after {k} windows");
                print!("{}", metrics_text(&summary));
            }
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> CliResult<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))?;
    let header = read_header(&bytes)?;
    // A permissive descriptor built from the header still runs every
    // container integrity check.
    let desc = ModalityDescriptor::projection("inspected", header.rate as f64, header.dim).with_variable_rate();
    let stream = ModalityStream::from_bytes(&bytes, &desc)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "file\t{}", path.display());
    let _ = writeln!(out, "rate\t{}", header.rate);
    let _ = writeln!(out, "frames\t{}", header.frames);
    let _ = writeln!(out, "dim\t{}", header.dim);
    let _ = writeln!(out, "bytes\t{} (header {STREAM_HEADER_LEN})", bytes.len());
    let _ = writeln!(out, "duration_s\t{:.3}", stream.duration_seconds());
    let _ = writeln!(out, "presence_ratio\t{:.6}", stream.presence_ratio());
    Ok(())
}
