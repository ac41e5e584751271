//! `osr` command dispatch: argument parsing, data loading, and the seven
//! subcommands. Errors are printed as `ERROR <code>: <message>`.

pub mod config;
mod selftest;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use osr_core::data::MANIFEST_NAME;
use osr_core::meta::report;
use osr_core::network::{load_checkpoint, read_header, save_checkpoint, CheckpointError};
use osr_core::{
    gen_synthetic, load_dir, meta_train_with, save_dir, DataError, Dataset, Lambdas, MetaError, MetaTest, NetworkError,
    Params, Scalar, ScalarWidth, Split, TrainConfig,
};

use config::RunConfig;

pub const COMMANDS: [&str; 7] = ["gen-data", "train", "eval", "sweep", "ablate", "dump-features", "self-test"];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => write!(f, "ERROR {}: {m}", self.code()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Checkpoint(CheckpointError::NotFound(p)) => {
                CliError::Data(format!("checkpoint not found: {}", p.display()))
            }
            NetworkError::Checkpoint(c) => CliError::Data(c.to_string()),
            NetworkError::InvalidArch(m) => CliError::Config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::InvalidConfig(m) => CliError::Config(m),
            MetaError::Data(d) => d.into(),
            MetaError::Network(n) => n.into(),
            e @ (MetaError::Episode(_) | MetaError::Loss(_)) => CliError::Data(e.to_string()),
            e @ (MetaError::LengthMismatch { .. } | MetaError::UnknownPrediction { .. }) => CliError::Data(e.to_string()),
            e @ MetaError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

struct Invocation {
    command: String,
    config: RunConfig,
    force: bool,
    workers: Option<usize>,
}

fn usage() -> String {
    let mut s = String::from("usage: osr <command> [--config FILE] [--force] [--workers N] [--key value ...]\n\ncommands:\n");
    for c in COMMANDS {
        s.push_str(&format!("  {c}\n"));
    }
    s.push_str("\nkeys (default):\n");
    for (k, v, doc) in config::KEYS {
        s.push_str(&format!("  {k:<20} {v:<16} {doc}\n"));
    }
    s
}

fn parse_args(argv: &[String]) -> Result<Invocation, CliError> {
    let command = argv
        .first()
        .ok_or_else(|| CliError::Config(format!("missing command\n{}", usage())))?
        .clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::Config(format!("unknown command `{command}` (expected one of {})", COMMANDS.join(", "))));
    }
    let mut config = RunConfig::default();
    let mut overrides = Vec::new();
    let mut force = false;
    let mut workers = None;
    let mut config_file = None;
    let mut it = argv[1..].iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("unexpected argument `{arg}`")));
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if name == "force" {
            force = true;
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| CliError::Config(format!("--{name} needs a value")))?,
        };
        match name {
            "config" => config_file = Some(value),
            "workers" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("--workers `{value}` is not a positive integer")))?;
                if n == 0 {
                    return Err(CliError::Config("--workers must be positive".into()));
                }
                workers = Some(n);
            }
            _ => overrides.push((name.to_string(), value)),
        }
    }
    if let Some(path) = config_file {
        config.load_file(&path)?;
    }
    for (k, v) in overrides {
        config.set(&k, &v).map_err(|e| CliError::Config(format!("--{k}: {e}")))?;
    }
    Ok(Invocation { command, config, force, workers })
}

/// Runs `osr` with `argv` (command first, no program name) and returns the
/// process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    if matches!(argv.first().map(String::as_str), Some("help" | "--help" | "-h")) {
        print!("{}", usage());
        return 0;
    }
    match parse_args(argv).and_then(run) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn run(inv: Invocation) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(inv.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match inv.command.as_str() {
        "gen-data" => gen_data(&inv),
        "train" => train(&inv),
        "eval" => eval(&inv),
        "sweep" => sweep(&inv),
        "ablate" => ablate(&inv),
        "dump-features" => dump_features(&inv),
        "self-test" => selftest::run(&inv.config),
        _ => unreachable!("validated in parse_args"),
    })
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn guard_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_artifact(path: &Path, contents: &[u8], force: bool) -> Result<(), CliError> {
    guard_overwrite(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_error(path, e))?;
    f.write_all(contents).map_err(|e| io_error(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.path("report_dir").join(name)
}

fn gen_data(inv: &Invocation) -> Result<(), CliError> {
    let synth = inv.config.synth()?;
    let root = inv.config.path("gen_out");
    let (train, test) = gen_synthetic(&synth)?;
    for ds in [&train, &test] {
        let dir = root.join(ds.split().name());
        guard_overwrite(&dir.join(MANIFEST_NAME), inv.force)?;
        let manifest = save_dir(ds, &dir)?;
        println!("wrote {} ({} images)", manifest.display(), ds.len());
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let dir = cfg.get("data_dir");
    if dir.is_empty() {
        let synth = cfg.synth()?;
        let input: usize = cfg.parsed("input_size")?;
        if synth.image_size != input {
            return Err(CliError::Config(format!(
                "synthetic image_size {} differs from input_size {input}",
                synth.image_size
            )));
        }
        return Ok(gen_synthetic(&synth)?);
    }
    let size = Some(cfg.parsed("input_size")?);
    let root = PathBuf::from(dir);
    let train = load_dir(&root.join("train").join(MANIFEST_NAME), Split::Train, size)?;
    let test = load_dir(&root.join("test").join(MANIFEST_NAME), Split::Test, size)?;
    if train.class_names() != test.class_names() {
        return Err(CliError::Data("train and test manifests list different classes".into()));
    }
    Ok((train, test))
}

fn train(inv: &Invocation) -> Result<(), CliError> {
    match inv.config.parsed::<ScalarWidth>("scalar")? {
        ScalarWidth::F32 => train_as::<f32>(inv),
        ScalarWidth::F64 => train_as::<f64>(inv),
    }
}

fn train_as<T: Scalar>(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let (arch, tcfg) = (cfg.arch()?, cfg.train()?);
    let ckpt = cfg.path("checkpoint");
    let loss_path = report_path(cfg, "loss.csv");
    guard_overwrite(&ckpt, inv.force)?;
    guard_overwrite(&loss_path, inv.force)?;
    let (train, _) = load_data(cfg)?;
    let every = (tcfg.episodes / 10).max(1);
    let out = meta_train_with::<T, _>(&train, &arch, &tcfg, |log| {
        if (log.episode + 1) % every == 0 {
            eprintln!("episode {} total {:.6} lr {}", log.episode + 1, log.loss.total, log.lr);
        }
    })?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    save_checkpoint(&out.params, &ckpt)?;
    println!("wrote {}", ckpt.display());
    write_artifact(&loss_path, report::loss_csv(&cfg.echo("train"), &out.curve).as_bytes(), inv.force)
}

/// Loads the checkpoint at its stored width and hands it to `f`.
fn with_checkpoint<R>(
    cfg: &RunConfig,
    f32_case: impl FnOnce(Params<f32>) -> Result<R, CliError>,
    f64_case: impl FnOnce(Params<f64>) -> Result<R, CliError>,
) -> Result<R, CliError> {
    let path = cfg.path("checkpoint");
    let header = read_header(&path).map_err(|e| CliError::from(NetworkError::Checkpoint(e)))?;
    match header.scalar {
        ScalarWidth::F32 => f32_case(load_checkpoint(&path)?),
        ScalarWidth::F64 => f64_case(load_checkpoint(&path)?),
    }
}

fn prepare<T: Scalar>(cfg: &RunConfig, params: &Params<T>) -> Result<(MetaTest, TrainConfig), CliError> {
    let tcfg = cfg.train()?;
    let ecfg = cfg.eval()?;
    if params.arch().n_closed != tcfg.n_closed {
        return Err(CliError::Config(format!(
            "checkpoint was trained for {} known classes, config asks for {}",
            params.arch().n_closed,
            tcfg.n_closed
        )));
    }
    let (train, test) = load_data(cfg)?;
    let mt = MetaTest::prepare(params, &train, &test, &tcfg, &ecfg)?;
    Ok((mt, tcfg))
}

fn eval(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = report_path(cfg, "metrics.json");
    guard_overwrite(&out, inv.force)?;
    let ecfg = cfg.eval()?;
    let mt = with_checkpoint(cfg, |p| prepare(cfg, &p), |p| prepare(cfg, &p))?.0;
    let rep = mt.report(ecfg.threshold, ecfg.rule)?;
    println!(
        "closed_accuracy {:.4} tpr {:.4} fpr {:.4} precision {:.4} recall_macro {:.4}",
        rep.closed_accuracy, rep.tpr, rep.fpr, rep.precision, rep.recall_macro
    );
    write_artifact(&out, report::metrics_json(&cfg.echo("eval"), cfg.seed()?, &rep).as_bytes(), inv.force)
}

fn sweep(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = report_path(cfg, "sweep.csv");
    guard_overwrite(&out, inv.force)?;
    let grid = cfg.sweep_grid()?;
    let rule = cfg.eval()?.rule;
    let mt = with_checkpoint(cfg, |p| prepare(cfg, &p), |p| prepare(cfg, &p))?.0;
    let reports = mt.sweep(&grid, rule)?;
    write_artifact(&out, report::sweep_csv(&cfg.echo("sweep"), &reports).as_bytes(), inv.force)
}

fn dump_features(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = report_path(cfg, "features.csv");
    guard_overwrite(&out, inv.force)?;
    let idx: usize = cfg.parsed("eval_index")?;
    let mt = with_checkpoint(cfg, |p| prepare(cfg, &p), |p| prepare(cfg, &p))?.0;
    if idx >= mt.len() {
        return Err(CliError::Config(format!("eval_index {idx} out of range for {} evaluations", mt.len())));
    }
    write_artifact(&out, report::features_csv(&cfg.echo("dump-features"), &mt, idx).as_bytes(), inv.force)
}

fn ablate(inv: &Invocation) -> Result<(), CliError> {
    match inv.config.parsed::<ScalarWidth>("scalar")? {
        ScalarWidth::F32 => ablate_as::<f32>(inv),
        ScalarWidth::F64 => ablate_as::<f64>(inv),
    }
}

fn ablate_as<T: Scalar>(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = report_path(cfg, "ablation.json");
    guard_overwrite(&out, inv.force)?;
    let (arch, full_cfg, ecfg) = (cfg.arch()?, cfg.train()?, cfg.eval()?);
    let (train, test) = load_data(cfg)?;
    let ablated_cfg = TrainConfig {
        lambdas: Lambdas { entropy: 0.0, ..full_cfg.lambdas },
        ..full_cfg.clone()
    };
    let mut reports = Vec::new();
    for (name, tcfg) in [("full", &full_cfg), ("lambda2=0", &ablated_cfg)] {
        eprintln!("training {name}");
        let trained = meta_train_with::<T, _>(&train, &arch, tcfg, |_| {})?;
        let mt = MetaTest::prepare(&trained.params, &train, &test, tcfg, &ecfg)?;
        let rep = mt.report(ecfg.threshold, ecfg.rule)?;
        println!("{name}: tpr {:.4} fpr {:.4} closed_accuracy {:.4}", rep.tpr, rep.fpr, rep.closed_accuracy);
        reports.push(rep);
    }
    let json = report::ablation_json(&cfg.echo("ablate"), cfg.seed()?, &reports[0], &reports[1]);
    write_artifact(&out, json.as_bytes(), inv.force)
}
