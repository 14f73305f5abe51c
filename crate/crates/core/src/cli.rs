//! Command-line driver: `train`, `bench`, `lemma-check`, `seq-error` and
//! `orthogonality`. Every command writes CSV plus a `manifest.txt` into its
//! output directory.
//!
//! A `--config <file>` of `key = value` lines is expanded into flags placed
//! ahead of the command-line flags, so explicit flags win.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::collective::fusion::allreduce_fused;
use crate::collective::tcp::{free_base_port, TcpTransport};
use crate::collective::{inproc, run_ranks, CollectiveConfig, RankContext, Reduction};
use crate::combiner::{expected_combined, lemma_checks, ordered_pair_average, FiniteDistribution, COS_ANGLE_BOUND};
use crate::error::{Error, Result};
use crate::oracle::{median, relative_error_experiment, SeqErrorConfig, SeqErrorPath, SEQ_ERROR_HEADER};
use crate::tensor::Tensor;
use crate::training::{
    make_dataset, train_on, Dataset, DatasetKind, ModelSpec, OptimizerKind, Precision, StepRecord, TrainConfig,
    TrainResult,
};

pub const METRICS_HEADER: &str =
    "step,epoch,rank_count,reduction,local_steps,train_loss,eval_accuracy,lr,orthogonality_mean,scale";
pub const BENCH_HEADER: &str = "bytes,op,median_s,p95_s";
pub const LEMMA_HEADER: &str = "trial,dim,atoms,cos_angle,norm_ratio,eig_min,eig_max,pair_avg_err,violation";
pub const MANIFEST_FILE: &str = "manifest.txt";

const TCP_CONNECT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Parser)]
#[command(name = "adasum", version, about = "Adasum reduction experiments and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Data-parallel training; writes metrics.csv.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Allreduce latency sweep; writes bench.csv.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Seeded sweep of the combiner's expectation properties; writes lemmas.csv.
    #[command(args_override_self = true)]
    LemmaCheck(LemmaArgs),
    /// Distance of Sum and Adasum updates from sequential SGD; writes error.csv.
    #[command(args_override_self = true)]
    SeqError(SeqErrorArgs),
    /// Adasum training that logs per-layer orthogonality; writes orth.csv.
    #[command(args_override_self = true)]
    Orthogonality(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Average,
    Oracle,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// key = value file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct WorldArgs {
    /// Number of simulated ranks (a power of two).
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,
    #[arg(long, value_enum, default_value_t = TransportKind::Inproc)]
    pub transport: TransportKind,
    /// Run only this rank in this process (TCP only).
    #[arg(long)]
    pub rank: Option<usize>,
    /// World size for `--rank`; defaults to `--ranks`.
    #[arg(long)]
    pub world_size: Option<usize>,
    /// First port of the TCP mesh (rank r listens on base + r).
    #[arg(long)]
    pub base_port: Option<u16>,
    /// Ranks per node for hierarchical Adasum; defaults to ADASUM_NODE_SIZE or 1.
    #[arg(long)]
    pub node_size: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value = "adasum")]
    pub reduction: Reduction,
    #[arg(long, default_value_t = 1)]
    pub local_steps: usize,
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    #[arg(long, default_value_t = 32768.0)]
    pub loss_scale_init: f64,
    #[arg(long, default_value_t = 2000)]
    pub loss_scale_growth_interval: u64,
    /// Logistic regression keeps classes 0 and 1 and adds an intercept feature.
    #[arg(long, value_enum, default_value_t = ModelArg::Mlp)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// gauss_blobs, two_spirals or digits_csv:<path>
    #[arg(long, default_value = "gauss_blobs")]
    pub dataset: String,
    /// Seed of the synthetic dataset; defaults to 100 + seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub eval_frac: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Examples per rank per local step.
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_frac: f64,
    #[arg(long, default_value = "sgd")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Rank 0 injects an overflow into its delta at this (1-based) round.
    #[arg(long)]
    pub inject_overflow_at: Option<u64>,
    #[arg(long, action = ArgAction::SetTrue)]
    pub check_consistency: bool,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 10)]
    pub min_exp: u32,
    #[arg(long, default_value_t = 26)]
    pub max_exp: u32,
    #[arg(long, default_value_t = 64)]
    pub tensors: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Untimed calls per size and op before measuring.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
}

#[derive(Clone, Debug, Args)]
pub struct LemmaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 2)]
    pub dim_min: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_max: usize,
    #[arg(long, default_value_t = 2)]
    pub atoms_min: usize,
    #[arg(long, default_value_t = 64)]
    pub atoms_max: usize,
}

#[derive(Clone, Debug, Args)]
pub struct SeqErrorArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 16)]
    pub ranks: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    /// Features including the intercept.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2000)]
    pub examples: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spread: f64,
    #[arg(long, value_enum, default_value_t = PathArg::Average)]
    pub path: PathArg,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) | Error::Config(_) | Error::Shape { .. } | Error::Io(_) => 2,
        Error::Numeric(_) | Error::UndefinedMetric | Error::DegenerateDistribution(_) => 3,
        Error::Protocol(_) | Error::Transport(_) | Error::Consistency(_) => 4,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses a `key = value` config file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Splices the flags from `--config <file>` right after the subcommand name.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(sub_name) = args.get(1).filter(|a| !a.starts_with('-')) else {
        return Ok(args);
    };
    let mut path = None;
    let mut i = 2;
    while i < args.len() {
        if args[i] == "--config" {
            path = args.get(i + 1).cloned();
            i += 1;
        } else if let Some(p) = args[i].strip_prefix("--config=") {
            path = Some(p.to_string());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(sub_name) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config_file(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}' for {sub_name}")))?;
        if key == "config" {
            return Err(Error::Config("config files cannot include other config files".into()));
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(Error::Config(format!("'{key}' expects true or false, got '{value}'"))),
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, args, false),
        Command::Orthogonality(a) => cmd_train(a, args, true),
        Command::Bench(a) => cmd_bench(a, args),
        Command::LemmaCheck(a) => cmd_lemma_check(a, args),
        Command::SeqError(a) => cmd_seq_error(a, args),
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run metadata written as `manifest.txt`.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub content_hash: String,
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<PathBuf>,
    pub status: String,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &str, config: Vec<(String, String)>, seed: u64, inputs: &[u8]) -> Self {
        let mut h = Sha256::new();
        for (k, v) in &config {
            h.update(format!("{k}={v}\n"));
        }
        h.update(inputs);
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            content_hash: hex(&h.finalize()),
            started: unix_now(),
            finished: 0.0,
            outputs: Vec::new(),
            status: String::new(),
            extra: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\nseed={}\n", self.command, self.seed);
        s += &format!("content_hash=sha256:{}\n", self.content_hash);
        s += &format!("started_unix={:.3}\nfinished_unix={:.3}\n", self.started, self.finished);
        s += &format!("status={}\n", self.status);
        for p in &self.outputs {
            s += &format!("output={}\n", p.display());
        }
        for (k, v) in &self.extra {
            s += &format!("{k}={v}\n");
        }
        for (k, v) in &self.config {
            s += &format!("config.{k}={v}\n");
        }
        s
    }

    fn finish<T>(mut self, dir: &Path, outcome: &Result<T>) -> Result<()> {
        self.finished = unix_now();
        self.status = match outcome {
            Ok(_) => "ok".into(),
            Err(e) => format!("error: {e}").replace('\n', " "),
        };
        fs::write(dir.join(MANIFEST_FILE), self.render())?;
        Ok(())
    }
}

/// Line-buffered CSV file that survives an aborted run.
struct CsvSink(BufWriter<File>);

impl CsvSink {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        w.flush()?;
        Ok(CsvSink(w))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.0, "{s}")?;
        self.0.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn kv<T: std::fmt::Display>(k: &str, v: T) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn opt_kv<T: std::fmt::Display>(k: &str, v: &Option<T>) -> (String, String) {
    (k.to_string(), v.as_ref().map(|x| x.to_string()).unwrap_or_default())
}

fn resolve_node_size(flag: Option<usize>) -> Result<usize> {
    match flag {
        Some(0) => Err(Error::Config("--node-size must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(CollectiveConfig::from_env()?.node_size),
    }
}

/// The world this process takes part in.
enum World {
    /// All ranks run as threads of this process.
    Local { size: usize, tcp: bool, base_port: Option<u16> },
    /// This process is one rank of a multi-process TCP mesh.
    Single { rank: usize, size: usize, base_port: u16 },
}

impl World {
    fn from_args(w: &WorldArgs) -> Result<Self> {
        let size = w.world_size.unwrap_or(w.ranks);
        if w.world_size.is_some() && w.ranks != 1 && w.ranks != size {
            return Err(Error::Config(format!("--ranks {} conflicts with --world-size {size}", w.ranks)));
        }
        if size == 0 || !size.is_power_of_two() {
            return Err(Error::Config(format!("world size must be a power of two, got {size}")));
        }
        match (w.rank, w.transport) {
            (Some(_), TransportKind::Inproc) => Err(Error::Config("--rank requires --transport tcp".into())),
            (Some(rank), TransportKind::Tcp) => {
                if rank >= size {
                    return Err(Error::Config(format!("--rank {rank} is outside a world of {size}")));
                }
                let base_port = w
                    .base_port
                    .ok_or_else(|| Error::Config("--rank requires --base-port".into()))?;
                Ok(World::Single { rank, size, base_port })
            }
            (None, t) => Ok(World::Local {
                size,
                tcp: t == TransportKind::Tcp,
                base_port: w.base_port,
            }),
        }
    }

    fn size(&self) -> usize {
        match self {
            World::Local { size, .. } | World::Single { size, .. } => *size,
        }
    }

    fn is_root_process(&self) -> bool {
        !matches!(self, World::Single { rank, .. } if *rank != 0)
    }

    /// Runs `f` on every local rank and returns rank 0's result, or `None`
    /// when this process does not host rank 0.
    fn run<T, F>(&self, f: F) -> Result<Option<T>>
    where
        T: Send,
        F: Fn(&mut RankContext) -> Result<T> + Sync,
    {
        let mut results = match *self {
            World::Local { size, tcp: false, .. } => run_ranks(inproc::endpoints(size), f)?,
            World::Local { size, tcp: true, base_port } => {
                let base = match base_port {
                    Some(b) => b,
                    None => free_base_port(size)?,
                };
                let endpoints = std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..size)
                        .map(|r| scope.spawn(move || TcpTransport::connect(r, size, base, TCP_CONNECT_TIMEOUT)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("connect thread panicked".into()))))
                        .collect::<Result<Vec<_>>>()
                })?;
                run_ranks(endpoints, f)?
            }
            World::Single { rank, size, base_port } => {
                let t = TcpTransport::connect(rank, size, base_port, TCP_CONNECT_TIMEOUT)?;
                let out = run_ranks(vec![t], f)?;
                if rank != 0 {
                    return Ok(None);
                }
                out
            }
        };
        Ok(Some(results.swap_remove(0)))
    }
}

fn load_data(a: &TrainArgs) -> Result<(Dataset, Dataset)> {
    let kind = DatasetKind::parse(&a.dataset)?;
    let seed = a.data_seed.unwrap_or(100 + a.common.seed);
    let mut data = make_dataset(&kind, seed)?;
    if matches!(kind, DatasetKind::DigitsCsv(_)) {
        data = data.standardized();
    }
    if a.model == ModelArg::Logistic {
        data = data.binary().with_bias();
    }
    if !(0.0..1.0).contains(&a.eval_frac) {
        return Err(Error::Config(format!("--eval-frac must be in [0, 1), got {}", a.eval_frac)));
    }
    Ok(data.split(a.eval_frac, a.common.seed))
}

fn dataset_bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(d.inputs.len() * 8 + d.labels.len() * 8);
    for x in &d.inputs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for l in &d.labels {
        out.extend_from_slice(&(*l as u64).to_le_bytes());
    }
    out
}

fn train_config(a: &TrainArgs, ranks: usize, orth_only: bool) -> Result<TrainConfig> {
    let node_size = resolve_node_size(a.world.node_size)?;
    let cfg = TrainConfig {
        ranks,
        batch_size: a.batch_size,
        local_steps: a.local_steps,
        reduction: if orth_only { Reduction::Adasum } else { a.reduction },
        precision: a.precision,
        seed: a.common.seed,
        epochs: a.epochs,
        node_size,
        model: match a.model {
            ModelArg::Logistic => ModelSpec::Logistic,
            ModelArg::Mlp => ModelSpec::Mlp { hidden: a.hidden },
        },
        optimizer: a.optimizer,
        max_lr: a.max_lr,
        warmup_frac: a.warmup_frac,
        loss_scale_init: a.loss_scale_init,
        loss_scale_growth_interval: a.loss_scale_growth_interval,
        inject_overflow_at: a.inject_overflow_at,
        check_consistency: a.check_consistency,
        eval_every: a.eval_every,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config_pairs(a: &TrainArgs, cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        kv("ranks", cfg.ranks),
        kv("transport", format!("{:?}", a.world.transport).to_lowercase()),
        opt_kv("rank", &a.world.rank),
        opt_kv("base_port", &a.world.base_port),
        kv("node_size", cfg.node_size),
        kv("reduction", cfg.reduction),
        kv("local_steps", cfg.local_steps),
        kv("precision", cfg.precision),
        kv("loss_scale_init", cfg.loss_scale_init),
        kv("loss_scale_growth_interval", cfg.loss_scale_growth_interval),
        kv("model", format!("{:?}", a.model).to_lowercase()),
        kv("hidden", a.hidden),
        kv("dataset", &a.dataset),
        kv("data_seed", a.data_seed.unwrap_or(100 + a.common.seed)),
        kv("eval_frac", a.eval_frac),
        kv("epochs", cfg.epochs),
        kv("batch_size", cfg.batch_size),
        kv("max_lr", cfg.max_lr),
        kv("warmup_frac", cfg.warmup_frac),
        kv("optimizer", cfg.optimizer.name()),
        kv("eval_every", cfg.eval_every),
        opt_kv("inject_overflow_at", &cfg.inject_overflow_at),
        kv("check_consistency", cfg.check_consistency),
        kv("fusion_threshold", CollectiveConfig::from_env().map(|c| c.fusion_threshold).unwrap_or_default()),
    ]
}

fn metrics_line(cfg: &TrainConfig, r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.epoch,
        cfg.ranks,
        cfg.reduction,
        cfg.local_steps,
        r.train_loss,
        opt(r.eval_accuracy),
        r.lr,
        opt(r.orthogonality_mean),
        opt(r.scale)
    )
}

fn orth_line(r: &StepRecord, layers: usize) -> String {
    let mut s = format!("{},{}", r.step, r.epoch);
    let per = r.orthogonality_layers.clone().unwrap_or_default();
    for l in 0..layers {
        s.push(',');
        s += &opt(per.get(l).copied().flatten());
    }
    s.push(',');
    s += &opt(r.orthogonality_mean);
    s
}

fn cmd_train(a: &TrainArgs, argv: &[String], orth_only: bool) -> Result<()> {
    let world = World::from_args(&a.world)?;
    let cfg = train_config(a, world.size(), orth_only)?;
    let (train, eval) = load_data(a)?;
    let layers = cfg.build_model(&train)?.layout.num_layers();
    let command = if orth_only { "orthogonality" } else { "train" };
    let root = world.is_root_process();

    let csv_name = if orth_only { "orth.csv" } else { "metrics.csv" };
    let csv_path = a.common.out_dir.join(csv_name);
    let sink = if root {
        fs::create_dir_all(&a.common.out_dir)?;
        let header = if orth_only {
            let cols: Vec<String> = (0..layers).map(|l| format!("layer_{l}")).collect();
            format!("step,epoch,{},mean", cols.join(","))
        } else {
            METRICS_HEADER.to_string()
        };
        Some(Mutex::new(CsvSink::create(&csv_path, &header)?))
    } else {
        None
    };
    let mut manifest = RunManifest::new(command, train_config_pairs(a, &cfg), cfg.seed, &dataset_bytes(&train));
    manifest.extra.push(("argv".into(), argv[1..].join(" ")));
    manifest.outputs.push(csv_path);

    let outcome: Result<Option<TrainResult>> = world.run(|ctx| {
        let is_rank0 = ctx.rank() == 0;
        let mut on_record = |r: &StepRecord| -> Result<()> {
            match (&sink, is_rank0) {
                (Some(s), true) => {
                    let line = if orth_only { orth_line(r, layers) } else { metrics_line(&cfg, r) };
                    s.lock().map_err(|_| Error::Io(std::io::Error::other("csv lock poisoned")))?.line(&line)
                }
                _ => Ok(()),
            }
        };
        train_on(ctx, &cfg, &train, &eval, &mut on_record)
    });
    if !root {
        return outcome.map(|_| ());
    }
    if let Ok(Some(res)) = &outcome {
        manifest.extra.extend([
            kv("allreduce_calls", res.allreduce_calls),
            kv("accepted_rounds", res.accepted_rounds),
            kv("rejected_rounds", res.rejected_rounds),
            kv("final_eval_accuracy", res.final_eval_accuracy),
            kv("final_train_loss", res.final_train_loss),
        ]);
        println!(
            "{command}: {} rounds, eval accuracy {:.4}, train loss {:.4}, {} allreduce calls",
            res.records.len(),
            res.final_eval_accuracy,
            res.final_train_loss,
            res.allreduce_calls
        );
    }
    manifest.finish(&a.common.out_dir, &outcome)?;
    outcome.map(|_| ())
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Splits `total` elements into `parts` lengths differing by at most one.
fn split_lengths(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub bytes: usize,
    pub op: &'static str,
    pub median_s: f64,
    pub p95_s: f64,
}

/// Sizes, repetitions and collective settings for [`bench_on`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPlan {
    pub min_exp: u32,
    pub max_exp: u32,
    pub tensors: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    pub fusion_threshold: usize,
    pub node_size: usize,
}

/// Times fused `sum_rvh` and `adasum_rvh` over f64 payloads of `2^k` bytes.
/// Each trial starts after a barrier and times only the collective.
pub fn bench_on(ctx: &mut RankContext, plan: &BenchPlan) -> Result<Vec<BenchRow>> {
    let BenchPlan {
        tensors,
        trials,
        warmup,
        seed,
        fusion_threshold: threshold,
        node_size,
        ..
    } = *plan;
    if tensors == 0 || trials == 0 {
        return Err(Error::Config("--tensors and --trials must be positive".into()));
    }
    let mut rows = Vec::new();
    for k in plan.min_exp..=plan.max_exp {
        let bytes = 1usize << k;
        let elems = (bytes / 8).max(tensors);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ctx.rank() as u64) << 32) ^ k as u64);
        let payload: Vec<(u64, Tensor)> = split_lengths(elems, tensors)
            .into_iter()
            .enumerate()
            .map(|(i, n)| (i as u64, Tensor::from_f64((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        for (op, reduction) in [("sum_rvh", Reduction::Sum), ("adasum_rvh", Reduction::Adasum)] {
            let mut times = Vec::with_capacity(trials);
            for t in 0..warmup + trials {
                ctx.barrier()?;
                let start = Instant::now();
                let out = allreduce_fused(ctx, &payload, reduction, threshold, node_size)?;
                let elapsed = start.elapsed().as_secs_f64();
                drop(out);
                if t >= warmup {
                    times.push(elapsed);
                }
            }
            rows.push(BenchRow {
                bytes,
                op,
                median_s: median(&times),
                p95_s: percentile(&times, 95.0),
            });
        }
    }
    Ok(rows)
}

fn cmd_bench(a: &BenchArgs, argv: &[String]) -> Result<()> {
    let world = World::from_args(&a.world)?;
    if a.min_exp > a.max_exp || a.max_exp > 40 || a.min_exp < 3 {
        return Err(Error::Config(format!("bad size range 2^{}..2^{}", a.min_exp, a.max_exp)));
    }
    let node_size = resolve_node_size(a.world.node_size)?;
    let threshold = CollectiveConfig::from_env()?.fusion_threshold;
    let config = vec![
        kv("ranks", world.size()),
        kv("transport", format!("{:?}", a.world.transport).to_lowercase()),
        kv("node_size", node_size),
        kv("fusion_threshold", threshold),
        kv("min_exp", a.min_exp),
        kv("max_exp", a.max_exp),
        kv("tensors", a.tensors),
        kv("trials", a.trials),
        kv("warmup", a.warmup),
    ];
    let root = world.is_root_process();
    let csv_path = a.common.out_dir.join("bench.csv");
    let mut manifest = RunManifest::new("bench", config, a.common.seed, &[]);
    manifest.extra.push(("argv".into(), argv[1..].join(" ")));
    manifest.outputs.push(csv_path.clone());

    let plan = BenchPlan {
        min_exp: a.min_exp,
        max_exp: a.max_exp,
        tensors: a.tensors,
        trials: a.trials,
        warmup: a.warmup,
        seed: a.common.seed,
        fusion_threshold: threshold,
        node_size,
    };
    let outcome = world.run(|ctx| bench_on(ctx, &plan));
    if !root {
        return outcome.map(|_| ());
    }
    fs::create_dir_all(&a.common.out_dir)?;
    if let Ok(Some(rows)) = &outcome {
        let mut sink = CsvSink::create(&csv_path, BENCH_HEADER)?;
        for r in rows {
            sink.line(&format!("{},{},{},{}", r.bytes, r.op, r.median_s, r.p95_s))?;
            println!("{:>10} B  {:<10}  median {:.6}s  p95 {:.6}s", r.bytes, r.op, r.median_s, r.p95_s);
        }
    }
    manifest.finish(&a.common.out_dir, &outcome)?;
    outcome.map(|_| ())
}

fn cmd_lemma_check(a: &LemmaArgs, argv: &[String]) -> Result<()> {
    if a.dim_min == 0 || a.dim_min > a.dim_max || a.atoms_min == 0 || a.atoms_min > a.atoms_max {
        return Err(Error::Config("need 1 <= dim-min <= dim-max and 1 <= atoms-min <= atoms-max".into()));
    }
    fs::create_dir_all(&a.common.out_dir)?;
    let csv_path = a.common.out_dir.join("lemmas.csv");
    let config = vec![
        kv("trials", a.trials),
        kv("dim_min", a.dim_min),
        kv("dim_max", a.dim_max),
        kv("atoms_min", a.atoms_min),
        kv("atoms_max", a.atoms_max),
    ];
    let mut manifest = RunManifest::new("lemma-check", config, a.common.seed, &[]);
    manifest.extra.push(("argv".into(), argv[1..].join(" ")));
    manifest.outputs.push(csv_path.clone());

    let outcome = (|| -> Result<(usize, usize, f64)> {
        let mut sink = CsvSink::create(&csv_path, LEMMA_HEADER)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
        let (mut violations, mut degenerate, mut worst_cos) = (0, 0, f64::INFINITY);
        for trial in 0..a.trials {
            let dim = rng.gen_range(a.dim_min..=a.dim_max);
            let atoms = rng.gen_range(a.atoms_min..=a.atoms_max);
            let x = FiniteDistribution::random(&mut rng, dim, atoms);
            let report = match lemma_checks(&x) {
                Ok(r) => r,
                Err(Error::DegenerateDistribution(_)) => {
                    degenerate += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let closed = expected_combined(&x)?;
            let pairs = ordered_pair_average(&x)?;
            let scale = closed.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let pair_err = closed.iter().zip(&pairs).fold(0.0f64, |m, (c, p)| m.max((c - p).abs())) / scale;
            let bad = report.cos_angle < COS_ANGLE_BOUND - 1e-9
                || !(1.0 - 1e-9..=2.0 + 1e-9).contains(&report.norm_ratio)
                || report.eig_min < 1.0 - 1e-9
                || report.eig_max > 2.0 + 1e-9;
            violations += usize::from(bad);
            worst_cos = worst_cos.min(report.cos_angle);
            sink.line(&format!(
                "{trial},{dim},{atoms},{},{},{},{},{pair_err},{}",
                report.cos_angle,
                report.norm_ratio,
                report.eig_min,
                report.eig_max,
                u8::from(bad)
            ))?;
        }
        Ok((violations, degenerate, worst_cos))
    })();
    if let Ok((violations, degenerate, worst)) = &outcome {
        manifest.extra.extend([kv("violations", violations), kv("degenerate", degenerate)]);
        println!("lemma-check: {} trials, {violations} violations, {degenerate} degenerate, min cos {worst:.6}", a.trials);
    }
    let outcome = outcome.and_then(|(violations, _, _)| {
        if violations > 0 {
            Err(Error::Numeric(format!("{violations} trials violate the expectation bounds")))
        } else {
            Ok(())
        }
    });
    manifest.finish(&a.common.out_dir, &outcome)?;
    outcome
}

fn cmd_seq_error(a: &SeqErrorArgs, argv: &[String]) -> Result<()> {
    fs::create_dir_all(&a.common.out_dir)?;
    let cfg = SeqErrorConfig {
        ranks: a.ranks,
        steps: a.steps,
        batch_size: a.batch_size,
        alpha: a.alpha,
        dim: a.dim,
        examples: a.examples,
        spread: a.spread,
        seed: a.common.seed,
        path: match a.path {
            PathArg::Average => SeqErrorPath::Average,
            PathArg::Oracle => SeqErrorPath::Oracle,
        },
    };
    let csv_path = a.common.out_dir.join("error.csv");
    let config = vec![
        kv("ranks", cfg.ranks),
        kv("steps", cfg.steps),
        kv("batch_size", cfg.batch_size),
        kv("alpha", cfg.alpha),
        kv("dim", cfg.dim),
        kv("examples", cfg.examples),
        kv("spread", cfg.spread),
        kv("path", format!("{:?}", a.path).to_lowercase()),
    ];
    let mut manifest = RunManifest::new("seq-error", config, cfg.seed, &[]);
    manifest.extra.push(("argv".into(), argv[1..].join(" ")));
    manifest.outputs.push(csv_path.clone());

    let outcome = relative_error_experiment(&cfg).and_then(|report| {
        let mut sink = CsvSink::create(&csv_path, SEQ_ERROR_HEADER)?;
        for row in &report.rows {
            sink.line(&row.csv_line())?;
        }
        Ok(report)
    });
    if let Ok(report) = &outcome {
        let ada: Vec<f64> = report.rows.iter().map(|r| r.rel_err_adasum).collect();
        let sum: Vec<f64> = report.rows.iter().map(|r| r.rel_err_sum).collect();
        manifest.extra.extend([
            kv("median_rel_err_adasum", median(&ada)),
            kv("median_rel_err_sum", median(&sum)),
            kv("skipped_steps", report.skipped),
        ]);
        println!(
            "seq-error: {} steps, median relative error adasum {:.4}, sum {:.4}",
            report.rows.len(),
            median(&ada),
            median(&sum)
        );
    }
    manifest.finish(&a.common.out_dir, &outcome)?;
    outcome.map(|_| ())
}
