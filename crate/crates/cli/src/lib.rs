//! Command-line surface of the prediction pipeline.
//!
//! Subcommands cover the whole flow: `fit-comm` and `train-el` build model
//! assets from microbenchmark data, `gen` produces synthetic trace worlds,
//! `rf` extracts reuse factors, `predict`/`baseline` run the simulators,
//! `shard`/`select` handle embedding-table placement, and `eval` scores
//! predictions against a reference. Every subcommand writes JSON to stdout
//! (or `--out`) and is byte-stable for fixed inputs; domain failures exit 1
//! with a `{error, detail}` object on stderr, usage failures exit 2.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use perfsim_core::comm::{self, BenchSample, CollectiveKind, CommModelFile};
use perfsim_core::kernels::{
    self, el_feature_spec, EmbeddingTableConfig, ModelRegistry, TrainConfig,
};
use perfsim_core::metrics;
use perfsim_core::sharding::{self, IndexedTable, SelectionWorldSpec, SharderKind};
use perfsim_core::sim::{self, OverheadStats};
use perfsim_core::synth::{synth_trace, SynthSpec};
use perfsim_core::trace::{parse_trace, to_canonical_json, validate_world, ExecutionTrace};

/// Environment variable overriding the default seed of `gen` and of the
/// random sharder when `--seed` is not given.
pub const SEED_ENV: &str = "PERFSIM_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    BadInput { path: PathBuf, detail: String },
    #[error(transparent)]
    Trace(#[from] perfsim_core::trace::TraceError),
    #[error(transparent)]
    World(#[from] perfsim_core::trace::WorldError),
    #[error(transparent)]
    Comm(#[from] comm::CommError),
    #[error(transparent)]
    Kernel(#[from] kernels::KernelError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Sharding(#[from] sharding::ShardingError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::BadInput { .. } => "bad_input",
            CliError::Trace(_) => "trace",
            CliError::World(_) => "world",
            CliError::Comm(_) => "comm_model",
            CliError::Kernel(_) => "kernel_model",
            CliError::Sim(_) => "simulation",
            CliError::Sharding(_) => "sharding",
            CliError::Metric(_) => "metrics",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "perfsim", version, about = "Trace-driven multi-GPU training performance prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the piecewise collective latency model to microbenchmark samples
    FitComm(FitCommArgs),
    /// Train an embedding-lookup or learned-op latency model
    TrainEl(TrainElArgs),
    /// Compute reuse factors of a batch of lookup indices
    Rf(RfArgs),
    /// Predict the per-iteration time of a trace world
    Predict(PredictArgs),
    /// Synchronization-free baseline: max summed kernel time per stream
    Baseline(BaselineArgs),
    /// Assign embedding tables to ranks with one sharder
    Shard(ShardArgs),
    /// Pick the fastest sharding config via simulation
    Select(SelectArgs),
    /// Generate a synthetic trace world
    Gen(GenArgs),
    /// Compare predictions against a reference and report GMAE/MAPE
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct FitCommArgs {
    /// Microbenchmark CSV with header m_bytes,latency_us
    #[arg(long)]
    samples: PathBuf,
    /// Which collective the samples measure: all_to_all or all_reduce
    #[arg(long)]
    kind: CollectiveKindArg,
    /// Platform label stored in the model file
    #[arg(long, default_value = "unknown")]
    platform: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainElArgs {
    /// Microbenchmark CSV with header
    /// batch_size,num_tables,sum_logE,mean_D,mean_L,total_lookups,rf_0..rf_16,latency_us
    #[arg(long)]
    data: PathBuf,
    /// Hidden layer widths
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RfArgs {
    /// JSON file holding an array of per-sample index arrays
    #[arg(long)]
    indices: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WorldArgs {
    /// Trace files, or directories scanned for *.json (one file per rank)
    #[arg(long, required = true, num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Model registry JSON (collective params, learned models, device)
    #[arg(long)]
    models: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    world: WorldArgs,
    /// Per-op CPU overhead statistics JSON
    #[arg(long)]
    overheads: PathBuf,
    /// staged: full report; oracle: event-queue reference, total only
    #[arg(long, default_value = "staged")]
    engine: Engine,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Engine {
    Staged,
    Oracle,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ShardArgs {
    /// Tables CSV with header idx,E,D,avg_L,row_bytes
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    ngpus: u32,
    #[arg(long)]
    sharder: SharderKindArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Device DRAM bytes; enables the 80% capacity check
    #[arg(long)]
    dram_bytes: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Tables CSV with header idx,E,D,avg_L,row_bytes
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    ngpus: u32,
    /// Candidate sharders, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    candidates: Vec<SharderKindArg>,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    overheads: PathBuf,
    #[arg(long, default_value_t = 4096)]
    batch_size: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    ranks: u32,
    #[arg(long, default_value_t = 50)]
    ops: u32,
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving one trace_rankNN.json per rank
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions: JSON array of µs, or report object(s) with total_us
    #[arg(long)]
    pred: PathBuf,
    /// Reference values, same accepted shapes
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// clap-parseable wrapper for [`SharderKind`].
#[derive(Debug, Clone, Copy)]
struct SharderKindArg(SharderKind);

impl std::str::FromStr for SharderKindArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(SharderKindArg)
    }
}

/// clap-parseable wrapper for [`CollectiveKind`].
#[derive(Debug, Clone, Copy)]
struct CollectiveKindArg(CollectiveKind);

impl std::str::FromStr for CollectiveKindArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_to_all" => Ok(CollectiveKindArg(CollectiveKind::AllToAll)),
            "all_reduce" => Ok(CollectiveKindArg(CollectiveKind::AllReduce)),
            other => Err(format!("unknown collective '{other}' (all_to_all or all_reduce)")),
        }
    }
}

/// Runs the CLI on the given argv and returns the process exit code.
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
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.kind(),
                "detail": err.to_string(),
            });
            eprintln!("{payload}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::FitComm(args) => fit_comm(args),
        Command::TrainEl(args) => train_el(args),
        Command::Rf(args) => rf(args),
        Command::Predict(args) => predict(args),
        Command::Baseline(args) => baseline(args),
        Command::Shard(args) => shard(args),
        Command::Select(args) => select(args),
        Command::Gen(args) => gen(args),
        Command::Eval(args) => eval(args),
    }
}

fn default_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn write_output<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("serializable output");
    body.push('\n');
    match out {
        Some(path) => fs::write(path, body).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn bad_input(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::BadInput { path: path.to_owned(), detail: detail.into() }
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| bad_input(path, e.to_string()))
}

fn fit_comm(args: FitCommArgs) -> Result<(), CliError> {
    let data = read_file(&args.samples)?;
    let mut reader = csv::Reader::from_reader(data.as_slice());
    expect_headers(&mut reader, &args.samples, &["m_bytes", "latency_us"])?;
    let mut samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad_input(&args.samples, e.to_string()))?;
        let message_bytes: u64 = parse_field(&args.samples, line, &record, 0)?;
        let latency_us: f64 = parse_field(&args.samples, line, &record, 1)?;
        if message_bytes < 4 || !latency_us.is_finite() || latency_us <= 0.0 {
            return Err(bad_input(
                &args.samples,
                format!("row {line}: need m_bytes >= 4 and latency_us > 0"),
            ));
        }
        samples.push(BenchSample { message_bytes, latency_us });
    }
    let params = comm::fit(&samples)?;
    let file = CommModelFile { kind: args.kind.0, platform: args.platform, params };
    write_output(&args.out, &file)
}

fn train_el(args: TrainElArgs) -> Result<(), CliError> {
    let spec = el_feature_spec();
    let mut expected: Vec<String> = vec![
        "batch_size".into(),
        "num_tables".into(),
        "sum_logE".into(),
        "mean_D".into(),
        "mean_L".into(),
        "total_lookups".into(),
    ];
    for i in 0..kernels::RF_BINS {
        expected.push(format!("rf_{i}"));
    }
    expected.push("latency_us".into());

    let data = read_file(&args.data)?;
    let mut reader = csv::Reader::from_reader(data.as_slice());
    let expected_refs: Vec<&str> = expected.iter().map(String::as_str).collect();
    expect_headers(&mut reader, &args.data, &expected_refs)?;

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad_input(&args.data, e.to_string()))?;
        let mut values = Vec::with_capacity(expected.len());
        for col in 0..expected.len() {
            values.push(parse_field::<f64>(&args.data, line, &record, col)?);
        }
        let latency = values.pop().expect("latency column");
        let batch_size = values[0];
        if !batch_size.is_finite() || batch_size <= 0.0 {
            return Err(bad_input(&args.data, format!("row {line}: batch_size must be > 0")));
        }
        values[0] = batch_size.log2();
        rows.push((values, latency));
    }

    let cfg = TrainConfig {
        hidden_dims: args.layers,
        learning_rate: args.lr,
        epochs: args.epochs,
        minibatch: 32,
        seed: args.seed,
    };
    let trained = kernels::mlp_train(&rows, spec, &cfg)?;
    eprintln!(
        "trained on {} rows; held-out GMAE {:.4}",
        rows.len(),
        trained.holdout_gmae
    );
    write_output(&args.out, &trained.model)
}

fn rf(args: RfArgs) -> Result<(), CliError> {
    let indices: Vec<Vec<u64>> = parse_json(&args.indices)?;
    write_output(&args.out, &kernels::compute_rf(&indices))
}

fn load_world(paths: &[PathBuf]) -> Result<Vec<ExecutionTrace>, CliError> {
    let mut files = Vec::new();
    for path in paths {
        let meta = fs::metadata(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        if meta.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|source| CliError::Io { path: path.clone(), source })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        return Err(bad_input(&paths[0], "no trace files found"));
    }
    let mut world = Vec::with_capacity(files.len());
    for file in &files {
        world.push(parse_trace(&read_file(file)?)?);
    }
    validate_world(&world)?;
    Ok(world)
}

fn predict(args: PredictArgs) -> Result<(), CliError> {
    let world = load_world(&args.world.traces)?;
    let registry: ModelRegistry = parse_json(&args.world.models)?;
    let overheads: OverheadStats = parse_json(&args.overheads)?;
    match args.engine {
        Engine::Staged => {
            let report = sim::simulate(&world, &registry, &overheads)?;
            eprint!("{}", report.breakdown_table());
            write_output(&args.out, &report)
        }
        Engine::Oracle => {
            let total_us = sim::oracle_simulate(&world, &registry, &overheads)?;
            write_output(&args.out, &serde_json::json!({ "total_us": total_us }))
        }
    }
}

fn baseline(args: BaselineArgs) -> Result<(), CliError> {
    let world = load_world(&args.world.traces)?;
    let registry: ModelRegistry = parse_json(&args.world.models)?;
    let baseline_us = sim::baseline_predict(&world, &registry)?;
    write_output(&args.out, &serde_json::json!({ "baseline_us": baseline_us }))
}

fn load_tables(path: &Path) -> Result<Vec<IndexedTable>, CliError> {
    let data = read_file(path)?;
    let mut reader = csv::Reader::from_reader(data.as_slice());
    expect_headers(&mut reader, path, &["idx", "E", "D", "avg_L", "row_bytes"])?;
    let mut tables = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad_input(path, e.to_string()))?;
        let idx: u64 = parse_field(path, line, &record, 0)?;
        let rows: u64 = parse_field(path, line, &record, 1)?;
        let dim: u32 = parse_field(path, line, &record, 2)?;
        let avg_pooling: f64 = parse_field(path, line, &record, 3)?;
        let row_bytes: u64 = parse_field(path, line, &record, 4)?;
        let config = EmbeddingTableConfig { rows, dim, avg_pooling };
        if row_bytes != config.row_bytes() {
            return Err(bad_input(
                path,
                format!("row {line}: row_bytes {} != 4*D = {}", row_bytes, config.row_bytes()),
            ));
        }
        tables.push(IndexedTable { idx, config });
    }
    Ok(tables)
}

fn shard(args: ShardArgs) -> Result<(), CliError> {
    let tables = load_tables(&args.tables)?;
    let plan = sharding::shard(
        &tables,
        args.ngpus,
        args.sharder.0,
        default_seed(args.seed),
        args.dram_bytes,
    )?;
    write_output(&args.out, &plan)
}

fn select(args: SelectArgs) -> Result<(), CliError> {
    let tables = load_tables(&args.tables)?;
    let registry: ModelRegistry = parse_json(&args.models)?;
    let overheads: OverheadStats = parse_json(&args.overheads)?;
    let candidates: Vec<SharderKind> = args.candidates.iter().map(|c| c.0).collect();
    let world_spec = SelectionWorldSpec { batch_size: args.batch_size, ..Default::default() };
    let outcome = sharding::select_config(
        &tables,
        args.ngpus,
        &candidates,
        default_seed(args.seed),
        |plan| {
            let world = sharding::build_selection_world(&tables, plan, &world_spec);
            Ok(sim::simulate(&world, &registry, &overheads)?.total_us)
        },
    )?;
    write_output(&args.out, &outcome)
}

fn gen(args: GenArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        ranks: args.ranks,
        ops_per_rank: args.ops,
        comm_density: args.density,
        ..Default::default()
    };
    let world = synth_trace(&spec, default_seed(args.seed));
    fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let mut files = Vec::new();
    for trace in &world {
        let path = args.out_dir.join(format!("trace_rank{:02}.json", trace.rank));
        fs::write(&path, to_canonical_json(trace)).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        files.push(path.to_string_lossy().into_owned());
    }
    write_output(&None, &serde_json::json!({ "files": files }))
}

/// µs values from a JSON file: a bare array, one report-like object with a
/// `total_us` field, or an array of such objects.
fn load_series(path: &Path) -> Result<Vec<f64>, CliError> {
    let value: serde_json::Value = parse_json(path)?;
    let from_obj = |v: &serde_json::Value| -> Option<f64> {
        v.get("total_us").and_then(|t| t.as_f64())
    };
    match &value {
        serde_json::Value::Array(items) => items
            .iter()
            .map(|item| {
                item.as_f64()
                    .or_else(|| from_obj(item))
                    .ok_or_else(|| bad_input(path, "array items must be numbers or report objects"))
            })
            .collect(),
        obj @ serde_json::Value::Object(_) => from_obj(obj)
            .map(|v| vec![v])
            .ok_or_else(|| bad_input(path, "object has no total_us field")),
        _ => Err(bad_input(path, "expected an array or a report object")),
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let pred = load_series(&args.pred)?;
    let actual = load_series(&args.reference)?;
    let report = metrics::report(&pred, &actual)?;
    write_output(&args.out, &report)
}

fn expect_headers(
    reader: &mut csv::Reader<&[u8]>,
    path: &Path,
    expected: &[&str],
) -> Result<(), CliError> {
    let headers = reader.headers().map_err(|e| bad_input(path, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(bad_input(
            path,
            format!("header mismatch: expected {expected:?}, got {got:?}"),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    record: &csv::StringRecord,
    col: usize,
) -> Result<T, CliError> {
    let raw = record
        .get(col)
        .ok_or_else(|| bad_input(path, format!("row {line}: missing column {col}")))?;
    raw.trim()
        .parse()
        .map_err(|_| bad_input(path, format!("row {line}: cannot parse '{raw}'")))
}
