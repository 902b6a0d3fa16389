//! `earlyflow`: packet captures to flow series, and early flow classification.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use earlyflow_core::dataset::{read_dataset, write_dataset, DatasetError};
use earlyflow_core::earliness::{aggregate_earliness, PrefixSpec};
use earlyflow_core::features::{extract_mts, MtsSample};
use earlyflow_core::flow::{
    assemble, join_labels, merge_by_start, read_label_rules, FlowError, DEFAULT_WINDOW_SECS,
};
use earlyflow_core::model::{
    export_latents, load_checkpoint, save_checkpoint, Checkpoint, MdtConfig, MdtModel, ModelError,
};
use earlyflow_core::pcap::{open_capture, PcapError};
use earlyflow_core::train::{
    evaluate, sweep, train, write_history, PreparedData, SweepResult, SweepRow, TrainConfig,
    TrainError,
};

#[derive(Parser)]
#[command(
    name = "earlyflow",
    version,
    about = "Early classification of network flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn pcap files into a flow dataset (flows.csv + series.csv).
    Extract(ExtractArgs),
    /// Train a model on flow prefixes and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split of a dataset.
    Eval(EvalArgs),
    /// Train and test one model per prefix length or duration.
    Sweep(SweepArgs),
    /// Export classification-token states for every flow.
    Latents(LatentArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Capture files, classic pcap format.
    #[arg(long, required = true, num_args = 1..)]
    pcap: Vec<PathBuf>,
    /// Label rules CSV; without it every flow is BENIGN.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SECS)]
    window_secs: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
#[group(multiple = false)]
struct PrefixArgs {
    /// Keep the first L packets of each flow.
    #[arg(long, value_name = "L")]
    prefix_packets: Option<usize>,
    /// Keep the packets within T seconds of each flow's first packet.
    #[arg(long, value_name = "T")]
    prefix_duration: Option<f64>,
}

impl PrefixArgs {
    fn spec(self) -> Result<Option<PrefixSpec>, CliError> {
        let spec = match (self.prefix_packets, self.prefix_duration) {
            (Some(l), _) => Some(PrefixSpec::by_count(l)),
            (_, Some(t)) => Some(PrefixSpec::by_duration(t)),
            _ => None,
        };
        spec.transpose()
            .map_err(|e| CliError::Invalid(e.to_string()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    prefix: PrefixArgs,
    /// JSON with optional `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint manifest path; the weights go to a sibling `.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the prefix the checkpoint was trained on.
    #[command(flatten)]
    prefix: PrefixArgs,
    /// Score every flow instead of the held-out test split.
    #[arg(long)]
    all: bool,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Packets,
    Duration,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Comma-separated packet counts or durations.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid points trained at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    prefix: PrefixArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: MdtConfig,
    train: TrainConfig,
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Invalid(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Invalid(m) => m,
        }
    }

    fn prefixed(self, path: &Path) -> CliError {
        match self {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            CliError::Invalid(m) => CliError::Invalid(format!("{}: {m}", path.display())),
        }
    }
}

fn io_error(context: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", context.display()))
}

fn csv_error(e: &csv::Error) -> CliError {
    if e.is_io_error() {
        CliError::Io(e.to_string())
    } else {
        CliError::Invalid(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match &e {
            DatasetError::Io { .. } | DatasetError::MissingFile(_) => CliError::Io(e.to_string()),
            DatasetError::Csv { source, .. } if source.is_io_error() => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Csv(c) => csv_error(c),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::Csv(ref c) => csv_error(c),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PcapError> for CliError {
    fn from(e: PcapError) -> Self {
        match e {
            PcapError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Latents(a) => cmd_latents(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("earlyflow: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_extract(a: ExtractArgs) -> Result<(), CliError> {
    let rules = match &a.labels {
        Some(path) => {
            if !path.is_file() {
                return Err(io_error(path, "no such file"));
            }
            read_label_rules(path)?
        }
        None => Vec::new(),
    };
    let (mut packets, mut skipped) = (0u64, 0u64);
    let mut per_capture = Vec::with_capacity(a.pcap.len());
    for path in &a.pcap {
        let mut reader = open_capture(path).map_err(|e| match e {
            PcapError::Io(io) => io_error(path, io),
            other => CliError::Invalid(format!("{}: {other}", path.display())),
        })?;
        let mut records = Vec::new();
        while let Some(r) = reader
            .next_packet()
            .map_err(|e| CliError::from(e).prefixed(path))?
        {
            records.push(r);
        }
        let assembly =
            assemble(records, a.window_secs).map_err(|e| CliError::from(e).prefixed(path))?;
        skipped += reader.stats().skipped + assembly.ignored;
        packets += assembly
            .flows
            .iter()
            .map(|f| f.packets.len() as u64)
            .sum::<u64>();
        per_capture.push(assembly.flows);
    }
    let several = per_capture.len() > 1;
    let (origin, flows): (Vec<usize>, Vec<_>) = merge_by_start(per_capture).into_iter().unzip();
    let samples: Vec<MtsSample> = join_labels(flows, &rules)
        .iter()
        .zip(origin)
        .map(|(f, capture)| {
            let mut s = extract_mts(f);
            // Session keys can repeat across captures.
            if several {
                s.flow_id = format!("{capture}/{}", s.flow_id);
            }
            s
        })
        .collect();
    let manifest = write_dataset(&samples, &a.out)?;
    println!("flows,packets,skipped");
    println!("{},{packets},{skipped}", manifest.num_flows);
    Ok(())
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_samples(dir: &Path) -> Result<Vec<MtsSample>, CliError> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: dataset has no flows",
            dir.display()
        )));
    }
    Ok(samples)
}

/// Model config with the data-dependent fields filled in.
fn fitted_config(
    mut cfg: MdtConfig,
    data: &PreparedData,
    prefix: &[PrefixSpec],
) -> Result<MdtConfig, CliError> {
    cfg.d_in = data.d().unwrap_or(cfg.d_in);
    cfg.n_classes = data.n_classes();
    cfg.validate()?;
    if let Some(p) = prefix
        .iter()
        .find(|p| matches!(p, PrefixSpec::ByCount(l) if *l > cfg.max_len))
    {
        return Err(CliError::Invalid(format!(
            "prefix {p} exceeds max_len {}",
            cfg.max_len
        )));
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let spec = a.prefix.spec()?.ok_or_else(|| {
        CliError::Invalid("one of --prefix-packets or --prefix-duration is required".into())
    })?;
    let run = read_run_config(a.config.as_deref())?;
    let samples = load_samples(&a.data)?;
    let data = PreparedData::new(&samples, spec, run.model.max_len, None)?;
    let cfg = fitted_config(run.model, &data, &[spec])?;
    let split = data.split(&run.train, a.seed);
    let model = MdtModel::new(cfg, a.seed)?;
    let outcome = train(model, &data, &split, &run.train, a.seed)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        classes: data.classes.clone(),
        prefix: Some(spec),
        train: Some(run.train),
    };
    save_checkpoint(&a.out, &ckpt)?;
    write_history(&outcome.history, history_path(&a.out))?;
    eprintln!(
        "trained {} epochs, kept epoch {} (validation macro F1 {:.4})",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.history[outcome.best_epoch - 1].val_macro_f1
    );
    Ok(())
}

fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let spec = a.prefix.spec()?.or(ckpt.prefix).ok_or_else(|| {
        CliError::Invalid(
            "checkpoint records no prefix; pass --prefix-packets or --prefix-duration".into(),
        )
    })?;
    let samples = load_samples(&a.data)?;
    let model = &ckpt.model;
    let data = PreparedData::new(&samples, spec, model.config().max_len, Some(&ckpt.classes))?;
    let idx: Vec<usize> = if a.all {
        (0..data.len()).collect()
    } else {
        let tc = ckpt.train.clone().unwrap_or_default();
        data.split(&tc, model.seed()).test
    };
    if idx.is_empty() {
        return Err(CliError::Invalid("the test split is empty".into()));
    }
    let metrics = evaluate(model, &data, &idx)?;
    let reports: Vec<_> = idx.iter().map(|&i| data.reports[i]).collect();
    let (mean_e, mean_de) =
        aggregate_earliness(&reports).map_err(|e| CliError::Invalid(e.to_string()))?;
    let result = SweepResult {
        rows: vec![SweepRow {
            prefix: spec,
            mean_e,
            mean_de,
            metrics,
        }],
    };
    write_result(&result, a.out.as_deref())
}

fn write_result(result: &SweepResult, out: Option<&Path>) -> Result<(), CliError> {
    let w = output(out)?;
    result.write_csv(w)?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let grid: Vec<PrefixSpec> = a
        .grid
        .iter()
        .map(|&v| match a.mode {
            Mode::Packets if v.fract() == 0.0 && v >= 1.0 => Ok(PrefixSpec::ByCount(v as usize)),
            Mode::Packets => Err(CliError::Invalid(format!(
                "packet count {v} is not a positive integer"
            ))),
            Mode::Duration => {
                PrefixSpec::by_duration(v).map_err(|e| CliError::Invalid(e.to_string()))
            }
        })
        .collect::<Result<_, _>>()?;
    let run = read_run_config(a.config.as_deref())?;
    let samples = load_samples(&a.data)?;
    let probe = PreparedData::new(&samples, grid[0], run.model.max_len, None)?;
    let cfg = fitted_config(run.model, &probe, &grid)?;
    let result = sweep(&samples, &cfg, &run.train, a.seed, &grid, a.jobs)?;
    write_result(&result, a.out.as_deref())
}

fn cmd_latents(a: LatentArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let spec = a.prefix.spec()?.or(ckpt.prefix).ok_or_else(|| {
        CliError::Invalid(
            "checkpoint records no prefix; pass --prefix-packets or --prefix-duration".into(),
        )
    })?;
    let samples = read_dataset(&a.data)?;
    if let Some(s) = samples.iter().find(|s| s.d != ckpt.model.config().d_in) {
        return Err(CliError::Invalid(format!(
            "flow {} has {} features, the model expects {}",
            s.flow_id,
            s.d,
            ckpt.model.config().d_in
        )));
    }
    export_latents(&ckpt.model, &samples, spec, &a.out)?;
    Ok(())
}
