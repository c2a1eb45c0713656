use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fbttr::bttr::{fit, select_k_cv_with, BttrModel, CvMetric};
use fbttr::data::{
    csv_schema_for, make_synthetic, partition, partition_indices, write_csv, Dataset, PartitionPlan, Scheme,
    SyntheticSpec, Task,
};
use fbttr::experiment::{
    evaluate, load_source, metric_names, run_experiment, write_outputs, DataSource, EvalReport, ExperimentConfig,
    MetricTable, PairBy,
};
use fbttr::fed::{accept_clients, run_client, serve, ClientState, TcpConnection, TransportConfig};
use fbttr::Error;

#[derive(Parser)]
#[command(name = "fbttr", version, about = "Federated block-term tensor regression")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on all rows of the configured data.
    Fit(Settings),
    /// Predict with a saved model and score the predictions.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV to predict on; columns follow the csv.* settings.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Take part in a federated fit over TCP.
    Federate {
        #[arg(long, value_enum)]
        role: Role,
        /// Server: address to listen on.
        #[arg(long, value_name = "HOST:PORT")]
        listen: Option<String>,
        /// Client: server address.
        #[arg(long, value_name = "HOST:PORT")]
        connect: Option<String>,
        /// Client: id of this client (0-based).
        #[arg(long)]
        id: Option<u32>,
        /// Client: local CSV holding only this client's rows.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Client: train on raw values instead of locally standardised ones.
        #[arg(long)]
        no_normalize: bool,
        #[arg(long, default_value_t = 5)]
        heartbeat_secs: u64,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[command(flatten)]
        settings: Settings,
    },
    /// Run a repeated-seed experiment and write metrics, report and models.
    Experiment(Settings),
    /// Write a planted-block synthetic dataset as CSV.
    Synth {
        /// Full shape, samples first, e.g. 200x6x5.
        #[arg(long, default_value = "200x6x5")]
        shape: String,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Noise level in dB, or "inf" for noiseless data.
        #[arg(long, default_value = "30")]
        snr_db: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value_t = 1)]
        responses: usize,
        #[arg(long, default_value = "regression")]
        task: String,
        /// Add a site column with this many randomly assigned sites.
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild report.json from a metrics.csv.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value_t = Pairing::BlockSeed)]
        pair_by: Pairing,
        /// Defaults to report.json next to the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Server,
    Client,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    BlockSeed,
    Block,
}

/// Config file plus flag overrides; flags win over `--set`, which wins over
/// the file.
#[derive(Args)]
struct Settings {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Settings {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("mode", self.mode.clone()),
            ("clients", self.clients.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &pairs)?,
            None => ExperimentConfig::from_pairs(&pairs)?,
        };
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_protocol() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit(settings) => cmd_fit(&settings),
        Command::Predict { model, data, settings } => cmd_predict(&model, data.as_deref(), &settings),
        Command::Federate { role, listen, connect, id, data, no_normalize, heartbeat_secs, timeout_secs, settings } => {
            let cfg = settings.resolve()?;
            let tcfg = TransportConfig {
                heartbeat: Duration::from_secs(heartbeat_secs.max(1)),
                round_timeout: Duration::from_secs(timeout_secs.max(1)),
                ..TransportConfig::default()
            };
            match role {
                Role::Server => {
                    let addr = listen.ok_or_else(|| Error::Config("the server needs --listen".into()))?;
                    cmd_server(&cfg, &addr, &tcfg)
                }
                Role::Client => {
                    let addr = connect.ok_or_else(|| Error::Config("a client needs --connect".into()))?;
                    let id = id.ok_or_else(|| Error::Config("a client needs --id".into()))?;
                    cmd_client(&cfg, &addr, id, data.as_deref(), !no_normalize, &tcfg)
                }
            }
        }
        Command::Experiment(settings) => cmd_experiment(&settings),
        Command::Synth { shape, blocks, snr_db, seed, rank, responses, task, sites, out } => {
            cmd_synth(&shape, blocks, &snr_db, seed, rank, responses, &task, sites, &out)
        }
        Command::Report { metrics, pair_by, out } => {
            let table = MetricTable::read_csv(&metrics)?;
            let pair_by = match pair_by {
                Pairing::BlockSeed => PairBy::BlockSeed,
                Pairing::Block => PairBy::Block,
            };
            let report = EvalReport::from_table(&table, pair_by)?;
            let out = out.unwrap_or_else(|| metrics.with_file_name("report.json"));
            std::fs::write(&out, report.to_json()?).map_err(Error::from)?;
            print_report(&report);
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn cmd_fit(settings: &Settings) -> Result<()> {
    let cfg = settings.resolve()?;
    let ds = load_source(&cfg.data, cfg.seed)?;
    let stats = ds.compute_norm_stats()?;
    let (x, y) = ds.normalized(&stats)?;
    let mut fcfg = cfg.fit.clone();
    if cfg.cv_folds >= 2 {
        let metric = if ds.task == Task::Binary { CvMetric::RocAuc } else { CvMetric::Pearson };
        fcfg.max_blocks = select_k_cv_with(&x, &y, &fcfg, cfg.cv_folds, metric)?;
        println!("cross-validation chose {} blocks", fcfg.max_blocks);
    }
    let model = fit(&x, &y, &fcfg)?.with_normalization(stats)?;
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let path = cfg.out.join("model.fbttr");
    model.save(&path)?;
    std::fs::write(cfg.out.join("config.resolved"), cfg.resolved()).map_err(Error::from)?;
    println!("fitted {} blocks on {} samples", model.num_blocks(), ds.len());
    print_metrics(&ds, &evaluate(&model, &ds)?, "training");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_predict(model_path: &Path, data: Option<&Path>, settings: &Settings) -> Result<()> {
    let cfg = settings.resolve()?;
    let model = BttrModel::load(model_path)?;
    let source = match (data, &cfg.data) {
        (Some(path), DataSource::Csv { schema, .. }) => DataSource::Csv { path: path.to_path_buf(), schema: schema.clone() },
        (Some(_), DataSource::Synthetic { .. }) => {
            return Err(Error::Config("--data needs the csv.* settings (data = csv) to read its columns".into()).into());
        }
        (None, source) => source.clone(),
    };
    let ds = load_source(&source, cfg.seed)?;
    let pred = model.predict(&ds.x)?;
    let out = settings.out.clone().unwrap_or_else(|| PathBuf::from("predictions.csv"));
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("cannot write {}", out.display()))?;
    w.write_record((0..pred.cols()).map(|m| format!("pred_{m}")))?;
    for i in 0..pred.rows() {
        w.write_record(pred.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(Error::from)?;
    print_metrics(&ds, &evaluate(&model, &ds)?, "prediction");
    println!("wrote {} predictions to {}", pred.rows(), out.display());
    Ok(())
}

fn cmd_server(cfg: &ExperimentConfig, addr: &str, tcfg: &TransportConfig) -> Result<()> {
    if cfg.clients == 0 {
        return Err(Error::Config("the server needs --clients".into()).into());
    }
    let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("cannot listen on {addr}: {e}")))?;
    println!("listening on {} for {} clients", listener.local_addr().map_err(Error::from)?, cfg.clients);
    let conns = accept_clients(&listener, cfg.clients, tcfg)?;
    let (model, state) = serve(conns, &cfg.fit, tcfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let path = cfg.out.join("model.fbttr");
    model.save(&path)?;
    println!("federated fit finished: {} blocks, excluded clients {:?}", model.num_blocks(), state.excluded);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_client(
    cfg: &ExperimentConfig,
    addr: &str,
    id: u32,
    data: Option<&Path>,
    normalize: bool,
    tcfg: &TransportConfig,
) -> Result<()> {
    let ds = match (data, &cfg.data) {
        (Some(path), DataSource::Csv { schema, .. }) => {
            load_source(&DataSource::Csv { path: path.to_path_buf(), schema: schema.clone() }, cfg.seed)?
        }
        (Some(_), DataSource::Synthetic { .. }) => {
            return Err(Error::Config("--data needs the csv.* settings (data = csv) to read its columns".into()).into());
        }
        (None, source) => {
            // Simulated site: this client's share of the configured data.
            let all = load_source(source, cfg.seed)?;
            let plan = PartitionPlan { scheme: cfg.partition, client_count: cfg.clients, seed: cfg.seed };
            let mut parts = partition(&all, &plan)?;
            if id as usize >= parts.len() {
                return Err(Error::Config(format!("client id {id} out of range for {} clients", parts.len())).into());
            }
            parts.swap_remove(id as usize)
        }
    };
    let stats = if normalize { Some(ds.compute_norm_stats()?) } else { None };
    let (x, y) = match &stats {
        Some(s) => ds.normalized(s)?,
        None => (ds.x.clone(), ds.target()),
    };
    let mut state = ClientState::new(id, x, y)?;
    let mut conn = TcpConnection::connect(addr, tcfg)?;
    let mut model = run_client(&mut conn, &mut state, tcfg)?;
    if let Some(s) = stats {
        model = model.with_normalization(s)?;
    }
    std::fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let path = cfg.out.join(format!("model-client-{id}.fbttr"));
    model.save(&path)?;
    println!("client {id}: received a {}-block model", model.num_blocks());
    print_metrics(&ds, &evaluate(&model, &ds)?, "local training");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_experiment(settings: &Settings) -> Result<()> {
    let cfg = settings.resolve()?;
    let out = run_experiment(&cfg)?;
    let files = write_outputs(&cfg, &out)?;
    print_report(&out.report);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    shape: &str,
    blocks: usize,
    snr_db: &str,
    seed: u64,
    rank: usize,
    responses: usize,
    task: &str,
    sites: Option<usize>,
    out: &Path,
) -> Result<()> {
    let dims: Vec<usize> = shape
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse().map_err(|_| Error::Config(format!("bad --shape '{shape}'"))))
        .collect::<Result<_, _>>()?;
    let snr = match snr_db {
        "inf" | "none" => None,
        s => Some(s.parse::<f64>().map_err(|_| Error::Config(format!("bad --snr-db '{s}'")))?),
    };
    let mut spec = SyntheticSpec::new(dims, blocks, snr, seed);
    spec.block_rank = rank;
    spec.responses = responses;
    spec.task = task.parse()?;
    let (mut ds, _) = make_synthetic(&spec)?;
    if let Some(n) = sites {
        let plan = PartitionPlan { scheme: Scheme::Iid, client_count: n, seed };
        let mut labels = vec![String::new(); ds.len()];
        for (s, idx) in partition_indices(&ds, &plan)?.iter().enumerate() {
            for &i in idx {
                labels[i] = format!("site{s}");
            }
        }
        ds.groups = Some(labels);
    }
    write_csv(&ds, out)?;
    let schema = csv_schema_for(&ds);
    println!("wrote {} samples to {}", ds.len(), out.display());
    println!("read it back with: data = csv, csv.path = {}, csv.response = {}, csv.task = {}", out.display(), schema.response.join(","), ds.task);
    if let Some(fs) = &schema.feature_shape {
        println!("  csv.feature_shape = {}", fs.iter().map(usize::to_string).collect::<Vec<_>>().join("x"));
    }
    if schema.site.is_some() {
        println!("  csv.site = site");
    }
    Ok(())
}

fn print_metrics(ds: &Dataset, values: &[f64], what: &str) {
    for (name, v) in metric_names(ds.task).iter().zip(values) {
        println!("{what} {name}: {v:.4}");
    }
}

fn print_report(report: &EvalReport) {
    for m in &report.methods {
        for s in &m.metrics {
            let mean = s.mean.map_or("n/a".into(), |v| format!("{v:.4}"));
            let std = s.std.map_or("n/a".into(), |v| format!("{v:.4}"));
            println!("{:<14} {:<9} {mean} ± {std} (n = {})", m.method, s.metric, s.n);
        }
    }
    for c in &report.comparisons {
        match (c.p_value, &c.note) {
            (Some(p), _) => println!("{} vs {} on {}: p = {p:.4} (n = {})", c.a, c.b, c.metric, c.n.unwrap_or(0)),
            (None, Some(note)) => println!("{} vs {} on {}: {note}", c.a, c.b, c.metric),
            (None, None) => {}
        }
    }
}
