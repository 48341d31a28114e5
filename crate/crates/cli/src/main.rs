//! Command-line entry points: `train`, `eval`, `gradcheck`, and `bench`.
//!
//! Every command resolves a [`config::RunConfig`] (defaults < config file <
//! flags), creates a run directory, and echoes the resolved configuration
//! there before doing any work. Exit codes: 0 success, 2 usage error,
//! 3 data error, 4 numerical failure.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{ProtocolName, RunConfig};
use reid_core::aggregate::{lga_cascade, FeatureMap};
use reid_core::datasets::{generate_synthetic, load_dataset, DataSet};
use reid_core::error::Error;
use reid_core::evalproto::{evaluate, write_embedding_dump, EvalProtocol};
use reid_core::gradcheck;
use reid_core::gridgraph::build_grid_graph;
use reid_core::losses::ClassFrequencyTable;
use reid_core::pipeline::train::{embed_records, training_log_csv};
use reid_core::pipeline::{load_checkpoint, save_checkpoint, train, TrainOptions};
use reid_core::sampler::SamplerConfig;

#[derive(Parser)]
#[command(
    name = "reid",
    about = "Vehicle re-identification with local graph aggregation: training, evaluation, gradient checks, benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Plain-text key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the run.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory (default: runs/<timestamp>-<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Ablation preset, e.g. baseline+re+bn+lga+cb.
        #[arg(long)]
        ablation: Option<String>,
        /// Cascade depth of the graph aggregation.
        #[arg(long = "lga-depth")]
        lga_depth: Option<usize>,
        /// Class-balanced loss beta.
        #[arg(long)]
        beta: Option<f64>,
        /// Number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint under a benchmark protocol.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint produced by `train`.
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        /// Split protocol.
        #[arg(long, value_enum)]
        protocol: Option<ProtocolName>,
        /// Trials for the random protocols.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run every analytic-vs-finite-difference gradient check.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time sparse aggregation against the dense oracle.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Core(Error::Numerical(_)) => 4,
        CliError::Core(_) => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            common,
            ablation,
            lga_depth,
            beta,
            epochs,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(a) = ablation {
                cfg.ablation = Some(a);
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            cfg.apply_ablation()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            if let Some(d) = lga_depth {
                cfg.lga_depth = d;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cmd_train(cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            protocol,
            trials,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cmd_eval(cfg, &checkpoint)
        }
        Command::Gradcheck { common } => {
            let cfg = resolve(&common)?;
            cmd_gradcheck(cfg)
        }
        Command::Bench { common } => {
            let cfg = resolve(&common)?;
            cmd_bench(cfg)
        }
    }
}

/// Defaults, then the config file, then the shared flags.
fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(manifest) = &common.manifest {
        cfg.manifest = Some(manifest.clone());
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

/// Creates the run directory and writes the resolved-config echo.
fn prepare_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.out.clone().unwrap_or_else(|| {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{ts}-{command}"))
    });
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.resolved"), cfg.echo()).map_err(Error::from)?;
    Ok(dir)
}

/// Loads the manifest dataset, or generates the configured synthetic one
/// (persisting it under the run directory for later evaluation).
fn obtain_dataset(cfg: &RunConfig, run_dir: &Path) -> Result<DataSet, CliError> {
    if let Some(path) = &cfg.manifest {
        return Ok(load_dataset(path)?);
    }
    if let Some(synth) = &cfg.synthetic {
        let spec = synth.to_spec()?;
        let data = generate_synthetic(&spec)?;
        let manifest_path = data.write_to_dir(&run_dir.join("data"))?;
        println!("synthetic dataset written to {}", manifest_path.display());
        // Reload so payloads match what a later evaluation will read.
        return Ok(load_dataset(&manifest_path)?);
    }
    Err(CliError::Usage(
        "no input data: pass --manifest PATH or configure synthetic.* keys".into(),
    ))
}

/// Sorted distinct train labels and their per-class counts.
fn train_class_counts(data: &DataSet) -> Result<(Vec<usize>, Vec<u64>), CliError> {
    let train = data.manifest.train_indices();
    if train.is_empty() {
        return Err(CliError::Core(Error::config(
            "manifest has no records tagged train",
        )));
    }
    let mut classes: Vec<usize> = train
        .iter()
        .map(|&i| data.manifest.records[i].label)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut counts = vec![0u64; classes.len()];
    for &i in &train {
        let label = data.manifest.records[i].label;
        let pos = classes.binary_search(&label).expect("label present");
        counts[pos] += 1;
    }
    Ok((classes, counts))
}

fn cmd_train(cfg: RunConfig) -> Result<(), CliError> {
    let run_dir = prepare_run_dir(&cfg, "train")?;
    let data = obtain_dataset(&cfg, &run_dir)?;
    let (classes, counts) = train_class_counts(&data)?;
    let model_cfg = cfg.model_config(classes.len());
    let freq = ClassFrequencyTable::new(counts, cfg.beta)?;
    let sampler_cfg = SamplerConfig {
        identities_per_batch: cfg.batch_p,
        instances_per_identity: cfg.batch_k,
        seed: cfg.seed,
    };
    let opts = TrainOptions {
        epochs: cfg.epochs,
        seed: cfg.seed,
        margin: cfg.margin,
        mining: cfg.mining,
    };
    let started = Instant::now();
    let result = train(&data, &model_cfg, &cfg.schedule(), &sampler_cfg, &freq, &opts)?;
    for row in &result.log {
        println!(
            "epoch {:3}  lr {:<8}  cb {:.6}  tri {:.6}  total {:.6}",
            row.epoch, row.lr, row.cb_loss, row.tri_loss, row.total_loss
        );
    }

    let ckpt_path = run_dir.join("model.lgac");
    let mut out = BufWriter::new(fs::File::create(&ckpt_path).map_err(Error::from)?);
    save_checkpoint(&result.model, &mut out)?;
    drop(out);
    fs::write(run_dir.join("train_log.csv"), training_log_csv(&result.log))
        .map_err(Error::from)?;
    println!(
        "trained {} epochs over {} identities in {:.1}s; checkpoint at {}",
        cfg.epochs,
        classes.len(),
        started.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let run_dir = prepare_run_dir(&cfg, "eval")?;
    let data = obtain_dataset(&cfg, &run_dir)?;
    let mut file = fs::File::open(checkpoint).map_err(Error::from)?;
    let model = load_checkpoint(&mut file)?;

    let eval_idx = data.manifest.eval_indices();
    if eval_idx.is_empty() {
        return Err(CliError::Core(Error::Protocol(
            "manifest has no records tagged probe or gallery".into(),
        )));
    }
    let records: Vec<_> = eval_idx
        .iter()
        .map(|&i| data.manifest.records[i].clone())
        .collect();
    let embeddings = embed_records(&model, &data, &eval_idx)?;

    let proto = match cfg.protocol {
        ProtocolName::Veri => EvalProtocol::veri(cfg.seed),
        ProtocolName::Fixed => EvalProtocol::fixed(cfg.seed),
        ProtocolName::Vehicleid => EvalProtocol::vehicleid(cfg.trials, cfg.seed)?,
        ProtocolName::Veriwild => EvalProtocol::veriwild(cfg.trials, cfg.seed)?,
    };
    let mut dump = BufWriter::new(
        fs::File::create(run_dir.join("embeddings.lgaf")).map_err(Error::from)?,
    );
    write_embedding_dump(&embeddings, &mut dump)?;
    dump.flush().map_err(Error::from)?;

    let report = evaluate(&records, &embeddings, &proto)?;
    let csv = report.to_csv(cfg.protocol.as_str());
    print!("{csv}");
    fs::write(run_dir.join("metrics.csv"), &csv).map_err(Error::from)?;
    Ok(())
}

fn cmd_gradcheck(cfg: RunConfig) -> Result<(), CliError> {
    let run_dir = prepare_run_dir(&cfg, "gradcheck")?;
    let outcomes = gradcheck::run_all(cfg.seed)?;
    let csv = gradcheck::outcomes_csv(&outcomes);
    print!("{csv}");
    fs::write(run_dir.join("gradcheck.csv"), &csv).map_err(Error::from)?;
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Core(Error::Numerical(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        ))));
    }
    Ok(())
}

/// Dense oracle used by the benchmark: explicit `k x k` matrix, applied
/// `depth` times with ReLU.
fn dense_cascade(dense: &[f64], k: usize, map: &FeatureMap, depth: usize) -> FeatureMap {
    let mut cur = map.clone();
    for _ in 0..depth {
        let mut next = FeatureMap::zeros(cur.channels(), cur.width(), cur.height());
        for ch in 0..cur.channels() {
            let src = cur.channel(ch);
            let dst = next.channel_mut(ch);
            for (i, slot) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += dense[i * k + j] * src[j];
                }
                *slot = acc.max(0.0);
            }
        }
        cur = next;
    }
    cur
}

fn time_ns<F: FnMut()>(mut f: F) -> u128 {
    // One warmup pass, then enough iterations to absorb timer noise.
    f();
    let probe = Instant::now();
    f();
    let once = probe.elapsed().as_nanos().max(1);
    let iters = (50_000_000 / once).clamp(1, 200) as u32;
    let start = Instant::now();
    for _ in 0..iters {
        f();
    }
    start.elapsed().as_nanos() / iters as u128
}

fn cmd_bench(cfg: RunConfig) -> Result<(), CliError> {
    let run_dir = prepare_run_dir(&cfg, "bench")?;
    let mut csv = String::from("grid,depth,impl,ns_per_map\n");
    let channels = cfg.bench_channels;
    for &side in &cfg.bench_grids {
        let graph = build_grid_graph(side, side, 1.5)?;
        let k = side * side;
        let values: Vec<f64> = (0..channels * k)
            .map(|i| ((i.wrapping_mul(2654435761)) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        let map = FeatureMap::from_values(channels, side, side, values)?;
        let mut dense = vec![0.0f64; k * k];
        for i in 0..k {
            for &(j, w) in graph.neighbors(i) {
                dense[i * k + j] = w;
            }
        }
        for &depth in &cfg.bench_depths {
            let sparse_ns = time_ns(|| {
                let out = lga_cascade(&map, &graph, depth).unwrap();
                std::hint::black_box(&out);
            });
            csv.push_str(&format!("{side},{depth},sparse,{sparse_ns}\n"));
            let dense_ns = time_ns(|| {
                let out = dense_cascade(&dense, k, &map, depth);
                std::hint::black_box(&out);
            });
            csv.push_str(&format!("{side},{depth},dense,{dense_ns}\n"));
        }
    }
    print!("{csv}");
    fs::write(run_dir.join("bench.csv"), &csv).map_err(Error::from)?;
    Ok(())
}
