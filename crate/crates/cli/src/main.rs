use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use vpreid::checkpoint::Checkpoint;
use vpreid::config::TrainConfig;
use vpreid::eval::EmbeddingSet;
use vpreid::experiment::{ablate, ablation_table, split_by_cell, Benchmark};
use vpreid::gradcheck::{self, Component, GradcheckOptions};
use vpreid::synth::{dataset_checksum, generate_dataset, Dataset, Platform, SynthConfig};
use vpreid::trainer::{checkpoint_path, embedding_set, load_model, Trainer};
use vpreid::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Video person re-identification across aerial and ground cameras.
#[derive(Debug, Parser)]
#[command(name = "vpreid", version)]
struct Cli {
    /// Config file with one `key = value` per line.
    #[arg(long, global = true, env = "VPREID_CONFIG")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable); beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the resolved training config and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic aerial/ground tracklet dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Write fused descriptors for every tracklet of a dataset.
    Embed(EmbedArgs),
    /// Score embedding files under the three retrieval protocols.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the module ablation ladder.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of identities.
    #[arg(long, default_value_t = 16)]
    ids: usize,
    /// Tracklets per identity, platform and session.
    #[arg(long, default_value_t = 2)]
    tracklets_per_cell: usize,
    /// Frames per tracklet.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Number of sessions (clothing changes between sessions).
    #[arg(long, default_value_t = 2)]
    sessions: usize,
    /// Platforms, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "aerial,ground")]
    platforms: Vec<Platform>,
    /// Standard deviation of per-pixel sensor noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory (holding manifest.tsv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Number of epochs; beats the config file.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train only on the first N tracklets of every identity/platform/session cell.
    #[arg(long)]
    train_per_cell: Option<usize>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (holding manifest.tsv).
    #[arg(long)]
    data: PathBuf,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
    /// Embed only tracklets after the first N of every cell.
    #[arg(long)]
    train_per_cell: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Embedding files; rows are concatenated.
    #[arg(required = true)]
    embeddings: Vec<PathBuf>,
    /// Print `protocol metric value` lines instead of a table.
    #[arg(long)]
    machine: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Only check these components (repeatable): memory, id, triplet,
    /// shape_prior, fusion, mixer, encoder.
    #[arg(long)]
    component: Vec<String>,
    /// Negate the analytic shape-prior gradient (fault injection).
    #[arg(long)]
    flip_shape_prior_sign: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset directory; if omitted, a population is generated per seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Training tracklets per cell; the rest are evaluated.
    #[arg(long, default_value_t = 8)]
    train_per_cell: usize,
    /// Number of epochs; beats the config file.
    #[arg(long)]
    epochs: Option<usize>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::InvalidConfig(_) | Error::InvalidArgument(_)) => EXIT_USAGE,
            Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error,
    }
}

type CmdResult = Result<(), Failure>;

/// Default config, then the config file, then `--set`, then flags.
fn resolve_config(cli: &Cli, file: Option<&Path>, epochs: Option<usize>) -> Result<TrainConfig, Failure> {
    let mut config = match file {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k, v).map_err(|e| usage(e.into()))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate().map_err(|e| usage(e.into()))?;
    Ok(config)
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?)
}

fn run_synth(cli: &Cli, a: &SynthArgs) -> CmdResult {
    let config = SynthConfig {
        num_identities: a.ids,
        platforms: a.platforms.clone(),
        sessions: a.sessions,
        tracklets_per_cell: a.tracklets_per_cell,
        frames_per_tracklet: a.frames,
        noise_std: a.noise,
        seed: cli.seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    config.validate().map_err(|e| usage(e.into()))?;
    let data = generate_dataset(&config, &a.out)?;
    let mut cells: BTreeMap<(u32, String, u8), usize> = BTreeMap::new();
    for r in &data.records {
        *cells
            .entry((r.identity, r.platform.to_string(), r.session.number()))
            .or_default() += 1;
    }
    let count = |f: &dyn Fn(&(u32, String, u8)) -> String| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for (k, n) in &cells {
            *m.entry(f(k)).or_default() += n;
        }
        m
    };
    println!("manifest lines: {}", data.len());
    println!("identities: {}", count(&|k| k.0.to_string()).len());
    for (p, n) in count(&|k| k.1.clone()) {
        println!("platform {p}: {n}");
    }
    for (s, n) in count(&|k| k.2.to_string()) {
        println!("session {s}: {n}");
    }
    println!("checksum: {}", dataset_checksum(&a.out)?);
    Ok(())
}

fn run_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let config = resolve_config(cli, cli.config.as_deref(), a.epochs)?;
    let mut data = load_data(&a.data)?;
    if let Some(n) = a.train_per_cell {
        data = split_by_cell(&data, n).0;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), config.to_text())
        .with_context(|| format!("writing config to {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::<f32>::from_checkpoint(config, &Checkpoint::read(p)?)?,
        None => Trainer::<f32>::new(config, data.num_identities())?,
    };
    let log_path = a.out.join("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut io_error = None;
    let records = trainer.fit(&data, Some(&a.out), |r| {
        if let Err(e) = writeln!(log, "{r}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(anyhow::Error::new(e).context("writing metrics log").into());
    }
    log.flush().context("writing metrics log")?;
    let mut per_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &records {
        let e = per_epoch.entry(r.epoch).or_default();
        e.0 += r.total;
        e.1 += 1;
    }
    for (epoch, (sum, n)) in per_epoch {
        println!("epoch {epoch:>3}  iters {n:>4}  mean loss {:.5}", sum / n as f64);
    }
    println!("checkpoint: {}", checkpoint_path(&a.out, None).display());
    Ok(())
}

fn run_embed(cli: &Cli, a: &EmbedArgs) -> CmdResult {
    // Without an explicit config, reuse the one written next to the checkpoint.
    let sibling = a
        .checkpoint
        .parent()
        .map(|d| d.join("config.txt"))
        .filter(|p| p.is_file());
    let file = cli.config.clone().or(sibling);
    let config = resolve_config(cli, file.as_deref(), None)?;
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let (model, store) = load_model::<f32>(&config, &ckpt)?;
    let mut data = load_data(&a.data)?;
    if let Some(n) = a.train_per_cell {
        data = split_by_cell(&data, n).1;
    }
    let set = embedding_set(&model, &store, &data)?;
    set.write(&a.out)?;
    let (n, d) = set.descriptors.dim();
    println!("embeddings: {n} x {d} -> {}", a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CmdResult {
    let mut sets = a.embeddings.iter().map(|p| EmbeddingSet::read(p));
    let mut all = sets.next().expect("at least one file")?;
    for (set, path) in sets.zip(&a.embeddings[1..]) {
        let set = set?;
        if set.descriptors.ncols() != all.descriptors.ncols() {
            return Err(anyhow!(
                "{}: descriptor dim {} differs from {}",
                path.display(),
                set.descriptors.ncols(),
                all.descriptors.ncols()
            )
            .into());
        }
        for row in set.descriptors.rows() {
            all.descriptors.push_row(row).expect("matching width");
        }
        all.meta.extend(set.meta);
    }
    let report = all.evaluate()?;
    if a.machine {
        print!("{}", report.machine_lines());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn run_gradcheck(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    let components = if a.component.is_empty() {
        Component::ALL.to_vec()
    } else {
        a.component
            .iter()
            .map(|n| Component::parse(n).ok_or_else(|| usage(anyhow!("unknown component {n:?}"))))
            .collect::<Result<_, _>>()?
    };
    let opts = GradcheckOptions {
        seed: cli.seed.unwrap_or(0),
        flip_shape_prior_sign: a.flip_shape_prior_sign,
    };
    let results = gradcheck::run(&components, &opts)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} max_rel_error {:.3e}  checked {:>4}  {status}",
            r.component.name(),
            r.max_rel_error,
            r.checked
        );
        if !r.passed() {
            failed.push(r.component.name());
        }
    }
    if !failed.is_empty() {
        return Err(Failure {
            code: EXIT_NUMERIC,
            error: anyhow!(
                "gradient check failed (tolerance {:e}): {}",
                gradcheck::TOLERANCE,
                failed.join(", ")
            ),
        });
    }
    Ok(())
}

fn run_ablate(cli: &Cli, a: &AblateArgs) -> CmdResult {
    let config = resolve_config(cli, cli.config.as_deref(), a.epochs)?;
    let rows = match &a.data {
        Some(dir) => {
            let (train, test) = split_by_cell(&load_data(dir)?, a.train_per_cell);
            if train.is_empty() || test.is_empty() {
                return Err(usage(anyhow!(
                    "--train-per-cell {} leaves an empty split",
                    a.train_per_cell
                )));
            }
            ablate(&config, &a.seeds, |_| Ok((train.clone(), test.clone())))?
        }
        None => {
            let bench = Benchmark {
                train_per_cell: a.train_per_cell,
                ..Benchmark::default()
            };
            ablate(&config, &a.seeds, |seed| bench.split(seed))?
        }
    };
    print!("{}", ablation_table(&rows));
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if cli.print_config {
        let epochs = match &cli.command {
            Command::Train(a) => a.epochs,
            Command::Ablate(a) => a.epochs,
            _ => None,
        };
        print!("{}", resolve_config(cli, cli.config.as_deref(), epochs)?.to_text());
        return Ok(());
    }
    match &cli.command {
        Command::Synth(a) => run_synth(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Embed(a) => run_embed(cli, a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(cli, a),
        Command::Ablate(a) => run_ablate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
