//! `garner`: synthesize data, build views, train, embed and evaluate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use garner_core::augment::regular_negative_graph;
use garner_core::data::{load_labels, write_matrix, MatrixFormat, SyntheticConfig};
use garner_core::evaluate::{eval_over_seeds, summarize, EvalSummary};
use garner_core::trainer::{feasible_degree, positive_views, train_with_checkpoints};
use garner_core::{
    embed, eval_function, eval_retrieval, eval_traffic, load_dataset, EmbeddingMatrix,
    ModelParams, SparseGraph, TrainConfig,
};

#[derive(Parser)]
#[command(name = "garner", version, about = "Road-network representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic road network with labels for every task.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Write one augmented view as an edge list.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        view: View,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV (default: `<output>/view_<name>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoders; writes `params.grnp` and `train_log.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute fused road embeddings from a checkpoint.
    Embed {
        #[arg(long)]
        config: PathBuf,
        /// Parameter file (default: `<output>/params.grnp`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Embedding file (default: `<output>/embeddings.grnm`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate embeddings on a downstream task; prints a JSON report.
    Eval {
        #[arg(value_enum)]
        task: Task,
        #[arg(long)]
        embedding: PathBuf,
        /// Directory holding the label files.
        #[arg(long)]
        labels: PathBuf,
        /// Parameters used to map retrieval queries.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of split seeds to average over.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// First split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Grnm,
}

impl From<Format> for MatrixFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => MatrixFormat::Csv,
            Format::Grnm => MatrixFormat::Grnm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    Topology,
    Config,
    Diffusion,
    Negative,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Function,
    Traffic,
    Retrieval,
}

/// Dataset and output locations plus training hyper-parameters.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    dataset: PathBuf,
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default)]
    train: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output = match out {
            Some(o) => o.to_path_buf(),
            None => base.join(&cfg.output),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.train
            .validate()
            .with_context(|| format!("invalid train section in {}", path.display()))?;
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn edges_csv(g: &SparseGraph) -> String {
    let mut s = String::from("src,dst,weight\n");
    for (u, v, w) in g.undirected_edges() {
        s.push_str(&format!("{u},{v},{w}\n"));
    }
    s
}

fn cmd_synth(n: usize, clusters: usize, seed: u64, out: &Path, format: Format) -> Result<()> {
    let data = garner_core::data::generate_synthetic_with(&SyntheticConfig::new(n, clusters, seed))?;
    data.save(out, format.into())
        .with_context(|| format!("cannot write dataset to {}", out.display()))?;
    log::info!("wrote {n} roads to {}", out.display());
    Ok(())
}

fn cmd_augment(config: &Path, view: View, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config, seed, None)?;
    let ds = load_dataset(&run.dataset)?;
    let (name, graph) = match view {
        View::Negative => {
            let d = feasible_degree(ds.n(), run.train.neg_degree);
            ("negative", regular_negative_graph(ds.n(), d, run.train.seed)?)
        }
        other => {
            let mut train = run.train.clone();
            train.objective.config_view = true;
            let [g0, g1, g2] = positive_views(&ds, &train)?;
            match other {
                View::Topology => ("topology", g0),
                View::Config => ("config", g1),
                _ => ("diffusion", g2),
            }
        }
    };
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.output.join(format!("view_{name}.csv")));
    write_text(&path, &edges_csv(&graph))?;
    log::info!("wrote {name} view with {} edges to {}", graph.undirected_edges().len(), path.display());
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config, seed, out)?;
    let ds = load_dataset(&run.dataset)?;
    fs::create_dir_all(&run.output)
        .with_context(|| format!("cannot create {}", run.output.display()))?;
    let (params, log) = train_with_checkpoints(&ds, &run.train, Some(&run.output))?;
    params.save(&run.output.join("params.grnp"))?;
    write_text(&run.output.join("train_log.csv"), &log.to_csv())?;
    log::info!(
        "trained {} steps (best at {:?}) into {}",
        log.records.len(),
        log.best_iter,
        run.output.display()
    );
    Ok(())
}

fn cmd_embed(config: &Path, checkpoint: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config, seed, None)?;
    let ds = load_dataset(&run.dataset)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.output.join("params.grnp"));
    let params = ModelParams::load(&ckpt)?;
    params
        .check_dims(ds.config_dim(), ds.feature_dim())
        .with_context(|| format!("checkpoint {} does not fit the dataset", ckpt.display()))?;
    if params.proj_dim() != run.train.proj_dim || params.embed_dim() != run.train.embed_dim {
        bail!(
            "checkpoint {} has p={} f={} but the config asks for p={} f={}",
            ckpt.display(),
            params.proj_dim(),
            params.embed_dim(),
            run.train.proj_dim,
            run.train.embed_dim
        );
    }
    let z = embed(&ds, &params, &run.train)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.output.join("embeddings.grnm"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    write_matrix(&path, &z)?;
    log::info!("wrote {}x{} embeddings to {}", z.nrows(), z.ncols(), path.display());
    Ok(())
}

fn table(summary: &EvalSummary) -> String {
    let mut s = format!("{} ({} run{})\n", summary.task, summary.runs, if summary.runs == 1 { "" } else { "s" });
    for (name, mean) in &summary.mean {
        s.push_str(&format!("  {name:<14} {mean:>10.4} ± {:.4}\n", summary.std[name]));
    }
    s
}

fn cmd_eval(
    task: Task,
    embedding: &Path,
    labels_dir: &Path,
    checkpoint: Option<&Path>,
    seeds: u64,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let z: EmbeddingMatrix = garner_core::data::read_matrix(embedding)?;
    let name = match task {
        Task::Function => "function",
        Task::Traffic => "traffic",
        Task::Retrieval => "retrieval",
    };
    let labels = load_labels(labels_dir, name)?;
    let seed_range = seed..seed + seeds;
    let summary = match task {
        Task::Function => eval_over_seeds(seed_range, |s| eval_function(&z, &labels, s))?,
        Task::Traffic => eval_over_seeds(seed_range, |s| eval_traffic(&z, &labels, s))?,
        Task::Retrieval => {
            let ckpt = checkpoint.context("retrieval needs --checkpoint to map queries")?;
            let params = ModelParams::load(ckpt)?;
            summarize(vec![eval_retrieval(&z, &labels, &params)?])?
        }
    };
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = out {
        write_text(path, &format!("{json}\n"))?;
    }
    eprint!("{}", table(&summary));
    // A closed pipe on stdout (e.g. `| head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{json}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, clusters, seed, out, format } => cmd_synth(n, clusters, seed, &out, format),
        Command::Augment { config, view, seed, out } => cmd_augment(&config, view, seed, out.as_deref()),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Embed { config, checkpoint, seed, out } => {
            cmd_embed(&config, checkpoint.as_deref(), seed, out.as_deref())
        }
        Command::Eval { task, embedding, labels, checkpoint, seeds, seed, out } => {
            cmd_eval(task, &embedding, &labels, checkpoint.as_deref(), seeds, seed, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
