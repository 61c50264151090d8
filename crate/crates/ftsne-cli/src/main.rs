//! Command-line front end: generate synthetic data, embed under any
//! f-divergence (primal or variational optimizer), evaluate retrieval
//! quality, and export the pairwise loss/gradient heatmap grids.
//!
//! Exit codes: 0 success, 2 parameter/configuration error, 3 numeric
//! abort (NaN/Inf mid-run; the failing epoch or round is on stderr).

use clap::{Args, Parser, Subcommand, ValueEnum};
use ftsne::affinity::{
    conditional_affinities, latent_affinity, symmetrize, t_kernel_rows, LabelKind,
};
use ftsne::config::{OptimizerKind, RunConfig};
use ftsne::divergence::{
    heatmap_grids, Divergence, HEATMAP_DEFAULT_RANGE, HEATMAP_DEFAULT_RESOLUTION,
};
use ftsne::error::FtsneError;
use ftsne::io;
use ftsne::metrics::{default_epsilon_grid, knn_kfn_curve, pr_curve_xy, pr_curve_zy};
use ftsne::primal::{primal_loss, run_primal, Embedding, PrimalOptions};
use ftsne::variational::run_variational;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ftsne", version, about = "Neighbor embeddings under f-divergences")]
struct Cli {
    /// Worker thread cap (also via FTSNE_THREADS); defaults to hardware
    /// concurrency.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    Gen(GenArgs),
    /// Build affinities and optimize an embedding.
    Embed(EmbedArgs),
    /// Evaluate an embedding against its dataset.
    Eval(EvalArgs),
    /// Export the pairwise loss and gradient surfaces of a divergence.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    #[value(alias = "swiss_roll")]
    SwissRoll,
    #[value(alias = "gaussian_blobs")]
    GaussianBlobs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: DatasetKind,
    /// Number of points.
    #[arg(long)]
    m: usize,
    /// Gaussian noise added to swiss-roll coordinates.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Triangle side length between blob centers.
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    /// Per-blob standard deviation.
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// kl | rkl | js | ch | hl | interp:ALPHA
    #[arg(long)]
    divergence: Option<String>,
    /// primal | variational
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// Embedding dimension (1-3).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    momentum0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    momentum_decay: Option<f64>,
    /// Early exaggeration as FACTOR:EPOCHS.
    #[arg(long)]
    exaggeration: Option<String>,
    #[arg(long)]
    j_steps: Option<usize>,
    #[arg(long)]
    k_steps: Option<usize>,
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Comma-separated encoder hidden widths, e.g. `10` or `5,10`.
    #[arg(long)]
    encoder_widths: Option<String>,
    /// Comma-separated head hidden widths.
    #[arg(long)]
    head_widths: Option<String>,
    /// Stop when the primal loss plateaus over 20 rounds.
    #[arg(long)]
    plateau_detection: bool,
    #[arg(long)]
    trace_every: Option<usize>,
    #[arg(long)]
    out_embedding: Option<PathBuf>,
    #[arg(long)]
    out_trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelKindArg {
    Discrete,
    Continuous,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embedding: PathBuf,
    /// Comma-separated metric list: xy, zy, knn.
    #[arg(long, default_value = "xy,knn")]
    metrics: String,
    /// Perplexity for the data-space conditional similarities.
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// How the label column defines latent neighborhoods (zy metric).
    #[arg(long, value_enum, default_value_t = LabelKindArg::Discrete)]
    label_kind: LabelKindArg,
    /// K values: `A..B` (inclusive range) or a comma list.
    #[arg(long, default_value = "1..20")]
    k_grid: String,
    /// Directory for curve CSVs and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Recorded in summary.json for bookkeeping.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    divergence: String,
    #[arg(long, default_value_t = HEATMAP_DEFAULT_RANGE.0)]
    p_min: f64,
    #[arg(long, default_value_t = HEATMAP_DEFAULT_RANGE.1)]
    p_max: f64,
    #[arg(long, default_value_t = HEATMAP_DEFAULT_RANGE.0)]
    q_min: f64,
    #[arg(long, default_value_t = HEATMAP_DEFAULT_RANGE.1)]
    q_max: f64,
    #[arg(long, default_value_t = HEATMAP_DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long)]
    out_loss: PathBuf,
    #[arg(long)]
    out_gradient: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("FTSNE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized, --threads ignored");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FtsneError::NumericAbort { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<(), FtsneError> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Heatmap(args) => cmd_heatmap(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), FtsneError> {
    let data = match args.kind {
        DatasetKind::SwissRoll => ftsne::datagen::swiss_roll(args.m, args.noise, args.seed)?,
        DatasetKind::GaussianBlobs => {
            ftsne::datagen::gaussian_blobs(args.m, args.separation, args.std, args.seed)?
        }
    };
    io::write_dataset_csv(&args.out, &data)?;
    println!("wrote {} points to {}", data.len(), args.out.display());
    Ok(())
}

fn parse_widths(raw: &str) -> Result<Vec<usize>, FtsneError> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| FtsneError::Parameter(format!("bad width '{p}'")))
        })
        .collect()
}

/// Config precedence: flags override the config file, which overrides
/// defaults.
fn merge_config(args: &EmbedArgs) -> Result<RunConfig, FtsneError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.input {
        cfg.input = Some(v.display().to_string());
    }
    if let Some(v) = &args.divergence {
        cfg.divergence = v.clone();
    }
    if let Some(v) = &args.optimizer {
        cfg.optimizer = v.parse::<OptimizerKind>()?;
    }
    if let Some(v) = args.perplexity {
        cfg.perplexity = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = args.momentum0 {
        cfg.momentum0 = v;
    }
    if let Some(v) = args.lr_decay {
        cfg.lr_decay = v;
    }
    if let Some(v) = args.momentum_decay {
        cfg.momentum_decay = v;
    }
    if let Some(v) = &args.exaggeration {
        cfg.exaggeration = Some(v.clone());
    }
    if let Some(v) = args.j_steps {
        cfg.j_steps = v;
    }
    if let Some(v) = args.k_steps {
        cfg.k_steps = v;
    }
    if let Some(v) = args.disc_lr {
        cfg.disc_lr = v;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = &args.encoder_widths {
        cfg.encoder_widths = parse_widths(v)?;
    }
    if let Some(v) = &args.head_widths {
        cfg.head_widths = parse_widths(v)?;
    }
    if args.plateau_detection {
        cfg.plateau_detection = true;
    }
    if let Some(v) = args.trace_every {
        cfg.trace_every = v;
    }
    if let Some(v) = &args.out_embedding {
        cfg.output_embedding = Some(v.display().to_string());
    }
    if let Some(v) = &args.out_trace {
        cfg.output_trace = Some(v.display().to_string());
    }
    Ok(cfg)
}

fn cmd_embed(args: EmbedArgs) -> Result<(), FtsneError> {
    let cfg = merge_config(&args)?;
    let div = cfg.divergence()?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| FtsneError::Parameter("no input dataset (--input)".into()))?;
    let out_embedding = cfg
        .output_embedding
        .clone()
        .ok_or_else(|| FtsneError::Parameter("no embedding output path (--out-embedding)".into()))?;

    let data = io::read_dataset_csv(Path::new(&input))?;
    let cond = conditional_affinities(&data, cfg.perplexity)?;
    let p = symmetrize(&cond);

    let (embedding, final_loss): (Embedding, f64) = match cfg.optimizer {
        OptimizerKind::Primal => {
            let options = PrimalOptions {
                trace_every: cfg.trace_every,
                exaggeration: cfg.exaggeration()?,
            };
            let run = run_primal(div, &p, &cfg.schedule(), cfg.d, &options)?;
            if let Some(trace_path) = &cfg.output_trace {
                io::write_loss_trace_csv(Path::new(trace_path), &run.trace)?;
            }
            let loss = primal_loss(div, &p, &run.embedding)?;
            (run.embedding, loss)
        }
        OptimizerKind::Variational => {
            let run = run_variational(div, &p, &data, &cfg.minimax(), cfg.d)?;
            if let Some(trace_path) = &cfg.output_trace {
                io::write_variational_trace_csv(Path::new(trace_path), &run.trace)?;
            }
            let loss = primal_loss(div, &p, &run.embedding)?;
            (run.embedding, loss)
        }
    };

    io::write_embedding_csv(Path::new(&out_embedding), embedding.coords(), data.labels())?;
    println!("final_loss={final_loss}");
    Ok(())
}

fn parse_k_grid(raw: &str, m: usize) -> Result<Vec<usize>, FtsneError> {
    let err = |r: &str| FtsneError::Parameter(format!("bad K grid '{r}'"));
    let grid: Vec<usize> = if let Some((a, b)) = raw.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| err(raw))?;
        let hi: usize = b.trim().parse().map_err(|_| err(raw))?;
        if lo == 0 || hi < lo {
            return Err(err(raw));
        }
        (lo..=hi).collect()
    } else {
        raw.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| err(raw)))
            .collect::<Result<_, _>>()?
    };
    let grid: Vec<usize> = grid.into_iter().filter(|&k| k < m).collect();
    if grid.is_empty() {
        return Err(FtsneError::Parameter(format!(
            "K grid has no values below m = {m}"
        )));
    }
    Ok(grid)
}

fn cmd_eval(args: EvalArgs) -> Result<(), FtsneError> {
    let data = io::read_dataset_csv(&args.data)?;
    let emb = io::read_embedding_csv(&args.embedding)?;
    if emb.rows() != data.len() {
        return Err(FtsneError::Parameter(format!(
            "row counts differ: dataset {} vs embedding {}",
            data.len(),
            emb.rows()
        )));
    }
    let requested: Vec<&str> = args.metrics.split(',').map(str::trim).collect();
    for name in &requested {
        if !matches!(*name, "xy" | "zy" | "knn") {
            return Err(FtsneError::Parameter(format!(
                "unknown metric '{name}' (expected xy, zy or knn)"
            )));
        }
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let q_cond = t_kernel_rows(&emb);
    let mut summaries: BTreeMap<String, io::MetricSummary> = BTreeMap::new();

    if requested.contains(&"xy") {
        let p_cond = conditional_affinities(&data, args.perplexity)?;
        let grid = default_epsilon_grid(&[p_cond.rows(), &q_cond]);
        let curves = pr_curve_xy(p_cond.rows(), &q_cond, &grid)?;
        let path = args.out_dir.join("xy_curve.csv");
        io::write_curves_csv(&path, &curves)?;
        summaries.insert(
            "xy".into(),
            io::MetricSummary {
                max_fscore: curves.max_fscore,
                curve_csv: path.display().to_string(),
            },
        );
    }

    if requested.contains(&"zy") {
        let labels = data.labels().ok_or_else(|| {
            FtsneError::Parameter("zy metric requested but the dataset has no label column".into())
        })?;
        let kind = match args.label_kind {
            LabelKindArg::Discrete => LabelKind::Discrete,
            LabelKindArg::Continuous => LabelKind::Continuous,
        };
        let r_cond = latent_affinity(labels, kind)?;
        let grid = default_epsilon_grid(&[&r_cond.rows, &q_cond]);
        let curves = pr_curve_zy(&r_cond, &q_cond, &grid)?;
        let path = args.out_dir.join("zy_curve.csv");
        io::write_curves_csv(&path, &curves)?;
        summaries.insert(
            "zy".into(),
            io::MetricSummary {
                max_fscore: curves.max_fscore,
                curve_csv: path.display().to_string(),
            },
        );
    }

    if requested.contains(&"knn") {
        let k_grid = parse_k_grid(&args.k_grid, data.len())?;
        let curves = knn_kfn_curve(data.points(), &emb, &k_grid)?;
        let path = args.out_dir.join("knn_kfn_curve.csv");
        io::write_curves_csv(&path, &curves)?;
        summaries.insert(
            "knn_kfn".into(),
            io::MetricSummary {
                max_fscore: curves.max_fscore,
                curve_csv: path.display().to_string(),
            },
        );
    }

    let summary = io::EvalSummary {
        dataset: args.data.display().to_string(),
        embedding: args.embedding.display().to_string(),
        seed: args.seed,
        perplexity: args.perplexity,
        metrics: summaries,
    };
    let summary_path = args.out_dir.join("summary.json");
    io::write_summary_json(&summary_path, &summary)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<(), FtsneError> {
    let div: Divergence = args.divergence.parse()?;
    let grids = heatmap_grids(
        div,
        (args.p_min, args.p_max),
        (args.q_min, args.q_max),
        args.resolution,
    )?;
    io::write_heatmap_csvs(&args.out_loss, &args.out_gradient, &grids)?;
    println!(
        "wrote {} and {}",
        args.out_loss.display(),
        args.out_gradient.display()
    );
    Ok(())
}
