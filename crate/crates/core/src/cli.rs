//! Command-line front end. Every failure prints one `ERROR <code>: <message>`
//! line; codes are 1 for usage and configuration, 2 for data and 3 for
//! training divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    carve_validation, flatten_landmarks, generate_synthetic, load_landmark_csv, read_feature_file, render_dataset,
    write_landmark_csv, Dataset, LoadOptions,
};
use crate::error::{Error, Result};
use crate::graph::{build_facial_adjacency, read_edge_list, FacialGraph};
use crate::models::{Backbone, Model, ModelConfig, ModelKind};
use crate::scalar::Scalar;
use crate::selftest::{gradient_suite, graph_invariants};
use crate::training::{
    evaluate_metrics, predict_labels, predict_proba, run_kfold_experiment, train_model, EvalReport, KFoldOptions,
    TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "painlarks",
    version,
    about = "Pain classification from facial landmark sequences and frame features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint/, history.csv, report.txt and config.txt
    Train(TrainArgs),
    /// Score a checkpoint on labelled data
    Evaluate(EvaluateArgs),
    /// Write `clip_id,label,p_pain` for every clip
    Predict(PredictArgs),
    /// Stratified k-fold cross-validation with per-fold and mean metrics
    Kfold(KfoldArgs),
    /// Write a synthetic landmark CSV
    SynthData(SynthArgs),
    /// Print degrees, edge count and connected components of the graph
    InspectGraph(InspectArgs),
    /// Run the gradient checks and graph invariants
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (flat key = value file)
    #[arg(long)]
    config: PathBuf,
    /// Seed; overrides the config file and PAINLARKS_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// Training data; overrides `data` in the config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run configuration; only data options (such as `normalize`) are used
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled landmark CSV or feature-clip file
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Landmark CSV or feature-clip file
    #[arg(long)]
    data: PathBuf,
    /// Run configuration; only data options (such as `normalize`) are used
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the CSV here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KfoldArgs {
    /// Run configuration (flat key = value file)
    #[arg(long)]
    config: PathBuf,
    /// Number of folds; overrides `k` in the config
    #[arg(long)]
    k: Option<usize>,
    /// Folds trained in parallel; overrides `jobs` in the config
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed; overrides the config file and PAINLARKS_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// Data; overrides `data` in the config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Clips per class
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Generator seed; falls back to PAINLARKS_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Edge list (`i j` per line) replacing the canonical facial graph
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Connector edges added to the graph
    #[arg(long)]
    extra_edges: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Random trials per gradient check
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Seed of the random trials
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                "no subcommand given; see --help"
            } else {
                msg.lines().next().unwrap_or("invalid arguments")
            };
            eprintln!("ERROR 1: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("ERROR {code}: {msg}");
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Kfold(a) => kfold(a),
        Command::SynthData(a) => synth_data(a),
        Command::InspectGraph(a) => inspect_graph(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build_graph(edges: Option<&Path>, extra: Option<&Path>) -> Result<FacialGraph> {
    let mut graph = match edges {
        Some(p) => {
            let list = read_edge_list(p)?;
            let max = list.iter().map(|&(i, j)| i.max(j)).max().unwrap_or(0);
            FacialGraph::from_edges((max + 1).max(crate::graph::NUM_LANDMARKS), &list)?
        }
        None => build_facial_adjacency(),
    };
    if let Some(p) = extra {
        graph = graph.with_extra_edges(&read_edge_list(p)?)?;
    }
    Ok(graph)
}

fn is_feature_file(path: &Path) -> Result<bool> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first.starts_with("FEATCLIP"))
}

/// Loads `path` and converts it to the input layout of `model`: landmark
/// tensors, flattened landmark features, precomputed features or rendered
/// frames.
fn load_inputs(path: &Path, model: &ModelConfig, normalize: bool, augment_seed: Option<u64>) -> Result<Dataset> {
    let hybrid_features = model.kind == ModelKind::Hybrid && model.backbone == Backbone::PrecomputedFeatures;
    if is_feature_file(path)? {
        if !hybrid_features {
            return Err(Error::Data(format!(
                "{}: feature clips feed only the hybrid model with precomputed features",
                path.display()
            )));
        }
        return read_feature_file(path);
    }
    let opts = LoadOptions {
        normalize,
        frames: model.frames,
    };
    let loaded = load_landmark_csv(path, &opts)?;
    for r in &loaded.rejected {
        eprintln!("warning: clip {} rejected ({} frames)", r.clip_id, r.frames);
    }
    let ds = loaded.dataset;
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: no usable clips", path.display())));
    }
    match (model.kind, model.backbone) {
        (ModelKind::Hybrid, Backbone::PrecomputedFeatures) => flatten_landmarks(&ds),
        (ModelKind::Hybrid, Backbone::ToyConvnext) => render_dataset(&ds, model.convnext.image_size, augment_seed),
        _ => Ok(ds),
    }
}

/// Hybrid feature clips define the LSTM input width.
fn adopt_feature_width(model: &mut ModelConfig, ds: &Dataset) {
    if model.kind != ModelKind::Hybrid || model.backbone != Backbone::PrecomputedFeatures {
        return;
    }
    if let Some(&d) = ds.samples().first().and_then(|s| s.data.shape().last()) {
        if d != model.feature_dim {
            log::info!("feature_dim {} replaced by the data width {d}", model.feature_dim);
            model.feature_dim = d;
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    let seed = cfg.resolve_seed(a.seed)?;
    cfg.seed = Some(seed);
    let graph = build_graph(cfg.edges.as_deref(), cfg.extra_edges.as_deref())?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no training data: set `data` in the config or pass --data".into()))?;
    let ds = load_inputs(&data, &cfg.model, cfg.normalize, cfg.augment.then_some(seed))?;
    adopt_feature_width(&mut cfg.model, &ds);
    let (fit, val) = match &cfg.val_data {
        Some(p) => (ds, Some(load_inputs(p, &cfg.model, cfg.normalize, None)?)),
        None => {
            let (fit, held) = carve_validation(&ds, cfg.val_fraction, seed)?;
            (fit, (!held.is_empty()).then_some(held))
        }
    };
    if cfg.f32 {
        train_and_save::<f32>(&cfg, &graph, &fit, val.as_ref(), seed)
    } else {
        train_and_save::<f64>(&cfg, &graph, &fit, val.as_ref(), seed)
    }
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        smote: cfg.smote,
        smote_k: cfg.smote_k,
        target_val_accuracy: cfg.target_val_accuracy,
    }
}

fn train_and_save<T: Scalar>(
    cfg: &RunConfig,
    graph: &FacialGraph,
    fit: &Dataset,
    val: Option<&Dataset>,
    seed: u64,
) -> Result<()> {
    let out = &cfg.out_dir;
    let history_path = out.join("history.csv");
    let outcome = match train_model::<T>(&cfg.model, graph, fit, val, &cfg.optimizer, &train_options(cfg), seed) {
        Ok(o) => o,
        Err(Error::Divergence { epoch, history }) => {
            write_file(&history_path, &history.to_csv())?;
            return Err(Error::Divergence { epoch, history });
        }
        Err(e) => return Err(e),
    };
    save_checkpoint(&outcome.model, graph, &out.join("checkpoint"))?;
    write_file(&history_path, &outcome.history.to_csv())?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let (eval_ds, eval_name) = match val {
        Some(v) => (v, "validation"),
        None => (fit, "training"),
    };
    let preds = predict_labels(&outcome.model, eval_ds)?;
    let metrics = evaluate_metrics(&preds, &eval_ds.labels())?;
    let report = format!(
        "# {} on {} clips ({} set), parameters of epoch {}\n{}",
        cfg.model.kind,
        eval_ds.len(),
        eval_name,
        outcome.best_epoch,
        EvalReport::from_folds(vec![metrics.clone()]).to_text()
    );
    write_file(&out.join("report.txt"), &report)?;
    println!(
        "trained {} ({} parameters) for {} epochs; kept epoch {}; {} accuracy {:.4}",
        cfg.model.kind,
        outcome.model.num_parameters(),
        outcome.history.rows.len(),
        outcome.best_epoch,
        eval_name,
        metrics.accuracy
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn data_options(config: Option<&Path>) -> Result<RunConfig> {
    config.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn loaded_model(checkpoint: &Path) -> Result<Model<f64>> {
    Ok(load_checkpoint::<f64>(checkpoint)?.0)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = data_options(a.config.as_deref())?;
    let model = loaded_model(&a.checkpoint)?;
    let ds = load_inputs(&a.data, model.config(), cfg.normalize, None)?;
    let preds = predict_labels(&model, &ds)?;
    let metrics = evaluate_metrics(&preds, &ds.labels())?;
    let report = EvalReport::from_folds(vec![metrics]).to_text();
    print!("{report}");
    if let Some(out) = a.out {
        write_file(&out, &report)?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = data_options(a.config.as_deref())?;
    let model = loaded_model(&a.checkpoint)?;
    let ds = load_inputs(&a.data, model.config(), cfg.normalize, None)?;
    let probs = predict_proba(&model, &ds)?;
    let mut csv = String::from("clip_id,label,p_pain\n");
    for (s, p) in ds.samples().iter().zip(&probs) {
        debug_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        let label = usize::from(p[1] > p[0]);
        let _ = writeln!(csv, "{},{},{}", s.id, label, p[1]);
    }
    match a.out {
        Some(out) => write_file(&out, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn kfold(a: KfoldArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let seed = cfg.resolve_seed(a.seed)?;
    cfg.seed = Some(seed);
    let graph = build_graph(cfg.edges.as_deref(), cfg.extra_edges.as_deref())?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data: set `data` in the config or pass --data".into()))?;
    let ds = load_inputs(&data, &cfg.model, cfg.normalize, cfg.augment.then_some(seed))?;
    adopt_feature_width(&mut cfg.model, &ds);
    let opts = KFoldOptions {
        k: cfg.k,
        jobs: cfg.jobs,
        val_fraction: cfg.val_fraction,
        train: train_options(&cfg),
    };
    let result = if cfg.f32 {
        run_kfold_experiment::<f32>(&cfg.model, &graph, &ds, &cfg.optimizer, &opts, seed)?
    } else {
        run_kfold_experiment::<f64>(&cfg.model, &graph, &ds, &cfg.optimizer, &opts, seed)?
    };
    let report = result.report.to_text();
    print!("{report}");
    let out = &cfg.out_dir;
    for (i, h) in result.histories.iter().enumerate() {
        write_file(&out.join(format!("fold{}_history.csv", i + 1)), &h.to_csv())?;
    }
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    write_file(&out.join("kfold_report.txt"), &report)
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => RunConfig::default().resolve_seed(None)?,
    };
    let ds = generate_synthetic(a.n, seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_landmark_csv(&ds, &a.out)?;
    println!("wrote {} clips ({} per class, seed {seed}) to {}", ds.len(), a.n, a.out.display());
    Ok(())
}

fn inspect_graph(a: InspectArgs) -> Result<()> {
    let g = build_graph(a.edges.as_deref(), a.extra_edges.as_deref())?;
    let deg = g.degrees();
    let mut out = format!(
        "nodes {}\nedges {}\ncomponents {}\n",
        g.num_nodes(),
        g.edges().len(),
        g.component_count()
    );
    let max = deg.iter().copied().max().unwrap_or(0);
    let hist: Vec<String> = (0..=max)
        .map(|d| (d, deg.iter().filter(|&&x| x == d).count()))
        .filter(|&(_, c)| c > 0)
        .map(|(d, c)| format!("{d}:{c}"))
        .collect();
    let _ = writeln!(out, "degree histogram {}", hist.join(" "));
    for (i, d) in deg.iter().enumerate() {
        let _ = writeln!(out, "node {i} degree {d}");
    }
    print!("{out}");
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<()> {
    let mut failed = Vec::new();
    let mut total = 0;
    for (name, ok) in graph_invariants() {
        total += 1;
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    for check in gradient_suite(a.trials, a.seed)? {
        total += 1;
        println!("{}", check.line());
        if !check.passed() {
            failed.push(check.name);
        }
    }
    if failed.is_empty() {
        println!("selftest: all {total} checks passed");
        Ok(())
    } else {
        Err(Error::Check(format!(
            "selftest: {} of {total} checks failed ({})",
            failed.len(),
            failed.join(", ")
        )))
    }
}
