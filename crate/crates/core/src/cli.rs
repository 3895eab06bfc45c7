//! Command-line front end. Logs go to stderr; data goes to files or stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::analysis::classifier_stats;
use crate::data::{self, GenSpec, Split};
use crate::error::{Error, Result};
use crate::experiment::compare_mechanisms;
use crate::model::{checkpoint, Mechanism, Model, MultiLabelNet};
use crate::theory::{theory_curve, write_curve_csv, DEFAULT_ALPHA};
use crate::train::{self, evaluate_model, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dlfl", version, about = "Per-label attention features versus one pooled feature for multi-label classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Optimal shared-feature angle, closed form against the numeric optimum.
    Theory(TheoryArgs),
    /// Feature/classifier angle distributions of a checkpoint.
    AnalyzeAngles(AnalyzeArgs),
    /// Train both mechanisms with one budget and report side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator spec as JSON; the built-in default spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides the config's checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint directory (holding manifest.json).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Refuse checkpoints of the other mechanism.
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_list: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Angle CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write classifier affinity and norm CSVs here.
    #[arg(long)]
    pub stats_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Training config shared by both runs; its mechanism and seed are overridden.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comparison JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep each run's checkpoints under this directory.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

fn echo<V: Serialize>(what: &str, value: &V) {
    match serde_json::to_string(value) {
        Ok(json) => info!("{what}: {json}"),
        Err(e) => warn!("could not render {what}: {e}"),
    }
}

fn emit<V: Serialize>(value: &V, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(out.unwrap_or(Path::new("-")), e))?;
    match out {
        Some(path) => fs::write(path, text + "\n").map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_checkpoint(args: &CheckpointArgs) -> Result<Model<f32>> {
    match args.mechanism {
        Some(m) => checkpoint::load_expecting(&args.checkpoint, m),
        None => checkpoint::load(&args.checkpoint),
    }
}

fn load_samples(args: &CheckpointArgs, model: &Model<f32>) -> Result<Vec<data::LabeledSample>> {
    let ds = data::load(&args.dataset)?;
    let labels = model.config().labels;
    if ds.spec.labels != labels {
        return Err(Error::Validation(format!(
            "checkpoint has M = {labels} labels, dataset has M = {}",
            ds.spec.labels
        )));
    }
    Ok(match Split::from(args.split) {
        Split::Train => ds.train,
        Split::Test => ds.test,
    })
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<GenSpec>(&text).map_err(|e| Error::json(path, e))?
        }
        None => GenSpec::default(),
    };
    echo("generator spec", &spec);
    let ds = data::generate(&spec)?;
    data::save(&ds, &args.out)?;
    info!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_json_file(&args.config)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.checkpoint = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    echo("train config", &cfg);
    let outcome = train::train(&cfg)?;
    info!(
        "final test mAP {:.4}, best epoch {}",
        outcome.final_report.map.unwrap_or(0.0),
        outcome.best_epoch
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.source)?;
    echo("checkpoint config", model.config());
    let samples = load_samples(&args.source, &model)?;
    let report = evaluate_model(&model, &samples, args.top_k)?;
    emit(&report, args.out.as_deref())
}

fn theory(args: &TheoryArgs) -> Result<()> {
    if args.m_list.is_empty() {
        return Err(Error::Validation("--m-list is empty".into()));
    }
    info!("theory: M = {:?}, alpha = {}, seed = {}", args.m_list, args.alpha, args.seed);
    let points = theory_curve(&args.m_list, args.alpha, args.seed)?;
    for p in &points {
        info!("M = {}: closed form {:.2}°, numeric {:.2}°", p.labels, p.closed_form_deg, p.numeric_deg);
    }
    match &args.out {
        Some(path) => write_curve_csv(path, &points)?,
        None => print!("{}", crate::theory::curve_csv(&points)),
    }
    if let Some(p) = points.iter().find(|p| (p.closed_form_deg - p.numeric_deg).abs() > 0.1) {
        return Err(Error::Convergence(format!(
            "M = {}: numeric optimum {:.4}° disagrees with closed form {:.4}°",
            p.labels, p.numeric_deg, p.closed_form_deg
        )));
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let model = load_checkpoint(&args.source)?;
    echo("checkpoint config", model.config());
    let samples = load_samples(&args.source, &model)?;
    let report = crate::analysis::analyze_angles(&model, &samples)?;
    report.write_csv(&args.out)?;
    if let Some(dir) = &args.stats_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = match &model {
            Model::Ofml(m) => m.classifier.clone(),
            Model::Dlfl(m) => m.stages.last().expect("at least one stage").classifier.clone(),
        };
        let stats = classifier_stats(&weights)?;
        for (file, text) in [("affinity.csv", stats.affinity_csv()), ("norms.csv", stats.norms_csv())] {
            let path = dir.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(med) = stats.off_diagonal_median() {
            info!("median off-diagonal classifier affinity {med:.4}");
        }
    }
    info!(
        "median angles: positive {:?}, negative {:?}, shared optimum {:.2}°",
        report.median_positive, report.median_negative, report.shared_optimum_deg
    );
    #[derive(Serialize)]
    struct Summary<'a> {
        median_positive: Option<f64>,
        median_negative: Option<f64>,
        shared_optimum_deg: f64,
        skipped: &'a [usize],
        per_label: &'a [crate::analysis::LabelAngles],
    }
    emit(
        &Summary {
            median_positive: report.median_positive,
            median_negative: report.median_negative,
            shared_optimum_deg: report.shared_optimum_deg,
            skipped: &report.skipped,
            per_label: &report.per_label,
        },
        None,
    )
}

fn compare(args: &CompareArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_json_file(&args.config)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    echo("compare config", &cfg);
    info!("seeds {:?}", args.seeds);
    let ds = data::load(&cfg.dataset)?;
    if ds.spec.labels != cfg.model.labels {
        return Err(Error::Validation(format!(
            "dataset has M = {} labels, config has M = {}",
            ds.spec.labels, cfg.model.labels
        )));
    }
    let result = compare_mechanisms(&cfg, &ds.train, &ds.test, &args.seeds, args.work_dir.as_deref())?;
    emit(&result, args.out.as_deref())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Theory(a) => theory(a),
        Command::AnalyzeAngles(a) => analyze(a),
        Command::Compare(a) => compare(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main_exit_code() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
