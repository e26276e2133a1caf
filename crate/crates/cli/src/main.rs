//! `scarcenet` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure
//! (reported on stderr as a single `error: ...` line).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scarcenet::dataset::{self, Dataset, SplitPlan, CSV_HEADER, NUM_INPUTS};
use scarcenet::experiments::{self, Exp1Config, Exp2Config, PreparedSplit, ReportFormat};
use scarcenet::metrics;
use scarcenet::network::{Activation, Mlp};
use scarcenet::trainers::{self, TrainConfig, TrainerKind};
use scarcenet::{Error, Result};

#[derive(Parser)]
#[command(name = "scarcenet", version, about = "Deep and shallow MLPs for scarce bearing-capacity data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or export the embedded footing dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train one network on a split and save it.
    Train(TrainArgs),
    /// Predict bearing capacity for a CSV of inputs with a saved model.
    Predict(PredictArgs),
    /// Shallow versus deep networks over five training-set sizes.
    Exp1(Exp1Args),
    /// Deep networks of several depths and neuron budgets on six samples.
    Exp2(Exp2Args),
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Print the 50 rows as a tab-separated table.
    Show {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the dataset as CSV.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug)]
enum SplitChoice {
    Exp2,
    Exp1(usize),
}

fn parse_split(s: &str) -> std::result::Result<SplitChoice, String> {
    match s {
        "exp2" => Ok(SplitChoice::Exp2),
        _ => s
            .strip_prefix("exp1:")
            .and_then(|n| n.parse().ok())
            .filter(|n| (1..=5).contains(n))
            .map(SplitChoice::Exp1)
            .ok_or_else(|| format!("'{s}' is not exp2 or exp1:SET with SET in 1..5")),
    }
}

/// Hidden widths parsed from `W1xW2x…`.
#[derive(Clone, Debug)]
struct Layout(Vec<usize>);

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    experiments::parse_layout(s).map(Layout).map_err(|e| e.to_string())
}

#[derive(Clone, Debug)]
struct List(Vec<usize>);

/// Comma-separated values and inclusive `a..b` ranges, e.g. `1,3..5`.
fn parse_list(s: &str) -> std::result::Result<List, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let bad = || format!("'{part}' is not a number or a..b range");
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(List(out))
}

#[derive(Args)]
struct TrainArgs {
    /// Hidden widths, e.g. 24x24x24x24x24.
    #[arg(long, value_parser = parse_layout)]
    layout: Layout,
    #[arg(long, default_value = "br")]
    trainer: TrainerKind,
    #[arg(long, default_value = "log_sigmoid")]
    activation: Activation,
    #[arg(long, env = "SCARCENET_SEED", default_value_t = 0)]
    seed: u64,
    /// Dataset CSV; defaults to the embedded 50-sample table.
    #[arg(long)]
    data: Option<PathBuf>,
    /// exp2 (five training samples) or exp1:SET.
    #[arg(long, default_value = "exp2", value_parser = parse_split)]
    split: SplitChoice,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Model file; the test predictions and training record are written
    /// next to it with `.test_predictions.csv` and `.record.csv` suffixes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with the five input columns and optionally qu_kPa.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, env = "SCARCENET_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Small replicate counts for smoke runs.
    #[arg(long)]
    fast: bool,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct Exp1Args {
    #[arg(long, value_parser = parse_list, default_value = "1..5")]
    sets: List,
    /// Hidden-layer counts 1..7; 1 is the shallow sweep.
    #[arg(long, value_parser = parse_list, default_value = "1..7")]
    depths: List,
    #[arg(long)]
    dnn_replicates: Option<usize>,
    #[arg(long)]
    shallow_count: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct Exp2Args {
    #[arg(long, value_parser = parse_list, default_value = "90,120,150")]
    neurons: List,
    #[arg(long, value_parser = parse_list, default_value = "1..10,15")]
    depths: List,
    #[arg(long)]
    replicates: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

fn load_data(path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => dataset::load_csv(p),
        None => Ok(dataset::embedded_gandhi()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Rows of inputs, optional target, prediction and optional percentage error.
fn prediction_csv(rows: &[([f64; NUM_INPUTS], Option<f64>)], predictions: &[f64]) -> String {
    let with_target = rows.first().is_some_and(|r| r.1.is_some());
    let mut header: Vec<&str> = CSV_HEADER[..NUM_INPUTS].to_vec();
    if with_target {
        header.push(CSV_HEADER[NUM_INPUTS]);
    }
    header.push("prediction_kPa");
    if with_target {
        header.push("E_a");
    }
    let mut out = header.join(",") + "\n";
    for ((x, t), p) in rows.iter().zip(predictions) {
        let mut fields: Vec<String> = x.iter().map(f64::to_string).collect();
        if let Some(t) = t {
            fields.push(t.to_string());
        }
        fields.push(p.to_string());
        if let Some(t) = t {
            fields.push(format!("{:.2}", (t - p).abs() / t * 100.0));
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

fn train(args: TrainArgs) -> Result<()> {
    let ds = load_data(args.data.as_deref())?;
    let plan: SplitPlan = match args.split {
        SplitChoice::Exp2 => dataset::experiment2_split(&ds)?,
        SplitChoice::Exp1(set) => dataset::experiment1_split(&ds, set, args.seed)?,
    };
    let split = PreparedSplit::new(&ds, &plan)?;
    let init = Mlp::build(&args.layout.0, args.activation, args.seed)?;
    let mut cfg = TrainConfig::new(args.trainer, args.seed);
    if let Some(m) = args.max_epochs {
        cfg.max_epochs = m;
    }
    let (net, record) = trainers::train(&init, &split.train, &split.validation, &cfg)?;
    ensure_parent(&args.out)?;
    net.save(&split.normalizer, &args.out)?;

    let predictions = split.predict(&net)?;
    let eval = metrics::evaluate(&split.test_targets, &predictions)?;
    let rows: Vec<_> = split
        .test_inputs
        .iter()
        .zip(&split.test_targets)
        .map(|(x, t)| (*x, Some(*t)))
        .collect();
    write(&sibling(&args.out, ".test_predictions.csv"), &prediction_csv(&rows, &predictions))?;
    let mut rec = Vec::new();
    record.write_csv(&mut rec)?;
    write(&sibling(&args.out, ".record.csv"), &String::from_utf8_lossy(&rec))?;

    println!(
        "trained {} [{}] with {}: {} epochs, stop {:?}",
        experiments::format_layout(&args.layout.0),
        args.activation,
        args.trainer,
        record.epochs(),
        record.stop_reason
    );
    println!(
        "test E_a {:.2}% E_max {:.2}% accuracy {:.2}% over {} samples",
        eval.e_a,
        eval.e_max,
        eval.accuracy,
        predictions.len()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let (net, normalizer) = Mlp::load(&args.model)?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::Io {
        path: args.input.clone(),
        source: e,
    })?;
    let rows = dataset::parse_feature_csv(&text, &args.input.display().to_string())?;
    let inputs: Vec<[f64; NUM_INPUTS]> = rows.iter().map(|r| r.0).collect();
    let predictions = experiments::predict_kpa(&net, &normalizer, &inputs)?;
    write(&args.out, &prediction_csv(&rows, &predictions))?;
    if rows.iter().all(|r| r.1.is_some()) && !rows.is_empty() {
        let targets: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        let eval = metrics::evaluate(&targets, &predictions)?;
        println!("{} predictions, E_a {:.2}% E_max {:.2}%", predictions.len(), eval.e_a, eval.e_max);
    } else {
        println!("{} predictions", predictions.len());
    }
    Ok(())
}

fn finish(report: &experiments::ExperimentReport, run: &RunArgs) -> Result<()> {
    experiments::emit_report(report, run.format, &run.out, &experiments::timestamp())?;
    for c in &report.cells {
        match &c.stats {
            Some(s) => println!(
                "{:<16} {}  mean {:.2} median {:.2}  failed {}/{}",
                c.key,
                experiments::format_cell(s.best_e_a, s.best_e_max),
                s.mean_e_a,
                s.median_e_a,
                c.n_failed,
                c.replicates.len()
            ),
            None => println!("{:<16} all {} replicates failed", c.key, c.replicates.len()),
        }
    }
    println!("report written to {}", run.out.display());
    Ok(())
}

fn exp1(args: Exp1Args) -> Result<()> {
    let base = if args.run.fast { Exp1Config::fast() } else { Exp1Config::default() };
    let cfg = Exp1Config {
        sets: args.sets.0,
        depths: args.depths.0,
        dnn_replicates: args.dnn_replicates.unwrap_or(base.dnn_replicates),
        shallow_count: args.shallow_count.unwrap_or(base.shallow_count),
        base_seed: args.run.seed,
        ..base
    };
    let report = experiments::run_experiment1(&dataset::embedded_gandhi(), &cfg, args.run.jobs)?;
    finish(&report, &args.run)
}

fn exp2(args: Exp2Args) -> Result<()> {
    let base = if args.run.fast { Exp2Config::fast() } else { Exp2Config::default() };
    let cfg = Exp2Config {
        budgets: args.neurons.0,
        depths: args.depths.0,
        replicates: args.replicates.unwrap_or(base.replicates),
        base_seed: args.run.seed,
    };
    let report = experiments::run_experiment2(&dataset::embedded_gandhi(), &cfg, args.run.jobs)?;
    finish(&report, &args.run)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Show { data } => {
                print!("{}", load_data(data.as_deref())?.to_table_string());
                Ok(())
            }
            DatasetAction::Export { out, data } => {
                let ds = load_data(data.as_deref())?;
                write(&out, &ds.to_csv_string())?;
                println!("{} rows written to {} (sha256 {})", ds.len(), out.display(), ds.content_hash());
                Ok(())
            }
        },
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Exp1(a) => exp1(a),
        Command::Exp2(a) => exp2(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
