//! Architecture grids, the two experimental protocols and report emission.
//!
//! Every replicate is an isolated training run whose seed depends only on the
//! base seed, the cell key and the replicate index, so cells can be run in any
//! order, on any number of threads, or subset without changing each other.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, Dataset, Normalizer, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{self, SampleError};
use crate::network::{Activation, Mlp};
use crate::trainers::{self, StopReason, TrainConfig, TrainData, TrainerKind};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EXP2_BUDGETS: [usize; 3] = [90, 120, 150];
pub const EXP2_DEPTHS: [usize; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15];
pub const SHALLOW_WIDTHS: (usize, usize) = (90, 200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Table1,
    Table2,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureLayout {
    pub widths: Vec<usize>,
    pub provenance: Provenance,
}

impl ArchitectureLayout {
    fn new(widths: Vec<usize>, provenance: Provenance) -> Self {
        Self { widths, provenance }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn total(&self) -> usize {
        self.widths.iter().sum()
    }

    /// `W1xW2x…` notation.
    pub fn label(&self) -> String {
        format_layout(&self.widths)
    }
}

pub fn format_layout(widths: &[usize]) -> String {
    widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Parses `W1xW2x…`; every width must be positive.
pub fn parse_layout(text: &str) -> Result<Vec<usize>> {
    let widths = text
        .split('x')
        .map(|p| p.trim().parse::<usize>().ok().filter(|w| *w > 0))
        .collect::<Option<Vec<_>>>()
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Error::Config(format!("bad layout '{text}', expected e.g. 18x18x18")))?;
    if widths.len() > crate::network::MAX_HIDDEN_LAYERS {
        return Err(Error::Config(format!(
            "layout '{text}' has more than {} hidden layers",
            crate::network::MAX_HIDDEN_LAYERS
        )));
    }
    Ok(widths)
}

/// One row of the first-experiment architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table1Row {
    /// Single hidden layer whose width is swept over `min..=max`.
    ShallowSweep { min: usize, max: usize },
    Deep(ArchitectureLayout),
}

impl Table1Row {
    pub fn depth(&self) -> usize {
        match self {
            Table1Row::ShallowSweep { .. } => 1,
            Table1Row::Deep(l) => l.depth(),
        }
    }
}

pub fn table1_architectures() -> Vec<Table1Row> {
    let deep: [&[usize]; 6] = [
        &[45, 45],
        &[30, 30, 30],
        &[22, 24, 22, 22],
        &[18; 5],
        &[15; 6],
        &[13, 13, 13, 13, 13, 13, 12],
    ];
    std::iter::once(Table1Row::ShallowSweep {
        min: SHALLOW_WIDTHS.0,
        max: SHALLOW_WIDTHS.1,
    })
    .chain(
        deep.iter()
            .map(|w| Table1Row::Deep(ArchitectureLayout::new(w.to_vec(), Provenance::Table1))),
    )
    .collect()
}

/// Expands run-length groups such as `[(6, 13), (1, 12)]`.
fn groups(runs: &[(usize, usize)]) -> Vec<usize> {
    runs.iter()
        .flat_map(|&(count, width)| std::iter::repeat(width).take(count))
        .collect()
}

/// Second-experiment layouts for one neuron budget, keyed by depth, in the
/// order the widths are printed.
pub fn table2_architectures(neurons: usize) -> Result<BTreeMap<usize, ArchitectureLayout>> {
    let rows: [(usize, Vec<usize>); 11] = match neurons {
        90 => [
            (1, vec![90]),
            (2, groups(&[(2, 45)])),
            (3, groups(&[(3, 30)])),
            (4, groups(&[(2, 23), (2, 22)])),
            (5, groups(&[(5, 18)])),
            (6, groups(&[(6, 15)])),
            (7, groups(&[(6, 13), (1, 12)])),
            (8, groups(&[(6, 11), (2, 12)])),
            (9, groups(&[(9, 10)])),
            (10, groups(&[(10, 9)])),
            (15, groups(&[(15, 6)])),
        ],
        120 => [
            (1, vec![120]),
            (2, groups(&[(2, 60)])),
            (3, groups(&[(3, 40)])),
            (4, groups(&[(4, 30)])),
            (5, groups(&[(5, 24)])),
            (6, groups(&[(6, 20)])),
            (7, groups(&[(6, 17), (1, 18)])),
            (8, groups(&[(8, 15)])),
            (9, groups(&[(6, 13), (3, 14)])),
            (10, groups(&[(10, 12)])),
            (15, groups(&[(15, 8)])),
        ],
        150 => [
            (1, vec![150]),
            (2, groups(&[(2, 75)])),
            (3, groups(&[(3, 50)])),
            (4, groups(&[(2, 38), (2, 37)])),
            (5, groups(&[(5, 30)])),
            (6, groups(&[(6, 25)])),
            (7, groups(&[(3, 22), (4, 21)])),
            (8, groups(&[(6, 19), (2, 18)])),
            (9, groups(&[(6, 17), (3, 16)])),
            (10, groups(&[(10, 15)])),
            (15, groups(&[(15, 10)])),
        ],
        _ => {
            return Err(Error::Config(format!(
                "neuron budget {neurons} not in {EXP2_BUDGETS:?}"
            )))
        }
    };
    Ok(rows
        .into_iter()
        .map(|(d, w)| (d, ArchitectureLayout::new(w, Provenance::Table2)))
        .collect())
}

/// Even split of `total` neurons over `depth` layers, remainder to the first
/// layers.
pub fn distribute_neurons(total: usize, depth: usize) -> Result<ArchitectureLayout> {
    if depth == 0 || total < depth {
        return Err(Error::Config(format!(
            "cannot spread {total} neurons over {depth} layers"
        )));
    }
    let (base, extra) = (total / depth, total % depth);
    let widths = (0..depth).map(|i| base + usize::from(i < extra)).collect();
    Ok(ArchitectureLayout::new(widths, Provenance::Generated))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    /// Training-set numbers, 1..=5.
    pub sets: Vec<usize>,
    /// Hidden-layer counts, 1..=7; depth 1 is the shallow sweep.
    pub depths: Vec<usize>,
    pub dnn_replicates: usize,
    pub shallow_count: usize,
    pub shallow_min_width: usize,
    pub shallow_max_width: usize,
    pub shallow_trainers: Vec<TrainerKind>,
    pub shallow_activations: Vec<Activation>,
    pub base_seed: u64,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            sets: vec![1, 2, 3, 4, 5],
            depths: (1..=7).collect(),
            dnn_replicates: 20,
            shallow_count: 2000,
            shallow_min_width: SHALLOW_WIDTHS.0,
            shallow_max_width: SHALLOW_WIDTHS.1,
            shallow_trainers: TrainerKind::ALL.to_vec(),
            shallow_activations: Activation::HIDDEN.to_vec(),
            base_seed: 0,
        }
    }
}

impl Exp1Config {
    /// Reduced scale for smoke runs: 2 replicates, 40 shallow networks.
    pub fn fast() -> Self {
        Self {
            dnn_replicates: 2,
            shallow_count: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("set", &self.sets, &[1, 2, 3, 4, 5])?;
        check_grid("depth", &self.depths, &[1, 2, 3, 4, 5, 6, 7])?;
        if self.dnn_replicates == 0 || self.shallow_count == 0 {
            return Err(Error::Config("replicate counts must be at least 1".into()));
        }
        if self.shallow_min_width == 0 || self.shallow_min_width > self.shallow_max_width {
            return Err(Error::Config(format!(
                "bad shallow width range {}..{}",
                self.shallow_min_width, self.shallow_max_width
            )));
        }
        if self.shallow_trainers.is_empty() || self.shallow_activations.is_empty() {
            return Err(Error::Config("shallow roster must not be empty".into()));
        }
        if self.shallow_activations.contains(&Activation::Identity) {
            return Err(Error::Config("identity is not a hidden activation".into()));
        }
        Ok(())
    }

    /// Trainer, activation and width of the `i`-th shallow network.
    pub fn shallow_member(&self, i: usize) -> (TrainerKind, Activation, usize) {
        let nt = self.shallow_trainers.len();
        let na = self.shallow_activations.len();
        let span = self.shallow_max_width - self.shallow_min_width + 1;
        (
            self.shallow_trainers[i % nt],
            self.shallow_activations[(i / nt) % na],
            self.shallow_min_width + (i / (nt * na)) % span,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub budgets: Vec<usize>,
    pub depths: Vec<usize>,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            budgets: EXP2_BUDGETS.to_vec(),
            depths: EXP2_DEPTHS.to_vec(),
            replicates: 20,
            base_seed: 0,
        }
    }
}

impl Exp2Config {
    pub fn fast() -> Self {
        Self {
            replicates: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("budget", &self.budgets, &EXP2_BUDGETS)?;
        check_grid("depth", &self.depths, &EXP2_DEPTHS)?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_grid(what: &str, values: &[usize], allowed: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("no {what} selected")));
    }
    if let Some(v) = values.iter().find(|v| !allowed.contains(v)) {
        return Err(Error::Config(format!("{what} {v} not in {allowed:?}")));
    }
    Ok(())
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Seed of one replicate: `base_seed` plus a salt hashed from the experiment
/// name and cell key, plus the replicate index.
pub fn replicate_seed(base_seed: u64, experiment: &str, cell_key: &str, replicate: usize) -> u64 {
    let digest = Sha256::digest(format!("{experiment}/{cell_key}").as_bytes());
    let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    base_seed.wrapping_add(salt).wrapping_add(replicate as u64)
}

// ---------------------------------------------------------------------------
// Running a replicate
// ---------------------------------------------------------------------------

/// A split turned into scaled training tensors plus a kPa-valued test set.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub normalizer: Normalizer,
    pub train: TrainData,
    pub validation: TrainData,
    pub test_inputs: Vec<[f64; dataset::NUM_INPUTS]>,
    pub test_targets: Vec<f64>,
}

impl PreparedSplit {
    /// Fits the normalizer on the training pool only.
    pub fn new(ds: &Dataset, plan: &SplitPlan) -> Result<Self> {
        plan.validate(ds.len())?;
        let normalizer = Normalizer::fit(&ds.subset(&plan.pool()))?;
        let scaled = |idx: &[usize]| {
            let (x, t): (Vec<Vec<f64>>, Vec<f64>) = ds
                .subset(idx)
                .iter()
                .map(|s| {
                    let (x, t) = normalizer.transform(s);
                    (x.to_vec(), t)
                })
                .unzip();
            TrainData::new(x, t)
        };
        let test = ds.subset(&plan.test);
        Ok(Self {
            train: scaled(&plan.train)?,
            validation: scaled(&plan.validation)?,
            test_inputs: test.iter().map(|s| s.inputs()).collect(),
            test_targets: test.iter().map(|s| s.qu).collect(),
            normalizer,
        })
    }

    /// Predictions in kPa for the test set.
    pub fn predict(&self, net: &Mlp) -> Result<Vec<f64>> {
        predict_kpa(net, &self.normalizer, &self.test_inputs)
    }
}

pub fn predict_kpa(net: &Mlp, normalizer: &Normalizer, inputs: &[[f64; dataset::NUM_INPUTS]]) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| {
            let y = net.forward(&normalizer.transform_inputs(x))?;
            Ok(normalizer.inverse_output(y))
        })
        .collect()
}

/// What a single replicate was asked to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSpec {
    pub replicate: usize,
    pub seed: u64,
    pub trainer: TrainerKind,
    pub activation: Activation,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReplicateStatus {
    Ok {
        e_a: f64,
        e_max: f64,
        epochs: usize,
        stop_reason: StopReason,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    #[serde(flatten)]
    pub spec: ReplicateSpec,
    #[serde(flatten)]
    pub status: ReplicateStatus,
}

/// Trains and evaluates one replicate; failures are returned as data.
fn run_replicate(split: &PreparedSplit, spec: &ReplicateSpec) -> (ReplicateResult, Vec<SampleError>) {
    match try_replicate(split, spec) {
        Ok((status, per_sample)) => (
            ReplicateResult {
                spec: spec.clone(),
                status,
            },
            per_sample,
        ),
        Err(e) => (
            ReplicateResult {
                spec: spec.clone(),
                status: ReplicateStatus::Failed {
                    reason: e.to_string(),
                },
            },
            Vec::new(),
        ),
    }
}

fn try_replicate(split: &PreparedSplit, spec: &ReplicateSpec) -> Result<(ReplicateStatus, Vec<SampleError>)> {
    let init = Mlp::build(&spec.widths, spec.activation, spec.seed)?;
    let cfg = TrainConfig::new(spec.trainer, spec.seed);
    let (net, record) = trainers::train(&init, &split.train, &split.validation, &cfg)?;
    if record.stop_reason == StopReason::MuOverflow {
        return Err(Error::Training {
            epoch: record.epochs(),
            message: "damping exceeded its cap".into(),
        });
    }
    let predictions = split.predict(&net)?;
    let eval = metrics::evaluate(&split.test_targets, &predictions)?;
    Ok((
        ReplicateStatus::Ok {
            e_a: eval.e_a,
            e_max: eval.e_max,
            epochs: record.epochs(),
            stop_reason: record.stop_reason,
        },
        eval.per_sample,
    ))
}

// ---------------------------------------------------------------------------
// Selection and statistics
// ---------------------------------------------------------------------------

/// `(E_a, E_max)` of one candidate network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub e_a: f64,
    pub e_max: f64,
}

/// Index of the lowest `E_a`; ties go to the lower `E_max`, then the lower
/// index.
pub fn select_best(evaluations: &[Evaluation]) -> Result<usize> {
    evaluations
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            a.e_a
                .total_cmp(&b.e_a)
                .then(a.e_max.total_cmp(&b.e_max))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("no candidates to select from".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Replicate index of the selected network.
    pub best_replicate: usize,
    pub best_e_a: f64,
    pub best_e_max: f64,
    pub mean_e_a: f64,
    pub median_e_a: f64,
    /// Sample standard deviation of `E_a` (0 for a single replicate).
    pub std_e_a: f64,
}

fn cell_stats(results: &[ReplicateResult]) -> Option<CellStats> {
    let ok: Vec<(usize, Evaluation)> = results
        .iter()
        .filter_map(|r| match r.status {
            ReplicateStatus::Ok { e_a, e_max, .. } => Some((r.spec.replicate, Evaluation { e_a, e_max })),
            ReplicateStatus::Failed { .. } => None,
        })
        .collect();
    if ok.is_empty() {
        return None;
    }
    let evals: Vec<Evaluation> = ok.iter().map(|(_, e)| *e).collect();
    let best = select_best(&evals).ok()?;
    let n = evals.len() as f64;
    let mut e_a: Vec<f64> = evals.iter().map(|e| e.e_a).collect();
    let mean = e_a.iter().sum::<f64>() / n;
    let std = if e_a.len() > 1 {
        (e_a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    e_a.sort_by(f64::total_cmp);
    let mid = e_a.len() / 2;
    let median = if e_a.len() % 2 == 1 {
        e_a[mid]
    } else {
        0.5 * (e_a[mid - 1] + e_a[mid])
    };
    Some(CellStats {
        best_replicate: ok[best].0,
        best_e_a: evals[best].e_a,
        best_e_max: evals[best].e_max,
        mean_e_a: mean,
        median_e_a: median,
        std_e_a: std,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Experiment1,
    Experiment2,
}

impl ExperimentKind {
    fn tag(self) -> &'static str {
        match self {
            ExperimentKind::Experiment1 => "exp1",
            ExperimentKind::Experiment2 => "exp2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ReportConfig {
    Experiment1(Exp1Config),
    Experiment2(Exp2Config),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// `set{S}/depth{D}` or `n{B}/depth{D}`.
    pub key: String,
    /// Row coordinate: hidden-layer count.
    pub depth: usize,
    /// Column coordinate: training-set number or neuron budget.
    pub column: usize,
    /// Fixed layout, or `None` for the shallow sweep.
    pub layout: Option<Vec<usize>>,
    pub replicates: Vec<ReplicateResult>,
    pub stats: Option<CellStats>,
    pub n_failed: usize,
    /// Per-sample errors of the cell's best network.
    pub best_predictions: Vec<SampleError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub config: ReportConfig,
    pub dataset_hash: String,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, depth: usize, column: usize) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.depth == depth && c.column == column)
    }

    /// Cell holding the lowest best `E_a` over the whole report.
    pub fn best_cell(&self) -> Option<&CellReport> {
        let scored: Vec<(&CellReport, Evaluation)> = self
            .cells
            .iter()
            .filter_map(|c| {
                c.stats.as_ref().map(|s| {
                    (
                        c,
                        Evaluation {
                            e_a: s.best_e_a,
                            e_max: s.best_e_max,
                        },
                    )
                })
            })
            .collect();
        let evals: Vec<Evaluation> = scored.iter().map(|(_, e)| *e).collect();
        select_best(&evals).ok().map(|i| scored[i].0)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().map(|c| c.n_failed).sum()
    }
}

struct CellPlan {
    key: String,
    depth: usize,
    column: usize,
    layout: Option<Vec<usize>>,
    /// Index into the prepared splits, per replicate.
    splits: Vec<usize>,
    specs: Vec<ReplicateSpec>,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Runs every replicate of every cell, `jobs` at a time (0 = all cores).
fn execute(plans: Vec<CellPlan>, splits: &[PreparedSplit], jobs: usize) -> Result<Vec<CellReport>> {
    let tasks: Vec<(usize, usize)> = plans
        .iter()
        .enumerate()
        .flat_map(|(c, p)| (0..p.specs.len()).map(move |r| (c, r)))
        .collect();
    let outputs: Vec<(ReplicateResult, Vec<SampleError>)> = thread_pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(&splits[plans[c].splits[r]], &plans[c].specs[r]))
            .collect()
    });

    let mut outputs = outputs.into_iter();
    Ok(plans
        .into_iter()
        .map(|p| {
            let (replicates, mut predictions): (Vec<_>, Vec<_>) =
                outputs.by_ref().take(p.specs.len()).unzip();
            let stats = cell_stats(&replicates);
            let best_predictions = stats
                .as_ref()
                .map(|s| std::mem::take(&mut predictions[s.best_replicate]))
                .unwrap_or_default();
            let n_failed = replicates
                .iter()
                .filter(|r| matches!(r.status, ReplicateStatus::Failed { .. }))
                .count();
            CellReport {
                key: p.key,
                depth: p.depth,
                column: p.column,
                layout: p.layout,
                replicates,
                stats,
                n_failed,
                best_predictions,
            }
        })
        .collect())
}

/// Seed used for the random validation split of one first-experiment
/// replicate, decorrelated from its weight-initialisation seed.
fn split_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Runs the first experiment. Each replicate draws its own validation subset
/// from the set's training pool, so splits are prepared per replicate.
pub fn run_experiment1(ds: &Dataset, cfg: &Exp1Config, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let table = table1_architectures();
    let mut plans = Vec::new();
    let mut splits = Vec::new();
    for &set in &sorted_unique(&cfg.sets) {
        for &depth in &sorted_unique(&cfg.depths) {
            let key = format!("set{set}/depth{depth}");
            let row = table
                .iter()
                .find(|r| r.depth() == depth)
                .expect("depths validated against the table");
            let (layout, specs): (Option<Vec<usize>>, Vec<ReplicateSpec>) = match row {
                Table1Row::ShallowSweep { .. } => (
                    None,
                    (0..cfg.shallow_count)
                        .map(|i| {
                            let (trainer, activation, width) = cfg.shallow_member(i);
                            ReplicateSpec {
                                replicate: i,
                                seed: replicate_seed(cfg.base_seed, "exp1", &key, i),
                                trainer,
                                activation,
                                widths: vec![width],
                            }
                        })
                        .collect(),
                ),
                Table1Row::Deep(l) => (
                    Some(l.widths.clone()),
                    (0..cfg.dnn_replicates)
                        .map(|i| ReplicateSpec {
                            replicate: i,
                            seed: replicate_seed(cfg.base_seed, "exp1", &key, i),
                            trainer: TrainerKind::BayesianRegularization,
                            activation: Activation::LogSigmoid,
                            widths: l.widths.clone(),
                        })
                        .collect(),
                ),
            };
            let mut indices = Vec::with_capacity(specs.len());
            for spec in &specs {
                let plan = dataset::experiment1_split(ds, set, split_seed(spec.seed))?;
                indices.push(splits.len());
                splits.push(PreparedSplit::new(ds, &plan)?);
            }
            plans.push(CellPlan {
                key,
                depth,
                column: set,
                layout,
                splits: indices,
                specs,
            });
        }
    }
    let cells = execute(plans, &splits, jobs)?;
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: ExperimentKind::Experiment1,
        config: ReportConfig::Experiment1(cfg.clone()),
        dataset_hash: ds.content_hash(),
        cells,
    })
}

/// Runs the second experiment: Bayesian-regularized deep networks trained on
/// five samples with one validation sample, tested on the rest.
pub fn run_experiment2(ds: &Dataset, cfg: &Exp2Config, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let split = PreparedSplit::new(ds, &dataset::experiment2_split(ds)?)?;
    let mut plans = Vec::new();
    for &budget in &sorted_unique(&cfg.budgets) {
        let table = table2_architectures(budget)?;
        for &depth in &sorted_unique(&cfg.depths) {
            let key = format!("n{budget}/depth{depth}");
            let widths = table[&depth].widths.clone();
            let specs: Vec<ReplicateSpec> = (0..cfg.replicates)
                .map(|i| ReplicateSpec {
                    replicate: i,
                    seed: replicate_seed(cfg.base_seed, "exp2", &key, i),
                    trainer: TrainerKind::BayesianRegularization,
                    activation: Activation::LogSigmoid,
                    widths: widths.clone(),
                })
                .collect();
            plans.push(CellPlan {
                key,
                depth,
                column: budget,
                layout: Some(widths),
                splits: vec![0; specs.len()],
                specs,
            });
        }
    }
    let cells = execute(plans, std::slice::from_ref(&split), jobs)?;
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: ExperimentKind::Experiment2,
        config: ReportConfig::Experiment2(cfg.clone()),
        dataset_hash: ds.content_hash(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!("unknown format '{s}', expected csv or markdown"))),
        }
    }
}

/// `"E_a (E_max)"` at two decimals.
pub fn format_cell(e_a: f64, e_max: f64) -> String {
    format!("{e_a:.2} ({e_max:.2})")
}

#[derive(Serialize)]
struct RunMeta<'a> {
    schema_version: u32,
    created_at: &'a str,
    kind: ExperimentKind,
    dataset_hash: &'a str,
    config: &'a ReportConfig,
    best_cell: Option<&'a str>,
    failures: usize,
    cells: Vec<MetaCell<'a>>,
}

#[derive(Serialize)]
struct MetaCell<'a> {
    key: &'a str,
    layout: Option<&'a [usize]>,
    stats: Option<&'a CellStats>,
    n_failed: usize,
    replicates: &'a [ReplicateResult],
}

/// Timestamp for `run_meta.json`: `SOURCE_DATE_EPOCH` if set, else now, as
/// Unix seconds.
pub fn timestamp() -> String {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .filter(|v| v.parse::<u64>().is_ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
                .to_string()
        })
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(&path, e))
}

fn csv_string(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Depth rows by column grid, formatted cells first, then raw statistics.
fn table_rows(report: &ExperimentReport) -> Vec<Vec<String>> {
    let columns = sorted_unique(&report.cells.iter().map(|c| c.column).collect::<Vec<_>>());
    let depths = sorted_unique(&report.cells.iter().map(|c| c.depth).collect::<Vec<_>>());
    let prefix = match report.kind {
        ExperimentKind::Experiment1 => "set",
        ExperimentKind::Experiment2 => "n",
    };
    let mut header = vec!["depth".to_string()];
    header.extend(columns.iter().map(|c| format!("{prefix}{c}")));
    for c in &columns {
        for stat in ["best_E_a", "best_E_max", "mean_E_a", "median_E_a", "std_E_a", "n_ok", "n_failed"] {
            header.push(format!("{prefix}{c}_{stat}"));
        }
    }
    let mut rows = vec![header];
    for &d in &depths {
        let mut row = vec![d.to_string()];
        let cells: Vec<Option<&CellReport>> = columns.iter().map(|&c| report.cell(d, c)).collect();
        for cell in &cells {
            row.push(match cell.and_then(|c| c.stats.as_ref()) {
                Some(s) => format_cell(s.best_e_a, s.best_e_max),
                None if cell.is_some() => "failed".into(),
                None => String::new(),
            });
        }
        for cell in &cells {
            match cell {
                Some(c) => {
                    let n_ok = c.replicates.len() - c.n_failed;
                    match &c.stats {
                        Some(s) => row.extend(
                            [s.best_e_a, s.best_e_max, s.mean_e_a, s.median_e_a, s.std_e_a]
                                .iter()
                                .map(|v| v.to_string()),
                        ),
                        None => row.extend(std::iter::repeat(String::new()).take(5)),
                    }
                    row.push(n_ok.to_string());
                    row.push(c.n_failed.to_string());
                }
                None => row.extend(std::iter::repeat(String::new()).take(7)),
            }
        }
        rows.push(row);
    }
    rows
}

fn markdown_string(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "| {} |", r.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(r.len()));
        }
    }
    out
}

/// Writes the result table, plot data, best-network predictions and
/// `run_meta.json` into `out_dir`, creating it if needed. `created_at` only
/// reaches `run_meta.json`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, out_dir: &Path, created_at: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tag = report.kind.tag();
    let rows = table_rows(report);
    match format {
        ReportFormat::Csv => write_file(out_dir, &format!("{tag}_table.csv"), &csv_string(&rows)?)?,
        ReportFormat::Markdown => write_file(out_dir, &format!("{tag}_table.md"), &markdown_string(&rows))?,
    }

    if report.kind == ExperimentKind::Experiment1 {
        let mut fig = vec![vec!["set".to_string(), "depth".into(), "best_E_a".into()]];
        for c in &report.cells {
            if let Some(s) = &c.stats {
                fig.push(vec![c.column.to_string(), c.depth.to_string(), s.best_e_a.to_string()]);
            }
        }
        write_file(out_dir, "figure2_data.csv", &csv_string(&fig)?)?;
    }

    let best = report.best_cell();
    let mut preds = vec![vec!["target".to_string(), "prediction".into(), "E_a".into()]];
    for p in best.map(|c| c.best_predictions.as_slice()).unwrap_or_default() {
        preds.push(vec![p.target.to_string(), p.prediction.to_string(), format!("{:.2}", p.ape)]);
    }
    write_file(out_dir, "best_predictions.csv", &csv_string(&preds)?)?;

    let meta = RunMeta {
        schema_version: report.schema_version,
        created_at,
        kind: report.kind,
        dataset_hash: &report.dataset_hash,
        config: &report.config,
        best_cell: best.map(|c| c.key.as_str()),
        failures: report.failures(),
        cells: report
            .cells
            .iter()
            .map(|c| MetaCell {
                key: &c.key,
                layout: c.layout.as_deref(),
                stats: c.stats.as_ref(),
                n_failed: c.n_failed,
                replicates: &c.replicates,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_file(out_dir, "run_meta.json", &json)
}
