//! Experiment orchestration: plain-text configs, multi-run execution with
//! a cached reference solve, summary tables, and long-format plot export.
//!
//! A config names an instance (generated from a seed or loaded from a
//! file), a list of algorithm entries, and a seed list; the experiment is
//! the full (algorithm, seed) product. Every cell writes its own trace CSV
//! plus a JSON sidecar carrying the resolved solver config and the
//! instance hash, so a directory of cells is self-describing. Cells run in
//! parallel but each cell is single-threaded and writes only its own
//! files; rerunning the same config reproduces every output byte except
//! the elapsed_ns columns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cournot::{
    generate_instance, CournotError, CournotInstance, CournotParams, Participation, BENCHMARK_SEED,
};
use crate::game::{GameDefinition, GameError};
use crate::graph::DualGraph;
use crate::operators::{self, OperatorError};
use crate::sampling::{BatchSchedule, SamplingError, StepSchedule};
use crate::solvers::{
    cached_reference, certified_gamma, compute_reference, game_pair, run, AlgorithmKind, Estimator,
    Reference, RunRecord, SolverConfig, SolverError, StopMetric, StopRule, REFERENCE_MAX_ITERS,
    REFERENCE_TOL,
};

/// Header of the per-experiment summary table (one row per cell).
pub const SUMMARY_CSV_HEADER: &str = "algorithm,seed,status,iterations,rel_dist,\
     dual_disagreement,kkt_stat,kkt_feas,kkt_comp,oracle_calls,samples,evals_to_accuracy,\
     elapsed_ns";

/// Header of the per-algorithm totals table.
pub const COMPARISON_CSV_HEADER: &str =
    "algorithm,cells,failures,reached_accuracy,evals_to_accuracy,oracle_calls,samples,elapsed_ns";

/// Header of exported plot data.
pub const PLOT_CSV_HEADER: &str = "algorithm,seed,k,value";

const CELL_SCHEMA: &str = "sgnes-cell/1";

const METRICS: [StopMetric; 5] = [
    StopMetric::RelDist,
    StopMetric::DualDisagreement,
    StopMetric::KktStat,
    StopMetric::KktFeas,
    StopMetric::KktComp,
];

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Syntax errors and unknown keys; the message carries the offending
    /// key name or the line and column.
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sidecar encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown metric '{name}'; valid: {valid}")]
    UnknownMetric { name: String, valid: String },
    #[error("no records to export")]
    NoRecords,
    #[error("records mix instances {0} and {1}")]
    MixedInstances(String, String),
    #[error("cell file {}: {detail}", path.display())]
    MalformedCell { path: PathBuf, detail: String },
    #[error(transparent)]
    Instance(#[from] CournotError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_reference_tol() -> f64 {
    REFERENCE_TOL
}

fn default_summary_accuracy() -> f64 {
    1e-2
}

fn default_instance_seed() -> u64 {
    BENCHMARK_SEED
}

fn default_max_iters() -> u64 {
    1000
}

/// Where the experiment's instance comes from. `file` wins when set;
/// otherwise an instance is generated from `seed` with the default market
/// parameters and any overrides given here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSource {
    /// Path to a saved instance document, resolved against the working
    /// directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Generator seed.
    #[serde(default = "default_instance_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companies: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markets: Option<usize>,
    /// Upper bound on markets per company (the lower bound stays 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_markets_per_company: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_variance: Option<f64>,
}

impl Default for InstanceSource {
    fn default() -> Self {
        Self {
            file: None,
            seed: BENCHMARK_SEED,
            companies: None,
            markets: None,
            max_markets_per_company: None,
            slope_variance: None,
        }
    }
}

impl InstanceSource {
    pub fn resolve(&self) -> Result<CournotInstance, HarnessError> {
        if let Some(path) = &self.file {
            return Ok(CournotInstance::load(path)?);
        }
        let mut params = CournotParams::default();
        if let Some(n) = self.companies {
            params.companies = n;
        }
        if let Some(m) = self.markets {
            params.markets = m;
        }
        if let Some(cap) = self.max_markets_per_company {
            params.participation = Participation::Random {
                min_markets: 1,
                max_markets: cap,
            };
        }
        if let Some(v) = self.slope_variance {
            params.slope_variance = v;
        }
        Ok(generate_instance(&params, self.seed)?)
    }
}

/// Batch growth `S_k = ceil(c (k + k0)^(a+1))` for the sample-average
/// modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub c: f64,
    pub k0: f64,
    pub a: f64,
}

/// Vanishing steps `gamma_k = min(gamma0 / (k+1)^eta, cap)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSection {
    pub gamma0: f64,
    pub eta: f64,
    /// Plateau value; omitted means no plateau (the decay starts at
    /// `gamma0`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
}

/// Stop once `metric` falls below `tol`; several rules must all hold at
/// the same iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSection {
    pub metric: StopMetric,
    pub tol: f64,
}

/// One algorithm entry of the experiment. Knobs left out fall back to
/// values derived from the game at run time: `gamma` to the certified
/// step parameter, `batch` to the unit-rate growing schedule, and `step`
/// to a plateau at the game's cocoercivity constant followed by a `1/k`
/// decay (a pure decaying scale factor for the experimental mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub name: AlgorithmKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    /// Overrides the mode's natural estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
    /// Correction step for the forward-backward-forward engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Wall-clock budget per cell, in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<StepSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty", rename = "stop")]
    pub stop_rules: Vec<StopSection>,
}

impl AlgorithmEntry {
    /// Entry with every knob at its default.
    pub fn new(name: AlgorithmKind) -> Self {
        Self {
            name,
            gamma: None,
            max_iters: default_max_iters(),
            estimator: None,
            rho: None,
            deadline_secs: None,
            batch: None,
            step: None,
            stop_rules: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, msg: String| {
            Err(HarnessError::Invalid(format!(
                "algorithm '{}': {field}: {msg}",
                self.name
            )))
        };
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return bad("gamma", format!("must be positive and finite (got {g})"));
            }
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) || !r.is_finite() {
                return bad("rho", format!("must be positive and finite (got {r})"));
            }
        }
        if let Some(d) = self.deadline_secs {
            if !(d > 0.0) || !d.is_finite() {
                return bad(
                    "deadline_secs",
                    format!("must be positive and finite (got {d})"),
                );
            }
        }
        if let Some(b) = &self.batch {
            if let Err(e) = BatchSchedule::new(b.c, b.k0, b.a) {
                return bad("batch", e.to_string());
            }
        }
        if let Some(s) = &self.step {
            if let Err(e) = StepSchedule::new(s.gamma0, s.eta, s.cap.unwrap_or(s.gamma0)) {
                return bad("step", e.to_string());
            }
        }
        for rule in &self.stop_rules {
            if !(rule.tol > 0.0) || !rule.tol.is_finite() {
                return bad(
                    "stop",
                    format!("tolerance must be positive (got {})", rule.tol),
                );
            }
        }
        Ok(())
    }

    /// Resolves the entry into a runnable config for `game`, filling the
    /// game-dependent defaults.
    pub fn solver_config(
        &self,
        seed: u64,
        game: &GameDefinition,
    ) -> Result<SolverConfig, HarnessError> {
        let mut cfg = SolverConfig::new(self.name);
        cfg.seed = seed;
        cfg.gamma = self.gamma;
        cfg.max_iters = self.max_iters;
        cfg.estimator = self.estimator;
        cfg.rho = self.rho;
        cfg.deadline = self.deadline_secs.map(Duration::from_secs_f64);
        cfg.batch = match (&self.batch, cfg.effective_estimator()) {
            (Some(b), _) => Some(BatchSchedule::new(b.c, b.k0, b.a)?),
            (None, Estimator::Saa) => Some(BatchSchedule::new(1.0, 1.0, 1.0)?),
            (None, _) => None,
        };
        let needs_schedule =
            self.name.is_decoupled() || self.name == AlgorithmKind::StochFbSaExperimental;
        cfg.step_schedule = match &self.step {
            Some(s) => Some(StepSchedule::new(
                s.gamma0,
                s.eta,
                s.cap.unwrap_or(s.gamma0),
            )?),
            None if needs_schedule => Some(default_schedule(self.name, game)?),
            None => None,
        };
        cfg.stop_rules = self
            .stop_rules
            .iter()
            .map(|s| StopRule {
                metric: s.metric,
                tol: s.tol,
            })
            .collect();
        Ok(cfg)
    }
}

/// Game-derived step schedule: the experimental mode gets a pure decaying
/// scale factor, the projected-pseudogradient modes a plateau at the
/// cocoercivity constant of the pseudogradient (a safe constant step)
/// followed by a `1/k` decay.
fn default_schedule(
    kind: AlgorithmKind,
    game: &GameDefinition,
) -> Result<StepSchedule, HarnessError> {
    if kind == AlgorithmKind::StochFbSaExperimental {
        return Ok(StepSchedule::new(1.0, 0.6, 1.0)?);
    }
    let matrix = game.affine_pseudogradient_matrix()?;
    let beta = operators::cocoercivity_constant(&matrix)?;
    Ok(StepSchedule::new(40.0 * beta, 1.0, beta)?)
}

/// Everything `run_experiment` needs, parsed from a plain-text key/value
/// document with nested sections. [`load_config`] fills every default, so
/// an emitted copy of the effective config parses back to an equal value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds crossed with every algorithm entry; deterministic entries
    /// still produce one cell per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Stationarity tolerance of the reference solve.
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    /// Step parameter of the reference solve; omitted means certified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_gamma: Option<f64>,
    /// Relative-distance level at which the comparison table counts
    /// forward evaluations.
    #[serde(default = "default_summary_accuracy")]
    pub summary_accuracy: f64,
    #[serde(default)]
    pub instance: InstanceSource,
    #[serde(rename = "algorithm")]
    pub algorithms: Vec<AlgorithmEntry>,
}

impl ExperimentConfig {
    /// Single-algorithm config on the bundled benchmark instance.
    pub fn single(kind: AlgorithmKind, out_dir: PathBuf) -> Self {
        Self {
            seeds: default_seeds(),
            out_dir,
            reference_tol: default_reference_tol(),
            reference_gamma: None,
            summary_accuracy: default_summary_accuracy(),
            instance: InstanceSource::default(),
            algorithms: vec![AlgorithmEntry::new(kind)],
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Invalid(msg));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.algorithms.is_empty() {
            return bad("at least one [[algorithm]] entry is required".into());
        }
        for (i, entry) in self.algorithms.iter().enumerate() {
            if self.algorithms[..i]
                .iter()
                .any(|prev| prev.name == entry.name)
            {
                return bad(format!(
                    "algorithm '{}' is listed twice; cell files are keyed by name",
                    entry.name
                ));
            }
            entry.validate()?;
        }
        if !(self.reference_tol > 0.0) || !self.reference_tol.is_finite() {
            return bad(format!(
                "reference_tol must be positive (got {})",
                self.reference_tol
            ));
        }
        if let Some(g) = self.reference_gamma {
            if !(g > 0.0) || !g.is_finite() {
                return bad(format!(
                    "reference_gamma must be positive and finite (got {g})"
                ));
            }
        }
        if !(self.summary_accuracy > 0.0) || !self.summary_accuracy.is_finite() {
            return bad(format!(
                "summary_accuracy must be positive (got {})",
                self.summary_accuracy
            ));
        }
        Ok(())
    }

    /// Serializes the effective config; parsing the result gives back an
    /// equal value.
    pub fn emit(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let config: ExperimentConfig = toml::from_str(text)?;
    config.validate()?;
    Ok(config)
}

/// Reads, parses, and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_config(&text)
}

/// Parses a metric column name for plot export and stop rules.
pub fn parse_metric(name: &str) -> Result<StopMetric, HarnessError> {
    METRICS
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| {
            let valid: Vec<&str> = METRICS.iter().map(|m| m.name()).collect();
            HarnessError::UnknownMetric {
                name: name.to_string(),
                valid: valid.join(", "),
            }
        })
}

/// How a cell ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged,
    NonFinite,
    Error,
}

impl CellStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::NonFinite => "non_finite",
            CellStatus::Error => "error",
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }
}

/// Summary row of one (algorithm, seed) cell. Metric fields are NaN when
/// the cell recorded nothing.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub status: CellStatus,
    /// Failure cause for non-ok statuses.
    pub detail: Option<String>,
    pub iterations: u64,
    pub final_rel_dist: f64,
    pub final_dual_disagreement: f64,
    pub final_kkt_stat: f64,
    pub final_kkt_feas: f64,
    pub final_kkt_comp: f64,
    pub oracle_calls: u64,
    pub samples: u64,
    /// Forward evaluations spent when the relative distance first fell
    /// below the summary accuracy; None if it never did.
    pub evals_to_accuracy: Option<u64>,
    pub elapsed_ns: u128,
    pub stopped_early: bool,
    pub deadline_exceeded: bool,
}

impl CellOutcome {
    fn failed(algorithm: AlgorithmKind, seed: u64, status: CellStatus, detail: String) -> Self {
        Self {
            algorithm,
            seed,
            status,
            detail: Some(detail),
            iterations: 0,
            final_rel_dist: f64::NAN,
            final_dual_disagreement: f64::NAN,
            final_kkt_stat: f64::NAN,
            final_kkt_feas: f64::NAN,
            final_kkt_comp: f64::NAN,
            oracle_calls: 0,
            samples: 0,
            evals_to_accuracy: None,
            elapsed_ns: 0,
            stopped_early: false,
            deadline_exceeded: false,
        }
    }

    fn from_record(
        algorithm: AlgorithmKind,
        seed: u64,
        status: CellStatus,
        detail: Option<String>,
        record: &RunRecord,
        accuracy: f64,
    ) -> Self {
        let last = record.rows.last();
        Self {
            algorithm,
            seed,
            status,
            detail,
            iterations: record.rows.len() as u64,
            final_rel_dist: last.map_or(f64::NAN, |r| r.rel_dist),
            final_dual_disagreement: last.map_or(f64::NAN, |r| r.dual_disagreement),
            final_kkt_stat: last.map_or(f64::NAN, |r| r.kkt_stat),
            final_kkt_feas: last.map_or(f64::NAN, |r| r.kkt_feas),
            final_kkt_comp: last.map_or(f64::NAN, |r| r.kkt_comp),
            oracle_calls: last.map_or(0, |r| r.oracle_calls),
            samples: last.map_or(0, |r| r.samples),
            evals_to_accuracy: record.evals_to_accuracy(accuracy).map(|(_, calls)| calls),
            elapsed_ns: last.map_or(0, |r| r.elapsed_ns),
            stopped_early: record.stopped_early,
            deadline_exceeded: record.deadline_exceeded,
        }
    }

    fn csv_line(&self) -> String {
        let evals = self
            .evals_to_accuracy
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.algorithm,
            self.seed,
            self.status.label(),
            self.iterations,
            self.final_rel_dist,
            self.final_dual_disagreement,
            self.final_kkt_stat,
            self.final_kkt_feas,
            self.final_kkt_comp,
            self.oracle_calls,
            self.samples,
            evals,
            self.elapsed_ns
        )
    }
}

/// Per-algorithm totals over all seeds: sums of the final cumulative
/// counters of each cell, so each value equals the column sum over the
/// per-increment view of the cell CSVs.
#[derive(Clone, Debug)]
pub struct AlgorithmTotals {
    pub algorithm: AlgorithmKind,
    pub cells: usize,
    pub failures: usize,
    /// Cells whose relative distance crossed the summary accuracy.
    pub reached_accuracy: usize,
    /// Total forward evaluations spent to reach the summary accuracy,
    /// summed over the cells that reached it.
    pub evals_to_accuracy: Option<u64>,
    pub oracle_calls: u64,
    pub samples: u64,
    pub elapsed_ns: u128,
}

impl AlgorithmTotals {
    fn csv_line(&self) -> String {
        let evals = self
            .evals_to_accuracy
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.algorithm,
            self.cells,
            self.failures,
            self.reached_accuracy,
            evals,
            self.oracle_calls,
            self.samples,
            self.elapsed_ns
        )
    }
}

/// What `run_experiment` produced. Cell failures are recorded, not
/// propagated; callers decide what exit they warrant.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub instance_hash: String,
    pub cells: Vec<CellOutcome>,
    pub totals: Vec<AlgorithmTotals>,
    pub summary_path: PathBuf,
    pub comparison_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.status.is_ok()).count()
    }

    pub fn all_failed(&self) -> bool {
        !self.cells.is_empty() && self.failed_cells() == self.cells.len()
    }
}

#[derive(Serialize, Deserialize)]
struct CellSidecar {
    schema: String,
    algorithm: AlgorithmKind,
    seed: u64,
    instance_hash: String,
    status: CellStatus,
    stopped_early: bool,
    deadline_exceeded: bool,
    iterations: u64,
    config: SolverConfig,
}

struct CellCtx<'a> {
    instance: &'a CournotInstance,
    instance_hash: &'a str,
    graph: &'a DualGraph,
    game: &'a GameDefinition,
    reference: Option<&'a Reference>,
    game_nc: Option<&'a GameDefinition>,
    reference_nc: Option<&'a Reference>,
    accuracy: f64,
    cells_dir: &'a Path,
}

fn persist_cell(
    ctx: &CellCtx<'_>,
    cfg: &SolverConfig,
    record: &RunRecord,
    status: CellStatus,
) -> Result<(), HarnessError> {
    let stem = format!("{}-seed{}", record.algorithm, record.seed);
    let csv_path = ctx.cells_dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, record.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    let sidecar = CellSidecar {
        schema: CELL_SCHEMA.to_string(),
        algorithm: record.algorithm,
        seed: record.seed,
        instance_hash: ctx.instance_hash.to_string(),
        status,
        stopped_early: record.stopped_early,
        deadline_exceeded: record.deadline_exceeded,
        iterations: record.rows.len() as u64,
        config: cfg.clone(),
    };
    let meta_path = ctx.cells_dir.join(format!("{stem}.meta.json"));
    fs::write(&meta_path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

fn run_cell(ctx: &CellCtx<'_>, entry: &AlgorithmEntry, seed: u64) -> CellOutcome {
    let (game, reference) = if entry.name.is_decoupled() {
        (
            ctx.game_nc.expect("resolved for decoupled entries"),
            ctx.reference_nc,
        )
    } else {
        (ctx.game, ctx.reference)
    };
    let cfg = match entry.solver_config(seed, game) {
        Ok(c) => c,
        Err(e) => return CellOutcome::failed(entry.name, seed, CellStatus::Error, e.to_string()),
    };
    let stream = (cfg.effective_estimator() != Estimator::Exact).then(|| ctx.instance.stream(seed));
    let (status, detail, record) = match run(game, ctx.graph, stream.as_ref(), reference, &cfg) {
        Ok(record) => (CellStatus::Ok, None, Some(record)),
        Err(SolverError::Diverged {
            iteration,
            threshold,
            record,
        }) => (
            CellStatus::Diverged,
            Some(format!(
                "diverged at iteration {iteration} (metric above {threshold})"
            )),
            Some(*record),
        ),
        Err(SolverError::NonFinite {
            iteration,
            block,
            record,
        }) => (
            CellStatus::NonFinite,
            Some(format!("non-finite {block} block at iteration {iteration}")),
            Some(*record),
        ),
        Err(e) => (CellStatus::Error, Some(e.to_string()), None),
    };
    match record {
        Some(rec) => {
            if let Err(e) = persist_cell(ctx, &cfg, &rec, status) {
                return CellOutcome::failed(
                    entry.name,
                    seed,
                    CellStatus::Error,
                    format!("cell write failed: {e}"),
                );
            }
            CellOutcome::from_record(entry.name, seed, status, detail, &rec, ctx.accuracy)
        }
        None => CellOutcome::failed(
            entry.name,
            seed,
            CellStatus::Error,
            detail.unwrap_or_else(|| "unknown failure".into()),
        ),
    }
}

fn totals_by_algorithm(entries: &[AlgorithmEntry], cells: &[CellOutcome]) -> Vec<AlgorithmTotals> {
    entries
        .iter()
        .map(|entry| {
            let mine: Vec<&CellOutcome> =
                cells.iter().filter(|c| c.algorithm == entry.name).collect();
            let reached: Vec<u64> = mine.iter().filter_map(|c| c.evals_to_accuracy).collect();
            AlgorithmTotals {
                algorithm: entry.name,
                cells: mine.len(),
                failures: mine.iter().filter(|c| !c.status.is_ok()).count(),
                reached_accuracy: reached.len(),
                evals_to_accuracy: if reached.is_empty() {
                    None
                } else {
                    Some(reached.iter().sum())
                },
                oracle_calls: mine.iter().map(|c| c.oracle_calls).sum(),
                samples: mine.iter().map(|c| c.samples).sum(),
                elapsed_ns: mine.iter().map(|c| c.elapsed_ns).sum(),
            }
        })
        .collect()
}

fn summary_csv(cells: &[CellOutcome]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for cell in cells {
        out.push_str(&cell.csv_line());
        out.push('\n');
    }
    out
}

fn comparison_csv(totals: &[AlgorithmTotals]) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for row in totals {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Runs every (algorithm, seed) cell of the config: resolves the
/// instance, computes or loads the cached reference, executes the cells
/// in parallel (each single-threaded), and writes per-cell CSVs with JSON
/// sidecars plus `summary.csv` (one row per cell) and `comparison.csv`
/// (per-algorithm totals) under `out_dir`. Cell failures land in the
/// summary with a non-ok status; orchestration failures (unreadable
/// instance, unwritable directory, a reference that does not converge)
/// are errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    let out_dir = &config.out_dir;
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| io_err(&cells_dir, e))?;

    let instance = config.instance.resolve()?;
    instance.save(&out_dir.join("instance.json"))?;
    let config_path = out_dir.join("config.toml");
    fs::write(&config_path, config.emit()?).map_err(|e| io_err(&config_path, e))?;
    let instance_hash = instance.instance_hash();
    let (game, graph) = game_pair(&instance)?;

    let any_coupled = config.algorithms.iter().any(|e| !e.name.is_decoupled());
    let any_decoupled = config.algorithms.iter().any(|e| e.name.is_decoupled());
    let reference = if any_coupled {
        let gamma = match config.reference_gamma {
            Some(g) => g,
            None => certified_gamma(&game, &graph, AlgorithmKind::DetFb)?,
        };
        Some(cached_reference(
            &instance,
            out_dir,
            gamma,
            config.reference_tol,
        )?)
    } else {
        None
    };
    let (game_nc, reference_nc) = if any_decoupled {
        let g = instance.game_without_coupling()?;
        let gamma = certified_gamma(&g, &graph, AlgorithmKind::DetFb)?;
        let r = compute_reference(&g, &graph, gamma, config.reference_tol, REFERENCE_MAX_ITERS)?;
        (Some(g), Some(r))
    } else {
        (None, None)
    };

    let ctx = CellCtx {
        instance: &instance,
        instance_hash: &instance_hash,
        graph: &graph,
        game: &game,
        reference: reference.as_ref(),
        game_nc: game_nc.as_ref(),
        reference_nc: reference_nc.as_ref(),
        accuracy: config.summary_accuracy,
        cells_dir: &cells_dir,
    };
    let jobs: Vec<(usize, &AlgorithmEntry, u64)> = config
        .algorithms
        .iter()
        .flat_map(|entry| config.seeds.iter().map(move |&seed| (entry, seed)))
        .enumerate()
        .map(|(i, (entry, seed))| (i, entry, seed))
        .collect();
    let mut indexed: Vec<(usize, CellOutcome)> = jobs
        .par_iter()
        .map(|&(i, entry, seed)| (i, run_cell(&ctx, entry, seed)))
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    let cells: Vec<CellOutcome> = indexed.into_iter().map(|(_, c)| c).collect();

    let totals = totals_by_algorithm(&config.algorithms, &cells);
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&cells)).map_err(|e| io_err(&summary_path, e))?;
    let comparison_path = out_dir.join("comparison.csv");
    fs::write(&comparison_path, comparison_csv(&totals))
        .map_err(|e| io_err(&comparison_path, e))?;

    Ok(ExperimentOutcome {
        out_dir: out_dir.clone(),
        instance_hash,
        cells,
        totals,
        summary_path,
        comparison_path,
    })
}

/// Long-format trace export: one `algorithm,seed,k,value` row per
/// recorded iteration of every record, so the row count equals the summed
/// iteration counts. Callers must pass records of the same instance;
/// [`export_dir`] enforces that through the cell sidecars.
pub fn export_plot_data(
    records: &[&RunRecord],
    metric: StopMetric,
) -> Result<String, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut out = String::from(PLOT_CSV_HEADER);
    out.push('\n');
    for record in records {
        for row in &record.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                record.algorithm,
                record.seed,
                row.k,
                row.metric(metric)
            );
        }
    }
    Ok(out)
}

fn append_plot_rows(
    out: &mut String,
    algorithm: AlgorithmKind,
    seed: u64,
    csv_text: &str,
    metric: StopMetric,
    path: &Path,
) -> Result<(), HarnessError> {
    let malformed = |detail: String| HarnessError::MalformedCell {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = csv_text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let k_idx = columns
        .iter()
        .position(|c| *c == "k")
        .ok_or_else(|| malformed("no k column".into()))?;
    let v_idx = columns
        .iter()
        .position(|c| *c == metric.name())
        .ok_or_else(|| malformed(format!("no {} column", metric.name())))?;
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= k_idx.max(v_idx) {
            return Err(malformed(format!("short row '{line}'")));
        }
        let _ = writeln!(
            out,
            "{},{},{},{}",
            algorithm, seed, fields[k_idx], fields[v_idx]
        );
    }
    Ok(())
}

/// Exports one metric column of every cell under `dir` (an experiment
/// output directory) into `dir/plot-<metric>.csv`, refusing to mix cells
/// from different instances.
pub fn export_dir(dir: &Path, metric_name: &str) -> Result<PathBuf, HarnessError> {
    let metric = parse_metric(metric_name)?;
    let cells_dir = dir.join("cells");
    let entries = fs::read_dir(&cells_dir).map_err(|e| io_err(&cells_dir, e))?;
    let mut metas: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".meta.json"))
        })
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut shared_hash: Option<String> = None;
    let mut out = String::from(PLOT_CSV_HEADER);
    out.push('\n');
    for meta_path in &metas {
        let text = fs::read_to_string(meta_path).map_err(|e| io_err(meta_path, e))?;
        let meta: CellSidecar = serde_json::from_str(&text)?;
        match &shared_hash {
            None => shared_hash = Some(meta.instance_hash.clone()),
            Some(h) if *h != meta.instance_hash => {
                return Err(HarnessError::MixedInstances(h.clone(), meta.instance_hash));
            }
            Some(_) => {}
        }
        let name = meta_path
            .file_name()
            .and_then(|n| n.to_str())
            .expect("filtered to utf-8 names")
            .trim_end_matches(".meta.json");
        let csv_path = cells_dir.join(format!("{name}.csv"));
        let csv_text = fs::read_to_string(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        append_plot_rows(
            &mut out,
            meta.algorithm,
            meta.seed,
            &csv_text,
            metric,
            &csv_path,
        )?;
    }
    let out_path = dir.join(format!("plot-{}.csv", metric.name()));
    fs::write(&out_path, out).map_err(|e| io_err(&out_path, e))?;
    Ok(out_path)
}

/// One measured point of a step-parameter scan.
#[derive(Clone, Copy, Debug)]
pub struct GammaScanPoint {
    /// Multiple of the certified value that was tried.
    pub factor: f64,
    pub gamma: f64,
    /// The stop rule held within the budget.
    pub converged: bool,
    pub iterations: u64,
    /// Watched metric at the last recorded iteration (NaN when nothing
    /// was recorded).
    pub final_metric: f64,
}

/// Grid search over the step-size design parameter: runs the algorithm
/// with the exact oracle at `certified * factor` for every factor and
/// reports whether the stop rule held within `max_iters`. Worth running
/// before committing to a step size on a new instance; factors below 1
/// frequently land in limit cycles rather than diverging, which a plain
/// divergence guard never flags. Relative-distance stop rules need no
/// reference here; prefer the stationarity metric.
pub fn gamma_scan(
    game: &GameDefinition,
    graph: &DualGraph,
    algorithm: AlgorithmKind,
    factors: &[f64],
    stop: StopRule,
    max_iters: u64,
) -> Result<Vec<GammaScanPoint>, HarnessError> {
    let certified = certified_gamma(game, graph, algorithm)?;
    let mut points = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut cfg = SolverConfig::new(algorithm);
        cfg.estimator = Some(Estimator::Exact);
        cfg.gamma = Some(certified * factor);
        cfg.max_iters = max_iters;
        cfg.stop_rules = vec![stop];
        let (converged, iterations, final_metric) = match run(game, graph, None, None, &cfg) {
            Ok(record) => (
                record.stopped_early,
                record.rows.len() as u64,
                record
                    .rows
                    .last()
                    .map_or(f64::NAN, |r| r.metric(stop.metric)),
            ),
            Err(SolverError::Diverged { record, .. })
            | Err(SolverError::NonFinite { record, .. }) => (
                false,
                record.rows.len() as u64,
                record
                    .rows
                    .last()
                    .map_or(f64::NAN, |r| r.metric(stop.metric)),
            ),
            Err(e) => return Err(e.into()),
        };
        points.push(GammaScanPoint {
            factor,
            gamma: certified * factor,
            converged,
            iterations,
            final_metric,
        });
    }
    Ok(points)
}
