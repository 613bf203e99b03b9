//! Simulation benchmarks and resampling stability studies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_marginal, hiermcp_grid, HierMcp, Smcp, DEFAULT_FDR};
use crate::data::Dataset;
use crate::error::{GxeError, Result};
use crate::evaluation::{ooi_by, MetricsReport, MetricsSummary};
use crate::io;
use crate::model::{FittedModel, PreparedData};
use crate::penalties::{build_adjacency, build_laplacian_penalty, build_spline_penalty, PenaltyKind, PenaltyMatrix};
use crate::simulation::{simulate, ScenarioSpec};
use crate::solver::{FitResult, SolverConfig};
use crate::tuning::{
    grid_search, Estimator, GridOptions, Hierarchical, TuningGrid, DEFAULT_LAMBDA1_MIN_RATIO, DEFAULT_N_LAMBDA1,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "MA")]
    Ma,
    #[serde(rename = "HierMCP")]
    HierMcp,
    #[serde(rename = "SMCP")]
    Smcp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Ma, Method::HierMcp, Method::Smcp];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ma => "MA",
            Method::HierMcp => "HierMCP",
            Method::Smcp => "SMCP",
        }
    }

    /// Whether fits of this method must respect the hierarchy.
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Method::Proposed | Method::HierMcp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GxeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GxeError::Parse(format!("unknown method `{s}` (expected proposed, MA, HierMCP or SMCP)")))
    }
}

/// Data-independent description of the tuning grid; `lambda1` values are
/// placed relative to each dataset's `lambda1_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lambda1: usize,
    pub lambda1_min_ratio: f64,
    /// Explicit `lambda2` values; the data-driven default when absent.
    pub lambda2_values: Option<Vec<f64>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_lambda1: DEFAULT_N_LAMBDA1, lambda1_min_ratio: DEFAULT_LAMBDA1_MIN_RATIO, lambda2_values: None }
    }
}

impl GridSpec {
    pub fn resolve(&self, ls: &Dataset, j: &PenaltyMatrix) -> Result<TuningGrid> {
        let l2 = match &self.lambda2_values {
            Some(v) => v.clone(),
            None => TuningGrid::default_for(ls, j)?.lambda2_values,
        };
        TuningGrid::with_sizes(ls, self.n_lambda1, self.lambda1_min_ratio, l2)
    }
}

/// Structure penalty for a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PenaltySpec {
    #[default]
    Spline,
    /// Laplacian of the thresholded correlation graph of the training G
    /// columns.
    Laplacian { alpha_cut: f64 },
    None,
}

pub const DEFAULT_ALPHA_CUT: f64 = 0.05;

impl PenaltySpec {
    pub fn build(&self, raw: &Dataset) -> Result<PenaltyMatrix> {
        match *self {
            PenaltySpec::Spline => build_spline_penalty(raw.p()),
            PenaltySpec::Laplacian { alpha_cut } => build_laplacian_penalty(&build_adjacency(raw.x(), alpha_cut)?),
            PenaltySpec::None => Ok(PenaltyMatrix::none(raw.p())),
        }
    }

    pub fn kind(&self) -> PenaltyKind {
        match self {
            PenaltySpec::Spline => PenaltyKind::Spline,
            PenaltySpec::Laplacian { .. } => PenaltyKind::Laplacian,
            PenaltySpec::None => PenaltyKind::None,
        }
    }
}

/// Per-fit bookkeeping collected while an estimator runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FitAudit {
    pub fits: usize,
    pub failed: usize,
    pub max_iterations: usize,
    pub not_converged: usize,
    /// Largest increase between consecutive objective values of any fit.
    pub max_objective_increase: f64,
    pub hierarchy_violations: usize,
}

impl FitAudit {
    pub fn record(&mut self, fit: &FitResult) {
        self.fits += 1;
        self.max_iterations = self.max_iterations.max(fit.iterations);
        self.not_converged += usize::from(!fit.converged);
        if fit.objective_trace.len() > 1 {
            self.max_objective_increase = self.max_objective_increase.max(fit.max_objective_increase());
        }
        self.hierarchy_violations += fit.effects.hierarchy_violations();
    }

    pub fn merge(&mut self, other: &FitAudit) {
        self.fits += other.fits;
        self.failed += other.failed;
        self.max_iterations = self.max_iterations.max(other.max_iterations);
        self.not_converged += other.not_converged;
        self.max_objective_increase = self.max_objective_increase.max(other.max_objective_increase);
        self.hierarchy_violations += other.hierarchy_violations;
    }
}

/// Wraps an estimator and audits every fit it produces, including warm-start
/// candidates that lose to a neighbour.
pub struct Audited<'a, E: ?Sized> {
    inner: &'a E,
    audit: Mutex<FitAudit>,
}

impl<'a, E: Estimator + ?Sized> Audited<'a, E> {
    pub fn new(inner: &'a E) -> Self {
        Self { inner, audit: Mutex::new(FitAudit::default()) }
    }

    pub fn audit(&self) -> FitAudit {
        *self.audit.lock().expect("audit lock")
    }
}

impl<E: Estimator + ?Sized> Estimator for Audited<'_, E> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn fit(&self, d: &Dataset, j: &PenaltyMatrix, cfg: &SolverConfig, warm: Option<&FitResult>) -> Result<FitResult> {
        let r = self.inner.fit(d, j, cfg, warm);
        let mut a = self.audit.lock().expect("audit lock");
        match &r {
            Ok(fit) => a.record(fit),
            Err(_) => a.failed += 1,
        }
        r
    }
}

/// A tuned (or, for MA, thresholded) fit in original units.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub model: FittedModel,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub audit: FitAudit,
}

fn estimator_for(method: Method) -> &'static (dyn Estimator + Send) {
    match method {
        Method::Proposed => &Hierarchical,
        Method::HierMcp => &HierMcp,
        Method::Smcp => &Smcp,
        Method::Ma => unreachable!("MA is not tuned"),
    }
}

/// Tunes `method` by BIC on `raw` and returns the selected fit.
pub fn tune_method(
    method: Method,
    raw: &Dataset,
    j: &PenaltyMatrix,
    grid: &GridSpec,
    cfg: &SolverConfig,
    fdr_level: f64,
) -> Result<MethodFit> {
    if method == Method::Ma {
        let r = fit_marginal(raw, fdr_level)?;
        return Ok(MethodFit { model: r.model, lambda1: None, lambda2: None, audit: FitAudit::default() });
    }
    let prep = PreparedData::new(raw)?;
    let tuning = match method {
        Method::HierMcp => hiermcp_grid(&prep.ls)?,
        _ => grid.resolve(&prep.ls, j)?,
    };
    let est = Audited::new(estimator_for(method));
    let res = grid_search(&prep.ls, j, &tuning, cfg, &est, GridOptions::for_data(&prep.ls))?;
    Ok(MethodFit {
        model: prep.to_model(&res.best.effects, res.best.pattern.clone()),
        lambda1: Some(res.lambda1),
        lambda2: Some(res.lambda2),
        audit: est.audit(),
    })
}

/// Fits `method` at fixed penalties (MA ignores them).
pub fn fit_method_fixed(
    method: Method,
    raw: &Dataset,
    j: &PenaltyMatrix,
    cfg: &SolverConfig,
    fdr_level: f64,
) -> Result<FittedModel> {
    if method == Method::Ma {
        return Ok(fit_marginal(raw, fdr_level)?.model);
    }
    let prep = PreparedData::new(raw)?;
    let fit = estimator_for(method).fit(&prep.ls, j, cfg, None)?;
    Ok(prep.to_model(&fit.effects, fit.pattern))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub scenarios: Vec<ScenarioSpec>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub grid: GridSpec,
    pub test_n: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub penalty: PenaltySpec,
    #[serde(default = "default_fdr")]
    pub fdr_level: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_fdr() -> f64 {
    DEFAULT_FDR
}

pub const DEFAULT_TEST_N: usize = 100;

impl BenchmarkPlan {
    pub fn new(scenarios: Vec<ScenarioSpec>, replicates: usize, methods: Vec<Method>, master_seed: u64) -> Self {
        Self {
            scenarios,
            replicates,
            methods,
            grid: GridSpec::default(),
            test_n: DEFAULT_TEST_N,
            master_seed,
            penalty: PenaltySpec::Spline,
            fdr_level: DEFAULT_FDR,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(GxeError::InvalidInput("a benchmark needs at least one replicate".into()));
        }
        if self.methods.is_empty() {
            return Err(GxeError::InvalidInput("a benchmark needs at least one method".into()));
        }
        if self.scenarios.is_empty() {
            return Err(GxeError::InvalidInput("a benchmark needs at least one scenario".into()));
        }
        if self.test_n < 2 {
            return Err(GxeError::InvalidInput("test_n must be at least 2".into()));
        }
        for s in &self.scenarios {
            s.validate()?;
        }
        self.solver.validate()
    }

    /// Scenario `i` with its seed derived from the master seed.
    pub fn scenario(&self, i: usize) -> ScenarioSpec {
        self.scenarios[i].with_seed(self.master_seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub replicate: usize,
    pub method: Method,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub censoring: Option<f64>,
    pub seconds: f64,
    pub audit: FitAudit,
}

/// Aggregate row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scenario: String,
    pub method: Method,
    pub failures: usize,
    pub summary: Option<MetricsSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<TableRow>,
    pub records: Vec<ReplicateRecord>,
}

fn run_replicate(plan: &BenchmarkPlan, si: usize, rep: usize) -> Vec<ReplicateRecord> {
    let spec = plan.scenario(si);
    let name = spec.name();
    let failed = |method: Method, e: &GxeError, censoring: Option<f64>| ReplicateRecord {
        scenario: name.clone(),
        replicate: rep,
        method,
        metrics: None,
        error: Some(e.to_string()),
        lambda1: None,
        lambda2: None,
        censoring,
        seconds: 0.0,
        audit: FitAudit::default(),
    };
    let sim = match simulate(&spec, plan.test_n, rep as u64) {
        Ok(s) => s,
        Err(e) => return plan.methods.iter().map(|&m| failed(m, &e, None)).collect(),
    };
    let censoring = sim.censoring_fraction();
    let j = match plan.penalty.build(&sim.train) {
        Ok(j) => j,
        Err(e) => return plan.methods.iter().map(|&m| failed(m, &e, censoring)).collect(),
    };
    plan.methods
        .iter()
        .map(|&method| {
            let t0 = Instant::now();
            let scored = tune_method(method, &sim.train, &j, &plan.grid, &plan.solver, plan.fdr_level).and_then(|f| {
                let m = MetricsReport::compute(&f.model, &sim.truth.theta0, &sim.truth.pattern0, &j, &sim.test)?;
                Ok((f, m))
            });
            match scored {
                Ok((f, m)) => ReplicateRecord {
                    scenario: name.clone(),
                    replicate: rep,
                    method,
                    metrics: Some(m),
                    error: None,
                    lambda1: f.lambda1,
                    lambda2: f.lambda2,
                    censoring,
                    seconds: t0.elapsed().as_secs_f64(),
                    audit: f.audit,
                },
                Err(e) => {
                    log::warn!("{name} replicate {rep} {method}: {e}");
                    ReplicateRecord { seconds: t0.elapsed().as_secs_f64(), ..failed(method, &e, censoring) }
                }
            }
        })
        .collect()
}

/// Simulates, tunes, fits and scores every scenario, replicate and method.
/// Failed replicates are recorded and excluded from the aggregates.
pub fn run_benchmark(plan: &BenchmarkPlan) -> Result<BenchmarkReport> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..plan.scenarios.len()).flat_map(|s| (0..plan.replicates).map(move |r| (s, r))).collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let out = run_replicate(plan, s, r);
            log::info!("{} replicate {r} done", plan.scenarios[s].name());
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let rows = aggregate(&records);
    Ok(BenchmarkReport { rows, records })
}

/// Mean and sd per scenario and method, in first-appearance order.
pub fn aggregate(records: &[ReplicateRecord]) -> Vec<TableRow> {
    let mut keys: Vec<(String, Method)> = Vec::new();
    for r in records {
        let k = (r.scenario.clone(), r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, method)| {
            let mine: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.scenario == scenario && r.method == method).collect();
            let ok: Vec<MetricsReport> = mine.iter().filter_map(|r| r.metrics.clone()).collect();
            TableRow { failures: mine.len() - ok.len(), summary: MetricsSummary::of(&ok), scenario, method }
        })
        .collect()
}

/// `table.csv` in the layout `scenario, method, M:TP, M:FP, I:TP, I:FP,
/// RSSE, RSE, PMSE or Cstat, replicates, failures`.
pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    io::atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "scenario", "method", "M:TP", "M:FP", "I:TP", "I:FP", "RSSE", "RSE", "PMSE/Cstat", "replicates", "failures",
        ])?;
        for row in rows {
            let mut rec = vec![row.scenario.clone(), row.method.to_string()];
            match &row.summary {
                Some(s) => {
                    rec.extend(s.table_cells());
                    rec.push(s.replicates.to_string());
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 8)),
            }
            rec.push(row.failures.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    })
}

/// Writes `table.csv`, `replicates.jsonl` and `plan.json` into `dir`.
pub fn write_outputs(dir: &Path, plan: &BenchmarkPlan, report: &BenchmarkReport) -> Result<()> {
    io::write_json(&dir.join("plan.json"), plan)?;
    io::write_jsonl(&dir.join("replicates.jsonl"), &report.records)?;
    write_table(&dir.join("table.csv"), &report.rows)
}

/// Resampling summary of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub method: Method,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// Mean held-out PMSE, or C-statistic for survival data.
    pub mean_score: Option<f64>,
    pub mean_ooi: f64,
    pub selected: usize,
    pub failed_resamples: usize,
    pub resamples: usize,
}

/// For each method: tune on the full data, then over `resamples` 80/20
/// splits refit at the tuned penalties (for the OOI) and tune-and-fit on the
/// 80% part (for the held-out score).
#[allow(clippy::too_many_arguments)]
pub fn run_stability(
    raw: &Dataset,
    j: &PenaltyMatrix,
    grid: &GridSpec,
    cfg: &SolverConfig,
    methods: &[Method],
    resamples: usize,
    seed: u64,
    fdr_level: f64,
) -> Result<Vec<StabilityRow>> {
    if methods.is_empty() {
        return Err(GxeError::InvalidInput("no methods to evaluate".into()));
    }
    methods
        .iter()
        .map(|&method| {
            let full = tune_method(method, raw, j, grid, cfg, fdr_level)?;
            let mut fixed_cfg = *cfg;
            if let (Some(l1), Some(l2)) = (full.lambda1, full.lambda2) {
                fixed_cfg.mcp.lambda1 = l1;
                fixed_cfg.mcp.lambda2 = l2;
            }
            let fixed = |d: &Dataset| fit_method_fixed(method, d, j, &fixed_cfg, fdr_level);
            let tuned = |d: &Dataset| tune_method(method, d, j, grid, cfg, fdr_level).map(|f| f.model);
            let r = ooi_by(raw, resamples, seed, &fixed, Some(&tuned))?;
            Ok(StabilityRow {
                method,
                lambda1: full.lambda1,
                lambda2: full.lambda2,
                mean_score: r.held_out,
                mean_ooi: r.mean_selected,
                selected: r.full_pattern.size(),
                failed_resamples: r.failed,
                resamples,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn plan_validation() {
        let s: ScenarioSpec = "ar03-m1-linear".parse().unwrap();
        assert!(BenchmarkPlan::new(vec![s], 0, vec![Method::Proposed], 1).validate().is_err());
        assert!(BenchmarkPlan::new(vec![s], 1, vec![], 1).validate().is_err());
        assert!(BenchmarkPlan::new(vec![s], 1, vec![Method::Ma], 1).validate().is_ok());
    }
}
