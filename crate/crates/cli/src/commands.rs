use std::path::Path;
use std::time::Instant;

use gxe_core::baselines::{self, HierMcp, ScreenMode, Smcp, DEFAULT_FDR};
use gxe_core::benchmark::{self, BenchmarkPlan, GridSpec, Method, PenaltySpec, DEFAULT_ALPHA_CUT, DEFAULT_TEST_N};
use gxe_core::model::{FittedModel, PreparedData};
use gxe_core::penalties::{build_adjacency, build_laplacian_penalty, build_spline_penalty};
use gxe_core::simulation::{self, ScenarioSpec};
use gxe_core::tuning::{self, grid_search, Criterion, Estimator, GridOptions, Hierarchical};
use gxe_core::{io, Dataset, FitResult, GxeError, McpParams, PenaltyMatrix, SolverConfig};
use serde::Serialize;

use crate::config::required;
use crate::{
    BenchmarkArgs, CliError, CriterionChoice, FitArgs, GridArgs, ModeChoice, PenaltyArgs, PenaltyChoice,
    ScreenArgs, SimulateArgs, SolverArgs, StabilityArgs, TuneArgs,
};

const DEFAULT_RESAMPLES: usize = 20;
const DEFAULT_EBIC_GAMMA: f64 = 0.5;

fn config_value<T: Serialize>(a: &T) -> serde_json::Value {
    match serde_json::to_value(a) {
        Ok(serde_json::Value::Object(m)) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => serde_json::Value::Null,
    }
}

fn read_data(path: &Path) -> Result<Dataset, CliError> {
    io::read_dataset(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn build_penalty(a: &PenaltyArgs, raw: &Dataset) -> Result<PenaltyMatrix, CliError> {
    let p = raw.p();
    let j = match a.penalty.unwrap_or(PenaltyChoice::Spline) {
        PenaltyChoice::Spline => build_spline_penalty(p)?,
        PenaltyChoice::Laplacian => match &a.adjacency {
            Some(path) => {
                let adj = PenaltyMatrix::read_triplets_with_dim(path, p)?;
                build_laplacian_penalty(adj.matrix())?
            }
            None => build_laplacian_penalty(&build_adjacency(raw.x(), a.alpha_cut.unwrap_or(DEFAULT_ALPHA_CUT))?)?,
        },
        PenaltyChoice::Custom => {
            let path = required(&a.penalty_file, "penalty-file")?;
            PenaltyMatrix::read_triplets_with_dim(&path, p)?.checked()?
        }
        PenaltyChoice::None => PenaltyMatrix::none(p),
    };
    Ok(j)
}

fn solver_config(a: &SolverArgs, lambda1: f64, lambda2: f64) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig::new(McpParams::new(lambda1, lambda2, a.r.unwrap_or(tuning::DEFAULT_R))?);
    if let Some(m) = a.max_iter {
        cfg.max_outer_iters = m;
    }
    if let Some(t) = a.tol {
        cfg.rel_tol = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn estimator(method: Method) -> Result<&'static dyn Estimator, CliError> {
    Ok(match method {
        Method::Proposed => &Hierarchical,
        Method::HierMcp => &HierMcp,
        Method::Smcp => &Smcp,
        Method::Ma => return Err(CliError::Usage("MA has no penalty levels; use `fit --method MA`".into())),
    })
}

#[derive(Serialize)]
struct Effect {
    g: String,
    index: usize,
    estimate: f64,
}

#[derive(Serialize)]
struct Interaction {
    e: String,
    g: String,
    index: usize,
    estimate: f64,
}

#[derive(Serialize)]
struct FitReport {
    method: Method,
    penalty: String,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    n: usize,
    p: usize,
    q: usize,
    survival: bool,
    converged: Option<bool>,
    iterations: Option<usize>,
    objective: Option<f64>,
    bic: Option<f64>,
    intercept: f64,
    alpha: Vec<f64>,
    main: Vec<Effect>,
    interactions: Vec<Interaction>,
    objective_trace: Vec<f64>,
    /// Resolved arguments; rerunnable through `--config`.
    config: serde_json::Value,
}

impl FitReport {
    fn new(method: Method, penalty: &PenaltyMatrix, raw: &Dataset, model: &FittedModel, fit: Option<&FitResult>) -> Self {
        let names = io::g_names(raw);
        let eff = &model.effects;
        let main = model
            .pattern
            .main
            .iter()
            .map(|&j| Effect { g: names[j].clone(), index: j, estimate: eff.beta[j] })
            .collect();
        let interactions = model
            .pattern
            .interactions
            .iter()
            .enumerate()
            .flat_map(|(k, js)| {
                js.iter().map(move |&j| (k, j))
            })
            .map(|(k, j)| Interaction { e: format!("E{}", k + 1), g: names[j].clone(), index: j, estimate: eff.eta(k, j) })
            .collect();
        Self {
            method,
            penalty: penalty.kind().to_string(),
            lambda1: fit.map(|f| f.mcp.lambda1),
            lambda2: fit.map(|f| f.mcp.lambda2),
            n: raw.n(),
            p: raw.p(),
            q: raw.q(),
            survival: raw.is_survival(),
            converged: fit.map(|f| f.converged),
            iterations: fit.map(|f| f.iterations),
            objective: fit.map(FitResult::final_objective),
            bic: None,
            intercept: model.intercept,
            alpha: eff.alpha.clone(),
            main,
            interactions,
            objective_trace: fit.map(|f| f.objective_trace.clone()).unwrap_or_default(),
            config: serde_json::Value::Null,
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let name = required(&a.scenario, "scenario")?;
    let out = required(&a.out, "out")?;
    let mut spec: ScenarioSpec = name.parse().map_err(|e: GxeError| CliError::Usage(e.to_string()))?;
    spec = spec.with_size(a.n.unwrap_or(spec.n), a.p.unwrap_or(spec.p)).with_seed(a.seed.unwrap_or(0));
    if let Some(q) = a.q {
        spec.q = q;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let sim = simulation::simulate(&spec, a.test_n.unwrap_or(DEFAULT_TEST_N), a.replicate.unwrap_or(0))?;
    io::write_dataset(&out.join("train.csv"), &sim.train)?;
    io::write_dataset(&out.join("test.csv"), &sim.test)?;
    #[derive(Serialize)]
    struct Truth<'a> {
        scenario: String,
        spec: &'a ScenarioSpec,
        replicate: u64,
        censoring_rate: Option<f64>,
        censoring_fraction: Option<f64>,
        truth: &'a simulation::TruthSet,
        config: &'a SimulateArgs,
    }
    io::write_json(
        &out.join("truth.json"),
        &Truth {
            scenario: spec.name(),
            spec: &sim.spec,
            replicate: a.replicate.unwrap_or(0),
            censoring_rate: sim.censoring_rate,
            censoring_fraction: sim.censoring_fraction(),
            truth: &sim.truth,
            config: a,
        },
    )?;
    log::info!("wrote {} (n = {}, p = {}) to {}", spec.name(), spec.n, spec.p, out.display());
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let raw = read_data(&data)?;
    let method = a.method.unwrap_or(Method::Proposed);
    let j = build_penalty(&a.penalty, &raw)?;
    let report = if method == Method::Ma {
        let r = baselines::fit_marginal(&raw, a.fdr.unwrap_or(DEFAULT_FDR))?;
        FitReport::new(method, &PenaltyMatrix::none(raw.p()), &raw, &r.model, None)
    } else {
        let cfg = solver_config(&a.solver, required(&a.lambda1, "lambda1")?, a.lambda2.unwrap_or(0.0))?;
        let prep = PreparedData::new(&raw)?;
        let start = Instant::now();
        let fit = estimator(method)?.fit(&prep.ls, &j, &cfg, None)?;
        log::info!(
            "{} fit: {} iterations in {:.2} s, converged = {}",
            method,
            fit.iterations,
            start.elapsed().as_secs_f64(),
            fit.converged
        );
        let model = prep.to_model(&fit.effects, fit.pattern.clone());
        let mut report = FitReport::new(method, &j, &raw, &model, Some(&fit));
        report.bic = tuning::bic(&fit, &prep.ls).ok();
        report
    };
    let mut report = report;
    report.config = config_value(a);
    io::write_json(&out, &report)?;
    Ok(())
}

fn grid_spec(a: &GridArgs) -> GridSpec {
    let d = GridSpec::default();
    GridSpec {
        n_lambda1: a.n_lambda1.unwrap_or(d.n_lambda1),
        lambda1_min_ratio: a.lambda1_min_ratio.unwrap_or(d.lambda1_min_ratio),
        lambda2_values: a.lambda2.clone(),
    }
}

pub fn tune(a: &TuneArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let raw = read_data(&data)?;
    let method = a.method.unwrap_or(Method::Proposed);
    let est = estimator(method)?;
    let j = build_penalty(&a.penalty, &raw)?;
    let prep = PreparedData::new(&raw)?;
    let grid = match method {
        Method::HierMcp => baselines::hiermcp_grid(&prep.ls)?,
        _ => grid_spec(&a.grid).resolve(&prep.ls, &j)?,
    };
    let mut opts = GridOptions::for_data(&prep.ls);
    opts.criterion = match a.criterion.unwrap_or(CriterionChoice::Bic) {
        CriterionChoice::Bic => Criterion::Bic,
        CriterionChoice::Ebic => Criterion::Ebic { gamma: a.ebic_gamma.unwrap_or(DEFAULT_EBIC_GAMMA) },
    };
    let cfg = solver_config(&a.solver, grid.lambda1_values[0], grid.lambda2_values[0])?;
    let start = Instant::now();
    let res = grid_search(&prep.ls, &j, &grid, &cfg, est, opts)?;
    log::info!(
        "{} grid of {} cells in {:.1} s: lambda1 = {:.4e}, lambda2 = {:.4e}",
        method,
        grid.len(),
        start.elapsed().as_secs_f64(),
        res.lambda1,
        res.lambda2
    );
    let model = prep.to_model(&res.best.effects, res.best.pattern.clone());
    let mut report = FitReport::new(method, &j, &raw, &model, Some(&res.best));
    report.bic = Some(res.bic);
    report.config = config_value(a);
    io::write_json(&out.join("best.json"), &report)?;
    io::atomic_write(&out.join("path.csv"), |w| res.trace.write_csv(w))?;
    Ok(())
}

pub fn screen(a: &ScreenArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let keep = required(&a.keep, "keep")?;
    let raw = read_data(&data)?;
    let mode = match a.mode.unwrap_or(ModeChoice::Individual) {
        ModeChoice::Individual => ScreenMode::Individual,
        ModeChoice::Region => ScreenMode::Region,
    };
    if keep == 0 || keep > raw.p() {
        return Err(CliError::Usage(format!("--keep must be between 1 and {}", raw.p())));
    }
    let r = baselines::marginal_screen(&raw, keep, mode)?;
    io::write_dataset(&out, &r.data)?;
    if let Some(map) = &a.map {
        #[derive(Serialize)]
        struct Map<'a> {
            mode: ScreenMode,
            columns: &'a [usize],
            names: Vec<String>,
            pvalues: &'a [f64],
            config: &'a ScreenArgs,
        }
        let names = io::g_names(&raw);
        let kept = r.columns.iter().map(|&c| names[c].clone()).collect();
        io::write_json(map, &Map { mode, columns: &r.columns, names: kept, pvalues: &r.pvalues, config: a })?;
    }
    Ok(())
}

fn penalty_spec(choice: Option<PenaltyChoice>, alpha_cut: Option<f64>) -> Result<PenaltySpec, CliError> {
    Ok(match choice.unwrap_or(PenaltyChoice::Spline) {
        PenaltyChoice::Spline => PenaltySpec::Spline,
        PenaltyChoice::Laplacian => PenaltySpec::Laplacian { alpha_cut: alpha_cut.unwrap_or(DEFAULT_ALPHA_CUT) },
        PenaltyChoice::None => PenaltySpec::None,
        PenaltyChoice::Custom => {
            return Err(CliError::Usage("benchmarks build their penalty per replicate; custom is not available".into()))
        }
    })
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<(), CliError> {
    let out = required(&a.out, "out")?;
    let mut plan: BenchmarkPlan = match &a.plan {
        Some(path) => io::read_json(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => {
            let names = required(&a.scenarios, "scenarios")?;
            let scenarios = names
                .iter()
                .map(|s| s.parse::<ScenarioSpec>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            BenchmarkPlan::new(scenarios, 1, Method::ALL.to_vec(), 0)
        }
    };
    if let Some(r) = a.replicates {
        plan.replicates = r;
    }
    if let Some(m) = &a.methods {
        plan.methods = m.clone();
    }
    if let Some(s) = a.seed {
        plan.master_seed = s;
    }
    if a.n.is_some() || a.p.is_some() {
        for s in &mut plan.scenarios {
            *s = s.with_size(a.n.unwrap_or(s.n), a.p.unwrap_or(s.p));
        }
    }
    if let Some(t) = a.test_n {
        plan.test_n = t;
    }
    if let Some(k) = a.n_lambda1 {
        plan.grid.n_lambda1 = k;
    }
    if a.penalty.is_some() {
        plan.penalty = penalty_spec(a.penalty, a.alpha_cut)?;
    }
    if let Some(f) = a.fdr {
        plan.fdr_level = f;
    }
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let start = Instant::now();
    let report = benchmark::run_benchmark(&plan)?;
    benchmark::write_outputs(&out, &plan, &report)?;
    log::info!("{} records in {:.1} s", report.records.len(), start.elapsed().as_secs_f64());
    for row in &report.rows {
        let cells = row.summary.as_ref().map(|s| s.table_cells().join("  ")).unwrap_or_else(|| "-".into());
        println!("{:<16} {:<9} {}  failures={}", row.scenario, row.method.name(), cells, row.failures);
    }
    Ok(())
}

pub fn stability(a: &StabilityArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let raw = read_data(&data)?;
    let j = build_penalty(&a.penalty, &raw)?;
    let methods = a.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
    let resamples = a.resamples.unwrap_or(DEFAULT_RESAMPLES);
    if resamples == 0 {
        return Err(CliError::Usage("--resamples must be at least 1".into()));
    }
    let rows = benchmark::run_stability(
        &raw,
        &j,
        &grid_spec(&a.grid),
        &SolverConfig::default(),
        &methods,
        resamples,
        a.seed.unwrap_or(0),
        a.fdr.unwrap_or(DEFAULT_FDR),
    )?;
    for r in &rows {
        println!(
            "{:<9} selected={} mean_ooi={:.3} score={}",
            r.method.name(),
            r.selected,
            r.mean_ooi,
            r.mean_score.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    #[derive(Serialize)]
    struct Report<'a> {
        methods: &'a [benchmark::StabilityRow],
        config: &'a StabilityArgs,
    }
    io::write_json(&out, &Report { methods: &rows, config: a })?;
    Ok(())
}
