//! BIC tuning of `(lambda1, lambda2)` over a grid with warm starts.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset, FullEffects};
use crate::error::{GxeError, Result};
use crate::penalties::PenaltyMatrix;
use crate::solver::{self, AlphaSolver, FitResult, SolverConfig};

pub const DEFAULT_N_LAMBDA1: usize = 50;
pub const DEFAULT_LAMBDA1_MIN_RATIO: f64 = 0.01;
pub const DEFAULT_N_LAMBDA2: usize = 10;
pub const DEFAULT_LAMBDA2_RANGE: (f64, f64) = (1e-3, 1.0);
pub const DEFAULT_R: f64 = 3.0;
const CONVEX_PAD: f64 = 1.05;
/// BIC values closer than this are treated as tied.
const BIC_TIE: f64 = 1e-12;

/// A fitting method that can be tuned over the grid.
pub trait Estimator: Sync {
    fn name(&self) -> &'static str;

    fn fit(
        &self,
        d: &Dataset,
        j: &PenaltyMatrix,
        cfg: &SolverConfig,
        warm: Option<&FitResult>,
    ) -> Result<FitResult>;
}

/// The hierarchical decomposition estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hierarchical;

impl Estimator for Hierarchical {
    fn name(&self) -> &'static str {
        "proposed"
    }

    fn fit(
        &self,
        d: &Dataset,
        j: &PenaltyMatrix,
        cfg: &SolverConfig,
        warm: Option<&FitResult>,
    ) -> Result<FitResult> {
        solver::fit_from(d, j, cfg, warm.and_then(|w| w.coefficients.as_ref()))
    }
}

/// `n log(RSS / n) + log(n) df` with `df = q + #{beta != 0} + #{eta != 0}`.
pub fn bic(fit: &FitResult, d: &Dataset) -> Result<f64> {
    bic_from_parts(d.rss(&fit.effects), d.n(), degrees_of_freedom(&fit.effects))
}

pub fn degrees_of_freedom(effects: &FullEffects) -> usize {
    effects.q() + effects.nonzero_count()
}

pub fn bic_from_parts(rss: f64, n: usize, df: usize) -> Result<f64> {
    let nf = n as f64;
    if !(rss > f64::MIN_POSITIVE * nf) {
        return Err(GxeError::ZeroRss);
    }
    Ok(nf * (rss / nf).ln() + nf.ln() * df as f64)
}

/// Smallest `lambda1` at which the first `beta` sweep from the Step 1 start
/// leaves every coefficient at zero: `max_j |X_j' r| / n`.
pub fn lambda1_max(d: &Dataset) -> Result<f64> {
    let alpha = AlphaSolver::new(d)?.solve(d, d.y());
    let mut r = d.y().to_vec();
    for (k, a) in alpha.iter().enumerate() {
        crate::data::axpy(-a, d.z_col(k), &mut r);
    }
    let n = d.n() as f64;
    Ok((0..d.p()).map(|j| (dot(d.x_col(j), &r) / n).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    /// Strictly decreasing.
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub r: f64,
}

pub fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.ln(), lo.ln());
            (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
        }
    }
}

impl TuningGrid {
    pub fn new(lambda1_values: Vec<f64>, lambda2_values: Vec<f64>, r: f64) -> Result<Self> {
        let g = Self { lambda1_values, lambda2_values, r };
        g.validate()?;
        Ok(g)
    }

    /// 50 log-spaced `lambda1` values from `lambda1_max` down to 1% of it, and
    /// 10 log-spaced `lambda2` values up to 1. The `lambda2` floor is 1e-3 or
    /// [`convex_lambda2_floor`], whichever is larger.
    pub fn default_for(d: &Dataset, j: &PenaltyMatrix) -> Result<Self> {
        let floor = convex_lambda2_floor(d, j, DEFAULT_R);
        Self::with_sizes(d, DEFAULT_N_LAMBDA1, DEFAULT_LAMBDA1_MIN_RATIO, lambda2_values_from(floor))
    }

    pub fn with_sizes(d: &Dataset, n_lambda1: usize, min_ratio: f64, lambda2_values: Vec<f64>) -> Result<Self> {
        let top = lambda1_max(d)?;
        if !(top > 0.0) {
            return Err(GxeError::InvalidInput(
                "response is orthogonal to every G column; nothing to tune".into(),
            ));
        }
        Self::new(log_spaced(top, top * min_ratio, n_lambda1), lambda2_values, DEFAULT_R)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1_values.is_empty() || self.lambda2_values.is_empty() {
            return Err(GxeError::InvalidInput("tuning grid is empty".into()));
        }
        if self.lambda1_values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GxeError::InvalidInput("lambda1 values must be positive".into()));
        }
        if self.lambda1_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(GxeError::InvalidInput("lambda1 values must be strictly decreasing".into()));
        }
        if self.lambda2_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GxeError::InvalidInput("lambda2 values must be >= 0".into()));
        }
        if !(self.r > 1.0) {
            return Err(GxeError::InvalidInput("r must be > 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda1_values.len() * self.lambda2_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn default_lambda2_values() -> Vec<f64> {
    lambda2_values_from(DEFAULT_LAMBDA2_RANGE.0)
}

/// Ascending log-spaced `lambda2` values from `max(floor, 1e-3)` to 1.
fn lambda2_values_from(floor: f64) -> Vec<f64> {
    let (lo, hi) = DEFAULT_LAMBDA2_RANGE;
    let lo = lo.max(floor);
    if lo >= hi {
        return vec![lo];
    }
    let mut v = log_spaced(hi, lo, DEFAULT_N_LAMBDA2);
    v.reverse();
    v
}

/// Smallest `lambda2` at which every `beta_j` coordinate problem is convex,
/// `chi_j + lambda2 J_jj > 1/r` with `chi_j = ||X_j||^2 / n`, padded by 5%.
///
/// Below it, low-variance columns are fitted by what amounts to hard
/// thresholding, and BIC then favours badly overfitted cells. Returns 0 when
/// the constraint never binds (for example unit-variance G).
pub fn convex_lambda2_floor(d: &Dataset, j: &PenaltyMatrix, r: f64) -> f64 {
    let n = d.n() as f64;
    let mut floor = 0.0_f64;
    for jj in 0..d.p() {
        let jd = j.diag(jj);
        let chi = dot(d.x_col(jj), d.x_col(jj)) / n;
        if jd > 0.0 && chi > 0.0 {
            floor = floor.max((1.0 / r - chi) / jd);
        }
    }
    CONVEX_PAD * floor
}

/// Model-selection criterion used to rank grid cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Criterion {
    /// `n log(RSS / n) + log(n) df`.
    #[default]
    Bic,
    /// BIC plus `2 gamma log C(p (1 + q), df - q)`.
    Ebic { gamma: f64 },
}

impl Criterion {
    pub fn evaluate(&self, rss: f64, n: usize, q: usize, p: usize, df: usize) -> Result<f64> {
        let base = bic_from_parts(rss, n, df)?;
        Ok(match *self {
            Criterion::Bic => base,
            Criterion::Ebic { gamma } => {
                let total = (p * (1 + q)) as u64;
                let k = df.saturating_sub(q) as u64;
                base + 2.0 * gamma * statrs::function::factorial::ln_binomial(total, k.min(total))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub criterion: Criterion,
    /// Keep every cell's coefficients in the trace.
    pub keep_snapshots: bool,
    /// A chain stops once a fit has at least this many nonzero G and
    /// interaction coefficients; the remaining cells are marked saturated.
    pub max_nonzero: Option<usize>,
    #[serde(default)]
    pub warm_start: WarmStart,
    /// After the decreasing `lambda1` sweep, walk back up the row and refit
    /// each cell from its smaller-`lambda1` neighbour, keeping the lower
    /// objective. Recovers effects that only enter late on the path.
    #[serde(default = "default_backward")]
    pub backward_pass: bool,
}

fn default_backward() -> bool {
    true
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            criterion: Criterion::Bic,
            keep_snapshots: false,
            max_nonzero: None,
            warm_start: WarmStart::default(),
            backward_pass: true,
        }
    }
}

/// How grid cells are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Each `lambda2` row is an independent warm-started `lambda1` path.
    Lambda1Path,
    /// Each cell is fitted from its `lambda1` and its `lambda2` neighbour and
    /// keeps the lower objective.
    #[default]
    BestOfNeighbours,
}

impl GridOptions {
    /// Defaults plus the saturation stop at `n / 2` nonzero coefficients:
    /// past that point BIC is meaningless and fits only get slower.
    pub fn for_data(d: &Dataset) -> Self {
        Self { max_nonzero: Some(d.n() / 2), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_main: usize,
    pub n_interaction: usize,
    pub bic: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: CellStatus,
    pub message: Option<String>,
    pub snapshot: Option<FullEffects>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PathTrace {
    pub points: Vec<PathPoint>,
}

impl PathTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "lambda1", "lambda2", "n_main", "n_interaction", "bic", "iterations", "converged", "status",
        ])?;
        for pt in &self.points {
            out.write_record([
                format!("{:.10e}", pt.lambda1),
                format!("{:.10e}", pt.lambda2),
                pt.n_main.to_string(),
                pt.n_interaction.to_string(),
                pt.bic.map(|b| format!("{b:.10}")).unwrap_or_default(),
                pt.iterations.to_string(),
                pt.converged.to_string(),
                format!("{:?}", pt.status).to_lowercase(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn best_bic(&self) -> Option<f64> {
        self.points.iter().filter_map(|p| p.bic).min_by(|a, b| a.total_cmp(b))
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: FitResult,
    pub lambda1: f64,
    pub lambda2: f64,
    pub bic: f64,
    pub trace: PathTrace,
}

struct Cell {
    point: PathPoint,
    fit: Option<FitResult>,
}

impl Cell {
    fn empty(lambda1: f64, lambda2: f64, status: CellStatus) -> Self {
        let point = PathPoint {
            lambda1,
            lambda2,
            n_main: 0,
            n_interaction: 0,
            bic: None,
            iterations: 0,
            converged: false,
            status,
            message: None,
            snapshot: None,
        };
        Self { point, fit: None }
    }
}

/// Fits every grid cell and returns the BIC-minimizing fit.
///
/// Inside each `lambda2` row `lambda1` decreases and every fit is warm
/// started from its left neighbour. With [`WarmStart::BestOfNeighbours`] rows
/// are visited in increasing `lambda2` and each cell is also fitted from the
/// cell below it; the fit with the lower objective is kept. With
/// [`WarmStart::Lambda1Path`] rows are independent and run in parallel.
/// Ties in the criterion prefer larger `lambda1`, then larger `lambda2`.
pub fn grid_search<E: Estimator + ?Sized>(
    d: &Dataset,
    j: &PenaltyMatrix,
    grid: &TuningGrid,
    cfg: &SolverConfig,
    estimator: &E,
    opts: GridOptions,
) -> Result<GridSearchResult> {
    grid.validate()?;
    let rows: Vec<Vec<Cell>> = match opts.warm_start {
        WarmStart::Lambda1Path => grid
            .lambda2_values
            .par_iter()
            .map(|&l2| run_row(d, j, grid, cfg, estimator, opts, l2, None))
            .collect(),
        WarmStart::BestOfNeighbours => {
            let mut order: Vec<usize> = (0..grid.lambda2_values.len()).collect();
            order.sort_by(|&a, &b| grid.lambda2_values[a].total_cmp(&grid.lambda2_values[b]));
            let mut rows: Vec<Option<Vec<Cell>>> = (0..order.len()).map(|_| None).collect();
            let mut below: Option<usize> = None;
            for &i in &order {
                let under = below.and_then(|b| rows[b].as_deref());
                let row = run_row(d, j, grid, cfg, estimator, opts, grid.lambda2_values[i], under);
                rows[i] = Some(row);
                below = Some(i);
            }
            rows.into_iter().map(|r| r.expect("every row is fitted")).collect()
        }
    };

    let mut best: Option<(f64, f64, f64, FitResult)> = None;
    let mut trace = PathTrace::default();
    for row in rows {
        for cell in row {
            if let (Some(b), Some(fit)) = (cell.point.bic, cell.fit) {
                let (l1, l2) = (cell.point.lambda1, cell.point.lambda2);
                let better = match &best {
                    None => true,
                    Some((bb, bl1, bl2, _)) => {
                        if b < bb - BIC_TIE {
                            true
                        } else if (b - bb).abs() <= BIC_TIE {
                            l1 > *bl1 || (l1 == *bl1 && l2 > *bl2)
                        } else {
                            false
                        }
                    }
                };
                if better {
                    best = Some((b, l1, l2, fit));
                }
            }
            trace.points.push(cell.point);
        }
    }
    let (bic, lambda1, lambda2, best) = best.ok_or_else(|| GxeError::Numerical {
        iteration: 0,
        message: "every grid cell failed".into(),
    })?;
    Ok(GridSearchResult { best, lambda1, lambda2, bic, trace })
}

#[allow(clippy::too_many_arguments)]
fn run_row<E: Estimator + ?Sized>(
    d: &Dataset,
    j: &PenaltyMatrix,
    grid: &TuningGrid,
    cfg: &SolverConfig,
    estimator: &E,
    opts: GridOptions,
    lambda2: f64,
    below: Option<&[Cell]>,
) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(grid.lambda1_values.len());
    let mut left: Option<FitResult> = None;
    let mut saturated = false;
    for (i, &lambda1) in grid.lambda1_values.iter().enumerate() {
        if saturated {
            cells.push(Cell::empty(lambda1, lambda2, CellStatus::Saturated));
            continue;
        }
        let mut c = *cfg;
        c.mcp.lambda1 = lambda1;
        c.mcp.lambda2 = lambda2;
        c.mcp.r = grid.r;
        let under = below.and_then(|b| b[i].fit.as_ref());
        let result = match (left.as_ref(), under) {
            (Some(l), Some(u)) => {
                let (a, b) = rayon::join(
                    || estimator.fit(d, j, &c, Some(l)),
                    || estimator.fit(d, j, &c, Some(u)),
                );
                match (a, b) {
                    (Ok(a), Ok(b)) => Ok(if b.final_objective() < a.final_objective() { b } else { a }),
                    (Ok(a), Err(_)) => Ok(a),
                    (Err(_), Ok(b)) => Ok(b),
                    (Err(e), Err(_)) => Err(e),
                }
            }
            (l, u) => estimator.fit(d, j, &c, l.or(u)),
        };
        let cell = make_cell(d, opts, lambda1, lambda2, result);
        if let Some(fit) = &cell.fit {
            if let Some(limit) = opts.max_nonzero {
                saturated = fit.effects.nonzero_count() >= limit;
            }
            left = Some(fit.clone());
        }
        cells.push(cell);
    }
    if opts.backward_pass {
        let c0 = {
            let mut c = *cfg;
            c.mcp.lambda2 = lambda2;
            c.mcp.r = grid.r;
            c
        };
        for i in (0..cells.len().saturating_sub(1)).rev() {
            let (head, tail) = cells.split_at_mut(i + 1);
            let (Some(from), Some(current)) = (tail[0].fit.as_ref(), head[i].fit.as_ref()) else {
                continue;
            };
            let mut c = c0;
            c.mcp.lambda1 = head[i].point.lambda1;
            match estimator.fit(d, j, &c, Some(from)) {
                Ok(fit) if fit.final_objective() < current.final_objective() => {
                    head[i] = make_cell(d, opts, c.mcp.lambda1, lambda2, Ok(fit));
                }
                Ok(_) => {}
                Err(e) => log::debug!("backward refit at lambda1 = {:.4e} failed: {e}", c.mcp.lambda1),
            }
        }
    }
    cells
}

fn make_cell(d: &Dataset, opts: GridOptions, lambda1: f64, lambda2: f64, result: Result<FitResult>) -> Cell {
    let mut cell = Cell::empty(lambda1, lambda2, CellStatus::Failed);
    match result {
        Ok(fit) => {
            let point = &mut cell.point;
            point.n_main = fit.pattern.main.len();
            point.n_interaction = fit.pattern.interaction_count();
            point.iterations = fit.iterations;
            point.converged = fit.converged;
            let df = degrees_of_freedom(&fit.effects);
            match opts.criterion.evaluate(fit.rss, d.n(), d.q(), d.p(), df) {
                Ok(b) => {
                    point.bic = Some(b);
                    point.status = CellStatus::Ok;
                }
                Err(e) => point.message = Some(e.to_string()),
            }
            if opts.keep_snapshots {
                point.snapshot = Some(fit.effects.clone());
            }
            cell.fit = Some(fit);
        }
        Err(e) => {
            log::debug!("grid cell ({lambda1:.4e}, {lambda2:.4e}) failed: {e}");
            cell.point.message = Some(e.to_string());
        }
    }
    cell
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_formula() {
        let b = bic_from_parts(100.0, 100, 10).unwrap();
        assert!((b - 10.0 * 100f64.ln()).abs() < 1e-12);
        assert!((b - 46.0517018599).abs() < 1e-9);
        assert!(bic_from_parts(100.0, 100, 9).unwrap() < b);
        assert!(matches!(bic_from_parts(0.0, 100, 3), Err(GxeError::ZeroRss)));
    }

    #[test]
    fn log_spacing_and_defaults() {
        let v = log_spaced(1.0, 0.01, 3);
        assert!((v[1] - 0.1).abs() < 1e-15);
        let l2 = default_lambda2_values();
        assert_eq!(l2.len(), 10);
        assert!((l2[0] - 1e-3).abs() < 1e-15 && (l2[9] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(TuningGrid::new(vec![], vec![0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.1, 0.2], vec![0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.2, 0.1], vec![-0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.2, 0.1], vec![0.0], 3.0).is_ok());
    }
}
