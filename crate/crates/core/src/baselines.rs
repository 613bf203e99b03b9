//! Comparison methods: marginal analysis (MA), HierMCP, SMCP, and marginal
//! prescreening.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::data::{axpy, dot, Dataset, FullEffects, SparsityPattern};
use crate::error::{GxeError, Result};
use crate::model::{FittedModel, PreparedData};
use crate::penalties::{mcp_value, McpParams, PenaltyMatrix};
use crate::solver::{
    self, cd_update_single, run_outer_loop, AlphaSolver, FitResult, ObjectiveState, SolverConfig, EMPTY_COLUMN,
    MAX_EXTRAPOLATION, MAX_HALVINGS, MAX_POLISH, RIDGE, STEP_SHRINK,
};
use crate::tuning::{Estimator, TuningGrid, DEFAULT_LAMBDA1_MIN_RATIO, DEFAULT_N_LAMBDA1};

pub const DEFAULT_FDR: f64 = 0.05;
const MAX_CONDITION: f64 = 1e12;

/// Step-up Benjamini-Hochberg adjusted p-values, in input order.
pub fn bh_adjust(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = pvals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(GxeError::InvalidInput(format!("p-value {bad} is outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0_f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(m as f64 / (rank + 1) as f64 * pvals[i]).min(1.0);
        out[i] = running;
    }
    Ok(out)
}

/// Least-squares fit with coefficient standard errors.
struct Ols {
    coef: Vec<f64>,
    se: Vec<f64>,
    rss: f64,
}

/// `None` when the design is singular or too ill-conditioned to test.
fn ols(columns: &[&[f64]], y: &[f64], df: f64) -> Option<Ols> {
    let m = columns.len();
    let xtx = DMatrix::from_fn(m, m, |a, b| dot(columns[a], columns[b]));
    let eig = SymmetricEigen::new(xtx.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return None;
    }
    let chol = nalgebra::Cholesky::new(xtx)?;
    let xty = DVector::from_iterator(m, columns.iter().map(|c| dot(c, y)));
    let coef = chol.solve(&xty);
    let mut resid = y.to_vec();
    for (c, b) in columns.iter().zip(coef.iter()) {
        axpy(-b, c, &mut resid);
    }
    let rss = dot(&resid, &resid);
    let sigma2 = rss / df;
    let inv = chol.inverse();
    let se = (0..m).map(|a| (sigma2 * inv[(a, a)]).sqrt()).collect();
    Some(Ols { coef: coef.iter().copied().collect(), se, rss })
}

/// Rows carrying information: all of them for linear outcomes, those with a
/// positive Kaplan-Meier weight for survival outcomes.
fn effective_rows(prep: &PreparedData) -> usize {
    match &prep.aft {
        Some(t) => t.weights.w.iter().filter(|w| **w > 0.0).count(),
        None => prep.ls.n(),
    }
}

/// Intercept column of the least-squares form: ones, or the row scale of the
/// Kaplan-Meier weighting.
fn intercept_column(prep: &PreparedData) -> Vec<f64> {
    match &prep.aft {
        Some(t) => t.row_scale.clone(),
        None => vec![1.0; prep.ls.n()],
    }
}

fn check_marginal_size(n_eff: usize, q: usize) -> Result<f64> {
    // Intercept plus 2q + 1 slopes.
    let used = 2 * q + 2;
    if n_eff <= used {
        return Err(GxeError::InvalidInput(format!(
            "marginal models need more than {used} informative rows, found {n_eff}"
        )));
    }
    Ok((n_eff - used) as f64)
}

/// Per-G-factor marginal regressions with BH-adjusted t-tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalResult {
    pub fdr_level: f64,
    /// Raw p-values of the main G coefficient, length `p`.
    pub p_main: Vec<f64>,
    /// Raw p-values of the interaction coefficients, row-major `q x p`.
    pub p_interaction: Vec<f64>,
    pub adj_main: Vec<f64>,
    pub adj_interaction: Vec<f64>,
    /// Effects with adjusted p below `fdr_level`; may break the hierarchy.
    pub selected: SparsityPattern,
    /// Selected marginal estimates in original units (unselected are zero);
    /// `alpha` comes from the E-only regression.
    pub model: FittedModel,
}

/// MA: for each G factor, least squares of the response on
/// `(Z, X_j, Z * X_j)` after the usual preparation (Kaplan-Meier weighting
/// for survival outcomes), two-sided t-tests, and BH pooled over all
/// `p (1 + q)` tests. A singular small model gives p-values of 1.
pub fn fit_marginal(raw: &Dataset, fdr_level: f64) -> Result<MarginalResult> {
    if !(fdr_level > 0.0 && fdr_level < 1.0) {
        return Err(GxeError::InvalidInput(format!("FDR level {fdr_level} must be in (0, 1)")));
    }
    let prep = PreparedData::new(raw)?;
    let d = &prep.ls;
    let (n, p, q) = (d.n(), d.p(), d.q());
    let df = check_marginal_size(effective_rows(&prep), q)?;
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| GxeError::Numerical {
        iteration: 0,
        message: format!("t distribution: {e}"),
    })?;
    let one = intercept_column(&prep);

    let per_j: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
        .into_par_iter()
        .map(|jj| {
            let w: Vec<Vec<f64>> = (0..q)
                .map(|k| {
                    let mut buf = vec![0.0; n];
                    d.fill_interaction(k, jj, &mut buf);
                    buf
                })
                .collect();
            let mut cols: Vec<&[f64]> = vec![&one];
            cols.extend((0..q).map(|k| d.z_col(k)));
            cols.push(d.x_col(jj));
            cols.extend(w.iter().map(Vec::as_slice));
            match ols(&cols, d.y(), df) {
                Some(fit) => {
                    let pv = (q + 1..2 * q + 2)
                        .map(|a| {
                            let t = fit.coef[a] / fit.se[a];
                            if t.is_finite() { 2.0 * tdist.sf(t.abs()) } else { 1.0 }
                        })
                        .collect();
                    (fit.coef[q + 1..].to_vec(), pv)
                }
                None => (vec![0.0; q + 1], vec![1.0; q + 1]),
            }
        })
        .collect();

    let mut p_main = vec![1.0; p];
    let mut p_interaction = vec![1.0; q * p];
    let mut est = FullEffects::zeros(q, p);
    let mut est_all = FullEffects::zeros(q, p);
    for (jj, (coef, pv)) in per_j.iter().enumerate() {
        p_main[jj] = pv[0];
        est_all.beta[jj] = coef[0];
        for k in 0..q {
            p_interaction[k * p + jj] = pv[k + 1];
            est_all.eta[k * p + jj] = coef[k + 1];
        }
    }
    let pooled: Vec<f64> = p_main.iter().chain(&p_interaction).copied().collect();
    let adj = bh_adjust(&pooled)?;
    let (adj_main, adj_interaction) = (adj[..p].to_vec(), adj[p..].to_vec());

    let mut selected = SparsityPattern::empty(q);
    for jj in 0..p {
        if adj_main[jj] < fdr_level {
            selected.main.push(jj);
            est.beta[jj] = est_all.beta[jj];
        }
    }
    for k in 0..q {
        for jj in 0..p {
            if adj_interaction[k * p + jj] < fdr_level {
                selected.interactions[k].push(jj);
                est.eta[k * p + jj] = est_all.eta[k * p + jj];
            }
        }
    }
    est.alpha = AlphaSolver::new(d)?.solve(d, d.y());
    let model = prep.to_model(&est, selected.clone());
    Ok(MarginalResult { fdr_level, p_main, p_interaction, adj_main, adj_interaction, selected, model })
}

/// One p-value per G factor: F-test of `(X_j, Z * X_j)` against the E-only
/// model. Singular models get 1.
pub fn marginal_pvalues(raw: &Dataset) -> Result<Vec<f64>> {
    let prep = PreparedData::new(raw)?;
    let d = &prep.ls;
    let (n, p, q) = (d.n(), d.p(), d.q());
    let df = check_marginal_size(effective_rows(&prep), q)?;
    let one = intercept_column(&prep);
    let mut z_cols: Vec<&[f64]> = vec![&one];
    z_cols.extend((0..q).map(|k| d.z_col(k)));
    let null = ols(&z_cols, d.y(), df + (q + 1) as f64).ok_or(GxeError::RankDeficient { columns: vec![] })?;
    let fdist = FisherSnedecor::new((q + 1) as f64, df).map_err(|e| GxeError::Numerical {
        iteration: 0,
        message: format!("F distribution: {e}"),
    })?;
    Ok((0..p)
        .into_par_iter()
        .map(|jj| {
            let w: Vec<Vec<f64>> = (0..q)
                .map(|k| {
                    let mut buf = vec![0.0; n];
                    d.fill_interaction(k, jj, &mut buf);
                    buf
                })
                .collect();
            let mut cols = z_cols.clone();
            cols.push(d.x_col(jj));
            cols.extend(w.iter().map(Vec::as_slice));
            match ols(&cols, d.y(), df) {
                Some(fit) if fit.rss > 0.0 => {
                    let f = ((null.rss - fit.rss).max(0.0) / (q + 1) as f64) / (fit.rss / df);
                    fdist.sf(f)
                }
                _ => 1.0,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreenMode {
    /// The `keep` columns with the smallest p-values.
    Individual,
    /// The contiguous window of `keep` columns with the smallest p-value sum.
    Region,
}

/// A reduced dataset and the original index of each kept column.
#[derive(Debug, Clone)]
pub struct ScreenResult {
    pub data: Dataset,
    pub columns: Vec<usize>,
    pub pvalues: Vec<f64>,
}

/// Columns kept by screening on precomputed p-values, ascending.
pub fn screen_columns(pvals: &[f64], keep: usize, mode: ScreenMode) -> Result<Vec<usize>> {
    let p = pvals.len();
    if keep == 0 {
        return Err(GxeError::InvalidInput("screening must keep at least one column".into()));
    }
    if keep > p {
        return Err(GxeError::InvalidInput(format!("cannot keep {keep} of {p} columns")));
    }
    match mode {
        ScreenMode::Individual => {
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
            order.truncate(keep);
            order.sort_unstable();
            Ok(order)
        }
        ScreenMode::Region => {
            let mut sum: f64 = pvals[..keep].iter().sum();
            let (mut best, mut start) = (sum, 0);
            for s in 1..=p - keep {
                sum += pvals[s + keep - 1] - pvals[s - 1];
                if sum < best {
                    best = sum;
                    start = s;
                }
            }
            Ok((start..start + keep).collect())
        }
    }
}

/// Marginal prescreening of G factors by [`marginal_pvalues`].
pub fn marginal_screen(raw: &Dataset, keep: usize, mode: ScreenMode) -> Result<ScreenResult> {
    if keep == 0 {
        return Err(GxeError::InvalidInput("screening must keep at least one column".into()));
    }
    let pvalues = marginal_pvalues(raw)?;
    let columns = screen_columns(&pvalues, keep, mode)?;
    let data = raw.select_g_columns(&columns)?;
    Ok(ScreenResult { data, columns, pvalues })
}

/// HierMCP: the hierarchical estimator without the structure penalty.
pub fn fit_hiermcp(d: &Dataset, cfg: &SolverConfig) -> Result<FitResult> {
    let mut c = *cfg;
    c.mcp.lambda2 = 0.0;
    solver::fit(d, &PenaltyMatrix::none(d.p()), &c)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HierMcp;

impl Estimator for HierMcp {
    fn name(&self) -> &'static str {
        "HierMCP"
    }

    fn fit(&self, d: &Dataset, _j: &PenaltyMatrix, cfg: &SolverConfig, warm: Option<&FitResult>) -> Result<FitResult> {
        let mut c = *cfg;
        c.mcp.lambda2 = 0.0;
        solver::fit_from(d, &PenaltyMatrix::none(d.p()), &c, warm.and_then(|w| w.coefficients.as_ref()))
    }
}

/// Default `lambda1` path with the single `lambda2 = 0`.
pub fn hiermcp_grid(d: &Dataset) -> Result<TuningGrid> {
    TuningGrid::with_sizes(d, DEFAULT_N_LAMBDA1, DEFAULT_LAMBDA1_MIN_RATIO, vec![0.0])
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Smcp;

impl Estimator for Smcp {
    fn name(&self) -> &'static str {
        "SMCP"
    }

    fn fit(&self, d: &Dataset, j: &PenaltyMatrix, cfg: &SolverConfig, warm: Option<&FitResult>) -> Result<FitResult> {
        fit_smcp_from(d, j, cfg, warm.map(|w| &w.effects))
    }
}

/// SMCP: MCP and the structure penalty on `beta` and on each `eta_k`
/// directly, without the decomposition, so interactions may enter without
/// their main effect.
pub fn fit_smcp(d: &Dataset, j: &PenaltyMatrix, cfg: &SolverConfig) -> Result<FitResult> {
    fit_smcp_from(d, j, cfg, None)
}

pub fn fit_smcp_from(
    d: &Dataset,
    j: &PenaltyMatrix,
    cfg: &SolverConfig,
    start: Option<&FullEffects>,
) -> Result<FitResult> {
    cfg.validate()?;
    let state = SmcpState::new(d, j, cfg.mcp, start)?;
    let accelerate = cfg.accelerate;
    run_outer_loop(
        state,
        cfg,
        move |s: &mut SmcpState| {
            let before = s.coef.clone();
            s.sweep()?;
            if accelerate {
                if s.polish() {
                    s.update_alpha();
                }
                s.extrapolate(&before);
            }
            Ok(s.objective())
        },
        |s| s.recompute_residual(),
        |s, trace, iterations, converged| s.into_result(trace, iterations, converged),
    )
}

struct SmcpState<'a> {
    d: &'a Dataset,
    j: &'a PenaltyMatrix,
    m: McpParams,
    coef: FullEffects,
    resid: Vec<f64>,
    x_msq: Vec<f64>,
    /// Row-major `q x p`.
    w_msq: Vec<f64>,
    alpha_solver: AlphaSolver,
    buf: Vec<f64>,
}

impl<'a> SmcpState<'a> {
    fn new(d: &'a Dataset, j: &'a PenaltyMatrix, m: McpParams, start: Option<&FullEffects>) -> Result<Self> {
        m.validate()?;
        let (n, p, q) = (d.n(), d.p(), d.q());
        if j.p() != p {
            return Err(GxeError::DimensionMismatch(format!("penalty matrix is {}x{}, data has p = {p}", j.p(), j.p())));
        }
        let fresh = start.is_none();
        let coef = match start {
            Some(s) if s.q() == q && s.p() == p && s.eta.len() == q * p => s.clone(),
            Some(_) => return Err(GxeError::DimensionMismatch("starting effects do not match the data".into())),
            None => FullEffects::zeros(q, p),
        };
        if coef.flatten().iter().any(|v| !v.is_finite()) {
            return Err(GxeError::InvalidInput("non-finite starting coefficients".into()));
        }
        let nf = n as f64;
        let x_msq = (0..p).map(|jj| dot(d.x_col(jj), d.x_col(jj)) / nf).collect();
        let mut buf = vec![0.0; n];
        let mut w_msq = vec![0.0; q * p];
        for k in 0..q {
            for jj in 0..p {
                d.fill_interaction(k, jj, &mut buf);
                w_msq[k * p + jj] = dot(&buf, &buf) / nf;
            }
        }
        let mut s = Self { d, j, m, coef, resid: Vec::new(), x_msq, w_msq, alpha_solver: AlphaSolver::new(d)?, buf };
        s.recompute_residual();
        if fresh {
            s.update_alpha();
        }
        Ok(s)
    }

    fn recompute_residual(&mut self) {
        let fitted = self.d.linear_predictor(&self.coef);
        self.resid = self.d.y().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    }

    fn penalty(&self, c: &FullEffects) -> f64 {
        let p = c.p();
        let mut pen: f64 = c.beta.iter().chain(&c.eta).map(|v| mcp_value(*v, &self.m)).sum();
        if self.m.lambda2 != 0.0 && !self.j.is_zero() {
            let mut quad = self.j.quad_form(&c.beta);
            for k in 0..c.q() {
                quad += self.j.quad_form(&c.eta[k * p..(k + 1) * p]);
            }
            pen += 0.5 * self.m.lambda2 * quad;
        }
        pen
    }

    fn objective(&self) -> f64 {
        dot(&self.resid, &self.resid) / (2.0 * self.d.n() as f64) + self.penalty(&self.coef)
    }

    /// One cyclic pass over `beta`, then every `eta_kj`, then `alpha`.
    fn sweep(&mut self) -> Result<()> {
        let (p, q) = (self.d.p(), self.d.q());
        let nf = self.d.n() as f64;
        for jj in 0..p {
            let chi = self.x_msq[jj];
            if chi <= EMPTY_COLUMN {
                continue;
            }
            let old = self.coef.beta[jj];
            let col = self.d.x_col(jj);
            let phi = dot(col, &self.resid) / nf + chi * old;
            let delta = self.j.off_diag_dot(jj, &self.coef.beta);
            let new = cd_update_single(phi, chi, delta, self.j.diag(jj), &self.m)?;
            if new != old {
                axpy(old - new, col, &mut self.resid);
                self.coef.beta[jj] = new;
            }
        }
        for k in 0..q {
            for jj in 0..p {
                let idx = k * p + jj;
                let chi = self.w_msq[idx];
                if chi <= EMPTY_COLUMN {
                    continue;
                }
                self.d.fill_interaction(k, jj, &mut self.buf);
                let old = self.coef.eta[idx];
                let phi = dot(&self.buf, &self.resid) / nf + chi * old;
                let delta = self.j.off_diag_dot(jj, &self.coef.eta[k * p..(k + 1) * p]);
                let new = cd_update_single(phi, chi, delta, self.j.diag(jj), &self.m)?;
                if new != old {
                    axpy(old - new, &self.buf, &mut self.resid);
                    self.coef.eta[idx] = new;
                }
            }
        }
        self.update_alpha();
        Ok(())
    }

    fn update_alpha(&mut self) {
        let q = self.d.q();
        for k in 0..q {
            axpy(self.coef.alpha[k], self.d.z_col(k), &mut self.resid);
        }
        let alpha = self.alpha_solver.solve(self.d, &self.resid);
        for k in 0..q {
            axpy(-alpha[k], self.d.z_col(k), &mut self.resid);
        }
        self.coef.alpha = alpha;
    }

    /// Newton (or, where the local model is not convex, majorize-minimize)
    /// step on all nonzero coordinates jointly with `alpha` fixed; the same
    /// safeguards as the hierarchical solver: no coordinate may reach zero
    /// and the step is halved until the exact objective drops.
    fn polish(&mut self) -> bool {
        let (n, p) = (self.d.n(), self.d.p());
        let nf = n as f64;
        let coords: Vec<usize> = self
            .coef
            .beta
            .iter()
            .chain(&self.coef.eta)
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let m = coords.len();
        if m == 0 || m > MAX_POLISH {
            return false;
        }
        let value = |c: &FullEffects, i: usize| if i < p { c.beta[i] } else { c.eta[i - p] };
        // Group 0 is beta, group k + 1 is eta_k; J only couples within a group.
        let group = |i: usize| i / p;
        let mut cols = DMatrix::zeros(n, m);
        for (a, &i) in coords.iter().enumerate() {
            let mut column = cols.column_mut(a);
            let out = column.as_mut_slice();
            if i < p {
                out.copy_from_slice(self.d.x_col(i));
            } else {
                self.d.fill_interaction((i - p) / p, (i - p) % p, out);
            }
        }
        let vals = DVector::from_iterator(m, coords.iter().map(|&i| value(&self.coef, i)));
        let resid = DVector::from_column_slice(&self.resid);
        let mut grad = -(cols.transpose() * &resid) / nf;
        let mut hess = cols.transpose() * &cols / nf;
        let (lambda1, r, lambda2) = (self.m.lambda1, self.m.r, self.m.lambda2);
        let mut concave = vec![0.0; m];
        for (a, &i) in coords.iter().enumerate() {
            let b = vals[a];
            if b.abs() < lambda1 * r {
                grad[a] += lambda1 * b.signum() - b / r;
                concave[a] = 1.0 / r;
            }
            if lambda2 != 0.0 {
                let jj = i % p;
                let row = if i < p { &self.coef.beta[..] } else { &self.coef.eta[i - p - jj..i - jj] };
                grad[a] += lambda2 * (self.j.diag(jj) * b + self.j.off_diag_dot(jj, row));
                for (a2, &i2) in coords.iter().enumerate() {
                    if group(i2) == group(i) {
                        let v = self.j.get(jj, i2 % p);
                        if v != 0.0 {
                            hess[(a, a2)] += lambda2 * v;
                        }
                    }
                }
            }
        }
        let mut newton = hess.clone();
        for a in 0..m {
            newton[(a, a)] -= concave[a];
        }
        let chol = nalgebra::Cholesky::new(newton).or_else(|| {
            for a in 0..m {
                hess[(a, a)] *= 1.0 + RIDGE;
            }
            nalgebra::Cholesky::new(hess)
        });
        let Some(chol) = chol else {
            return false;
        };
        let delta = -chol.solve(&grad);
        let mut t: f64 = 1.0;
        for a in 0..m {
            if vals[a] * (vals[a] + delta[a]) <= 0.0 {
                t = t.min(STEP_SHRINK * vals[a].abs() / delta[a].abs());
            }
        }
        let partial = &resid + &cols * &vals;
        let current = self.objective();
        for _ in 0..MAX_HALVINGS {
            let trial = &vals + &delta * t;
            let mut cand = self.coef.clone();
            for (a, &i) in coords.iter().enumerate() {
                if i < p {
                    cand.beta[i] = trial[a];
                } else {
                    cand.eta[i - p] = trial[a];
                }
            }
            let new_resid = &partial - &cols * &trial;
            let obj = new_resid.norm_squared() / (2.0 * nf) + self.penalty(&cand);
            if obj < current {
                self.coef = cand;
                self.resid = new_resid.as_slice().to_vec();
                return true;
            }
            t *= 0.5;
        }
        false
    }

    /// Monotone extrapolation along the last sweep over coordinates that are
    /// nonzero and did not change sign; `alpha` is refitted per candidate.
    fn extrapolate(&mut self, before: &FullEffects) -> bool {
        let (n, p) = (self.d.n(), self.d.p());
        let same_sign = |a: f64, b: f64| a != 0.0 && a != b && (b == 0.0 || (a > 0.0) == (b > 0.0));
        // Coordinates as (index into beta ++ eta, step).
        let cur = self.coef.beta.iter().chain(&self.coef.eta);
        let old = before.beta.iter().chain(&before.eta);
        let moves: Vec<(usize, f64)> = cur
            .zip(old)
            .enumerate()
            .filter(|(_, (a, b))| same_sign(**a, **b))
            .map(|(i, (a, b))| (i, a - b))
            .collect();
        if moves.is_empty() {
            return false;
        }
        let columns: Vec<Vec<f64>> = moves
            .iter()
            .map(|&(i, _)| {
                if i < p {
                    self.d.x_col(i).to_vec()
                } else {
                    let mut c = vec![0.0; n];
                    self.d.fill_interaction((i - p) / p, (i - p) % p, &mut c);
                    c
                }
            })
            .collect();
        let mut base = self.resid.clone();
        for k in 0..self.d.q() {
            axpy(self.coef.alpha[k], self.d.z_col(k), &mut base);
        }
        let nf = n as f64;
        let mut best: Option<(FullEffects, Vec<f64>)> = None;
        let mut best_obj = self.objective();
        let mut omega = 1.0;
        while omega <= MAX_EXTRAPOLATION {
            let mut cand = self.coef.clone();
            let mut resid = base.clone();
            for (&(i, step), col) in moves.iter().zip(&columns) {
                let slot = if i < p { &mut cand.beta[i] } else { &mut cand.eta[i - p] };
                let v = *slot + omega * step;
                if v != 0.0 && (v > 0.0) == (*slot > 0.0) {
                    axpy(*slot - v, col, &mut resid);
                    *slot = v;
                }
            }
            cand.alpha = self.alpha_solver.solve(self.d, &resid);
            for k in 0..self.d.q() {
                axpy(-cand.alpha[k], self.d.z_col(k), &mut resid);
            }
            let obj = dot(&resid, &resid) / (2.0 * nf) + self.penalty(&cand);
            if !(obj < best_obj) {
                break;
            }
            best_obj = obj;
            best = Some((cand, resid));
            omega *= 2.0;
        }
        match best {
            Some((c, r)) => {
                self.coef = c;
                self.resid = r;
                true
            }
            None => false,
        }
    }

    fn into_result(mut self, trace: Vec<f64>, iterations: usize, converged: bool) -> FitResult {
        self.recompute_residual();
        let rss = dot(&self.resid, &self.resid);
        let pattern = self.coef.pattern();
        FitResult {
            coefficients: None,
            effects: self.coef,
            objective_trace: trace,
            iterations,
            converged,
            pattern,
            mcp: self.m,
            rss,
        }
    }
}

impl ObjectiveState for SmcpState<'_> {
    fn current_objective(&self) -> f64 {
        self.objective()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.2]).unwrap(), vec![0.2]);
        let a = bh_adjust(&[0.01, 0.02, 0.03]).unwrap();
        for v in a {
            assert!((v - 0.03).abs() < 1e-15);
        }
        assert_eq!(bh_adjust(&[0.4, 0.4, 0.4]).unwrap(), vec![0.4, 0.4, 0.4]);
        assert_eq!(bh_adjust(&[0.03, 0.01]).unwrap(), vec![0.03, 0.02]);
        assert_eq!(bh_adjust(&[0.9, 0.8]).unwrap(), vec![0.9, 0.9]);
        assert!(bh_adjust(&[0.5, 1.2]).is_err());
        assert!(bh_adjust(&[-0.1]).is_err());
        assert!(bh_adjust(&[]).unwrap().is_empty());
    }

    #[test]
    fn screening_windows() {
        let pv = [0.9, 0.1, 0.1, 0.9];
        assert_eq!(screen_columns(&pv, 2, ScreenMode::Region).unwrap(), vec![1, 2]);
        assert_eq!(screen_columns(&pv, 4, ScreenMode::Region).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(screen_columns(&pv, 4, ScreenMode::Individual).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(screen_columns(&[0.5, 0.2, 0.01, 0.3], 1, ScreenMode::Individual).unwrap(), vec![2]);
        assert!(screen_columns(&pv, 0, ScreenMode::Region).is_err());
        assert!(screen_columns(&pv, 5, ScreenMode::Individual).is_err());
    }

    fn data(seed: u64, n: usize, p: usize, signal: impl Fn(&[f64], &[f64]) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| {
                let zi: Vec<f64> = z.row(i).iter().copied().collect();
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                signal(&zi, &xi) + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Dataset::new(y, None, z, x).unwrap()
    }

    #[test]
    fn strong_main_effect_is_selected() {
        let d = data(1, 500, 6, |z, x| 0.5 * z[0] + 2.0 * x[3]);
        let r = fit_marginal(&d, DEFAULT_FDR).unwrap();
        assert!(r.adj_main[3] < 1e-6);
        assert!(r.selected.main.contains(&3));
        for (raw, adj) in r.p_main.iter().chain(&r.p_interaction).zip(r.adj_main.iter().chain(&r.adj_interaction)) {
            assert!(adj >= raw && *adj <= 1.0);
        }
        assert!((r.model.effects.beta[3] - 2.0).abs() < 0.2);
    }

    #[test]
    fn marginal_matches_hand_regression() {
        // p = 1: the small model is the full model, so its t-tests are the
        // ordinary regression tests.
        let d = data(2, 60, 1, |z, x| z[1] + 0.8 * x[0] - 0.5 * z[0] * x[0]);
        let r = fit_marginal(&d, DEFAULT_FDR).unwrap();
        let n = d.n();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let zc: Vec<Vec<f64>> = (0..2).map(|k| {
            let c = d.z_col(k);
            let m = mean(c);
            c.iter().map(|v| v - m).collect()
        }).collect();
        let xm = mean(d.x_col(0));
        let xc: Vec<f64> = d.x_col(0).iter().map(|v| v - xm).collect();
        let design = DMatrix::from_fn(n, 6, |i, a| match a {
            0 => 1.0,
            1 | 2 => d.z()[(i, a - 1)] ,
            3 => xc[i],
            _ => zc[a - 4][i] * xc[i],
        });
        let y = DVector::from_column_slice(d.y());
        let xtx = design.transpose() * &design;
        let inv = xtx.clone().try_inverse().unwrap();
        let b = &inv * design.transpose() * &y;
        let res = &y - &design * &b;
        let df = (n - 6) as f64;
        let s2 = res.dot(&res) / df;
        let t = StudentsT::new(0.0, 1.0, df).unwrap();
        let pv = |a: usize| 2.0 * t.sf((b[a] / (s2 * inv[(a, a)]).sqrt()).abs());
        assert!((r.p_main[0] - pv(3)).abs() < 1e-10);
        assert!((r.p_interaction[0] - pv(4)).abs() < 1e-10);
        assert!((r.p_interaction[1] - pv(5)).abs() < 1e-10);
        let adj = bh_adjust(&[pv(3), pv(4), pv(5)]).unwrap();
        assert_eq!(r.selected.main.contains(&0), adj[0] < DEFAULT_FDR);
    }

    #[test]
    fn marginal_needs_rows() {
        let d = data(3, 6, 3, |_, _| 0.0);
        assert!(fit_marginal(&d, DEFAULT_FDR).is_err());
    }

    #[test]
    fn hiermcp_is_solver_without_structure() {
        let d = data(4, 80, 10, |z, x| x[0] + z[0] * x[0]);
        let cfg = SolverConfig::new(McpParams::new(0.1, 0.7, 3.0).unwrap());
        let a = fit_hiermcp(&d, &cfg).unwrap();
        let b = solver::fit(&d, &PenaltyMatrix::none(10), &cfg.with_lambdas(0.1, 0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.effects.hierarchy_violations(), 0);
    }

    #[test]
    fn smcp_allows_interaction_without_main() {
        let d = data(5, 200, 8, |z, x| 1.5 * z[0] * x[2] + x[5]);
        let j = crate::penalties::build_spline_penalty(8).unwrap();
        let cfg = SolverConfig::new(McpParams::new(0.1, 0.01, 3.0).unwrap());
        let s = fit_smcp(&d, &j, &cfg).unwrap();
        assert!(s.converged);
        assert!(s.max_objective_increase() <= 1e-10);
        assert!(s.effects.eta(0, 2) != 0.0 && s.effects.beta[2] == 0.0);
        let h = solver::fit(&d, &j, &cfg).unwrap();
        assert_eq!(h.effects.hierarchy_violations(), 0);
    }

    #[test]
    fn smcp_null_model_and_plain_sweeps() {
        let d = data(6, 50, 5, |_, x| x[0]);
        let j = crate::penalties::build_spline_penalty(5).unwrap();
        let big = SolverConfig::new(McpParams::new(1e3, 0.1, 3.0).unwrap());
        let s = fit_smcp(&d, &j, &big).unwrap();
        assert_eq!(s.effects.nonzero_count(), 0);
        let mut plain = SolverConfig::new(McpParams::new(0.05, 0.1, 3.0).unwrap());
        plain.accelerate = false;
        let s = fit_smcp(&d, &j, &plain).unwrap();
        assert!(s.max_objective_increase() <= 1e-12);
    }
}
