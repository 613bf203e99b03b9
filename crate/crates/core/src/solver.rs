//! Coordinate-descent minimizer of the hierarchical penalized objective
//!
//! ```text
//! Q(alpha, beta, gamma) = 1/(2n) || y - Z alpha - X beta - sum_k W^(k) (beta . gamma_k) ||^2
//!                       + sum_j rho(|beta_j|) + sum_kj rho(|gamma_kj|)
//!                       + lambda2/2 (beta' J beta + sum_k gamma_k' J gamma_k)
//! ```
//!
//! Each outer iteration takes one coordinate sweep over `beta`, one sweep over
//! the `gamma` entries whose `beta_j` is nonzero, and an exact least-squares
//! update of `alpha`. Every step is an exact block or coordinate minimization,
//! so the objective never increases.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{axpy, derive_full_effects, dot, CoefficientSet, Dataset, FullEffects, SparsityPattern};
use crate::error::{GxeError, Result};
use crate::penalties::{mcp_value, soft_threshold, McpParams, PenaltyMatrix};

/// Residuals are rebuilt from scratch every this many outer iterations.
const RESIDUAL_REFRESH: usize = 10;
const MAX_CONDITION: f64 = 1e12;
/// Columns whose mean square falls below this are treated as empty.
pub(crate) const EMPTY_COLUMN: f64 = 1e-14;
/// Largest extrapolation factor tried per outer iteration.
pub(crate) const MAX_EXTRAPOLATION: f64 = 64.0;
/// Blocks larger than this are not polished.
pub(crate) const MAX_POLISH: usize = 400;
pub(crate) const MAX_HALVINGS: usize = 20;
/// Fraction of the distance to zero a polish step may cover.
pub(crate) const STEP_SHRINK: f64 = 0.99;
/// Relative diagonal loading for the majorized polish step.
pub(crate) const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mcp: McpParams,
    pub max_outer_iters: usize,
    pub rel_tol: f64,
    /// Report `gamma_kj = 0` wherever `beta_j = 0`.
    pub enforce_hierarchy: bool,
    /// After each outer iteration, try a monotone extrapolation along the
    /// last step (see [`CdState::extrapolate`]).
    #[serde(default = "default_accelerate")]
    pub accelerate: bool,
}

fn default_accelerate() -> bool {
    true
}

impl SolverConfig {
    pub fn new(mcp: McpParams) -> Self {
        Self { mcp, max_outer_iters: 200, rel_tol: 1e-4, enforce_hierarchy: true, accelerate: true }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.mcp.lambda1 = lambda1;
        self.mcp.lambda2 = lambda2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mcp.validate()?;
        if !(self.rel_tol > 0.0) {
            return Err(GxeError::InvalidInput("rel_tol must be > 0".into()));
        }
        if self.max_outer_iters == 0 {
            return Err(GxeError::InvalidInput("max_outer_iters must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(McpParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Decomposed coefficients; `None` for methods fitted directly on `eta`.
    pub coefficients: Option<CoefficientSet>,
    pub effects: FullEffects,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub pattern: SparsityPattern,
    pub mcp: McpParams,
    /// Unpenalized residual sum of squares at the reported coefficients.
    pub rss: f64,
}

impl FitResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }

    /// Largest increase between consecutive trace entries (<= 0 when monotone).
    pub fn max_objective_increase(&self) -> f64 {
        self.objective_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Minimizer of `chi/2 b^2 - phi b + rho(|b|) + lambda2/2 (J_jj b^2 + 2 Delta b)`.
///
/// Uses the closed form when the scalar problem is convex
/// (`chi + lambda2 J_jj > 1/r`) and candidate enumeration otherwise.
pub fn cd_update_single(phi: f64, chi: f64, delta: f64, j_jj: f64, m: &McpParams) -> Result<f64> {
    if !(chi > 0.0) {
        return Err(GxeError::InvalidInput(format!("chi = {chi} must be > 0")));
    }
    let a = chi + m.lambda2 * j_jj;
    let z = phi - m.lambda2 * delta;
    if !(a > 0.0) || !z.is_finite() {
        return Err(GxeError::Numerical {
            iteration: 0,
            message: format!("scalar problem unbounded (curvature {a}, slope {z})"),
        });
    }
    let inv_r = 1.0 / m.r;
    if a > inv_r {
        if z.abs() <= m.lambda1 * m.r * a {
            Ok(soft_threshold(z, m.lambda1) / (a - inv_r))
        } else {
            Ok(z / a)
        }
    } else {
        Ok(nonconvex_scalar_min(z, a, m))
    }
}

fn nonconvex_scalar_min(z: f64, a: f64, m: &McpParams) -> f64 {
    let f = |b: f64| 0.5 * a * b * b - z * b + mcp_value(b, m);
    let knot = m.lambda1 * m.r;
    let mut candidates = vec![0.0, knot, -knot];
    let inner = a - 1.0 / m.r;
    if inner != 0.0 {
        for s in [1.0, -1.0] {
            let b = (z - m.lambda1 * s) / inner;
            if b * s >= 0.0 && b.abs() <= knot {
                candidates.push(b);
            }
        }
    }
    let outer = z / a;
    if outer.abs() > knot {
        candidates.push(outer);
    }
    let mut best: f64 = 0.0;
    let mut best_val = f(0.0);
    for b in candidates {
        let v = f(b);
        if v < best_val || (v == best_val && b.abs() < best.abs()) {
            best = b;
            best_val = v;
        }
    }
    best
}

/// Term-by-term evaluation of the objective at `c`.
pub fn objective(d: &Dataset, j: &PenaltyMatrix, c: &CoefficientSet, m: &McpParams) -> Result<f64> {
    check_dims(d, j, c)?;
    let effects = derive_full_effects(c);
    let loss = d.rss(&effects) / (2.0 * d.n() as f64);
    Ok(loss + penalty_value(j, c, m))
}

pub(crate) fn penalty_value(j: &PenaltyMatrix, c: &CoefficientSet, m: &McpParams) -> f64 {
    let p = c.p();
    let mut pen: f64 = c.beta.iter().map(|b| mcp_value(*b, m)).sum::<f64>()
        + c.gamma.iter().map(|g| mcp_value(*g, m)).sum::<f64>();
    if m.lambda2 != 0.0 && !j.is_zero() {
        let mut quad = j.quad_form(&c.beta);
        for k in 0..c.q() {
            quad += j.quad_form(&c.gamma[k * p..(k + 1) * p]);
        }
        pen += 0.5 * m.lambda2 * quad;
    }
    pen
}

fn check_dims(d: &Dataset, j: &PenaltyMatrix, c: &CoefficientSet) -> Result<()> {
    if c.q() != d.q() || c.p() != d.p() || c.gamma.len() != d.q() * d.p() {
        return Err(GxeError::DimensionMismatch(format!(
            "coefficients are (q={}, p={}), data is (q={}, p={})",
            c.q(),
            c.p(),
            d.q(),
            d.p()
        )));
    }
    if j.p() != d.p() {
        return Err(GxeError::DimensionMismatch(format!(
            "penalty matrix is {}x{}, data has p = {}",
            j.p(),
            j.p(),
            d.p()
        )));
    }
    Ok(())
}

/// Least-squares solver for the unpenalized E coefficients.
#[derive(Debug, Clone)]
pub(crate) struct AlphaSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl AlphaSolver {
    pub(crate) fn new(d: &Dataset) -> Result<Self> {
        let ztz = d.z().transpose() * d.z();
        let eig = SymmetricEigen::new(ztz.clone());
        let (mut lo, mut lo_idx) = (f64::INFINITY, 0);
        let mut hi = 0.0_f64;
        for (i, &v) in eig.eigenvalues.iter().enumerate() {
            if v < lo {
                lo = v;
                lo_idx = i;
            }
            hi = hi.max(v);
        }
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            let v = eig.eigenvectors.column(lo_idx);
            let columns = (0..v.len()).filter(|&k| v[k].abs() > 0.1).collect();
            return Err(GxeError::RankDeficient { columns });
        }
        let chol = nalgebra::Cholesky::new(ztz).ok_or(GxeError::RankDeficient { columns: vec![] })?;
        Ok(Self { chol })
    }

    /// `(Z'Z)^{-1} Z' target`.
    pub(crate) fn solve(&self, d: &Dataset, target: &[f64]) -> Vec<f64> {
        let rhs = DVector::from_iterator(d.q(), (0..d.q()).map(|k| dot(d.z_col(k), target)));
        self.chol.solve(&rhs).iter().copied().collect()
    }
}

/// Coefficient block handled by [`CdState::polish`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Beta,
    Gamma,
}

/// Mutable state of one coordinate-descent run.
pub struct CdState<'a> {
    d: &'a Dataset,
    j: &'a PenaltyMatrix,
    m: McpParams,
    coef: CoefficientSet,
    resid: Vec<f64>,
    x_msq: Vec<f64>,
    alpha_solver: AlphaSolver,
    col_buf: Vec<f64>,
    w_buf: Vec<f64>,
}

impl<'a> CdState<'a> {
    /// Step 1 initialization: `beta = gamma = 0`, `alpha` by OLS of `y` on `Z`.
    pub fn new(d: &'a Dataset, j: &'a PenaltyMatrix, m: McpParams) -> Result<Self> {
        let mut s = Self::with_coefficients(d, j, m, CoefficientSet::zeros(d.q(), d.p()))?;
        s.update_alpha();
        Ok(s)
    }

    /// Starts from the given coefficients (warm start).
    pub fn with_coefficients(
        d: &'a Dataset,
        j: &'a PenaltyMatrix,
        m: McpParams,
        coef: CoefficientSet,
    ) -> Result<Self> {
        m.validate()?;
        check_dims(d, j, &coef)?;
        if !coef.is_finite() {
            return Err(GxeError::InvalidInput("non-finite starting coefficients".into()));
        }
        let n = d.n() as f64;
        let x_msq = (0..d.p()).map(|jj| dot(d.x_col(jj), d.x_col(jj)) / n).collect();
        let alpha_solver = AlphaSolver::new(d)?;
        let mut s = Self {
            d,
            j,
            m,
            coef,
            resid: Vec::new(),
            x_msq,
            alpha_solver,
            col_buf: vec![0.0; d.n()],
            w_buf: vec![0.0; d.n()],
        };
        s.recompute_residual();
        Ok(s)
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coef
    }

    pub fn residual(&self) -> &[f64] {
        &self.resid
    }

    pub fn recompute_residual(&mut self) {
        let fitted = self.d.linear_predictor(&derive_full_effects(&self.coef));
        self.resid = self.d.y().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    }

    /// Objective at the current state, using the maintained residual.
    pub fn objective(&self) -> f64 {
        let loss = dot(&self.resid, &self.resid) / (2.0 * self.d.n() as f64);
        loss + penalty_value(self.j, &self.coef, &self.m)
    }

    /// One coordinate sweep over `beta` with `alpha` and `gamma` fixed.
    pub fn update_beta(&mut self) -> Result<()> {
        let (n, p, q) = (self.d.n(), self.d.p(), self.d.q());
        let nf = n as f64;
        for jj in 0..p {
            let old = self.coef.beta[jj];
            let has_gamma = (0..q).any(|k| self.coef.gamma[k * p + jj] != 0.0);
            let chi = if has_gamma {
                self.col_buf.copy_from_slice(self.d.x_col(jj));
                for k in 0..q {
                    let g = self.coef.gamma[k * p + jj];
                    if g != 0.0 {
                        self.d.fill_interaction(k, jj, &mut self.w_buf);
                        axpy(g, &self.w_buf, &mut self.col_buf);
                    }
                }
                dot(&self.col_buf, &self.col_buf) / nf
            } else {
                self.x_msq[jj]
            };
            let column: &[f64] = if has_gamma { &self.col_buf } else { self.d.x_col(jj) };
            let new = if chi <= EMPTY_COLUMN {
                0.0
            } else {
                let phi = dot(column, &self.resid) / nf + chi * old;
                let delta = self.j.off_diag_dot(jj, &self.coef.beta);
                cd_update_single(phi, chi, delta, self.j.diag(jj), &self.m)?
            };
            if new != old {
                axpy(old - new, column, &mut self.resid);
                self.coef.beta[jj] = new;
            }
        }
        Ok(())
    }

    /// One coordinate sweep over `gamma_kj` for `j` with `beta_j != 0`; the
    /// remaining entries stay frozen.
    pub fn update_gamma(&mut self) -> Result<()> {
        let (n, p, q) = (self.d.n(), self.d.p(), self.d.q());
        let nf = n as f64;
        let active: Vec<usize> = (0..p).filter(|&jj| self.coef.beta[jj] != 0.0).collect();
        for k in 0..q {
            for &jj in &active {
                let b = self.coef.beta[jj];
                self.d.fill_interaction(k, jj, &mut self.w_buf);
                let (mut wsq, mut wr) = (0.0, 0.0);
                for (w, r) in self.w_buf.iter().zip(&self.resid) {
                    wsq += w * w;
                    wr += w * r;
                }
                let chi = b * b * wsq / nf;
                let idx = k * p + jj;
                let old = self.coef.gamma[idx];
                let new = if chi <= EMPTY_COLUMN {
                    old
                } else {
                    let phi = b * wr / nf + chi * old;
                    let row = &self.coef.gamma[k * p..(k + 1) * p];
                    let delta = self.j.off_diag_dot(jj, row);
                    cd_update_single(phi, chi, delta, self.j.diag(jj), &self.m)?
                };
                if new != old {
                    axpy(b * (old - new), &self.w_buf, &mut self.resid);
                    self.coef.gamma[idx] = new;
                }
            }
        }
        Ok(())
    }

    /// Exact least-squares update of `alpha` on the partial residual.
    pub fn update_alpha(&mut self) {
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

    /// One outer iteration (beta sweep, gamma sweep, alpha update).
    pub fn outer_iteration(&mut self) -> Result<f64> {
        self.update_beta()?;
        self.update_gamma()?;
        self.update_alpha();
        Ok(self.objective())
    }

    /// Outer iteration followed by [`Self::polish`] on both blocks, an
    /// `alpha` refit and [`Self::extrapolate`].
    pub fn accelerated_iteration(&mut self) -> Result<f64> {
        let before = self.coef.clone();
        self.outer_iteration()?;
        let moved = self.polish(Block::Beta) | self.polish(Block::Gamma);
        if moved {
            self.update_alpha();
        }
        self.extrapolate(&before);
        Ok(self.objective())
    }

    /// Newton step on the nonzero coordinates of one block, with the other
    /// blocks fixed and each MCP term frozen on its current quadratic piece.
    /// If that local model is not convex, the MCP terms are linearized
    /// instead (a majorizer on each side of zero). The step is shortened so
    /// no coordinate reaches zero and is halved until the exact objective
    /// drops; it is dropped otherwise. Nonzero coordinates of a
    /// coordinate-wise fixed point have zero gradient, so fixed points do not
    /// move.
    pub fn polish(&mut self, block: Block) -> bool {
        let (n, p, q) = (self.d.n(), self.d.p(), self.d.q());
        let nf = n as f64;
        let coords: Vec<usize> = match block {
            Block::Beta => (0..p).filter(|&jj| self.coef.beta[jj] != 0.0).collect(),
            Block::Gamma => (0..q * p)
                .filter(|&i| self.coef.gamma[i] != 0.0 && self.coef.beta[i % p] != 0.0)
                .collect(),
        };
        let m = coords.len();
        if m == 0 || m > MAX_POLISH {
            return false;
        }
        let value = |c: &CoefficientSet, i: usize| match block {
            Block::Beta => c.beta[i],
            Block::Gamma => c.gamma[i],
        };
        let mut cols = DMatrix::zeros(n, m);
        for (a, &i) in coords.iter().enumerate() {
            let mut column = cols.column_mut(a);
            let out = column.as_mut_slice();
            match block {
                Block::Beta => {
                    out.copy_from_slice(self.d.x_col(i));
                    for k in 0..q {
                        let g = self.coef.gamma[k * p + i];
                        if g != 0.0 {
                            self.d.fill_interaction(k, i, &mut self.w_buf);
                            axpy(g, &self.w_buf, out);
                        }
                    }
                }
                Block::Gamma => {
                    self.d.fill_interaction(i / p, i % p, out);
                    let b = self.coef.beta[i % p];
                    out.iter_mut().for_each(|v| *v *= b);
                }
            }
        }
        let vals = DVector::from_iterator(m, coords.iter().map(|&i| value(&self.coef, i)));
        let resid = DVector::from_column_slice(&self.resid);
        let mut grad = -(cols.transpose() * &resid) / nf;
        let mut hess = cols.transpose() * &cols / nf;
        let (lambda1, r, lambda2) = (self.m.lambda1, self.m.r, self.m.lambda2);
        let mut concave = vec![0.0; m];
        for (a, &i) in coords.iter().enumerate() {
            let (jj, row) = match block {
                Block::Beta => (i, &self.coef.beta[..]),
                Block::Gamma => (i % p, &self.coef.gamma[(i / p) * p..(i / p + 1) * p]),
            };
            let b = vals[a];
            if b.abs() < lambda1 * r {
                grad[a] += lambda1 * b.signum() - b / r;
                concave[a] = 1.0 / r;
            }
            if lambda2 != 0.0 {
                grad[a] += lambda2 * (self.j.diag(jj) * b + self.j.off_diag_dot(jj, row));
                for (a2, &i2) in coords.iter().enumerate() {
                    if block == Block::Gamma && i2 / p != i / p {
                        continue;
                    }
                    let v = self.j.get(jj, i2 % p);
                    if v != 0.0 {
                        hess[(a, a2)] += lambda2 * v;
                    }
                }
            }
        }
        // Newton on the current MCP pieces when that is convex; otherwise
        // the MCP terms are linearized, which majorizes them away from zero.
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
                match block {
                    Block::Beta => cand.beta[i] = trial[a],
                    Block::Gamma => cand.gamma[i] = trial[a],
                }
            }
            let new_resid = &partial - &cols * &trial;
            let obj = new_resid.norm_squared() / (2.0 * nf) + penalty_value(self.j, &cand, &self.m);
            if obj < current {
                self.coef = cand;
                self.resid = new_resid.as_slice().to_vec();
                return true;
            }
            t *= 0.5;
        }
        false
    }

    /// Moves `(beta, gamma)` to `theta + w (theta - before)` for the largest
    /// `w` in 1, 2, 4, ... that keeps lowering the objective, then refits
    /// `alpha`. Only coordinates that are nonzero now and did not change sign
    /// move. A coordinate the step would carry across zero stops at zero, so
    /// spurious effects inherited from a warm start can leave in one step
    /// instead of shrinking a little per sweep. Fixed points do not move, and
    /// nothing happens unless the objective strictly drops.
    ///
    /// Plain coordinate descent crawls when `lambda2 J` couples neighbouring
    /// coordinates much more strongly than the data do; this step removes
    /// most of that crawl.
    pub fn extrapolate(&mut self, before: &CoefficientSet) -> bool {
        let (p, q) = (self.d.p(), self.d.q());
        // `b` may be zero: a coordinate that just entered keeps moving outward.
        let same_sign = |a: f64, b: f64| a != 0.0 && (b == 0.0 || (a > 0.0) == (b > 0.0));
        let mut touched = Vec::new();
        let mut d_beta = vec![0.0; p];
        let mut d_gamma = vec![0.0; q * p];
        for jj in 0..p {
            let b = self.coef.beta[jj];
            if b == 0.0 {
                continue;
            }
            let mut any = false;
            if same_sign(b, before.beta[jj]) && b != before.beta[jj] {
                d_beta[jj] = b - before.beta[jj];
                any = true;
            }
            for k in 0..q {
                let idx = k * p + jj;
                let (g, g0) = (self.coef.gamma[idx], before.gamma[idx]);
                if same_sign(g, g0) && g != g0 {
                    d_gamma[idx] = g - g0;
                    any = true;
                }
            }
            if any {
                touched.push(jj);
            }
        }
        if touched.is_empty() {
            return false;
        }

        let n = self.d.n();
        let nf = n as f64;
        // Residual with alpha and the touched columns' current fit removed.
        let mut base = self.resid.clone();
        for k in 0..q {
            axpy(self.coef.alpha[k], self.d.z_col(k), &mut base);
        }
        let mut contrib = vec![0.0; n];
        for &jj in &touched {
            self.column_fit(jj, &self.coef.beta, &self.coef.gamma, &mut contrib);
            for (r, c) in base.iter_mut().zip(&contrib) {
                *r += c;
            }
        }

        let mut best: Option<(CoefficientSet, Vec<f64>)> = None;
        let mut best_obj = self.objective();
        let mut omega = 1.0;
        while omega <= MAX_EXTRAPOLATION {
            let mut cand = self.coef.clone();
            for &jj in &touched {
                let step = |cur: f64, d: f64| {
                    let v = cur + omega * d;
                    if d == 0.0 {
                        cur
                    } else if (v > 0.0) == (cur > 0.0) {
                        v
                    } else {
                        0.0
                    }
                };
                cand.beta[jj] = step(cand.beta[jj], d_beta[jj]);
                for k in 0..q {
                    let idx = k * p + jj;
                    cand.gamma[idx] = step(cand.gamma[idx], d_gamma[idx]);
                }
            }
            let mut resid = base.clone();
            for &jj in &touched {
                self.column_fit(jj, &cand.beta, &cand.gamma, &mut contrib);
                for (r, c) in resid.iter_mut().zip(&contrib) {
                    *r -= c;
                }
            }
            cand.alpha = self.alpha_solver.solve(self.d, &resid);
            for k in 0..q {
                axpy(-cand.alpha[k], self.d.z_col(k), &mut resid);
            }
            let obj = dot(&resid, &resid) / (2.0 * nf) + penalty_value(self.j, &cand, &self.m);
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

    /// `beta_j x_j + sum_k beta_j gamma_kj W^(k)_j` into `out`.
    fn column_fit(&self, jj: usize, beta: &[f64], gamma: &[f64], out: &mut [f64]) {
        let p = self.d.p();
        let b = beta[jj];
        for (o, x) in out.iter_mut().zip(self.d.x_col(jj)) {
            *o = b * x;
        }
        let mut w = vec![0.0; out.len()];
        for k in 0..self.d.q() {
            let e = b * gamma[k * p + jj];
            if e != 0.0 {
                self.d.fill_interaction(k, jj, &mut w);
                axpy(e, &w, out);
            }
        }
    }

    fn into_result(mut self, trace: Vec<f64>, iterations: usize, converged: bool, hierarchy: bool) -> FitResult {
        let p = self.d.p();
        if hierarchy {
            for (idx, g) in self.coef.gamma.iter_mut().enumerate() {
                if self.coef.beta[idx % p] == 0.0 {
                    *g = 0.0;
                }
            }
        }
        self.recompute_residual();
        let rss = dot(&self.resid, &self.resid);
        let effects = derive_full_effects(&self.coef);
        let pattern = effects.pattern();
        FitResult {
            coefficients: Some(self.coef),
            effects,
            objective_trace: trace,
            iterations,
            converged,
            pattern,
            mcp: self.m,
            rss,
        }
    }
}

/// Runs the full algorithm from the Step 1 initialization.
pub fn fit(d: &Dataset, j: &PenaltyMatrix, cfg: &SolverConfig) -> Result<FitResult> {
    fit_from(d, j, cfg, None)
}

/// Runs the algorithm, optionally warm-started from `start`.
pub fn fit_from(
    d: &Dataset,
    j: &PenaltyMatrix,
    cfg: &SolverConfig,
    start: Option<&CoefficientSet>,
) -> Result<FitResult> {
    cfg.validate()?;
    let state = match start {
        None => CdState::new(d, j, cfg.mcp)?,
        Some(c) => CdState::with_coefficients(d, j, cfg.mcp, c.clone())?,
    };
    let hierarchy = cfg.enforce_hierarchy;
    let accelerate = cfg.accelerate;
    let step = move |s: &mut CdState| if accelerate { s.accelerated_iteration() } else { s.outer_iteration() };
    run_outer_loop(state, cfg, step, |s| s.recompute_residual(), |s, trace, it, conv| {
        s.into_result(trace, it, conv, hierarchy)
    })
}

/// Shared outer loop: iterate until the relative objective change drops below
/// `rel_tol` or the iteration cap is hit.
pub(crate) fn run_outer_loop<S>(
    mut state: S,
    cfg: &SolverConfig,
    mut step: impl FnMut(&mut S) -> Result<f64>,
    mut refresh: impl FnMut(&mut S),
    finish: impl FnOnce(S, Vec<f64>, usize, bool) -> FitResult,
) -> Result<FitResult>
where
    S: ObjectiveState,
{
    let mut trace = vec![state.current_objective()];
    if !trace[0].is_finite() {
        return Err(GxeError::Numerical { iteration: 0, message: "non-finite initial objective".into() });
    }
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=cfg.max_outer_iters {
        if t % RESIDUAL_REFRESH == 0 {
            refresh(&mut state);
        }
        let obj = step(&mut state).map_err(|e| match e {
            GxeError::Numerical { message, .. } => GxeError::Numerical { iteration: t, message },
            other => other,
        })?;
        if !obj.is_finite() {
            return Err(GxeError::Numerical { iteration: t, message: format!("objective became {obj}") });
        }
        let prev = *trace.last().expect("nonempty");
        trace.push(obj);
        iterations = t;
        let change = (obj - prev).abs();
        if change == 0.0 || change / prev.abs() < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(finish(state, trace, iterations, converged))
}

pub(crate) trait ObjectiveState {
    fn current_objective(&self) -> f64;
}

impl ObjectiveState for CdState<'_> {
    fn current_objective(&self) -> f64 {
        self.objective()
    }
}

/// Dense design `[Z, X, W^(1), ..., W^(q)]` (test and diagnostic helper).
pub fn dense_design(d: &Dataset) -> DMatrix<f64> {
    let (n, p, q) = (d.n(), d.p(), d.q());
    let mut m = DMatrix::zeros(n, q + p + q * p);
    for k in 0..q {
        m.column_mut(k).copy_from_slice(d.z_col(k));
    }
    for jj in 0..p {
        m.column_mut(q + jj).copy_from_slice(d.x_col(jj));
    }
    let mut buf = vec![0.0; n];
    for k in 0..q {
        for jj in 0..p {
            d.fill_interaction(k, jj, &mut buf);
            m.column_mut(q + p + k * p + jj).copy_from_slice(&buf);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mcp(l1: f64, l2: f64) -> McpParams {
        McpParams::new(l1, l2, 3.0).unwrap()
    }

    #[test]
    fn scalar_update_examples() {
        assert_eq!(cd_update_single(0.0, 1.0, 0.0, 0.0, &mcp(0.1, 0.0)).unwrap(), 0.0);
        assert_eq!(cd_update_single(0.3, 1.0, 3.0, 1.0, &mcp(0.1, 0.1)).unwrap(), 0.0);
        let b = cd_update_single(0.2, 1.0, 0.0, 0.0, &mcp(0.1, 0.0)).unwrap();
        assert!((b - 0.15).abs() < 1e-12);
        let b = cd_update_single(0.5, 1.0, 0.0, 0.0, &mcp(0.1, 0.0)).unwrap();
        assert!((b - 0.5).abs() < 1e-12);
        assert!(cd_update_single(0.5, 0.0, 0.0, 0.0, &mcp(0.1, 0.0)).is_err());
        assert!(cd_update_single(0.5, -1.0, 0.0, 0.0, &mcp(0.1, 0.0)).is_err());
    }

    #[test]
    fn nonconvex_branch_is_global_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m = mcp(rng.random_range(0.01..0.5), rng.random_range(0.0..0.2));
            let chi = rng.random_range(0.001..0.3);
            let phi = rng.random_range(-1.0..1.0);
            let a = chi + m.lambda2;
            if a > 1.0 / m.r {
                continue;
            }
            let b = cd_update_single(phi, chi, 0.0, 1.0, &m).unwrap();
            let f = |x: f64| 0.5 * a * x * x - phi * x + mcp_value(x, &m);
            let lim = 4.0 * (phi.abs() / a + m.lambda1 * m.r);
            let grid_best = (0..=200_000)
                .map(|i| -lim + 2.0 * lim * i as f64 / 200_000.0)
                .map(f)
                .fold(f64::INFINITY, f64::min);
            assert!(f(b) <= grid_best + 1e-9, "f(b)={} grid={grid_best}", f(b));
        }
    }

    fn random_dataset(seed: u64, n: usize, q: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.5..1.5));
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5));
        let y = (0..n)
            .map(|i| 0.8 * z[(i, 0)] + 1.2 * x[(i, 0)] - 0.7 * x[(i, 1)] + 0.9 * z[(i, 0)] * x[(i, 0)]
                + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        Dataset::new(y, None, z, x).unwrap()
    }

    #[test]
    fn objective_matches_dense_oracle() {
        let d = random_dataset(3, 15, 2, 5);
        let j = crate::penalties::build_spline_penalty(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = CoefficientSet {
            alpha: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            beta: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            gamma: (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let m = mcp(0.2, 0.3);
        // Dense oracle: explicit design, explicit J, explicit MCP integral.
        let design = dense_design(&d);
        let e = derive_full_effects(&c);
        let theta = DVector::from_vec(e.flatten());
        let resid = DVector::from_column_slice(d.y()) - &design * theta;
        let jd = j.to_dense();
        let mut want = resid.norm_squared() / (2.0 * 15.0);
        for v in c.beta.iter().chain(&c.gamma) {
            let knot = m.lambda1 * m.r;
            let a = v.abs().min(knot);
            want += m.lambda1 * a - a * a / (2.0 * m.r);
        }
        let b = DVector::from_column_slice(&c.beta);
        want += 0.5 * m.lambda2 * (b.transpose() * &jd * &b)[0];
        for k in 0..2 {
            let g = DVector::from_column_slice(&c.gamma[k * 5..(k + 1) * 5]);
            want += 0.5 * m.lambda2 * (g.transpose() * &jd * &g)[0];
        }
        let got = objective(&d, &j, &c, &m).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");

        let zero = CoefficientSet::zeros(2, 5);
        let ysq: f64 = d.y().iter().map(|v| v * v).sum();
        assert!((objective(&d, &j, &zero, &m).unwrap() - ysq / 30.0).abs() < 1e-12);
        let bad = CoefficientSet::zeros(2, 4);
        assert!(objective(&d, &j, &bad, &m).is_err());
    }

    #[test]
    fn sweeps_never_increase_objective() {
        for seed in 0..20 {
            let d = random_dataset(seed, 30, 2, 8);
            let j = crate::penalties::build_spline_penalty(8).unwrap();
            let mut s = CdState::new(&d, &j, mcp(0.05, 0.2)).unwrap();
            let mut prev = s.objective();
            for _ in 0..10 {
                s.update_beta().unwrap();
                let o = s.objective();
                assert!(o <= prev + 1e-12);
                prev = o;
                s.update_gamma().unwrap();
                let o = s.objective();
                assert!(o <= prev + 1e-12);
                prev = o;
                s.update_alpha();
                let o = s.objective();
                assert!(o <= prev + 1e-12);
                prev = o;
            }
            let direct = objective(&d, &j, s.coefficients(), &s.m).unwrap();
            assert!((direct - s.objective()).abs() < 1e-10);
        }
    }

    #[test]
    fn gamma_sweep_skips_when_beta_zero() {
        let d = random_dataset(5, 20, 2, 4);
        let j = PenaltyMatrix::none(4);
        let mut s = CdState::new(&d, &j, mcp(0.1, 0.0)).unwrap();
        s.coef.gamma = vec![0.5; 8];
        s.recompute_residual();
        let before = s.coef.gamma.clone();
        s.update_gamma().unwrap();
        assert_eq!(s.coef.gamma, before);
    }

    #[test]
    fn alpha_with_intercept_column_is_mean() {
        let z = DMatrix::from_element(4, 1, 1.0);
        let x = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 2.0, 0.0]);
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 6.0], None, z, x).unwrap();
        let j = PenaltyMatrix::none(1);
        let s = CdState::new(&d, &j, mcp(10.0, 0.0)).unwrap();
        assert!((s.coefficients().alpha[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_e_is_reported() {
        let z = DMatrix::from_row_slice(4, 3, &[1., 2., 0.3, 2., 4., 0.1, 3., 6., 0.7, 4., 8., 0.2]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let d = Dataset::new(vec![0.0; 4], None, z, x).unwrap();
        let j = PenaltyMatrix::none(1);
        match CdState::new(&d, &j, mcp(0.1, 0.0)) {
            Err(GxeError::RankDeficient { columns }) => assert_eq!(columns, vec![0, 1]),
            other => panic!("expected rank deficiency, got {:?}", other.err()),
        }
    }

    #[test]
    fn huge_lambda_gives_null_model() {
        let d = random_dataset(8, 40, 2, 6);
        let j = crate::penalties::build_spline_penalty(6).unwrap();
        let cfg = SolverConfig::new(mcp(100.0, 0.1));
        let fit = fit(&d, &j, &cfg).unwrap();
        assert!(fit.effects.beta.iter().all(|b| *b == 0.0));
        assert!(fit.effects.eta.iter().all(|b| *b == 0.0));
        assert!(fit.converged);
        let null = CdState::new(&d, &j, cfg.mcp).unwrap();
        assert!((fit.final_objective() - null.objective()).abs() < 1e-12);
    }
}
