//! Data containers shared by every stage of the analysis.
//!
//! A [`Dataset`] holds the response, the E matrix `Z` (n x q) and the G matrix
//! `X` (n x p). Interaction columns `W^(k)_j = Z_k * X_j` are never stored;
//! they are produced on demand by [`Dataset::fill_interaction`]. After the
//! Kaplan-Meier transform the interaction columns are no longer plain
//! products of the stored columns, which is what [`Interactions::Centered`]
//! records.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GxeError, Result};

/// Contiguous view of column `j` of a column-major matrix.
#[inline]
pub(crate) fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How interaction columns are derived from the stored data.
#[derive(Debug, Clone)]
pub enum Interactions {
    /// `W^(k)_ij = Z_ik * X_ij`.
    Product,
    /// `W^(k)_ij = s_i * (Zb_ik * Xb_ij - c_kj)`: row-scaled, centered products
    /// of the base (pre-transform) columns.
    Centered(CenteredInteractions),
}

#[derive(Debug, Clone)]
pub struct CenteredInteractions {
    pub z_base: DMatrix<f64>,
    pub x_base: DMatrix<f64>,
    pub row_scale: Vec<f64>,
    /// Row-major q x p matrix of interaction centers.
    pub center: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    delta: Option<Vec<bool>>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    g_names: Option<Vec<String>>,
    interactions: Interactions,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        delta: Option<Vec<bool>>,
        z: DMatrix<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(GxeError::InvalidInput("dataset has no rows".into()));
        }
        if z.ncols() == 0 {
            return Err(GxeError::InvalidInput("at least one E column is required".into()));
        }
        if x.ncols() == 0 {
            return Err(GxeError::InvalidInput("at least one G column is required".into()));
        }
        if z.nrows() != n || x.nrows() != n {
            return Err(GxeError::DimensionMismatch(format!(
                "y has {n} rows, Z has {}, X has {}",
                z.nrows(),
                x.nrows()
            )));
        }
        if let Some(d) = &delta {
            if d.len() != n {
                return Err(GxeError::DimensionMismatch(format!(
                    "delta has {} entries, expected {n}",
                    d.len()
                )));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GxeError::InvalidInput("non-finite response value".into()));
        }
        if z.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(GxeError::InvalidInput("non-finite entry in Z or X".into()));
        }
        Ok(Self {
            y,
            delta,
            z,
            x,
            g_names: None,
            interactions: Interactions::Product,
        })
    }

    pub(crate) fn with_interactions(mut self, interactions: Interactions) -> Self {
        self.interactions = interactions;
        self
    }

    pub fn with_g_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(GxeError::DimensionMismatch(format!(
                "{} G names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.g_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn delta(&self) -> Option<&[bool]> {
        self.delta.as_deref()
    }
    pub fn is_survival(&self) -> bool {
        self.delta.is_some()
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z_col(&self, k: usize) -> &[f64] {
        col(&self.z, k)
    }
    pub fn x_col(&self, j: usize) -> &[f64] {
        col(&self.x, j)
    }
    pub fn g_names(&self) -> Option<&[String]> {
        self.g_names.as_deref()
    }
    pub fn interactions(&self) -> &Interactions {
        &self.interactions
    }

    /// Writes interaction column `(k, j)` (0-based) into `out`.
    pub fn fill_interaction(&self, k: usize, j: usize, out: &mut [f64]) {
        match &self.interactions {
            Interactions::Product => {
                for ((o, a), b) in out.iter_mut().zip(self.z_col(k)).zip(self.x_col(j)) {
                    *o = a * b;
                }
            }
            Interactions::Centered(c) => {
                let center = c.center[k * self.p() + j];
                let zb = col(&c.z_base, k);
                let xb = col(&c.x_base, j);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = c.row_scale[i] * (zb[i] * xb[i] - center);
                }
            }
        }
    }

    /// Interaction column `(k, j)`, 0-based.
    pub fn interaction_column(&self, k: usize, j: usize) -> Result<Vec<f64>> {
        if k >= self.q() {
            return Err(GxeError::IndexOutOfRange { what: "E", index: k, size: self.q() });
        }
        if j >= self.p() {
            return Err(GxeError::IndexOutOfRange { what: "G", index: j, size: self.p() });
        }
        let mut out = vec![0.0; self.n()];
        self.fill_interaction(k, j, &mut out);
        Ok(out)
    }

    /// `Z alpha + X beta + sum_k W^(k) eta_k`.
    pub fn linear_predictor(&self, effects: &FullEffects) -> Vec<f64> {
        let (n, p, q) = (self.n(), self.p(), self.q());
        let mut out = vec![0.0; n];
        for k in 0..q {
            let a = effects.alpha[k];
            if a != 0.0 {
                axpy(a, self.z_col(k), &mut out);
            }
        }
        let mut buf = vec![0.0; n];
        for j in 0..p {
            let b = effects.beta[j];
            if b != 0.0 {
                axpy(b, self.x_col(j), &mut out);
            }
            for k in 0..q {
                let e = effects.eta[k * p + j];
                if e != 0.0 {
                    self.fill_interaction(k, j, &mut buf);
                    axpy(e, &buf, &mut out);
                }
            }
        }
        out
    }

    /// Residual sum of squares of `y` against [`Self::linear_predictor`].
    pub fn rss(&self, effects: &FullEffects) -> f64 {
        let fitted = self.linear_predictor(effects);
        self.y.iter().zip(&fitted).map(|(y, f)| (y - f).powi(2)).sum()
    }

    /// New dataset keeping the given rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        self.require_product("row selection")?;
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let delta = self.delta.as_ref().map(|d| rows.iter().map(|&i| d[i]).collect());
        let z = DMatrix::from_fn(rows.len(), self.q(), |i, k| self.z[(rows[i], k)]);
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let mut out = Dataset::new(y, delta, z, x)?;
        out.g_names = self.g_names.clone();
        Ok(out)
    }

    /// New dataset keeping the given G columns.
    pub fn select_g_columns(&self, cols: &[usize]) -> Result<Dataset> {
        self.require_product("column selection")?;
        let n = self.n();
        let mut data = Vec::with_capacity(n * cols.len());
        for &j in cols {
            data.extend_from_slice(self.x_col(j));
        }
        let x = DMatrix::from_vec(n, cols.len(), data);
        let mut out = Dataset::new(self.y.clone(), self.delta.clone(), self.z.clone(), x)?;
        out.g_names = self
            .g_names
            .as_ref()
            .map(|names| cols.iter().map(|&j| names[j].clone()).collect());
        Ok(out)
    }

    pub(crate) fn require_product(&self, what: &str) -> Result<()> {
        match self.interactions {
            Interactions::Product => Ok(()),
            Interactions::Centered(_) => Err(GxeError::InvalidInput(format!(
                "{what} needs untransformed data"
            ))),
        }
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Coefficients in the decomposed parameterization `eta_kj = beta_j * gamma_kj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Row-major q x p.
    pub gamma: Vec<f64>,
}

impl CoefficientSet {
    pub fn zeros(q: usize, p: usize) -> Self {
        Self { alpha: vec![0.0; q], beta: vec![0.0; p], gamma: vec![0.0; q * p] }
    }
    pub fn q(&self) -> usize {
        self.alpha.len()
    }
    pub fn p(&self) -> usize {
        self.beta.len()
    }
    pub fn gamma(&self, k: usize, j: usize) -> f64 {
        self.gamma[k * self.p() + j]
    }

    /// Count of `gamma_kj != 0` with `beta_j == 0`.
    pub fn hierarchy_violations(&self) -> usize {
        let p = self.p();
        self.gamma
            .iter()
            .enumerate()
            .filter(|(idx, g)| **g != 0.0 && self.beta[idx % p] == 0.0)
            .count()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.gamma).all(|v| v.is_finite())
    }
}

/// `Theta = (alpha, beta, eta)` in the interaction-coefficient parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullEffects {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Row-major q x p.
    pub eta: Vec<f64>,
}

impl FullEffects {
    pub fn zeros(q: usize, p: usize) -> Self {
        Self { alpha: vec![0.0; q], beta: vec![0.0; p], eta: vec![0.0; q * p] }
    }
    pub fn q(&self) -> usize {
        self.alpha.len()
    }
    pub fn p(&self) -> usize {
        self.beta.len()
    }
    pub fn eta(&self, k: usize, j: usize) -> f64 {
        self.eta[k * self.p() + j]
    }

    pub fn pattern(&self) -> SparsityPattern {
        let p = self.p();
        let main = (0..p).filter(|&j| self.beta[j] != 0.0).collect();
        let interactions = (0..self.q())
            .map(|k| (0..p).filter(|&j| self.eta[k * p + j] != 0.0).collect())
            .collect();
        SparsityPattern { main, interactions }
    }

    /// Count of `eta_kj != 0` with `beta_j == 0`.
    pub fn hierarchy_violations(&self) -> usize {
        let p = self.p();
        self.eta
            .iter()
            .enumerate()
            .filter(|(idx, e)| **e != 0.0 && self.beta[idx % p] == 0.0)
            .count()
    }

    /// Number of nonzero G and interaction coefficients.
    pub fn nonzero_count(&self) -> usize {
        self.beta.iter().chain(&self.eta).filter(|v| **v != 0.0).count()
    }

    /// Concatenation `(alpha, beta, eta_1, ..., eta_q)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + self.beta.len() + self.eta.len());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.eta);
        v
    }
}

pub fn derive_full_effects(c: &CoefficientSet) -> FullEffects {
    let p = c.p();
    let eta = c
        .gamma
        .iter()
        .enumerate()
        .map(|(idx, g)| c.beta[idx % p] * g)
        .collect();
    FullEffects { alpha: c.alpha.clone(), beta: c.beta.clone(), eta }
}

/// Index sets of selected main effects and, per E factor, selected interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub main: Vec<usize>,
    pub interactions: Vec<Vec<usize>>,
}

impl SparsityPattern {
    pub fn empty(q: usize) -> Self {
        Self { main: Vec::new(), interactions: vec![Vec::new(); q] }
    }

    /// `|main| + sum_k |interactions_k|`.
    pub fn size(&self) -> usize {
        self.main.len() + self.interactions.iter().map(Vec::len).sum::<usize>()
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    pub fn satisfies_hierarchy(&self) -> bool {
        self.interactions
            .iter()
            .flatten()
            .all(|j| self.main.binary_search(j).is_ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StandardizePolicy {
    /// Center the response (linear outcomes).
    pub center_y: bool,
    /// Scale G columns to unit variance; when unset they are centered only.
    pub scale_g: bool,
}

impl StandardizePolicy {
    /// Genotype-like G columns are centered but keep their raw scale, so
    /// rare variants are not inflated to the size of common ones.
    pub fn for_dataset(d: &Dataset) -> Self {
        Self { center_y: !d.is_survival(), scale_g: false }
    }
}

/// Record of the column transforms applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub z_center: Vec<f64>,
    pub z_scale: Vec<f64>,
    pub z_binary: Vec<bool>,
    pub x_center: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_center: f64,
    pub zero_variance_x: Vec<usize>,
    pub zero_variance_z: Vec<usize>,
}

impl Scaling {
    /// Maps effects fitted on standardized columns back to original units.
    ///
    /// `intercept_std` is the constant of the standardized-scale predictor; the
    /// returned intercept is its original-scale counterpart.
    pub fn to_original(&self, effects: &FullEffects, intercept_std: f64) -> (f64, FullEffects) {
        let (q, p) = (effects.q(), effects.p());
        let mut eta = vec![0.0; q * p];
        for k in 0..q {
            for j in 0..p {
                let e = effects.eta[k * p + j];
                if e != 0.0 {
                    eta[k * p + j] = e / (self.z_scale[k] * self.x_scale[j]);
                }
            }
        }
        let mut beta = vec![0.0; p];
        for j in 0..p {
            let mut b = effects.beta[j] / self.x_scale[j];
            for k in 0..q {
                b -= eta[k * p + j] * self.z_center[k];
            }
            beta[j] = b;
        }
        let mut alpha = vec![0.0; q];
        for k in 0..q {
            let mut a = effects.alpha[k] / self.z_scale[k];
            for j in 0..p {
                a -= eta[k * p + j] * self.x_center[j];
            }
            alpha[k] = a;
        }
        let mut intercept = intercept_std;
        for k in 0..q {
            intercept -= effects.alpha[k] * self.z_center[k] / self.z_scale[k];
        }
        for j in 0..p {
            intercept -= effects.beta[j] * self.x_center[j] / self.x_scale[j];
        }
        for k in 0..q {
            for j in 0..p {
                intercept += eta[k * p + j] * self.z_center[k] * self.x_center[j];
            }
        }
        (intercept, FullEffects { alpha, beta, eta })
    }

    /// Applies the recorded transform to new data with the same columns.
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        d.require_product("scaling")?;
        if d.p() != self.x_center.len() || d.q() != self.z_center.len() {
            return Err(GxeError::DimensionMismatch("scaling record does not match data".into()));
        }
        let z = DMatrix::from_fn(d.n(), d.q(), |i, k| {
            (d.z()[(i, k)] - self.z_center[k]) / self.z_scale[k]
        });
        let x = DMatrix::from_fn(d.n(), d.p(), |i, j| {
            (d.x()[(i, j)] - self.x_center[j]) / self.x_scale[j]
        });
        let y = d.y().iter().map(|v| v - self.y_center).collect();
        let mut out = Dataset::new(y, d.delta.clone(), z, x)?;
        out.g_names = d.g_names.clone();
        Ok(out)
    }
}

fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn has_two_levels(v: &[f64]) -> bool {
    let first = v[0];
    match v.iter().find(|x| **x != first) {
        None => false,
        Some(&second) => v.iter().all(|x| *x == first || *x == second),
    }
}

const ZERO_VARIANCE: f64 = 1e-12;

/// Centers and scales columns.
///
/// G columns and continuous E columns get mean 0 and unit sample variance.
/// Two-level E columns are centered only. The response is centered when
/// `policy.center_y` is set. Zero-variance columns are centered, left
/// unscaled, and listed in the returned [`Scaling`].
pub fn standardize(d: &Dataset, policy: StandardizePolicy) -> Result<(Dataset, Scaling)> {
    d.require_product("standardization")?;
    let (q, p) = (d.q(), d.p());
    let mut z_center = vec![0.0; q];
    let mut z_scale = vec![1.0; q];
    let mut z_binary = vec![false; q];
    let mut zero_variance_z = Vec::new();
    for k in 0..q {
        let c = d.z_col(k);
        let (m, sd) = mean_and_sd(c);
        z_center[k] = m;
        if sd <= ZERO_VARIANCE * (1.0 + m.abs()) {
            zero_variance_z.push(k);
        } else if has_two_levels(c) {
            z_binary[k] = true;
        } else {
            z_scale[k] = sd;
        }
    }
    let mut x_center = vec![0.0; p];
    let mut x_scale = vec![1.0; p];
    let mut zero_variance_x = Vec::new();
    for j in 0..p {
        let (m, sd) = mean_and_sd(d.x_col(j));
        x_center[j] = m;
        if sd <= ZERO_VARIANCE * (1.0 + m.abs()) {
            zero_variance_x.push(j);
        } else if policy.scale_g {
            x_scale[j] = sd;
        }
    }
    let y_center = if policy.center_y {
        d.y.iter().sum::<f64>() / d.n() as f64
    } else {
        0.0
    };
    let scaling = Scaling {
        z_center,
        z_scale,
        z_binary,
        x_center,
        x_scale,
        y_center,
        zero_variance_x,
        zero_variance_z,
    };
    if !scaling.zero_variance_x.is_empty() {
        log::warn!("zero-variance G columns left unscaled: {:?}", scaling.zero_variance_x);
    }
    if !scaling.zero_variance_z.is_empty() {
        log::warn!("zero-variance E columns: {:?}", scaling.zero_variance_z);
    }
    let out = scaling.apply(d)?;
    Ok((out, scaling))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let z = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        Dataset::new(vec![1.0, 2.0, 3.0], None, z, x).unwrap()
    }

    #[test]
    fn zero_beta_annihilates_interactions() {
        let c = CoefficientSet { alpha: vec![0.3], beta: vec![1.0, 0.0], gamma: vec![2.0, 5.0] };
        let e = derive_full_effects(&c);
        assert_eq!(e.eta, vec![2.0, 0.0]);
        assert_eq!(e.alpha, vec![0.3]);
        assert_eq!(e.beta, vec![1.0, 0.0]);

        let c = CoefficientSet { alpha: vec![0.0; 2], beta: vec![0.0; 3], gamma: vec![1.5; 6] };
        assert!(derive_full_effects(&c).eta.iter().all(|v| *v == 0.0));

        let c = CoefficientSet { alpha: vec![0.0], beta: vec![0.5], gamma: vec![0.4] };
        assert!((derive_full_effects(&c).eta[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn interaction_columns() {
        let d = small();
        assert_eq!(d.interaction_column(0, 0).unwrap(), d.x_col(0).to_vec());
        assert_eq!(d.interaction_column(0, 1).unwrap(), vec![0.0; 3]);
        assert!(matches!(d.interaction_column(1, 0), Err(GxeError::IndexOutOfRange { .. })));
        assert!(matches!(d.interaction_column(0, 2), Err(GxeError::IndexOutOfRange { .. })));

        let z = DMatrix::from_row_slice(1, 1, &[2.0]);
        let x = DMatrix::from_row_slice(1, 1, &[3.0]);
        let d = Dataset::new(vec![0.0], None, z, x).unwrap();
        assert_eq!(d.interaction_column(0, 0).unwrap(), vec![6.0]);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let z = DMatrix::zeros(3, 1);
        let x = DMatrix::zeros(2, 1);
        assert!(Dataset::new(vec![0.0; 3], None, z.clone(), x).is_err());
        let x = DMatrix::from_element(3, 1, f64::NAN);
        assert!(Dataset::new(vec![0.0; 3], None, z.clone(), x).is_err());
        let x = DMatrix::zeros(3, 1);
        assert!(Dataset::new(vec![0.0; 3], Some(vec![true]), z, x).is_err());
    }

    #[test]
    fn standardize_flags_constant_columns() {
        let (s, rec) = standardize(&small(), StandardizePolicy { center_y: true, scale_g: true }).unwrap();
        assert_eq!(rec.zero_variance_x, vec![1]);
        assert_eq!(rec.zero_variance_z, vec![0]);
        assert!(s.x_col(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardize_scales_to_unit_variance() {
        // (0, 2, 4): mean 2, sample variance 4.
        let z = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.2]);
        let x = DMatrix::from_row_slice(3, 2, &[0.0, -1.0, 2.0, 1.0, 4.0, 0.0]);
        let d = Dataset::new(vec![1.0, 2.0, 3.0], None, z, x).unwrap();
        let (s, rec) = standardize(&d, StandardizePolicy { center_y: true, scale_g: true }).unwrap();
        let c = s.x_col(0);
        let mean: f64 = c.iter().sum::<f64>() / 3.0;
        let var: f64 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
        assert_eq!(rec.x_center[0], 2.0);
        assert_eq!(rec.x_scale[0], 2.0);
        assert_eq!(s.y(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn two_level_e_columns_are_only_centered() {
        let z = DMatrix::from_row_slice(4, 2, &[0.0, 0.3, 1.0, -1.2, 1.0, 0.8, 1.0, 2.0]);
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 1.0]);
        let d = Dataset::new(vec![0.0; 4], None, z, x).unwrap();
        let (s, rec) = standardize(&d, StandardizePolicy::default()).unwrap();
        assert_eq!(rec.z_binary, vec![true, false]);
        assert_eq!(rec.z_scale[0], 1.0);
        assert_eq!(s.z_col(0), &[-0.75, 0.25, 0.25, 0.25]);
    }
}
