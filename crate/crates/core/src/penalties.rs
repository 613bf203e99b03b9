//! Scalar penalties and the p x p structure matrix `J`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GxeError, Result};

/// Smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = -1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Components up to this size are checked with a dense eigensolve.
const DENSE_EIGEN_LIMIT: usize = 600;
const LANCZOS_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McpParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r: f64,
}

impl McpParams {
    pub fn new(lambda1: f64, lambda2: f64, r: f64) -> Result<Self> {
        let m = Self { lambda1, lambda2, r };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(GxeError::InvalidInput(format!("lambda1 = {} must be >= 0", self.lambda1)));
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(GxeError::InvalidInput(format!("lambda2 = {} must be >= 0", self.lambda2)));
        }
        if !(self.r.is_finite() && self.r > 1.0) {
            return Err(GxeError::InvalidInput(format!("r = {} must be > 1", self.r)));
        }
        Ok(())
    }
}

impl Default for McpParams {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, r: 3.0 }
    }
}

/// MCP `rho(|v|; lambda1, r) = lambda1 * int_0^|v| (1 - x / (lambda1 r))_+ dx`.
pub fn mcp_value(v: f64, m: &McpParams) -> f64 {
    let a = v.abs();
    let knot = m.lambda1 * m.r;
    if a <= knot {
        m.lambda1 * a - a * a / (2.0 * m.r)
    } else {
        0.5 * m.lambda1 * m.lambda1 * m.r
    }
}

/// Derivative of [`mcp_value`] for `v > 0`.
pub fn mcp_derivative(v: f64, m: &McpParams) -> f64 {
    let a = v.abs();
    if a <= m.lambda1 * m.r {
        v.signum() * (m.lambda1 - a / m.r)
    } else {
        0.0
    }
}

/// `sign(v) * max(|v| - t, 0)`.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Spline,
    Laplacian,
    Custom,
    /// All-zero J (no structure penalty).
    None,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PenaltyKind::Spline => "spline",
            PenaltyKind::Laplacian => "laplacian",
            PenaltyKind::Custom => "custom",
            PenaltyKind::None => "none",
        };
        f.write_str(s)
    }
}

/// Symmetric sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped. Symmetry is not enforced here.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); dim];
        for &(i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(GxeError::IndexOutOfRange { what: "matrix", index: i.max(j), size: dim });
            }
            if !v.is_finite() {
                return Err(GxeError::InvalidInput(format!("non-finite entry at ({i}, {j})")));
            }
            *rows[i].entry(j).or_insert(0.0) += v;
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (j, v) in row {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { dim, row_ptr, cols, vals })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, row_ptr: vec![0; dim + 1], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(pos) => self.vals[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.dim).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| self.row(i).map(|(j, a)| a * v[j]).sum()).collect()
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        (0..self.dim)
            .map(|i| {
                if v[i] == 0.0 {
                    0.0
                } else {
                    v[i] * self.row(i).map(|(j, a)| a * v[j]).sum::<f64>()
                }
            })
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// Largest `|a_ij - a_ji|` and where it occurs.
    pub fn symmetry_gap(&self) -> (f64, usize, usize) {
        let mut worst = (0.0, 0, 0);
        for (i, j, v) in self.triplets() {
            let gap = (v - self.get(j, i)).abs();
            if gap > worst.0 {
                worst = (gap, i, j);
            }
        }
        worst
    }

    /// Connected components of the off-diagonal sparsity graph.
    fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.dim];
        let mut out = Vec::new();
        for start in 0..self.dim {
            if label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            label[start] = id;
            let mut head = 0;
            while head < members.len() {
                let i = members[head];
                head += 1;
                for (j, _) in self.row(i) {
                    if label[j] == usize::MAX {
                        label[j] = id;
                        members.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }
}

/// Structure matrix `J` with its provenance and PSD status.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    matrix: SparseSym,
    diag: Vec<f64>,
    kind: PenaltyKind,
    psd_checked: bool,
}

impl PenaltyMatrix {
    pub fn new(matrix: SparseSym, kind: PenaltyKind) -> Self {
        let diag = (0..matrix.dim()).map(|i| matrix.get(i, i)).collect();
        Self { matrix, diag, kind, psd_checked: false }
    }

    /// All-zero J of size `p`.
    pub fn none(p: usize) -> Self {
        let mut m = Self::new(SparseSym::zeros(p), PenaltyKind::None);
        m.psd_checked = true;
        m
    }

    pub fn identity(p: usize) -> Self {
        let t: Vec<_> = (0..p).map(|i| (i, i, 1.0)).collect();
        let mut m = Self::new(SparseSym::from_triplets(p, &t).expect("in range"), PenaltyKind::Custom);
        m.psd_checked = true;
        m
    }

    pub fn from_triplets(p: usize, triplets: &[(usize, usize, f64)], kind: PenaltyKind) -> Result<Self> {
        Ok(Self::new(SparseSym::from_triplets(p, triplets)?, kind))
    }

    pub fn p(&self) -> usize {
        self.matrix.dim()
    }
    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }
    pub fn psd_checked(&self) -> bool {
        self.psd_checked
    }
    pub fn matrix(&self) -> &SparseSym {
        &self.matrix
    }
    #[inline]
    pub fn diag(&self, j: usize) -> f64 {
        self.diag[j]
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }
    pub fn is_zero(&self) -> bool {
        self.matrix.nnz() == 0
    }

    /// `sum_{l != j} J_jl v_l`.
    #[inline]
    pub fn off_diag_dot(&self, j: usize, v: &[f64]) -> f64 {
        self.matrix.row(j).filter(|(l, _)| *l != j).map(|(l, a)| a * v[l]).sum()
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.matrix.quad_form(v)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }

    /// Runs [`verify_psd`] and records the outcome. Built-in kinds that fail
    /// are rejected; custom matrices only log a warning.
    pub fn checked(mut self) -> Result<Self> {
        let report = verify_psd(&self)?;
        if !report.is_psd {
            if self.kind == PenaltyKind::Custom {
                log::warn!(
                    "custom penalty matrix has smallest eigenvalue {:.3e}",
                    report.min_eigenvalue
                );
            } else {
                return Err(GxeError::NotPsd { min_eigenvalue: report.min_eigenvalue });
            }
        }
        self.psd_checked = report.is_psd;
        Ok(self)
    }

    pub fn read_triplets(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut triplets = Vec::new();
        let mut dim = 0;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            let bad = || GxeError::Parse(format!("{}:{}: expected `row col value`", path.display(), lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let i: usize = fields[0].parse().map_err(|_| bad())?;
            let j: usize = fields[1].parse().map_err(|_| bad())?;
            let v: f64 = fields[2].parse().map_err(|_| bad())?;
            dim = dim.max(i + 1).max(j + 1);
            triplets.push((i, j, v));
        }
        Self::from_triplets(dim, &triplets, PenaltyKind::Custom)
    }

    /// Reads a triplet file and pads to dimension `p` (trailing isolated rows
    /// need not appear in the file).
    pub fn read_triplets_with_dim(path: &Path, p: usize) -> Result<Self> {
        let m = Self::read_triplets(path)?;
        if m.p() > p {
            return Err(GxeError::DimensionMismatch(format!(
                "penalty file has index {} but data has p = {p}",
                m.p() - 1
            )));
        }
        Self::from_triplets(p, &m.matrix.triplets(), PenaltyKind::Custom)
    }

    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, j, v) in self.matrix.triplets() {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        Ok(())
    }
}

/// Second-difference penalty `J = H'H` with `H` the (p-2) x p matrix of rows
/// `(1, -2, 1)`.
pub fn build_spline_penalty(p: usize) -> Result<PenaltyMatrix> {
    if p < 3 {
        return Err(GxeError::InvalidInput(format!(
            "spline penalty needs p >= 3 (got {p})"
        )));
    }
    const H: [f64; 3] = [1.0, -2.0, 1.0];
    let mut triplets = Vec::with_capacity(9 * (p - 2));
    for r in 0..p - 2 {
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((r + a, r + b, H[a] * H[b]));
            }
        }
    }
    let mut j = PenaltyMatrix::from_triplets(p, &triplets, PenaltyKind::Spline)?;
    // Gram matrix, PSD by construction.
    j.psd_checked = true;
    Ok(j)
}

/// Magnitude cutoff on Pearson correlation from the Fisher transform:
/// `tanh(z_{1 - alpha/2} / sqrt(n - 3))`.
pub fn fisher_cutoff(n: usize, alpha_cut: f64) -> Result<f64> {
    if n < 4 {
        return Err(GxeError::InvalidInput(format!("adjacency needs n >= 4 (got {n})")));
    }
    if !(alpha_cut > 0.0 && alpha_cut < 1.0) {
        return Err(GxeError::InvalidInput(format!("alpha_cut = {alpha_cut} must be in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha_cut / 2.0);
    Ok((z / ((n - 3) as f64).sqrt()).tanh())
}

/// Thresholded signed Pearson-correlation adjacency between the columns of `x`.
pub fn build_adjacency(x: &DMatrix<f64>, alpha_cut: f64) -> Result<SparseSym> {
    let (n, p) = (x.nrows(), x.ncols());
    let cut = fisher_cutoff(n, alpha_cut)?;
    let mut unit = Vec::with_capacity(n * p);
    for j in 0..p {
        let c = crate::data::col(x, j);
        let mean = c.iter().sum::<f64>() / n as f64;
        let norm = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 * (1.0 + mean.abs()) * (n as f64).sqrt() {
            unit.extend(c.iter().map(|v| (v - mean) / norm));
        } else {
            unit.extend(std::iter::repeat_n(0.0, n));
        }
    }
    let mut triplets = Vec::new();
    for j in 0..p {
        let a = &unit[j * n..(j + 1) * n];
        for l in j + 1..p {
            let b = &unit[l * n..(l + 1) * n];
            let r = crate::data::dot(a, b).clamp(-1.0, 1.0);
            if r.abs() > cut {
                triplets.push((j, l, r));
                triplets.push((l, j, r));
            }
        }
    }
    SparseSym::from_triplets(p, &triplets)
}

/// Normalized signed Laplacian `I - D^{-1/2} A D^{-1/2}` with
/// `D = diag(sum_l |a_jl|)`. Isolated nodes get a zero row and column.
pub fn build_laplacian_penalty(adjacency: &SparseSym) -> Result<PenaltyMatrix> {
    let p = adjacency.dim();
    let (gap, i, j) = adjacency.symmetry_gap();
    if gap > SYMMETRY_TOLERANCE {
        return Err(GxeError::NotSymmetric { row: i, col: j, gap });
    }
    let degree: Vec<f64> = (0..p)
        .map(|i| adjacency.row(i).filter(|(j, _)| *j != i).map(|(_, a)| a.abs()).sum())
        .collect();
    let mut triplets = Vec::with_capacity(adjacency.nnz() + p);
    for i in 0..p {
        if degree[i] > 0.0 {
            triplets.push((i, i, 1.0));
        }
        for (j, a) in adjacency.row(i) {
            if j != i && degree[i] > 0.0 && degree[j] > 0.0 {
                triplets.push((i, j, -a / (degree[i] * degree[j]).sqrt()));
            }
        }
    }
    let j = PenaltyMatrix::from_triplets(p, &triplets, PenaltyKind::Laplacian)?;
    j.checked()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

/// Estimates the smallest eigenvalue of `J`, component by component.
///
/// Components with at most 600 nodes use a dense symmetric eigensolve; larger
/// ones use Lanczos with full reorthogonalization.
pub fn verify_psd(j: &PenaltyMatrix) -> Result<PsdReport> {
    let m = j.matrix();
    let (gap, r, c) = m.symmetry_gap();
    let scale = m.vals.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    if gap > SYMMETRY_TOLERANCE * scale {
        return Err(GxeError::NotSymmetric { row: r, col: c, gap });
    }
    let mut min_eig = f64::INFINITY;
    for comp in m.components() {
        let local = |i: usize| comp.binary_search(&i).expect("component member");
        let size = comp.len();
        let lam = if size <= DENSE_EIGEN_LIMIT {
            let mut dense = DMatrix::zeros(size, size);
            for (a, &i) in comp.iter().enumerate() {
                for (jj, v) in m.row(i) {
                    dense[(a, local(jj))] = v;
                }
            }
            SymmetricEigen::new(dense).eigenvalues.min()
        } else {
            let sub = {
                let mut t = Vec::new();
                for (a, &i) in comp.iter().enumerate() {
                    for (jj, v) in m.row(i) {
                        t.push((a, local(jj), v));
                    }
                }
                SparseSym::from_triplets(size, &t)?
            };
            lanczos_min_eigenvalue(&sub, LANCZOS_STEPS.min(size))
        };
        min_eig = min_eig.min(lam);
    }
    if min_eig == f64::INFINITY {
        min_eig = 0.0;
    }
    Ok(PsdReport { is_psd: min_eig >= PSD_TOLERANCE, min_eigenvalue: min_eig })
}

fn lanczos_min_eigenvalue(m: &SparseSym, steps: usize) -> f64 {
    let n = m.dim();
    // Deterministic start vector with no special alignment to the graph.
    let mut v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for step in 0..steps {
        let mut w = m.mul_vec(&basis[step]);
        let a: f64 = crate::data::dot(&w, &basis[step]);
        alphas.push(a);
        for b in &basis {
            let c = crate::data::dot(&w, b);
            crate::data::axpy(-c, b, &mut w);
        }
        for b in &basis {
            let c = crate::data::dot(&w, b);
            crate::data::axpy(-c, b, &mut w);
        }
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if beta < 1e-12 || step + 1 == steps {
            break;
        }
        betas.push(beta);
        w.iter_mut().for_each(|x| *x /= beta);
        basis.push(w);
    }
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    SymmetricEigen::new(t).eigenvalues.min()
}

/// Smallest eigenvalue of a small dense symmetric matrix.
pub fn dense_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(l1: f64, l2: f64, r: f64) -> McpParams {
        McpParams::new(l1, l2, r).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn mcp_values() {
        assert_eq!(mcp_value(0.0, &m(0.1, 0.0, 3.0)), 0.0);
        assert!((mcp_value(1.0, &m(0.1, 0.0, 3.0)) - 0.015).abs() < 1e-15);
        // Quadrature of the defining integrand.
        let p = m(0.2, 0.0, 3.0);
        let integrand = |x: f64| p.lambda1 * (1.0 - x / (p.lambda1 * p.r)).max(0.0);
        let oracle = simpson(integrand, 0.0, 0.1, 1000);
        assert!((oracle - 0.0183333333).abs() < 1e-9);
        assert!((mcp_value(0.1, &p) - oracle).abs() < 1e-12);
        assert_eq!(mcp_value(-0.1, &p), mcp_value(0.1, &p));
    }

    #[test]
    fn soft_threshold_cases() {
        assert!((soft_threshold(0.5, 0.2) - 0.3).abs() < 1e-15);
        assert!((soft_threshold(-0.5, 0.2) + 0.3).abs() < 1e-15);
        assert_eq!(soft_threshold(0.1, 0.2), 0.0);
    }

    #[test]
    fn mcp_params_validation() {
        assert!(McpParams::new(0.1, 0.1, 1.0).is_err());
        assert!(McpParams::new(-0.1, 0.1, 3.0).is_err());
        assert!(McpParams::new(0.1, f64::NAN, 3.0).is_err());
    }

    fn explicit_hth(p: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(p - 2, p);
        for r in 0..p - 2 {
            h[(r, r)] = 1.0;
            h[(r, r + 1)] = -2.0;
            h[(r, r + 2)] = 1.0;
        }
        h.transpose() * h
    }

    #[test]
    fn spline_small_matrices() {
        let j3 = build_spline_penalty(3).unwrap().to_dense();
        let want3 = DMatrix::from_row_slice(3, 3, &[1., -2., 1., -2., 4., -2., 1., -2., 1.]);
        assert_eq!(j3, want3);
        assert_eq!(j3, explicit_hth(3));
        let j4 = build_spline_penalty(4).unwrap().to_dense();
        let want4 = DMatrix::from_row_slice(
            4,
            4,
            &[1., -2., 1., 0., -2., 5., -4., 1., 1., -4., 5., -2., 0., 1., -2., 1.],
        );
        assert_eq!(j4, want4);
        for p in 5..12 {
            assert_eq!(build_spline_penalty(p).unwrap().to_dense(), explicit_hth(p));
        }
        assert!(build_spline_penalty(2).is_err());
    }

    #[test]
    fn laplacian_small_graphs() {
        let a = SparseSym::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let j = build_laplacian_penalty(&a).unwrap().to_dense();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));

        let j = build_laplacian_penalty(&SparseSym::zeros(3)).unwrap();
        assert!(j.to_dense().iter().all(|v| *v == 0.0));

        let a = SparseSym::from_triplets(3, &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)])
            .unwrap();
        let j = build_laplacian_penalty(&a).unwrap().to_dense();
        let s = 1.0 / 2f64.sqrt();
        let want = DMatrix::from_row_slice(3, 3, &[1., -s, 0., -s, 1., -s, 0., -s, 1.]);
        assert!((j - want).abs().max() < 1e-15);
    }

    #[test]
    fn laplacian_rejects_asymmetric_adjacency() {
        let a = SparseSym::from_triplets(2, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(build_laplacian_penalty(&a), Err(GxeError::NotSymmetric { .. })));
    }

    #[test]
    fn psd_checks() {
        let j = PenaltyMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)], PenaltyKind::Custom).unwrap();
        let r = verify_psd(&j).unwrap();
        assert!(!r.is_psd);
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-12);
        assert!(j.clone().checked().is_ok());
        let builtin = PenaltyMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)], PenaltyKind::Laplacian).unwrap();
        assert!(matches!(builtin.checked(), Err(GxeError::NotPsd { .. })));

        let asym = PenaltyMatrix::from_triplets(2, &[(0, 1, 1.0)], PenaltyKind::Custom).unwrap();
        assert!(verify_psd(&asym).is_err());

        for p in [3, 10, 700, 2000] {
            let r = verify_psd(&build_spline_penalty(p).unwrap()).unwrap();
            assert!(r.is_psd, "p={p} min={}", r.min_eigenvalue);
        }
    }

    #[test]
    fn lanczos_detects_negative_eigenvalue_in_large_component() {
        // Path graph plus one negative diagonal entry: dense oracle on a
        // 700-node component against the Lanczos route.
        let n = 700;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, if i == 350 { -3.0 } else { 2.0 }));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let j = PenaltyMatrix::from_triplets(n, &t, PenaltyKind::Custom).unwrap();
        let dense = dense_min_eigenvalue(&j.to_dense());
        let r = verify_psd(&j).unwrap();
        assert!(!r.is_psd);
        assert!((r.min_eigenvalue - dense).abs() < 1e-6, "{} vs {dense}", r.min_eigenvalue);
    }

    #[test]
    fn adjacency_extremes() {
        let x = DMatrix::from_row_slice(5, 3, &[
            1., 1., -1., 2., 2., -2., 0.5, 0.5, -0.5, 3., 3., -3., 1.5, 1.5, -1.5,
        ]);
        let a = build_adjacency(&x, 0.05).unwrap();
        assert!((a.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((a.get(0, 2) + 1.0).abs() < 1e-12);
        assert_eq!(a.get(0, 0), 0.0);
        // Constant column is unconnected.
        let x = DMatrix::from_row_slice(4, 2, &[1., 5., 2., 5., 3., 5., 4., 5.]);
        assert_eq!(build_adjacency(&x, 0.05).unwrap().nnz(), 0);
        assert!(build_adjacency(&DMatrix::zeros(3, 2), 0.05).is_err());
    }

    #[test]
    fn triplet_file_roundtrip() {
        let j = build_spline_penalty(6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.txt");
        j.write_triplets(std::fs::File::create(&path).unwrap()).unwrap();
        let back = PenaltyMatrix::read_triplets_with_dim(&path, 6).unwrap();
        assert_eq!(back.to_dense(), j.to_dense());
        assert_eq!(back.kind(), PenaltyKind::Custom);
        assert!(PenaltyMatrix::read_triplets_with_dim(&path, 4).is_err());
    }
}
