//! Simulated G-E data: SNP-like genotypes, E factors, smooth sparse truth, and
//! linear or AFT responses.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, FullEffects, SparsityPattern};
use crate::error::{GxeError, Result};

pub const DEFAULT_P: usize = 5000;
pub const DEFAULT_Q: usize = 5;
pub const DEFAULT_N_LINEAR: usize = 250;
pub const DEFAULT_N_AFT: usize = 350;
pub const TARGET_CENSORING: f64 = 0.2;
const PILOT_ROWS: usize = 100_000;
const SIGNAL_COLUMNS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    /// Trichotomized latent Gaussian.
    A1,
    /// Pairwise-LD Markov chain of genotypes.
    A2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Correlation {
    Ar(f64),
    Band1,
    Band2,
    Ld(f64),
}

impl Correlation {
    pub fn generator(self) -> Generator {
        match self {
            Correlation::Ld(_) => Generator::A2,
            _ => Generator::A1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MafProfile {
    M1,
    M2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Linear,
    Aft,
}

/// Genotype category cut points on the latent standard-normal scale, given as
/// cumulative probabilities `(P(0), P(0) + P(1))`.
pub const M1_QUANTILES: (f64, f64) = (0.91, 0.99);
pub const M2_QUANTILES: (f64, f64) = (0.73, 0.97);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub generator: Generator,
    pub correlation: Correlation,
    pub maf: MafProfile,
    pub outcome: Outcome,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Scenario with the default sizes for its outcome.
    pub fn new(correlation: Correlation, maf: MafProfile, outcome: Outcome) -> Self {
        let n = match outcome {
            Outcome::Linear => DEFAULT_N_LINEAR,
            Outcome::Aft => DEFAULT_N_AFT,
        };
        Self {
            generator: correlation.generator(),
            correlation,
            maf,
            outcome,
            n,
            p: DEFAULT_P,
            q: DEFAULT_Q,
            seed: 0,
        }
    }

    pub fn with_size(mut self, n: usize, p: usize) -> Self {
        self.n = n;
        self.p = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let legal = match (self.generator, self.correlation) {
            (Generator::A1, Correlation::Ar(r)) => (0.0..1.0).contains(&r.abs()),
            (Generator::A1, Correlation::Band1 | Correlation::Band2) => true,
            (Generator::A2, Correlation::Ld(r)) => (0.0..=1.0).contains(&r),
            _ => false,
        };
        if !legal {
            return Err(GxeError::InvalidInput(format!(
                "generator {:?} cannot be combined with correlation {:?}",
                self.generator, self.correlation
            )));
        }
        if self.p < SIGNAL_COLUMNS {
            return Err(GxeError::InvalidInput(format!("p must be >= {SIGNAL_COLUMNS}, got {}", self.p)));
        }
        if self.q < 3 {
            return Err(GxeError::InvalidInput(format!("q must be >= 3, got {}", self.q)));
        }
        if self.n < 2 {
            return Err(GxeError::InvalidInput("n must be >= 2".into()));
        }
        Ok(())
    }

    /// Short name such as `ar03-m1-linear` or `ld05-m2-aft`.
    pub fn name(&self) -> String {
        let corr = match self.correlation {
            Correlation::Ar(r) => format!("ar{:02}", (r * 10.0).round() as i64),
            Correlation::Band1 => "band1".into(),
            Correlation::Band2 => "band2".into(),
            Correlation::Ld(r) => format!("ld{:02}", (r * 10.0).round() as i64),
        };
        let maf = match self.maf {
            MafProfile::M1 => "m1",
            MafProfile::M2 => "m2",
        };
        let out = match self.outcome {
            Outcome::Linear => "linear",
            Outcome::Aft => "aft",
        };
        format!("{corr}-{maf}-{out}")
    }

    /// All 24 scenarios at default sizes.
    pub fn all() -> Vec<ScenarioSpec> {
        let corrs = [
            Correlation::Ar(0.3),
            Correlation::Ar(0.5),
            Correlation::Band1,
            Correlation::Band2,
            Correlation::Ld(0.3),
            Correlation::Ld(0.5),
        ];
        let mut out = Vec::with_capacity(24);
        for outcome in [Outcome::Linear, Outcome::Aft] {
            for maf in [MafProfile::M1, MafProfile::M2] {
                for c in corrs {
                    out.push(ScenarioSpec::new(c, maf, outcome));
                }
            }
        }
        out
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ScenarioSpec {
    type Err = GxeError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            GxeError::Parse(format!(
                "unknown scenario '{s}'; expected <ar03|ar05|band1|band2|ld03|ld05>-<m1|m2>-<linear|aft>"
            ))
        };
        let lower = s.trim().to_ascii_lowercase();
        let mut it = lower.split('-');
        let (c, m, o) = match (it.next(), it.next(), it.next(), it.next()) {
            (Some(c), Some(m), Some(o), None) => (c, m, o),
            _ => return Err(bad()),
        };
        let correlation = match c {
            "band1" => Correlation::Band1,
            "band2" => Correlation::Band2,
            _ if c.starts_with("ar") || c.starts_with("ld") => {
                let digits = &c[2..];
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let v = digits.parse::<u32>().map_err(|_| bad())? as f64 / 10.0;
                if c.starts_with("ar") {
                    Correlation::Ar(v)
                } else {
                    Correlation::Ld(v)
                }
            }
            _ => return Err(bad()),
        };
        let maf = match m {
            "m1" => MafProfile::M1,
            "m2" => MafProfile::M2,
            _ => return Err(bad()),
        };
        let outcome = match o {
            "linear" => Outcome::Linear,
            "aft" => Outcome::Aft,
            _ => return Err(bad()),
        };
        Ok(ScenarioSpec::new(correlation, maf, outcome))
    }
}

/// Ground truth for a simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSet {
    pub theta0: FullEffects,
    pub pattern0: SparsityPattern,
}

/// Deterministic generator for one purpose of one replicate.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Per-column genotype cut points for an A1 profile. The second half of the
/// columns switches to the higher-MAF quantiles under `M2`.
pub fn a1_quantiles(p: usize, maf: MafProfile) -> Vec<(f64, f64)> {
    (0..p)
        .map(|j| match maf {
            MafProfile::M1 => M1_QUANTILES,
            MafProfile::M2 if j < p / 2 => M1_QUANTILES,
            MafProfile::M2 => M2_QUANTILES,
        })
        .collect()
}

/// Per-column minor allele frequencies for an A2 profile (`M2` alternates).
pub fn a2_mafs(p: usize, maf: MafProfile) -> Vec<f64> {
    (0..p)
        .map(|j| match maf {
            MafProfile::M2 if j % 2 == 1 => 0.15,
            _ => 0.05,
        })
        .collect()
}

/// Lower Cholesky factor of a stationary banded correlation matrix, stored
/// row-wise as `l[i][m] = L[i, i - b + m]`.
struct BandedCholesky {
    b: usize,
    l: Vec<Vec<f64>>,
}

impl BandedCholesky {
    fn new(p: usize, lags: &[f64]) -> Result<Self> {
        let b = lags.len() - 1;
        let mut l = vec![vec![0.0; b + 1]; p];
        let get = |l: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
            if j > i || i - j > b {
                0.0
            } else {
                l[i][b - (i - j)]
            }
        };
        for i in 0..p {
            let lo = i.saturating_sub(b);
            for jj in lo..=i {
                let mut s = lags[i - jj];
                for k in lo.max(jj.saturating_sub(b))..jj {
                    s -= get(&l, i, k) * get(&l, jj, k);
                }
                if jj == i {
                    if !(s > 0.0) {
                        return Err(GxeError::NotPsd { min_eigenvalue: s });
                    }
                    l[i][b] = s.sqrt();
                } else {
                    l[i][b - (i - jj)] = s / l[jj][b];
                }
            }
        }
        Ok(Self { b, l })
    }

    fn apply(&self, e: &[f64], out: &mut [f64]) {
        for i in 0..out.len() {
            let lo = i.saturating_sub(self.b);
            out[i] = (lo..=i).map(|k| self.l[i][self.b - (i - k)] * e[k]).sum();
        }
    }
}

fn latent_rows<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    corr: Correlation,
    rng: &mut R,
    mut emit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let mut e = vec![0.0; p];
    let mut row = vec![0.0; p];
    match corr {
        Correlation::Ar(rho) => {
            let s = (1.0 - rho * rho).sqrt();
            for i in 0..n {
                let mut prev: f64 = rng.sample(StandardNormal);
                row[0] = prev;
                for v in row.iter_mut().skip(1) {
                    let z: f64 = rng.sample(StandardNormal);
                    prev = rho * prev + s * z;
                    *v = prev;
                }
                emit(i, &row);
            }
        }
        Correlation::Band1 | Correlation::Band2 => {
            let lags: &[f64] = if corr == Correlation::Band1 { &[1.0, 0.3] } else { &[1.0, 0.5, 0.3] };
            let chol = BandedCholesky::new(p, lags)?;
            for i in 0..n {
                for v in e.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                chol.apply(&e, &mut row);
                emit(i, &row);
            }
        }
        Correlation::Ld(_) => {
            return Err(GxeError::InvalidInput("LD correlation belongs to the A2 generator".into()))
        }
    }
    Ok(())
}

/// A1 genotypes: latent multivariate normal rows cut at per-column quantiles.
pub fn gen_genotypes_a1_with<R: Rng + ?Sized>(
    n: usize,
    corr: Correlation,
    quantiles: &[(f64, f64)],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = quantiles.len();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let cuts: Vec<(f64, f64)> = quantiles
        .iter()
        .map(|&(a, b)| {
            if !(0.0 < a && a < b && b < 1.0) {
                return Err(GxeError::InvalidInput(format!("bad genotype quantiles ({a}, {b})")));
            }
            Ok((std.inverse_cdf(a), std.inverse_cdf(b)))
        })
        .collect::<Result<_>>()?;
    let mut x = DMatrix::zeros(n, p);
    latent_rows(n, p, corr, rng, |i, row| {
        for (j, (&v, &(t1, t2))) in row.iter().zip(&cuts).enumerate() {
            x[(i, j)] = if v < t1 {
                0.0
            } else if v < t2 {
                1.0
            } else {
                2.0
            };
        }
    })?;
    Ok(x)
}

pub fn gen_genotypes_a1<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    corr: Correlation,
    maf: MafProfile,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    gen_genotypes_a1_with(n, corr, &a1_quantiles(p, maf), rng)
}

/// Hardy-Weinberg genotype probabilities `(P(aa), P(Aa), P(AA))` for minor
/// allele frequency `pa`, indexed by minor-allele count.
pub fn hwe(pa: f64) -> [f64; 3] {
    [(1.0 - pa) * (1.0 - pa), 2.0 * pa * (1.0 - pa), pa * pa]
}

/// Haplotype frequencies `(ab, aB, Ab, AB)` for adjacent loci.
pub fn haplotype_frequencies(pa: f64, pb: f64, r_ld: f64) -> Result<[f64; 4]> {
    let phi = r_ld * (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
    let h = [
        (1.0 - pa) * (1.0 - pb) + phi,
        (1.0 - pa) * pb - phi,
        pa * (1.0 - pb) - phi,
        pa * pb + phi,
    ];
    if h.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
        return Err(GxeError::InvalidInput(format!(
            "infeasible LD: r_LD={r_ld} with MAFs ({pa}, {pb}) gives haplotype frequencies {h:?}"
        )));
    }
    Ok(h.map(|v| v.clamp(0.0, 1.0)))
}

/// Joint genotype distribution of two adjacent loci under HWE: entry
/// `[ga][gb]` for minor-allele counts `ga`, `gb`.
pub fn joint_genotype_table(pa: f64, pb: f64, r_ld: f64) -> Result<[[f64; 3]; 3]> {
    let h = haplotype_frequencies(pa, pb, r_ld)?;
    // Haplotype index bits: bit 1 = A carried, bit 0 = B carried.
    let mut t = [[0.0; 3]; 3];
    for (h1, f1) in h.iter().enumerate() {
        for (h2, f2) in h.iter().enumerate() {
            let ga = (h1 >> 1) + (h2 >> 1);
            let gb = (h1 & 1) + (h2 & 1);
            t[ga][gb] += f1 * f2;
        }
    }
    Ok(t)
}

/// A2 genotypes: HWE at the first locus, then a first-order Markov chain
/// along the columns using the conditional adjacent-pair tables.
pub fn gen_genotypes_a2_with<R: Rng + ?Sized>(
    n: usize,
    r_ld: f64,
    mafs: &[f64],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = mafs.len();
    if p == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    // cond[j][ga] = cumulative distribution of locus j given locus j-1.
    let mut cond = Vec::with_capacity(p.saturating_sub(1));
    for j in 1..p {
        let t = joint_genotype_table(mafs[j - 1], mafs[j], r_ld)?;
        let mut c = [[0.0; 3]; 3];
        for ga in 0..3 {
            let tot: f64 = t[ga].iter().sum();
            let mut acc = 0.0;
            for gb in 0..3 {
                acc += if tot > 0.0 { t[ga][gb] / tot } else { hwe(mafs[j])[gb] };
                c[ga][gb] = acc;
            }
        }
        cond.push(c);
    }
    let first = hwe(mafs[0]);
    let first_cdf = [first[0], first[0] + first[1], 1.0];
    let draw = |cdf: &[f64; 3], u: f64| -> usize {
        if u < cdf[0] {
            0
        } else if u < cdf[1] {
            1
        } else {
            2
        }
    };
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut g = draw(&first_cdf, rng.random::<f64>());
        x[(i, 0)] = g as f64;
        for j in 1..p {
            g = draw(&cond[j - 1][g], rng.random::<f64>());
            x[(i, j)] = g as f64;
        }
    }
    Ok(x)
}

pub fn gen_genotypes_a2<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    r_ld: f64,
    maf: MafProfile,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    gen_genotypes_a2_with(n, r_ld, &a2_mafs(p, maf), rng)
}

/// Five E factors: AR(0.3) standard normals, the last two cut at zero.
pub fn gen_e_factors<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    gen_e_factors_q(n, DEFAULT_Q, rng)
}

/// `q` E factors with the same construction; the last two are binary when
/// `q >= 5`.
pub fn gen_e_factors_q<R: Rng + ?Sized>(n: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    let rho: f64 = 0.3;
    let s = (1.0 - rho * rho).sqrt();
    let n_binary = if q >= 5 { 2 } else { 0 };
    let mut z = DMatrix::zeros(n, q);
    for i in 0..n {
        let mut prev = 0.0;
        for k in 0..q {
            let e: f64 = rng.sample(StandardNormal);
            prev = if k == 0 { e } else { rho * prev + s * e };
            z[(i, k)] = if k + n_binary >= q { f64::from(prev > 0.0) } else { prev };
        }
    }
    z
}

/// Nonzero main effects on the 1-based SNP index `j`.
pub fn true_beta(j: usize) -> f64 {
    let jf = j as f64;
    match j {
        1..=10 => (0.2 * jf + 0.9).sin() + 0.2,
        11..=15 => 0.5 * (jf - 10.0),
        16..=20 => 0.5 * (21.0 - jf),
        _ => 0.0,
    }
}

/// Nonzero interactions for the 1-based E index `k` and SNP index `j`.
pub fn true_eta(k: usize, j: usize) -> f64 {
    let jf = j as f64;
    match (k, j) {
        (1, 1..=5) => 0.2 * jf + 0.2,
        (1, 6..=10) => 0.2 * (11.0 - jf) + 0.2,
        (2, 11..=15) => 0.2 * (3.0 * jf - 32.0).sqrt(),
        (2, 16..=20) => 0.2 * (63.0 - 3.0 * jf).sqrt(),
        (3, 1..=10) => -(0.2 * jf - 0.9).powi(2) + 1.5,
        (3, 11..=20) => -(0.2 * jf - 3.2).powi(2) + 1.6,
        _ => 0.0,
    }
}

pub fn true_coefficients<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> Result<TruthSet> {
    if p < SIGNAL_COLUMNS {
        return Err(GxeError::InvalidInput(format!("p must be >= {SIGNAL_COLUMNS}, got {p}")));
    }
    if q < 3 {
        return Err(GxeError::InvalidInput(format!("q must be >= 3, got {q}")));
    }
    let unif = Uniform::new(0.8, 1.2).expect("valid range");
    let alpha: Vec<f64> = (0..q).map(|_| unif.sample(rng)).collect();
    let beta: Vec<f64> = (1..=p).map(true_beta).collect();
    let mut eta = vec![0.0; q * p];
    for k in 0..q {
        for j in 0..p {
            eta[k * p + j] = true_eta(k + 1, j + 1);
        }
    }
    let theta0 = FullEffects { alpha, beta, eta };
    let pattern0 = theta0.pattern();
    Ok(TruthSet { theta0, pattern0 })
}

/// `Z alpha + X beta + sum_k (Z_k * X) eta_k` row by row (no intercept).
pub fn signal(z: &DMatrix<f64>, x: &DMatrix<f64>, truth: &FullEffects) -> Vec<f64> {
    let (n, p, q) = (x.nrows(), x.ncols(), z.ncols());
    let active: Vec<usize> = (0..p)
        .filter(|&j| truth.beta[j] != 0.0 || (0..q).any(|k| truth.eta[k * p + j] != 0.0))
        .collect();
    (0..n)
        .map(|i| {
            let mut s: f64 = (0..q).map(|k| z[(i, k)] * truth.alpha[k]).sum();
            for &j in &active {
                let xij = x[(i, j)];
                if xij == 0.0 {
                    continue;
                }
                s += xij * truth.beta[j];
                s += (0..q).map(|k| z[(i, k)] * xij * truth.eta[k * p + j]).sum::<f64>();
            }
            s
        })
        .collect()
}

/// Response from the true model. For `Aft`, returns observed log-times,
/// event indicators and the censoring rate used.
pub fn gen_response<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    truth: &FullEffects,
    outcome: Outcome,
    censoring_rate: Option<f64>,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<Vec<bool>>)> {
    if z.nrows() != x.nrows() || truth.q() != z.ncols() || truth.p() != x.ncols() {
        return Err(GxeError::DimensionMismatch(format!(
            "Z is {}x{}, X is {}x{}, truth has q={} p={}",
            z.nrows(),
            z.ncols(),
            x.nrows(),
            x.ncols(),
            truth.q(),
            truth.p()
        )));
    }
    let mut y = signal(z, x, truth);
    for v in y.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += e;
    }
    match outcome {
        Outcome::Linear => Ok((y, None)),
        Outcome::Aft => {
            let rate = censoring_rate.ok_or_else(|| {
                GxeError::InvalidInput("AFT responses need a censoring rate".into())
            })?;
            let exp = Exp::new(rate).map_err(|e| GxeError::InvalidInput(e.to_string()))?;
            let mut delta = Vec::with_capacity(y.len());
            for v in y.iter_mut() {
                let c: f64 = exp.sample(rng);
                let log_c = c.ln();
                delta.push(*v <= log_c);
                *v = v.min(log_c);
            }
            Ok((y, Some(delta)))
        }
    }
}

/// Expected censoring fraction `mean(1 - exp(-rate T_i))` for log-times.
pub fn expected_censoring(log_t: &[f64], rate: f64) -> f64 {
    log_t.iter().map(|lt| -(-rate * lt.exp()).exp_m1()).sum::<f64>() / log_t.len() as f64
}

/// Exponential censoring rate giving `target` expected censoring on the
/// supplied event log-times, by bisection on the log scale.
pub fn calibrate_censoring_rate(log_t: &[f64], target: f64) -> Result<f64> {
    if log_t.is_empty() || !(0.0 < target && target < 1.0) {
        return Err(GxeError::InvalidInput("censoring calibration needs times and a target in (0,1)".into()));
    }
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(log_t, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

fn gen_x<R: Rng + ?Sized>(spec: &ScenarioSpec, n: usize, p_cols: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    match spec.correlation {
        Correlation::Ld(r) => {
            let mafs = a2_mafs(spec.p, spec.maf);
            gen_genotypes_a2_with(n, r, &mafs[..p_cols], rng)
        }
        c => {
            let qs = a1_quantiles(spec.p, spec.maf);
            gen_genotypes_a1_with(n, c, &qs[..p_cols], rng)
        }
    }
}

/// One simulated replicate: training data, an independent test set, truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub spec: ScenarioSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub truth: TruthSet,
    pub censoring_rate: Option<f64>,
}

impl SimulatedData {
    /// Observed censoring fraction in the training data.
    pub fn censoring_fraction(&self) -> Option<f64> {
        self.train
            .delta()
            .map(|d| d.iter().filter(|e| !**e).count() as f64 / d.len() as f64)
    }
}

const STREAM_TRUTH: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_PILOT: u64 = 3;
const STREAMS_PER_REPLICATE: u64 = 8;

/// Simulates replicate `replicate` of `spec` with `spec.seed` as the master
/// seed. Every replicate and purpose draws from its own stream.
pub fn simulate(spec: &ScenarioSpec, test_n: usize, replicate: u64) -> Result<SimulatedData> {
    spec.validate()?;
    let base = replicate * STREAMS_PER_REPLICATE;
    let mut rng = stream_rng(spec.seed, base + STREAM_TRUTH);
    let truth = true_coefficients(spec.p, spec.q, &mut rng)?;

    let censoring_rate = match spec.outcome {
        Outcome::Linear => None,
        Outcome::Aft => {
            let mut rng = stream_rng(spec.seed, base + STREAM_PILOT);
            let cols = SIGNAL_COLUMNS.min(spec.p);
            let x = gen_x(spec, PILOT_ROWS, cols, &mut rng)?;
            let z = gen_e_factors_q(PILOT_ROWS, spec.q, &mut rng);
            let t = &truth.theta0;
            let small = FullEffects {
                alpha: t.alpha.clone(),
                beta: t.beta[..cols].to_vec(),
                eta: (0..spec.q).flat_map(|k| t.eta[k * spec.p..k * spec.p + cols].to_vec()).collect(),
            };
            let (log_t, _) = gen_response(&z, &x, &small, Outcome::Linear, None, &mut rng)?;
            Some(calibrate_censoring_rate(&log_t, TARGET_CENSORING)?)
        }
    };

    let make = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = stream_rng(spec.seed, base + stream);
        let x = gen_x(spec, n, spec.p, &mut rng)?;
        let z = gen_e_factors_q(n, spec.q, &mut rng);
        let (y, delta) = gen_response(&z, &x, &truth.theta0, spec.outcome, censoring_rate, &mut rng)?;
        Dataset::new(y, delta, z, x)
    };
    let train = make(spec.n, STREAM_TRAIN)?;
    let test = make(test_n, STREAM_TEST)?;
    Ok(SimulatedData { spec: *spec, train, test, truth, censoring_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freq(x: &DMatrix<f64>, j: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..x.nrows() {
            c[x[(i, j)] as usize] += 1.0;
        }
        c.map(|v| v / x.nrows() as f64)
    }

    #[test]
    fn scenario_names_roundtrip() {
        let all = ScenarioSpec::all();
        assert_eq!(all.len(), 24);
        for s in &all {
            let back: ScenarioSpec = s.name().parse().unwrap();
            assert_eq!(back.name(), s.name());
            assert_eq!(back.correlation, s.correlation);
            s.validate().unwrap();
        }
        assert!("ar03-m3-linear".parse::<ScenarioSpec>().is_err());
        assert!("ld05-m1".parse::<ScenarioSpec>().is_err());
        let s: ScenarioSpec = "ar03-m1-linear".parse().unwrap();
        assert_eq!((s.n, s.p, s.q), (250, 5000, 5));
        assert_eq!("ld05-m2-aft".parse::<ScenarioSpec>().unwrap().n, 350);
    }

    #[test]
    fn illegal_combination() {
        let mut s = ScenarioSpec::new(Correlation::Ar(0.3), MafProfile::M1, Outcome::Linear);
        s.generator = Generator::A2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn truth_counts_and_values() {
        let t = true_coefficients(100, 5, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(t.pattern0.main.len(), 20);
        assert_eq!(t.pattern0.interaction_count(), 40);
        assert!(t.pattern0.satisfies_hierarchy());
        assert!((t.theta0.beta[0] - 1.09121).abs() < 1e-5);
        assert!((t.theta0.eta(0, 5) - 1.2).abs() < 1e-12);
        assert_eq!(t.theta0.beta[20], 0.0);
        assert!(t.theta0.alpha.iter().all(|a| (0.8..1.2).contains(a)));
        assert!(true_coefficients(19, 5, &mut stream_rng(1, 0)).is_err());
    }

    #[test]
    fn a1_marginals() {
        let mut rng = stream_rng(3, 0);
        let x = gen_genotypes_a1(10_000, 6, Correlation::Ar(0.3), MafProfile::M2, &mut rng).unwrap();
        for (j, want) in [(0, [0.91f64, 0.08, 0.01]), (5, [0.73, 0.24, 0.03])] {
            let f = freq(&x, j);
            for c in 0..3 {
                let se: f64 = (want[c] * (1.0 - want[c]) / 10_000.0f64).sqrt();
                assert!((f[c] - want[c]).abs() < 3.0 * se + 1e-12, "col {j} cat {c}: {f:?}");
            }
        }
    }

    #[test]
    fn banded_factor_reproduces_sigma() {
        let c = BandedCholesky::new(8, &[1.0, 0.5, 0.3]).unwrap();
        let mut dense = DMatrix::<f64>::zeros(8, 8);
        for i in 0..8usize {
            for j in i.saturating_sub(2)..=i {
                dense[(i, j)] = c.l[i][2 - (i - j)];
            }
        }
        let s = &dense * dense.transpose();
        for i in 0..8usize {
            for j in 0..8 {
                let want = match i.abs_diff(j) {
                    0 => 1.0,
                    1 => 0.5,
                    2 => 0.3,
                    _ => 0.0,
                };
                assert!((s[(i, j)] - want).abs() < 1e-12);
            }
        }
        // Long Band2 matrices stay positive definite.
        BandedCholesky::new(5000, &[1.0, 0.5, 0.3]).unwrap();
        assert!(BandedCholesky::new(50, &[1.0, 0.9, 0.9]).is_err());
    }

    #[test]
    fn independent_limit() {
        let mut rng = stream_rng(4, 0);
        let mut rows = Vec::new();
        latent_rows(10_000, 2, Correlation::Ar(0.0), &mut rng, |_, r| rows.push((r[0], r[1]))).unwrap();
        let n = rows.len() as f64;
        let (ma, mb) = (rows.iter().map(|r| r.0).sum::<f64>() / n, rows.iter().map(|r| r.1).sum::<f64>() / n);
        let cov: f64 = rows.iter().map(|r| (r.0 - ma) * (r.1 - mb)).sum::<f64>();
        let va: f64 = rows.iter().map(|r| (r.0 - ma).powi(2)).sum::<f64>();
        let vb: f64 = rows.iter().map(|r| (r.1 - mb).powi(2)).sum::<f64>();
        assert!((cov / (va * vb).sqrt()).abs() < 0.05);
    }

    #[test]
    fn hwe_and_joint_tables() {
        let h = hwe(0.05);
        assert!((h[2] - 0.0025).abs() < 1e-15 && (h[1] - 0.095).abs() < 1e-15 && (h[0] - 0.9025).abs() < 1e-15);
        let t = joint_genotype_table(0.05, 0.15, 0.0).unwrap();
        let (ha, hb) = (hwe(0.05), hwe(0.15));
        for a in 0..3 {
            for b in 0..3 {
                assert!((t[a][b] - ha[a] * hb[b]).abs() < 1e-14);
            }
        }
        let t = joint_genotype_table(0.05, 0.05, 1.0).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(t[a][b].abs() < 1e-14);
                }
            }
            assert!((t[a][a] - ha[a]).abs() < 1e-14);
        }
        assert!(haplotype_frequencies(0.05, 0.5, 1.0).is_err());
    }

    #[test]
    fn a2_perfect_ld_copies_locus() {
        let x = gen_genotypes_a2_with(500, 1.0, &[0.2; 4], &mut stream_rng(5, 0)).unwrap();
        for i in 0..500 {
            for j in 1..4 {
                assert_eq!(x[(i, j)], x[(i, 0)]);
            }
        }
    }

    #[test]
    fn e_factor_shape() {
        let z = gen_e_factors(10_000, &mut stream_rng(6, 0));
        let n = 10_000.0;
        for k in 3..5 {
            let m = z.column(k).sum() / n;
            assert!((m - 0.5).abs() < 0.02);
        }
        let c0 = z.column(0);
        let c1 = z.column(1);
        let (m0, m1) = (c0.sum() / n, c1.sum() / n);
        let v0 = c0.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n;
        let v1 = c1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n;
        let cv = c0.iter().zip(c1.iter()).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>() / n;
        assert!((v0 - 1.0).abs() < 0.05);
        assert!((cv / (v0 * v1).sqrt() - 0.3).abs() < 0.03);
    }

    #[test]
    fn censoring_calibration() {
        let log_t: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0) - 5.0).collect();
        let rate = calibrate_censoring_rate(&log_t, 0.2).unwrap();
        assert!((expected_censoring(&log_t, rate) - 0.2).abs() < 1e-9);
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = ScenarioSpec::new(Correlation::Ld(0.3), MafProfile::M2, Outcome::Aft)
            .with_size(60, 40)
            .with_seed(11);
        let a = simulate(&spec, 20, 3).unwrap();
        let b = simulate(&spec, 20, 3).unwrap();
        assert_eq!(a.train.y(), b.train.y());
        assert_eq!(a.test.x(), b.test.x());
        assert_eq!(a.truth, b.truth);
        let c = simulate(&spec, 20, 4).unwrap();
        assert_ne!(a.train.y(), c.train.y());
        assert!(a.censoring_rate.unwrap() > 0.0);
    }

    #[test]
    fn null_truth_is_pure_noise() {
        let mut rng = stream_rng(8, 0);
        let z = DMatrix::zeros(20_000, 3);
        let x = DMatrix::zeros(20_000, 25);
        let (y, d) = gen_response(&z, &x, &FullEffects::zeros(3, 25), Outcome::Linear, None, &mut rng).unwrap();
        assert!(d.is_none());
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((v - 1.0).abs() < 0.05);
    }
}
