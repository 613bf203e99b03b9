//! Selection, estimation, prediction and stability metrics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FullEffects, SparsityPattern};
use crate::error::{GxeError, Result};
use crate::model::{FittedModel, PreparedData};
use crate::penalties::PenaltyMatrix;
use crate::solver::SolverConfig;
use crate::tuning::Estimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SelectionCounts {
    pub m_tp: usize,
    pub m_fp: usize,
    pub i_tp: usize,
    pub i_fp: usize,
}

/// True and false positives for main effects and for `(k, j)` interactions.
pub fn selection_metrics(est: &SparsityPattern, truth: &SparsityPattern) -> Result<SelectionCounts> {
    if est.interactions.len() != truth.interactions.len() {
        return Err(GxeError::DimensionMismatch(format!(
            "estimate has q = {}, truth has q = {}",
            est.interactions.len(),
            truth.interactions.len()
        )));
    }
    let mut c = SelectionCounts::default();
    for j in &est.main {
        if truth.main.binary_search(j).is_ok() {
            c.m_tp += 1;
        } else {
            c.m_fp += 1;
        }
    }
    for (e, t) in est.interactions.iter().zip(&truth.interactions) {
        for j in e {
            if t.binary_search(j).is_ok() {
                c.i_tp += 1;
            } else {
                c.i_fp += 1;
            }
        }
    }
    Ok(c)
}

fn check_shape(est: &FullEffects, truth: &FullEffects) -> Result<()> {
    if est.q() != truth.q() || est.p() != truth.p() || est.eta.len() != truth.eta.len() {
        return Err(GxeError::DimensionMismatch(format!(
            "estimate is (q={}, p={}), truth is (q={}, p={})",
            est.q(),
            est.p(),
            truth.q(),
            truth.p()
        )));
    }
    Ok(())
}

/// Euclidean error over `(alpha, beta, eta)`.
pub fn rsse(est: &FullEffects, truth: &FullEffects) -> Result<f64> {
    check_shape(est, truth)?;
    let a = est.flatten();
    let b = truth.flatten();
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Structured error `sqrt(e_beta' J e_beta + sum_k e_eta_k' J e_eta_k)`;
/// `alpha` does not contribute.
pub fn rse(est: &FullEffects, truth: &FullEffects, j: &PenaltyMatrix) -> Result<f64> {
    check_shape(est, truth)?;
    let p = est.p();
    if j.p() != p {
        return Err(GxeError::DimensionMismatch(format!("J is {}x{}, effects have p = {p}", j.p(), j.p())));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let mut total = j.quad_form(&diff(&est.beta, &truth.beta));
    for k in 0..est.q() {
        let r = k * p..(k + 1) * p;
        total += j.quad_form(&diff(&est.eta[r.clone()], &truth.eta[r]));
    }
    // Rounding can leave a tiny negative quadratic form for a PSD J.
    Ok(total.max(0.0).sqrt())
}

/// Mean squared prediction error on a linear-outcome test set.
pub fn pmse(model: &FittedModel, test: &Dataset) -> Result<f64> {
    if test.is_survival() {
        return Err(GxeError::InvalidInput("PMSE needs a continuous outcome; use the C-statistic".into()));
    }
    check_model(model, test)?;
    let pred = model.predict(test);
    Ok(pred.iter().zip(test.y()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / test.n() as f64)
}

fn check_model(model: &FittedModel, test: &Dataset) -> Result<()> {
    if model.effects.p() != test.p() || model.effects.q() != test.q() {
        return Err(GxeError::DimensionMismatch(format!(
            "model is (q={}, p={}), data is (q={}, p={})",
            model.effects.q(),
            model.effects.p(),
            test.q(),
            test.p()
        )));
    }
    Ok(())
}

/// C-statistic of a fitted AFT model on survival test data.
pub fn c_statistic(model: &FittedModel, test: &Dataset) -> Result<f64> {
    check_model(model, test)?;
    let delta = test
        .delta()
        .ok_or_else(|| GxeError::InvalidInput("C-statistic needs a survival outcome".into()))?;
    concordance(&model.predict(test), test.y(), delta)
}

/// Inverse-probability-of-censoring weighted concordance.
///
/// `predicted` is on the time scale (larger means longer survival). A pair
/// `(i, j)` is usable when `i` is an event and `time_i < time_j`; it carries
/// weight `1 / G(time_i-)^2`, where `G` is the Kaplan-Meier estimate of the
/// censoring survival function. Predictor ties earn half credit.
pub fn concordance(predicted: &[f64], time: &[f64], delta: &[bool]) -> Result<f64> {
    let n = time.len();
    if predicted.len() != n || delta.len() != n {
        return Err(GxeError::DimensionMismatch("predictor, time and event lengths differ".into()));
    }
    if !delta.iter().any(|d| *d) {
        return Err(GxeError::NoEvents);
    }
    let g = censoring_survival_left(time, delta);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        if !delta[i] || !(g[i] > 0.0) {
            continue;
        }
        let w = 1.0 / (g[i] * g[i]);
        for jj in 0..n {
            if time[i] < time[jj] {
                den += w;
                if predicted[i] < predicted[jj] {
                    num += w;
                } else if predicted[i] == predicted[jj] {
                    num += 0.5 * w;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(GxeError::InvalidInput("no usable pairs for the C-statistic".into()));
    }
    Ok(num / den)
}

/// `G(t_i-)` for every subject, from the Kaplan-Meier estimator of the
/// censoring distribution (events leave the risk set before censorings at
/// tied times).
fn censoring_survival_left(time: &[f64], delta: &[bool]) -> Vec<f64> {
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut out = vec![1.0; n];
    let mut g = 1.0;
    let mut idx = 0;
    while idx < n {
        let t = time[order[idx]];
        let mut end = idx;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        for &i in &order[idx..end] {
            out[i] = g;
        }
        let at_risk = (n - idx) as f64;
        let censored = order[idx..end].iter().filter(|&&i| !delta[i]).count() as f64;
        if censored > 0.0 {
            g *= 1.0 - censored / at_risk;
        }
        idx = end;
    }
    out
}

/// Metrics of one fitted replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m_tp: usize,
    pub m_fp: usize,
    pub i_tp: usize,
    pub i_fp: usize,
    pub rsse: f64,
    pub rse: f64,
    pub pmse: Option<f64>,
    pub cstat: Option<f64>,
}

impl MetricsReport {
    /// Scores `model` against the true effects and the test set.
    pub fn compute(
        model: &FittedModel,
        truth: &FullEffects,
        truth_pattern: &SparsityPattern,
        j: &PenaltyMatrix,
        test: &Dataset,
    ) -> Result<Self> {
        let sel = selection_metrics(&model.pattern, truth_pattern)?;
        let (pmse_v, cstat) = if test.is_survival() {
            (None, Some(c_statistic(model, test)?))
        } else {
            (Some(pmse(model, test)?), None)
        };
        Ok(Self {
            m_tp: sel.m_tp,
            m_fp: sel.m_fp,
            i_tp: sel.i_tp,
            i_fp: sel.i_fp,
            rsse: rsse(&model.effects, truth)?,
            rse: rse(&model.effects, truth, j)?,
            pmse: pmse_v,
            cstat,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }

    /// `mean(sd)` with `decimals` places.
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}({:.*})", decimals, self.mean, decimals, self.sd)
    }
}

/// Column-wise summary of several [`MetricsReport`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub replicates: usize,
    pub m_tp: MeanSd,
    pub m_fp: MeanSd,
    pub i_tp: MeanSd,
    pub i_fp: MeanSd,
    pub rsse: MeanSd,
    pub rse: MeanSd,
    pub pmse: Option<MeanSd>,
    pub cstat: Option<MeanSd>,
}

impl MetricsSummary {
    pub fn of(reports: &[MetricsReport]) -> Option<Self> {
        let col = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            MeanSd::of(&v)
        };
        Some(Self {
            replicates: reports.len(),
            m_tp: MeanSd::of(&col(&|r| r.m_tp as f64))?,
            m_fp: MeanSd::of(&col(&|r| r.m_fp as f64))?,
            i_tp: MeanSd::of(&col(&|r| r.i_tp as f64))?,
            i_fp: MeanSd::of(&col(&|r| r.i_fp as f64))?,
            rsse: MeanSd::of(&col(&|r| r.rsse))?,
            rse: MeanSd::of(&col(&|r| r.rse))?,
            pmse: opt(&|r| r.pmse),
            cstat: opt(&|r| r.cstat),
        })
    }

    /// Table cells in the order M:TP, M:FP, I:TP, I:FP, RSSE, RSE, PMSE/Cstat.
    pub fn table_cells(&self) -> Vec<String> {
        let last = self.pmse.or(self.cstat).map(|m| m.format(2)).unwrap_or_default();
        vec![
            self.m_tp.format(1),
            self.m_fp.format(1),
            self.i_tp.format(1),
            self.i_fp.format(1),
            self.rsse.format(2),
            self.rse.format(2),
            last,
        ]
    }
}

/// Selection frequencies over subsample refits at fixed penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OoiResult {
    /// Per G factor, length `p`.
    pub main: Vec<f64>,
    /// Row-major `q x p`.
    pub interaction: Vec<f64>,
    pub resamples: usize,
    pub failed: usize,
    /// Mean OOI over the effects selected on the full data.
    pub mean_selected: f64,
    pub full_pattern: SparsityPattern,
    /// Mean held-out PMSE (or C-statistic for survival data) of the
    /// subsample fits, evaluated on the rows left out.
    pub held_out: Option<f64>,
}

pub const OOI_FRACTION: f64 = 0.8;

/// Observed occurrence index: refits on `resamples` subsamples of
/// `ceil(0.8 n)` rows drawn without replacement, at the given penalties.
/// Resamples whose fit fails are counted and excluded.
pub fn ooi<E: Estimator + ?Sized>(
    raw: &Dataset,
    j: &PenaltyMatrix,
    cfg: &SolverConfig,
    estimator: &E,
    resamples: usize,
    seed: u64,
) -> Result<OoiResult> {
    let fit = |d: &Dataset| fit_raw(d, j, cfg, estimator);
    ooi_by(raw, resamples, seed, &fit, None::<&fn(&Dataset) -> Result<FittedModel>>)
}

/// Rows of resample `b`: `ceil(0.8 n)` distinct indices, ascending.
pub fn subsample_rows(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let m = ((OOI_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    let mut rows = sample(&mut rng, n, m).into_vec();
    rows.sort_unstable();
    rows
}

/// Generic resampling study. `fixed` produces the selection counted by the
/// OOI; the held-out score comes from `scored` when given (for example a
/// tune-and-fit run) and from `fixed` otherwise.
pub fn ooi_by<F, G>(raw: &Dataset, resamples: usize, seed: u64, fixed: &F, scored: Option<&G>) -> Result<OoiResult>
where
    F: Fn(&Dataset) -> Result<FittedModel> + Sync,
    G: Fn(&Dataset) -> Result<FittedModel> + Sync,
{
    if resamples == 0 {
        return Err(GxeError::InvalidInput("OOI needs at least one resample".into()));
    }
    let (n, p, q) = (raw.n(), raw.p(), raw.q());
    let full = fixed(raw)?;

    let outcomes: Vec<Option<(SparsityPattern, Option<f64>)>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let rows = subsample_rows(n, seed, b);
            let run = || -> Result<(SparsityPattern, Option<f64>)> {
                let sub = raw.select_rows(&rows)?;
                let model = fixed(&sub)?;
                let held: Vec<usize> = (0..n).filter(|i| rows.binary_search(i).is_err()).collect();
                let score = if held.is_empty() {
                    None
                } else {
                    let test = raw.select_rows(&held)?;
                    let scoring = match scored {
                        Some(g) => g(&sub).ok(),
                        None => Some(model.clone()),
                    };
                    scoring.and_then(|m| {
                        if test.is_survival() { c_statistic(&m, &test).ok() } else { pmse(&m, &test).ok() }
                    })
                };
                Ok((model.pattern, score))
            };
            match run() {
                Ok(v) => Some(v),
                Err(e) => {
                    log::debug!("OOI resample {b} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let mut main = vec![0.0; p];
    let mut interaction = vec![0.0; q * p];
    let mut ok = 0usize;
    let mut scores = Vec::new();
    for (pattern, score) in outcomes.iter().flatten() {
        ok += 1;
        for &jj in &pattern.main {
            main[jj] += 1.0;
        }
        for (k, v) in pattern.interactions.iter().enumerate() {
            for &jj in v {
                interaction[k * p + jj] += 1.0;
            }
        }
        scores.extend(score);
    }
    if ok == 0 {
        return Err(GxeError::Numerical { iteration: 0, message: "every OOI resample failed".into() });
    }
    let denom = ok as f64;
    main.iter_mut().chain(interaction.iter_mut()).for_each(|v| *v /= denom);
    let mut picked: Vec<f64> = full.pattern.main.iter().map(|&jj| main[jj]).collect();
    for (k, v) in full.pattern.interactions.iter().enumerate() {
        picked.extend(v.iter().map(|&jj| interaction[k * p + jj]));
    }
    let mean_selected = if picked.is_empty() { 0.0 } else { picked.iter().sum::<f64>() / picked.len() as f64 };
    Ok(OoiResult {
        main,
        interaction,
        resamples,
        failed: resamples - ok,
        mean_selected,
        full_pattern: full.pattern,
        held_out: MeanSd::of(&scores).map(|m| m.mean),
    })
}

/// Prepares `raw`, fits at the penalties in `cfg`, and maps back to
/// original units.
pub fn fit_raw<E: Estimator + ?Sized>(
    raw: &Dataset,
    j: &PenaltyMatrix,
    cfg: &SolverConfig,
    estimator: &E,
) -> Result<FittedModel> {
    let prep = PreparedData::new(raw)?;
    let fit = estimator.fit(&prep.ls, j, cfg, None)?;
    Ok(prep.to_model(&fit.effects, fit.pattern))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalties::build_spline_penalty;

    fn pattern(main: &[usize], ints: &[&[usize]]) -> SparsityPattern {
        SparsityPattern { main: main.to_vec(), interactions: ints.iter().map(|v| v.to_vec()).collect() }
    }

    #[test]
    fn selection_counts() {
        let truth = pattern(&[0, 1, 2], &[&[0, 1], &[2]]);
        assert_eq!(
            selection_metrics(&truth, &truth).unwrap(),
            SelectionCounts { m_tp: 3, m_fp: 0, i_tp: 3, i_fp: 0 }
        );
        let empty = SparsityPattern::empty(2);
        assert_eq!(selection_metrics(&empty, &truth).unwrap(), SelectionCounts::default());
        let extra = pattern(&[0, 1, 2, 7], &[&[0, 1], &[2, 7]]);
        assert_eq!(
            selection_metrics(&extra, &truth).unwrap(),
            SelectionCounts { m_tp: 3, m_fp: 1, i_tp: 3, i_fp: 1 }
        );
        assert!(selection_metrics(&SparsityPattern::empty(3), &truth).is_err());
    }

    #[test]
    fn estimation_errors() {
        let truth = FullEffects { alpha: vec![1.0], beta: vec![0.5, 0.0, 0.0, 0.0], eta: vec![0.0; 4] };
        assert_eq!(rsse(&truth, &truth).unwrap(), 0.0);
        let mut off = truth.clone();
        off.beta[2] += 1.0;
        assert!((rsse(&off, &truth).unwrap() - 1.0).abs() < 1e-15);

        let j = build_spline_penalty(4).unwrap();
        let mut a_only = truth.clone();
        a_only.alpha[0] = 7.0;
        assert_eq!(rse(&a_only, &truth, &j).unwrap(), 0.0);
        let mut affine = truth.clone();
        for (i, b) in affine.beta.iter_mut().enumerate() {
            *b += 0.3 + 0.2 * i as f64;
        }
        assert!(rse(&affine, &truth, &j).unwrap() < 1e-7);
    }

    #[test]
    fn concordance_cases() {
        let t = [1.0, 2.0];
        let d = [true, true];
        assert_eq!(concordance(&[0.5, 3.0], &t, &d).unwrap(), 1.0);
        assert_eq!(concordance(&[3.0, 0.5], &t, &d).unwrap(), 0.0);
        assert_eq!(concordance(&[1.0, 1.0], &t, &d).unwrap(), 0.5);
        assert!(matches!(concordance(&[1.0, 1.0], &t, &[false, false]), Err(GxeError::NoEvents)));
    }

    #[test]
    fn censoring_weights_follow_km() {
        // Censoring at t=2 with 3 still at risk: G drops to 2/3 after it.
        let t = [1.0, 2.0, 3.0, 4.0];
        let d = [true, false, true, true];
        let g = censoring_survival_left(&t, &d);
        for (a, b) in g.iter().zip([1.0, 1.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_sd_format() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.format(2), "2.00(1.00)");
        assert!(MeanSd::of(&[]).is_none());
        assert_eq!(MeanSd::of(&[4.0]).unwrap().sd, 0.0);
    }
}
