//! Accelerated failure time support: Kaplan-Meier weighted least squares.
//!
//! After sorting by observed log-time, each subject gets the Kaplan-Meier jump
//! `w_i`. Responses and design columns are centered at their `w`-weighted means
//! and each row is scaled by `sqrt(n w_i / sum w)`, so the ordinary solver
//! minimizes the weighted loss. Interaction columns are centered as their own
//! quantities, not as products of centered factors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{col, CenteredInteractions, Dataset, FullEffects, Interactions};
use crate::error::{GxeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmWeights {
    pub w: Vec<f64>,
}

impl KmWeights {
    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Kaplan-Meier weights for event indicators already sorted by time.
///
/// `w_1 = d_1 / n`, `w_i = d_i / (n - i + 1) * prod_{l < i} ((n - l) / (n - l + 1))^{d_l}`.
pub fn km_weights(delta: &[bool]) -> Result<KmWeights> {
    let n = delta.len();
    if n == 0 {
        return Err(GxeError::InvalidInput("no observations for Kaplan-Meier weights".into()));
    }
    let nf = n as f64;
    let mut w = Vec::with_capacity(n);
    let mut prod = 1.0;
    for (i, &event) in delta.iter().enumerate() {
        // i is 0-based; the 1-based index is i + 1.
        let at_risk = nf - i as f64;
        w.push(if event { prod / at_risk } else { 0.0 });
        if event {
            prod *= (at_risk - 1.0) / at_risk;
        }
    }
    Ok(KmWeights { w })
}

/// Row order by ascending time with events ahead of censorings on ties.
pub fn survival_order(y: &[f64], delta: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        y[a].total_cmp(&y[b]).then_with(|| delta[b].cmp(&delta[a])).then(a.cmp(&b))
    });
    order
}

/// A survival dataset rewritten as an unweighted least-squares problem.
#[derive(Debug, Clone)]
pub struct AftTransform {
    /// Least-squares form; rows follow `order`.
    pub dataset: Dataset,
    /// `order[i]` is the input row placed at position `i`.
    pub order: Vec<usize>,
    pub weights: KmWeights,
    /// Row multipliers applied after centering, `sqrt(n w_i / sum w)`.
    pub row_scale: Vec<f64>,
    pub y_mean: f64,
    pub z_mean: Vec<f64>,
    pub x_mean: Vec<f64>,
    /// Row-major q x p weighted means of the interaction columns.
    pub w_mean: Vec<f64>,
}

impl AftTransform {
    /// Intercept implied by weighted centering for effects on the input scale.
    pub fn intercept(&self, effects: &FullEffects) -> f64 {
        let mut c = self.y_mean;
        c -= effects.alpha.iter().zip(&self.z_mean).map(|(a, m)| a * m).sum::<f64>();
        c -= effects.beta.iter().zip(&self.x_mean).map(|(b, m)| b * m).sum::<f64>();
        c -= effects.eta.iter().zip(&self.w_mean).map(|(e, m)| e * m).sum::<f64>();
        c
    }
}

pub fn prepare_aft(d: &Dataset) -> Result<AftTransform> {
    d.require_product("the AFT transform")?;
    let delta = d
        .delta()
        .ok_or_else(|| GxeError::InvalidInput("AFT transform needs a survival outcome".into()))?;
    if !delta.iter().any(|e| *e) {
        return Err(GxeError::NoEvents);
    }
    let (n, p, q) = (d.n(), d.p(), d.q());
    let order = survival_order(d.y(), delta);
    let sorted_delta: Vec<bool> = order.iter().map(|&i| delta[i]).collect();
    let weights = km_weights(&sorted_delta)?;
    let total = weights.total();
    if !(total > 0.0) {
        return Err(GxeError::NoEvents);
    }
    let rel: Vec<f64> = weights.w.iter().map(|w| w / total).collect();
    let row_scale: Vec<f64> = rel.iter().map(|r| (n as f64 * r).sqrt()).collect();

    let y_sorted: Vec<f64> = order.iter().map(|&i| d.y()[i]).collect();
    let z_base = DMatrix::from_fn(n, q, |i, k| d.z()[(order[i], k)]);
    let x_base = DMatrix::from_fn(n, p, |i, j| d.x()[(order[i], j)]);

    let wmean = |c: &[f64]| c.iter().zip(&rel).map(|(v, r)| v * r).sum::<f64>();
    let y_mean = wmean(&y_sorted);
    let z_mean: Vec<f64> = (0..q).map(|k| wmean(col(&z_base, k))).collect();
    let x_mean: Vec<f64> = (0..p).map(|j| wmean(col(&x_base, j))).collect();
    let mut w_mean = vec![0.0; q * p];
    for k in 0..q {
        let zc = col(&z_base, k);
        for j in 0..p {
            let xc = col(&x_base, j);
            w_mean[k * p + j] = (0..n).map(|i| rel[i] * zc[i] * xc[i]).sum();
        }
    }

    let y: Vec<f64> = (0..n).map(|i| row_scale[i] * (y_sorted[i] - y_mean)).collect();
    let z = DMatrix::from_fn(n, q, |i, k| row_scale[i] * (z_base[(i, k)] - z_mean[k]));
    let x = DMatrix::from_fn(n, p, |i, j| row_scale[i] * (x_base[(i, j)] - x_mean[j]));
    let mut dataset = Dataset::new(y, None, z, x)?;
    if let Some(names) = d.g_names() {
        dataset = dataset.with_g_names(names.to_vec())?;
    }
    let dataset = dataset.with_interactions(Interactions::Centered(CenteredInteractions {
        z_base,
        x_base,
        row_scale: row_scale.clone(),
        center: w_mean.clone(),
    }));
    Ok(AftTransform { dataset, order, weights, row_scale, y_mean, z_mean, x_mean, w_mean })
}
