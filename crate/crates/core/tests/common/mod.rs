#![allow(dead_code)]

use gxe_core::Dataset;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
}

/// Gaussian Z and X, sparse hierarchical truth on the first columns, unit noise.
pub fn linear_data(seed: u64, n: usize, q: usize, p: usize) -> Dataset {
    let mut r = rng(seed);
    let z = normal_matrix(&mut r, n, q);
    let x = normal_matrix(&mut r, n, p);
    let y = (0..n)
        .map(|i| {
            let mut v = 0.5 * z[(i, 0)] + x[(i, 0)] - 0.8 * x[(i, 1.min(p - 1))];
            v += 0.7 * z[(i, 0)] * x[(i, 0)];
            v + r.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Dataset::new(y, None, z, x).unwrap()
}

/// Log-times with independent exponential censoring.
pub fn survival_data(seed: u64, n: usize, q: usize, p: usize) -> Dataset {
    let mut r = rng(seed);
    let z = normal_matrix(&mut r, n, q);
    let x = normal_matrix(&mut r, n, p);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let t = x[(i, 0)] + 0.3 * z[(i, 0)] + 0.5 * r.sample::<f64, _>(StandardNormal);
        let c = -(r.random::<f64>().max(1e-300)).ln().ln() + 1.5;
        y.push(t.min(c));
        delta.push(t <= c);
    }
    if !delta.iter().any(|d| *d) {
        delta[0] = true;
    }
    Dataset::new(y, Some(delta), z, x).unwrap()
}

/// Golden-section refinement of the best point of a uniform grid.
pub fn brute_force_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let step = (hi - lo) / (points - 1) as f64;
    let (mut best, mut best_v) = (lo, f(lo));
    for i in 1..points {
        let b = lo + step * i as f64;
        let v = f(b);
        if v < best_v {
            best = b;
            best_v = v;
        }
    }
    let (mut a, mut c) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = c - g * (c - a);
    let mut x2 = a + g * (c - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - g * (c - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (c - a);
            f2 = f(x2);
        }
    }
    let refined = 0.5 * (a + c);
    // The MCP kink at zero is a minimizer golden section cannot resolve.
    if f(0.0) <= f(refined) {
        0.0
    } else {
        refined
    }
}

/// Product-limit survival curve at each sorted observation; the weight of an
/// event is the drop in the curve there.
pub fn km_jumps(delta: &[bool]) -> Vec<f64> {
    let n = delta.len();
    let mut s = 1.0;
    let mut out = Vec::with_capacity(n);
    for (i, &d) in delta.iter().enumerate() {
        let at_risk = (n - i) as f64;
        let next = if d { s * (1.0 - 1.0 / at_risk) } else { s };
        out.push(s - next);
        s = next;
    }
    out
}
