//! Reference factorizations: Lee-Seung NMF and concept factorization.
//!
//! Both use the classic multiplicative rules, which are monotone for the
//! Frobenius loss. Concept factorization on data with negative entries (so a
//! kernel with negative entries) switches to the sign-split square-root rule.

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    /// `d x R` basis (`U` for NMF, `X W` for CF).
    pub basis: DMatrix<f64>,
    /// `N x R` nonnegative representation.
    pub representation: DMatrix<f64>,
    /// `(iteration, ||X - reconstruction||_F)`, starting at iteration 0.
    pub trace: Vec<(usize, f64)>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(Open01))
}

/// `x * num / max(den, guard)`, keeping exact zeros.
fn ratio_update(x: &mut DMatrix<f64>, num: &DMatrix<f64>, den: &DMatrix<f64>, guard_eps: f64) {
    for ((v, n), d) in x.iter_mut().zip(num.iter()).zip(den.iter()) {
        if *v != 0.0 {
            *v *= n / d.max(guard_eps);
        }
    }
}

fn check_rank(r: usize, n: usize) -> Result<()> {
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank {r} must lie in 1..={n}")));
    }
    Ok(())
}

/// `X ~ U V^T` with `U, V >= 0`.
///
/// Factors start uniform on `(0, sqrt(mean(X) / R))`, so an all-zero input
/// gives zero factors and zero loss.
pub fn nmf_fit(x: &DMatrix<f64>, r: usize, iters: usize, seed: u64, guard_eps: f64) -> Result<BaselineResult> {
    let (d, n) = x.shape();
    check_rank(r, n)?;
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("NMF needs finite nonnegative input, found {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (x.mean() / r as f64).sqrt();
    let mut u = uniform(&mut rng, d, r, scale);
    let mut v = uniform(&mut rng, n, r, scale);
    let loss = |u: &DMatrix<f64>, v: &DMatrix<f64>| (x - u * v.transpose()).norm();
    let mut trace = vec![(0, loss(&u, &v))];
    for it in 1..=iters {
        let num = x * &v;
        let den = &u * (v.transpose() * &v);
        ratio_update(&mut u, &num, &den, guard_eps);
        let num = x.transpose() * &u;
        let den = &v * (u.transpose() * &u);
        ratio_update(&mut v, &num, &den, guard_eps);
        trace.push((it, loss(&u, &v)));
    }
    Ok(BaselineResult {
        basis: u,
        representation: v,
        trace,
    })
}

/// `X ~ X W V^T` with `W, V >= 0`, driven by the kernel `K = X^T X`.
pub fn cf_fit(x: &DMatrix<f64>, r: usize, iters: usize, seed: u64, guard_eps: f64) -> Result<BaselineResult> {
    let n = x.ncols();
    check_rank(r, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = uniform(&mut rng, n, r, 1.0);
    let mut v = uniform(&mut rng, n, r, 1.0);
    let k = x.transpose() * x;
    let signed = k.iter().any(|v| *v < 0.0);
    let kp = k.map(|v| v.max(0.0));
    let kn = k.map(|v| (-v).max(0.0));
    let loss = |w: &DMatrix<f64>, v: &DMatrix<f64>| (x - x * w * v.transpose()).norm();
    let mut trace = vec![(0, loss(&w, &v))];
    for it in 1..=iters {
        if signed {
            // min tr(W^T K W (V^T V)) - 2 tr(W^T K V) over W, then
            // min tr(V (W^T K W) V^T) - 2 tr(V^T K W) over V
            let vtv = v.transpose() * &v;
            let num = &kp * &v + &kn * &w * &vtv;
            let den = &kp * &w * &vtv + &kn * &v;
            sqrt_update(&mut w, &num, &den, guard_eps);
            let wkw = w.transpose() * &k * &w;
            let (wp, wn) = (wkw.map(|v| v.max(0.0)), wkw.map(|v| (-v).max(0.0)));
            let num = &kp * &w + &v * wn;
            let den = &v * wp + &kn * &w;
            sqrt_update(&mut v, &num, &den, guard_eps);
        } else {
            let num = &k * &v;
            let den = &k * &w * (v.transpose() * &v);
            ratio_update(&mut w, &num, &den, guard_eps);
            let num = &k * &w;
            let den = &v * (w.transpose() * &k * &w);
            ratio_update(&mut v, &num, &den, guard_eps);
        }
        trace.push((it, loss(&w, &v)));
    }
    Ok(BaselineResult {
        basis: x * &w,
        representation: v,
        trace,
    })
}

fn sqrt_update(x: &mut DMatrix<f64>, num: &DMatrix<f64>, den: &DMatrix<f64>, guard_eps: f64) {
    for ((v, n), d) in x.iter_mut().zip(num.iter()).zip(den.iter()) {
        if *v != 0.0 {
            *v *= (n / d.max(guard_eps)).sqrt();
        }
    }
}
