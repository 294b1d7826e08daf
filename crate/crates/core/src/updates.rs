//! Single-variable steps of the alternating scheme.
//!
//! `W`, `V` and `Q` each minimise a convex quadratic under nonnegativity.
//! `C`, `G`, `H^T H` and the projected kernels carry entries of both signs, so
//! each matrix is split into positive and negative parts and the
//! square-root multiplicative rule of [`quadratic_step`] is applied; it never
//! increases the quadratic it is derived from. `M` and `S` are IRLS weights,
//! and `b` and `P` have closed forms.

use nalgebra::{DMatrix, DVector};

use crate::model::{AuxMatrices, DataMatrix, FactorState, Hyperparams};
use crate::{Error, Result};

/// `A = pos - neg` with both parts elementwise nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SignSplit {
    pub pos: DMatrix<f64>,
    pub neg: DMatrix<f64>,
}

impl SignSplit {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self {
            pos: a.map(|v| v.max(0.0)),
            neg: a.map(|v| (-v).max(0.0)),
        }
    }
}

/// `M_ii = 1 / (2 max(||y^i||, guard))`.
pub fn refresh_m(y: &DMatrix<f64>, guard_eps: f64) -> DVector<f64> {
    DVector::from_iterator(
        y.nrows(),
        y.row_iter().map(|r| 0.5 / r.norm().max(guard_eps)),
    )
}

/// `S_ii = 1 / (2 max(||P^i||, guard))`, so that `||P||_{2,1} = 2 tr(P^T S P)`.
pub fn refresh_s(p: &DMatrix<f64>, guard_eps: f64) -> DVector<f64> {
    refresh_m(p, guard_eps)
}

/// Closed-form bias minimising `tr(Y^T M Y)` with everything else fixed:
/// the `M`-weighted mean of the columns of `X W V^T - P^T X`.
pub fn solve_b(
    x: &DMatrix<f64>,
    p: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    m: &DVector<f64>,
) -> DVector<f64> {
    let nm = m.sum();
    (x * (w * (v.transpose() * m)) - p.transpose() * (x * m)) / nm
}

fn multiplicative(
    current: &DMatrix<f64>,
    numer: &DMatrix<f64>,
    denom: &DMatrix<f64>,
    guard_eps: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(current.nrows(), current.ncols(), |i, j| {
        let c = current[(i, j)];
        if c == 0.0 {
            0.0
        } else {
            c * (numer[(i, j)] / (denom[(i, j)] + guard_eps)).sqrt()
        }
    })
}

/// One term `tr(Z^T A Z B)` of a quadratic in the nonnegative unknown `Z`.
struct Quadratic<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
}

/// Auxiliary-function step for `sum_k tr(Z^T A_k Z B_k) - 2 tr(Z^T F)` over
/// `Z >= 0`, with symmetric `A_k`, `B_k` of either sign and `F = F+ - F-`:
///
/// ```text
/// Z <- Z * sqrt((F+ + A+ Z B- + A- Z B+) / (F- + A+ Z B+ + A- Z B- + guard))
/// ```
///
/// A step never increases the quadratic, and stationary points of the
/// constrained problem are fixed points.
fn quadratic_step(z: &DMatrix<f64>, linear: SignSplit, terms: &[Quadratic<'_>], guard_eps: f64) -> DMatrix<f64> {
    let mut num = linear.pos;
    let mut den = linear.neg;
    for t in terms {
        let a = SignSplit::new(t.a);
        let b = SignSplit::new(t.b);
        let apz = &a.pos * z;
        let anz = &a.neg * z;
        num += &apz * &b.neg + &anz * &b.pos;
        den += apz * b.pos + anz * b.neg;
    }
    multiplicative(z, &num, &den, guard_eps)
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn check_aux(x: &DataMatrix, state: &FactorState, aux: &AuxMatrices) -> Result<()> {
    state.check_dims(x)?;
    let n = x.samples();
    if aux.c.shape() != (n, n) || aux.g.shape() != (n, n) || aux.kernel.shape() != (n, n) {
        return Err(Error::invalid("auxiliary matrices do not match the state"));
    }
    Ok(())
}

/// Multiplicative step for the concept weights `W`.
///
/// With `K = X^T X` and `Kc = X^T P P^T X`, the `W`-dependent part of the
/// surrogate is
///
/// ```text
/// tr(W^T K W (V^T C V)) + alpha tr(W^T Kc W D) + beta tr(W^T G W)
///   - 2 tr(W^T (X^T P^T X C V + alpha Kc |V|))
/// ```
///
/// with `D = diag(|V|^T e_N)`.
pub fn update_w(
    x: &DataMatrix,
    state: &FactorState,
    aux: &AuxMatrices,
    params: &Hyperparams,
) -> Result<DMatrix<f64>> {
    check_aux(x, state, aux)?;
    let xv = x.values();
    let (w, v) = (&state.w, &state.v);
    let va = v.abs();
    let r = w.ncols();

    let cv = &aux.c * v;
    let linear = xv.transpose() * (state.p.transpose() * xv) * &cv + &aux.clean_kernel * &va * params.alpha;
    let vcv = symmetrize(v.transpose() * &cv);
    let mass = DMatrix::from_diagonal(&(va.row_sum().transpose() * params.alpha));
    let beta_g = &aux.g * params.beta;
    let eye = DMatrix::identity(r, r);
    let terms = [
        Quadratic { a: &aux.kernel, b: &vcv },
        Quadratic { a: &aux.clean_kernel, b: &mass },
        Quadratic { a: &beta_g, b: &eye },
    ];
    Ok(quadratic_step(w, SignSplit::new(&linear), &terms, params.guard_eps))
}

/// Multiplicative step for the representation `V`.
///
/// The `V`-dependent part of the surrogate is
///
/// ```text
/// tr(V^T C V (W^T K W)) + beta tr(V^T G V)
///   - 2 tr(V^T (C X^T P X W + alpha Kc W - alpha/2 (A^T + B^T)))
/// ```
///
/// where `(A^T)_ir = (Kc)_ii` and `(B^T)_ir = (W^T Kc W)_rr`. The locality
/// penalty is linear in `V >= 0`; its cross term goes to the numerator and the
/// squared norms to the denominator.
pub fn update_v(
    x: &DataMatrix,
    state: &FactorState,
    aux: &AuxMatrices,
    params: &Hyperparams,
) -> Result<DMatrix<f64>> {
    check_aux(x, state, aux)?;
    let xv = x.values();
    let (w, v) = (&state.w, &state.v);
    let (n, r) = w.shape();

    let kcw = &aux.clean_kernel * w;
    let anchor_sq = w.transpose() * &kcw;
    let mut linear = SignSplit::new(&(&aux.c * (xv.transpose() * &state.p * xv) * w));
    let local = SignSplit::new(&(&kcw * params.alpha));
    linear.pos += local.pos;
    linear.neg += local.neg;
    linear.neg += DMatrix::from_fn(n, r, |i, c| {
        0.5 * params.alpha * (aux.clean_kernel[(i, i)] + anchor_sq[(c, c)])
    });
    let wkw = symmetrize(w.transpose() * &aux.kernel * w);
    let beta_g = &aux.g * params.beta;
    let eye = DMatrix::identity(r, r);
    let terms = [
        Quadratic { a: &aux.c, b: &wkw },
        Quadratic { a: &beta_g, b: &eye },
    ];
    Ok(quadratic_step(v, linear, &terms, params.guard_eps))
}

/// Multiplicative step for the reconstruction weights, minimising
/// `||H - H Q||_F^2 = tr(Q^T A Q) - 2 tr(Q^T A) + const` (`A = H^T H`) over
/// `Q >= 0` with a zero diagonal:
/// `Q <- Q * sqrt((A+ + A- Q) / (A+ Q + A- + guard))`.
pub fn update_q(h: &DMatrix<f64>, q: &DMatrix<f64>, guard_eps: f64) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if q.ncols() != n || h.ncols() != n {
        return Err(Error::invalid(format!(
            "Q is {:?} but H has {} columns",
            q.shape(),
            h.ncols()
        )));
    }
    let gram = SignSplit::new(&(h.transpose() * h));
    let num = &gram.pos + &gram.neg * q;
    let den = &gram.pos * q + &gram.neg;
    let mut out = multiplicative(q, &num, &den, guard_eps);
    out.fill_diagonal(0.0);
    Ok(out)
}

/// System matrix and right-hand side of the projection step:
/// `(X (C + alpha Xi + beta G) X^T + gamma S) P = X C V W^T X^T`.
pub fn projection_system(
    x: &DataMatrix,
    state: &FactorState,
    aux: &AuxMatrices,
    params: &Hyperparams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_aux(x, state, aux)?;
    let xv = x.values();
    let inner = &aux.c + &aux.xi * params.alpha + &aux.g * params.beta;
    let mut lhs = xv * inner * xv.transpose();
    for i in 0..lhs.nrows() {
        lhs[(i, i)] += params.gamma * state.s[i];
    }
    let lhs = (&lhs + lhs.transpose()) * 0.5;
    let rhs = xv * &aux.c * &state.v * (xv * &state.w).transpose();
    Ok((lhs, rhs))
}

const MAX_JITTER_RETRIES: usize = 3;

/// Closed-form projection step. Falls back to a diagonal jitter of
/// `1e-10 * tr/d`, growing 100x per retry, when the system is singular.
pub fn solve_p(
    x: &DataMatrix,
    state: &FactorState,
    aux: &AuxMatrices,
    params: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let (lhs, rhs) = projection_system(x, state, aux, params)?;
    if rhs.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(rhs.nrows(), rhs.ncols()));
    }
    let d = lhs.nrows();
    let mean_diag = lhs.trace() / d as f64;
    let base = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut jitter = 0.0;
    for attempt in 0..=MAX_JITTER_RETRIES {
        let mut sys = lhs.clone();
        for i in 0..d {
            sys[(i, i)] += jitter;
        }
        if let Some(p) = try_spd_solve(sys, &rhs) {
            return Ok(p);
        }
        jitter = if attempt == 0 { 1e-10 * base } else { jitter * 100.0 };
        log::debug!("projection system singular, retrying with jitter {jitter:e}");
    }
    Err(Error::numeric(
        "projection solve",
        format!("system matrix singular after {MAX_JITTER_RETRIES} jitter retries"),
    ))
}

fn try_spd_solve(sys: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = sys.cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    // pivot ratio squared approximates the reciprocal condition number
    if lo.is_nan() || lo <= 0.0 || (lo / hi).powi(2) < 1e-14 {
        return None;
    }
    let p = chol.solve(rhs);
    p.iter().all(|v| v.is_finite()).then_some(p)
}
