//! Domain types and exact evaluation of the factorization objective
//!
//! ```text
//! O = ||X^T P + e b^T - V W^T X^T||_{2,1} + alpha f(W, V) + beta g(Q) + gamma ||P||_{2,1}
//! ```
//!
//! with `f` the local-coordinate penalty in the projected ("clean") space and
//! `g` the joint self-reconstruction error of `[P^T X; W^T; V^T]`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A `d x N` data matrix, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 1 {
            return Err(Error::invalid("data matrix needs at least one feature row"));
        }
        if values.ncols() < 2 {
            return Err(Error::invalid("data matrix needs at least two samples"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::invalid(format!("non-finite entry at ({r}, {c})")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Sample count `N`.
    pub fn samples(&self) -> usize {
        self.values.ncols()
    }
}

/// Trade-off weights and loop controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Weight of the local-coordinate penalty `f(W, V)`.
    pub alpha: f64,
    /// Weight of the adaptive reconstruction term `g(Q)`.
    pub beta: f64,
    /// Weight of the row-sparsity penalty on `P`.
    pub gamma: f64,
    pub rank: usize,
    /// Stopping threshold on `||V^{t+1} - V^t||_F`.
    pub conv_eps: f64,
    /// When set, the threshold is `conv_eps * ||V^0||_F`.
    pub conv_relative: bool,
    /// Added to every multiplicative denominator and used as the floor of
    /// row norms in the IRLS weights.
    pub guard_eps: f64,
    pub max_iter: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.01,
            rank: 2,
            conv_eps: 1e-5,
            conv_relative: true,
            guard_eps: 1e-8,
            max_iter: 500,
        }
    }
}

impl Hyperparams {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    /// Checks the parameters against a data set with `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("conv_eps", self.conv_eps), ("guard_eps", self.guard_eps)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.rank < 1 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if self.rank > n {
            return Err(Error::invalid(format!(
                "rank {} exceeds the number of samples {n}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// The optimisation variables.
///
/// `M` and `S` are diagonal and stored as vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    /// `d x d` projection onto the clean space.
    pub p: DMatrix<f64>,
    /// `N x R` concept weights, nonnegative.
    pub w: DMatrix<f64>,
    /// `N x R` new representation, nonnegative.
    pub v: DMatrix<f64>,
    /// `N x N` adaptive reconstruction weights, nonnegative with zero diagonal.
    pub q: DMatrix<f64>,
    /// Bias of the flexible residual.
    pub b: DVector<f64>,
    /// IRLS weights of the residual rows.
    pub m: DVector<f64>,
    /// IRLS weights of the rows of `P`.
    pub s: DVector<f64>,
}

impl FactorState {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn samples(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn check_dims(&self, x: &DataMatrix) -> Result<()> {
        let (d, n, r) = (x.dim(), x.samples(), self.rank());
        let ok = self.p.shape() == (d, d)
            && self.w.shape() == (n, r)
            && self.v.shape() == (n, r)
            && self.q.shape() == (n, n)
            && self.b.len() == d
            && self.m.len() == n
            && self.s.len() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "state shapes P{:?} W{:?} V{:?} Q{:?} b{} M{} S{} do not match data {d}x{n}",
                self.p.shape(),
                self.w.shape(),
                self.v.shape(),
                self.q.shape(),
                self.b.len(),
                self.m.len(),
                self.s.len()
            )))
        }
    }

    /// Verifies nonnegativity, the zero diagonal of `Q`, positive IRLS weights
    /// and finiteness of every entry.
    pub fn check_invariants(&self) -> Result<()> {
        let finite = |name: &str, vals: &[f64]| -> Result<()> {
            if vals.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::numeric(name, "non-finite entry"))
            }
        };
        finite("P", self.p.as_slice())?;
        finite("b", self.b.as_slice())?;
        for (name, mat) in [("W", &self.w), ("V", &self.v), ("Q", &self.q)] {
            finite(name, mat.as_slice())?;
            if let Some(v) = mat.iter().find(|v| **v < 0.0) {
                return Err(Error::numeric(name, format!("negative entry {v}")));
            }
        }
        if let Some(i) = (0..self.q.nrows()).find(|&i| self.q[(i, i)] != 0.0) {
            return Err(Error::numeric("Q", format!("nonzero diagonal at {i}")));
        }
        for (name, diag) in [("M", &self.m), ("S", &self.s)] {
            if diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::numeric(name, "diagonal entry not finite and positive"));
            }
        }
        Ok(())
    }
}

/// The four additive terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveBreakdown {
    pub residual_l21: f64,
    /// Already multiplied by `alpha`.
    pub locality_f: f64,
    /// Already multiplied by `beta`.
    pub weighting_g: f64,
    /// Already multiplied by `gamma`.
    pub projection_l21: f64,
    pub total: f64,
}

/// Matrices derived from a state that the update rules share.
#[derive(Debug, Clone)]
pub struct AuxMatrices {
    /// `H_e = I - e e_M^T / N_M`.
    pub he: DMatrix<f64>,
    /// `C = H_e^T M H_e`.
    pub c: DMatrix<f64>,
    /// `G = (I - Q)(I - Q)^T`.
    pub g: DMatrix<f64>,
    /// `[P^T X; W^T; V^T]`, shape `(d + 2R) x N`.
    pub h: DMatrix<f64>,
    /// Per-sample local-coordinate matrix, see [`xi_matrix`].
    pub xi: DMatrix<f64>,
    /// `X^T X`.
    pub kernel: DMatrix<f64>,
    /// `X^T P P^T X`.
    pub clean_kernel: DMatrix<f64>,
    /// `N_M = sum_i M_ii`.
    pub nm: f64,
    /// Diagonal of `M` as a vector.
    pub em: DVector<f64>,
}

/// Ones vector indexed by samples (length `N`).
pub fn ones_samples(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// Ones vector indexed by concepts (length `R`).
pub fn ones_rank(r: usize) -> DVector<f64> {
    DVector::from_element(r, 1.0)
}

/// Builds `H_e = I - e e_M^T / N_M` from the diagonal of `M`.
pub fn build_he(m: &DVector<f64>) -> Result<DMatrix<f64>> {
    if let Some(i) = m.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid(format!("M[{i}] = {} must be positive", m[i])));
    }
    let n = m.len();
    let nm = m.sum();
    let e = ones_samples(n);
    Ok(DMatrix::identity(n, n) - (e * m.transpose()) / nm)
}

/// `Xi = sum_i (1_i e_R^T - W) L_i (1_i e_R^T - W)^T` with `L_i = diag(|v_i|)`.
///
/// Expanding the sum gives
/// `diag(|V| e_R) - |V| W^T - W |V|^T + W diag(|V|^T e_N) W^T`.
pub fn xi_matrix(w: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let va = v.abs();
    let row_mass = &va * ones_rank(va.ncols());
    let col_mass = va.transpose() * ones_samples(n);
    let cross = &va * w.transpose();
    let mut wl = w.clone();
    for (mut col, s) in wl.column_iter_mut().zip(col_mass.iter()) {
        col *= *s;
    }
    let mut xi = &wl * w.transpose() - &cross - cross.transpose();
    for i in 0..n {
        xi[(i, i)] += row_mass[i];
    }
    xi
}

/// Stacks `[P^T X; W^T; V^T]`.
pub fn stack_h(x: &DMatrix<f64>, p: &DMatrix<f64>, w: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n, r) = (x.nrows(), x.ncols(), w.ncols());
    let mut h = DMatrix::zeros(d + 2 * r, n);
    h.rows_mut(0, d).copy_from(&(p.transpose() * x));
    h.rows_mut(d, r).copy_from(&w.transpose());
    h.rows_mut(d + r, r).copy_from(&v.transpose());
    h
}

pub fn build_aux(x: &DataMatrix, state: &FactorState) -> Result<AuxMatrices> {
    state.check_dims(x)?;
    let x = x.values();
    let n = x.ncols();
    let he = build_he(&state.m)?;
    let mut mhe = he.clone();
    for (i, mut row) in mhe.row_iter_mut().enumerate() {
        row *= state.m[i];
    }
    let c = he.transpose() * mhe;
    let iq = DMatrix::identity(n, n) - &state.q;
    let g = &iq * iq.transpose();
    let h = stack_h(x, &state.p, &state.w, &state.v);
    let xi = xi_matrix(&state.w, &state.v);
    let kernel = x.transpose() * x;
    let clean = state.p.transpose() * x;
    let clean_kernel = clean.transpose() * &clean;
    Ok(AuxMatrices {
        he,
        c,
        g,
        h,
        xi,
        kernel,
        clean_kernel,
        nm: state.m.sum(),
        em: state.m.clone(),
    })
}

/// `Y = X^T P + e b^T - V W^T X^T`, shape `N x d`.
pub fn flexible_residual(x: &DataMatrix, state: &FactorState) -> Result<DMatrix<f64>> {
    state.check_dims(x)?;
    let x = x.values();
    let mut y = x.transpose() * &state.p - &state.v * (x * &state.w).transpose();
    for mut row in y.row_iter_mut() {
        row += state.b.transpose();
    }
    Ok(y)
}

pub fn row_norms(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.norm()))
}

/// Sum of the Euclidean norms of the rows.
pub fn l21_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.norm()).sum()
}

/// Unweighted local-coordinate penalty
/// `sum_i sum_r |v_ir| ||P^T X w_r - P^T x_i||^2`.
pub fn locality(x: &DMatrix<f64>, p: &DMatrix<f64>, w: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let clean = p.transpose() * x;
    let anchors = &clean * w;
    let mut total = 0.0;
    for (i, zi) in clean.column_iter().enumerate() {
        for (r, ur) in anchors.column_iter().enumerate() {
            let weight = v[(i, r)].abs();
            if weight != 0.0 {
                total += weight * (ur - zi).norm_squared();
            }
        }
    }
    total
}

/// Evaluates the true objective, computing both L2,1 terms from row norms
/// rather than from the cached IRLS weights.
pub fn objective(x: &DataMatrix, state: &FactorState, params: &Hyperparams) -> Result<ObjectiveBreakdown> {
    let y = flexible_residual(x, state)?;
    let xv = x.values();
    let residual_l21 = l21_norm(&y);
    let locality_f = params.alpha * locality(xv, &state.p, &state.w, &state.v);
    let h = stack_h(xv, &state.p, &state.w, &state.v);
    let weighting_g = params.beta * (&h - &h * &state.q).norm_squared();
    let projection_l21 = params.gamma * l21_norm(&state.p);
    for (name, v) in [
        ("residual_l21", residual_l21),
        ("locality_f", locality_f),
        ("weighting_g", weighting_g),
        ("projection_l21", projection_l21),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("objective term evaluated to {v}")));
        }
    }
    Ok(ObjectiveBreakdown {
        residual_l21,
        locality_f,
        weighting_g,
        projection_l21,
        total: residual_l21 + locality_f + weighting_g + projection_l21,
    })
}
