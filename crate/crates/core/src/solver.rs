//! The alternating optimisation loop and its convergence trace.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{build_aux, flexible_residual, objective, stack_h, DataMatrix, FactorState, Hyperparams, ObjectiveBreakdown};
use crate::updates::{refresh_m, refresh_s, solve_b, solve_p, update_q, update_v, update_w};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub breakdown: ObjectiveBreakdown,
    /// `||V^{t+1} - V^t||_F`; zero for the initial row.
    pub delta_v: f64,
    /// Wall time since the start of the fit.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: [&str; 8] = [
    "iter",
    "residual_l21",
    "locality_f",
    "weighting_g",
    "projection_l21",
    "total",
    "delta_v",
    "elapsed_ms",
];

impl FitTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Same rows ignoring wall-clock timings.
    pub fn same_values(&self, other: &FitTrace) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.iter == b.iter && a.breakdown == b.breakdown && a.delta_v.to_bits() == b.delta_v.to_bits()
            })
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: FactorState,
    pub trace: FitTrace,
    pub converged: bool,
    pub iterations_run: usize,
}

impl FitResult {
    /// The learned representation, one row per sample.
    pub fn representation(&self) -> &DMatrix<f64> {
        &self.state.v
    }
}

/// Cosine similarity between columns, negatives clamped to zero, zero
/// diagonal. Zero columns are dissimilar to everything.
pub fn cosine_weights(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    let gram = x.transpose() * x;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j || norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (gram[(i, j)] / (norms[i] * norms[j])).clamp(0.0, 1.0)
        }
    })
}

/// Starting point: cosine `Q`, uniform `(0, 1)` factors from the seeded
/// generator, `P = I`, identity IRLS weights and the matching bias.
pub fn init_state(x: &DataMatrix, params: &Hyperparams, seed: u64) -> Result<FactorState> {
    params.validate(x.samples())?;
    let (d, n, r) = (x.dim(), x.samples(), params.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(Open01));
    let v = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(Open01));
    let p = DMatrix::identity(d, d);
    let m = DVector::from_element(n, 1.0);
    let b = solve_b(x.values(), &p, &w, &v, &m);
    Ok(FactorState {
        q: cosine_weights(x.values()),
        s: DVector::from_element(d, 1.0),
        p,
        w,
        v,
        b,
        m,
    })
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

/// One pass of the alternating scheme, in place.
fn step(x: &DataMatrix, state: &mut FactorState, params: &Hyperparams) -> Result<()> {
    let xv = x.values();
    // majorise the two L2,1 terms at the current iterate
    state.m = refresh_m(&flexible_residual(x, state)?, params.guard_eps);
    state.s = refresh_s(&state.p, params.guard_eps);
    state.b = solve_b(xv, &state.p, &state.w, &state.v, &state.m);

    let aux = build_aux(x, state)?;
    state.w = update_w(x, state, &aux, params)?;
    // C, G and both kernels do not depend on W, so aux is still valid for V
    state.v = update_v(x, state, &aux, params)?;

    let h = stack_h(xv, &state.p, &state.w, &state.v);
    state.q = update_q(&h, &state.q, params.guard_eps)?;

    let aux = build_aux(x, state)?;
    state.p = solve_p(x, state, &aux, params)?;
    state.b = solve_b(xv, &state.p, &state.w, &state.v, &state.m);
    Ok(())
}

/// Runs the alternating optimisation from [`init_state`] until
/// `||V^{t+1} - V^t||_F` drops to the threshold or `max_iter` passes.
pub fn fit(x: &DataMatrix, params: &Hyperparams, seed: u64) -> Result<FitResult> {
    fit_from(x, params, init_state(x, params, seed)?)
}

/// Same as [`fit`] but starting from a caller-supplied state.
pub fn fit_from(x: &DataMatrix, params: &Hyperparams, mut state: FactorState) -> Result<FitResult> {
    params.validate(x.samples())?;
    state.check_dims(x)?;
    state.check_invariants()?;
    let start = Instant::now();
    let threshold = if params.conv_relative {
        params.conv_eps * state.v.norm()
    } else {
        params.conv_eps
    };
    let mut trace = FitTrace::default();
    trace.rows.push(TraceRow {
        iter: 0,
        breakdown: objective(x, &state, params).map_err(at(0))?,
        delta_v: 0.0,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    });

    let mut converged = false;
    let mut iterations_run = 0;
    for iter in 1..=params.max_iter {
        let previous_v = state.v.clone();
        step(x, &mut state, params).map_err(at(iter))?;
        if cfg!(debug_assertions) {
            state.check_invariants().map_err(at(iter))?;
        }
        let breakdown = objective(x, &state, params).map_err(at(iter))?;
        let delta_v = (&state.v - previous_v).norm();
        trace.rows.push(TraceRow {
            iter,
            breakdown,
            delta_v,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        iterations_run = iter;
        if delta_v <= threshold {
            converged = true;
            break;
        }
    }
    log::debug!(
        "fit finished after {iterations_run} iterations, converged={converged}, objective={:e}",
        trace.last().map(|r| r.breakdown.total).unwrap_or(f64::NAN)
    );
    Ok(FitResult {
        state,
        trace,
        converged,
        iterations_run,
    })
}

/// Writes the trace as CSV with the [`TRACE_HEADER`] columns.
pub fn export_trace<W: Write>(trace: &FitTrace, sink: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(sink);
    out.write_record(TRACE_HEADER)?;
    for row in &trace.rows {
        let b = &row.breakdown;
        out.write_record([
            row.iter.to_string(),
            b.residual_l21.to_string(),
            b.locality_f.to_string(),
            b.weighting_g.to_string(),
            b.projection_l21.to_string(),
            b.total.to_string(),
            row.delta_v.to_string(),
            row.elapsed_ms.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("trace sink", e))?;
    Ok(())
}

/// Parses a trace written by [`export_trace`].
pub fn parse_trace<R: Read>(source: R) -> Result<FitTrace> {
    let mut rdr = csv::Reader::from_reader(source);
    if rdr.headers()?.iter().ne(TRACE_HEADER) {
        return Err(Error::invalid("trace header does not match"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::invalid(format!("line {line}: bad number {:?}", &record[i])))
        };
        let iter = record[0]
            .parse()
            .map_err(|_| Error::invalid(format!("line {line}: bad iteration {:?}", &record[0])))?;
        rows.push(TraceRow {
            iter,
            breakdown: ObjectiveBreakdown {
                residual_l21: num(1)?,
                locality_f: num(2)?,
                weighting_g: num(3)?,
                projection_l21: num(4)?,
                total: num(5)?,
            },
            delta_v: num(6)?,
            elapsed_ms: num(7)?,
        });
    }
    Ok(FitTrace { rows })
}
