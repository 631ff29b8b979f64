//! The variable-metric projection-type iteration.
//!
//! Each step solves `min ½ a_k(y - φ_k, y - φ_k) + λ_k ⟨j'(φ_k), y - φ_k⟩`
//! over the feasible set, takes `v_k = y - φ_k` as search direction and
//! backtracks along it with the Armijo rule.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::metrics::{CoercivityNorm, MetricForm};
use crate::pdas::{ActiveSetState, Constraints, PdasConfig, PdasSolver, QpProblem};
use crate::sparse::{axpy, dot, CsrMatrix};

/// A reduced objective `j` on a finite-dimensional convex set.
pub trait ReducedProblem {
    /// Data computed alongside `j` and reused for the gradient and metric.
    type State;

    fn dim(&self) -> usize;
    fn evaluate(&self, phi: &[f64]) -> Result<(f64, Self::State)>;
    /// Dual vector of `j'(φ)`: `⟨j'(φ), v⟩ = gᵀ v`.
    fn gradient(&self, phi: &[f64], state: &Self::State) -> Vec<f64>;
    fn constraints(&self) -> &Constraints;
    /// Gram matrix of the H inner product used for `‖v‖_H`.
    fn h_form(&self) -> &CsrMatrix;
    /// Gram matrix of the L² inner product.
    fn l2_form(&self) -> &CsrMatrix;
}

/// Produces the metric `a_k` for iteration `k`.
pub trait MetricFactory<P: ReducedProblem> {
    fn metric<'a>(
        &mut self,
        problem: &'a P,
        k: usize,
        phi: &[f64],
        grad: &[f64],
        state: &'a P::State,
    ) -> Result<MetricForm<'a>>;
}

/// Reuses one metric for every iteration.
pub struct FixedMetric<F>(pub F);

impl<P, F> MetricFactory<P> for FixedMetric<F>
where
    P: ReducedProblem,
    F: FnMut(&P) -> MetricForm<'static>,
{
    fn metric<'a>(&mut self, problem: &'a P, _: usize, _: &[f64], _: &[f64], _: &'a P::State) -> Result<MetricForm<'a>> {
        Ok((self.0)(problem))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub beta: f64,
    pub sigma: f64,
    pub tol: f64,
    pub k_max: usize,
    pub lambda0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_backtracks: usize,
    /// The stopping test is `stop_scale · ‖v_k‖_H ≤ tol`.
    pub stop_scale: f64,
    /// Abort on the first invariant violation instead of counting it.
    pub strict_invariants: bool,
    /// Keep every iterate in the trace.
    pub record_iterates: bool,
    pub pdas: PdasConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::with_lambda0(1.0)
    }
}

impl SolverConfig {
    /// Defaults with `λ_min = 10⁻⁶ λ₀` and `λ_max = 10⁶ λ₀`.
    pub fn with_lambda0(lambda0: f64) -> Self {
        Self {
            beta: 0.5,
            sigma: 1e-4,
            tol: 1e-5,
            k_max: 10_000,
            lambda0,
            lambda_min: 1e-6 * lambda0,
            lambda_max: 1e6 * lambda0,
            lambda_up: 1.0 / 0.75,
            lambda_down: 0.75,
            max_backtracks: 60,
            stop_scale: 1.0,
            strict_invariants: false,
            record_iterates: false,
            pdas: PdasConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.beta,
            self.sigma,
            self.tol,
            self.lambda0,
            self.lambda_min,
            self.lambda_max,
            self.lambda_up,
            self.lambda_down,
            self.stop_scale,
        ]
        .iter()
        .all(|v| v.is_finite());
        let bad = |msg: &str| Err(VmptError::InvalidConfig(msg.to_string()));
        if !finite {
            return bad("all solver parameters must be finite");
        }
        if !(0.0 < self.beta && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(0.0 < self.sigma && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if self.tol < 0.0 {
            return bad("tol must be nonnegative");
        }
        if self.k_max == 0 || self.max_backtracks == 0 {
            return bad("k_max and max_backtracks must be positive");
        }
        if !(0.0 < self.lambda_min && self.lambda_min <= self.lambda0 && self.lambda0 <= self.lambda_max) {
            return bad("need 0 < lambda_min <= lambda0 <= lambda_max");
        }
        if !(self.lambda_up > 0.0 && self.lambda_down > 0.0 && self.stop_scale > 0.0) {
            return bad("lambda_up, lambda_down and stop_scale must be positive");
        }
        Ok(())
    }
}

/// The current iterate and the quantities attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub k: usize,
    pub phi: Vec<f64>,
    pub lambda: f64,
    pub j_val: f64,
    pub grad: Vec<f64>,
    pub v: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Tolerance => "tolerance",
            Termination::MaxIterations => "k_max",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Termination {
    type Err = VmptError;

    fn from_str(s: &str) -> Result<Self> {
        [Termination::Tolerance, Termination::MaxIterations, Termination::LineSearchFailure]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| VmptError::Config(format!("unknown termination reason `{s}`")))
    }
}

/// One line of the trace. The last row of a converged run has `alpha = 0`
/// since no step is taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub j: f64,
    pub slope: f64,
    pub norm_v: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub backtracks: usize,
    pub pdas_iters: usize,
}

pub const TRACE_HEADER: &str = "k,j,slope,norm_v,alpha,lambda,backtracks,pdas_iters";

/// Per-run record with the invariant diagnostics gathered along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
    /// Iterations whose direction failed the descent inequality.
    pub descent_violations: usize,
    /// Largest constraint violation over all iterates.
    pub max_infeasibility: f64,
    /// Iterates `φ_0, φ_1, …` when requested in the config.
    pub iterates: Vec<Vec<f64>>,
}

impl SolverTrace {
    /// Number of steps taken.
    pub fn iterations(&self) -> usize {
        self.rows.iter().filter(|r| r.alpha > 0.0).count()
    }

    pub fn final_j(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.j)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.k,
                fmt_f64(r.j),
                fmt_f64(r.slope),
                fmt_f64(r.norm_v),
                fmt_f64(r.alpha),
                fmt_f64(r.lambda),
                r.backtracks,
                r.pdas_iters
            )?;
        }
        Ok(())
    }

    /// Parses rows written by [`Self::write_csv`].
    pub fn read_csv_rows<R: BufRead>(r: R) -> Result<Vec<TraceRow>> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != TRACE_HEADER {
            return Err(VmptError::Config(format!("trace header mismatch: `{}`", header.trim())));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            let lineno = i + 2;
            if f.len() != 8 {
                return Err(VmptError::Config(format!("trace line {lineno}: expected 8 fields, got {}", f.len())));
            }
            let real = |s: &str| parse_f64(s).map_err(|e| VmptError::Config(format!("trace line {lineno}: {e}")));
            let int = |s: &str| {
                s.parse::<usize>().map_err(|e| VmptError::Config(format!("trace line {lineno}: `{s}`: {e}")))
            };
            rows.push(TraceRow {
                k: int(f[0])?,
                j: real(f[1])?,
                slope: real(f[2])?,
                norm_v: real(f[3])?,
                alpha: real(f[4])?,
                lambda: real(f[5])?,
                backtracks: int(f[6])?,
                pdas_iters: int(f[7])?,
            });
        }
        Ok(rows)
    }
}

/// Shortest round-trip decimal; non-finite values print as `nan`/`inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:e}")
    }
}

pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))
}

/// Result of a successful line search.
#[derive(Debug)]
pub struct ArmijoStep<S> {
    pub alpha: f64,
    pub backtracks: usize,
    pub j_new: f64,
    pub state: S,
}

/// Armijo backtracking: the smallest `m ≤ max_backtracks` with
/// `j(φ + β^m v) ≤ j(φ) + β^m σ slope`.
pub fn armijo_backtrack<S, F>(
    mut eval: F,
    phi: &[f64],
    v: &[f64],
    j: f64,
    slope: f64,
    cfg: &SolverConfig,
) -> Result<ArmijoStep<S>>
where
    F: FnMut(&[f64]) -> Result<(f64, S)>,
{
    if !(slope < 0.0) {
        return Err(VmptError::NotDescentDirection { slope });
    }
    let mut trial = vec![0.0; phi.len()];
    let mut alpha = 1.0;
    for m in 0..=cfg.max_backtracks {
        trial.copy_from_slice(phi);
        axpy(alpha, v, &mut trial);
        let (j_new, state) = eval(&trial)?;
        if j_new <= j + alpha * cfg.sigma * slope {
            return Ok(ArmijoStep { alpha, backtracks: m, j_new, state });
        }
        alpha *= cfg.beta;
    }
    Err(VmptError::LineSearchFailure { backtracks: cfg.max_backtracks })
}

/// `λ_k` from `λ_{k-1}`: grow after a full step, shrink otherwise, clamp.
pub fn update_lambda(prev_lambda: f64, prev_alpha: f64, cfg: &SolverConfig) -> f64 {
    let raw = if prev_alpha == 1.0 { prev_lambda * cfg.lambda_up } else { prev_lambda * cfg.lambda_down };
    raw.clamp(cfg.lambda_min, cfg.lambda_max)
}

/// `slope ≤ -(c1/λ_max) ‖v‖² + 10⁻¹⁰ (1 + |slope|)`.
pub fn check_descent(slope: f64, norm_v: f64, c1: f64, lambda_max: f64) -> bool {
    slope <= -(c1 / lambda_max) * norm_v * norm_v + 1e-10 * (1.0 + slope.abs())
}

fn h_norm(form: &CsrMatrix, v: &[f64]) -> f64 {
    form.form(v, v).max(0.0).sqrt()
}

/// Runs the iteration from a feasible `phi0`.
pub fn vmpt_solve<P, M>(
    problem: &P,
    factory: &mut M,
    cfg: &SolverConfig,
    phi0: &[f64],
) -> Result<(Vec<f64>, SolverTrace)>
where
    P: ReducedProblem,
    M: MetricFactory<P>,
{
    cfg.validate()?;
    let constraints = problem.constraints();
    let violation = constraints.violation(phi0);
    if violation > 1e-10 {
        return Err(VmptError::InfeasibleStart { violation });
    }

    let mut phi = phi0.to_vec();
    let (mut j, mut state) = problem.evaluate(&phi)?;
    let mut lambda = cfg.lambda0;
    let mut prev_alpha: Option<f64> = None;
    let mut pdas = PdasSolver::new(cfg.pdas.clone());
    let mut warm: Option<ActiveSetState> = None;
    let mut trace = SolverTrace {
        rows: Vec::new(),
        termination: Termination::MaxIterations,
        descent_violations: 0,
        max_infeasibility: violation,
        iterates: Vec::new(),
    };
    if cfg.record_iterates {
        trace.iterates.push(phi.clone());
    }

    for k in 0..=cfg.k_max {
        if let Some(a) = prev_alpha {
            lambda = update_lambda(lambda, a, cfg);
        }
        let grad = problem.gradient(&phi, &state);

        let (v, pdas_state, c1, coercivity_norm) = {
            let metric = factory.metric(problem, k, &phi, &grad, &state)?;
            let op = metric.operator();
            let mut b = op.apply(&phi);
            b.iter_mut().zip(&grad).for_each(|(bi, gi)| *bi = lambda * gi - *bi);
            let qp = QpProblem { op, b, constraints };
            let (y, st) =
                pdas.solve(&qp, &phi, warm.as_ref()).map_err(|e| VmptError::SubproblemFailure(Box::new(e)))?;
            let v: Vec<f64> = y.iter().zip(&phi).map(|(a, b)| a - b).collect();
            (v, st, metric.c1, metric.coercivity_norm)
        };
        let norm_v = h_norm(problem.h_form(), &v);
        let slope = dot(&grad, &v);
        let mut row = TraceRow {
            k,
            j,
            slope,
            norm_v,
            alpha: 0.0,
            lambda,
            backtracks: 0,
            pdas_iters: pdas_state.iterations,
        };

        if cfg.stop_scale * norm_v <= cfg.tol {
            trace.rows.push(row);
            trace.termination = Termination::Tolerance;
            break;
        }
        if k == cfg.k_max {
            trace.rows.push(row);
            trace.termination = Termination::MaxIterations;
            break;
        }

        let norm_c = match coercivity_norm {
            CoercivityNorm::H => norm_v,
            CoercivityNorm::L2 => h_norm(problem.l2_form(), &v),
        };
        if !check_descent(slope, norm_c, c1, cfg.lambda_max) {
            trace.descent_violations += 1;
            if cfg.strict_invariants {
                return Err(VmptError::DescentViolation { k, slope, bound: -(c1 / cfg.lambda_max) * norm_c * norm_c });
            }
        }

        let step = match armijo_backtrack(|x| problem.evaluate(x), &phi, &v, j, slope, cfg) {
            Ok(s) => s,
            Err(VmptError::LineSearchFailure { .. }) | Err(VmptError::NotDescentDirection { .. }) => {
                if cfg.strict_invariants {
                    return Err(VmptError::LineSearchFailure { backtracks: cfg.max_backtracks });
                }
                row.backtracks = cfg.max_backtracks;
                trace.rows.push(row);
                trace.termination = Termination::LineSearchFailure;
                break;
            }
            Err(e) => return Err(e),
        };

        axpy(step.alpha, &v, &mut phi);
        let infeas = constraints.violation(&phi);
        trace.max_infeasibility = trace.max_infeasibility.max(infeas);
        if cfg.strict_invariants && infeas > 1e-10 {
            return Err(VmptError::InfeasibleIterate { k: k + 1, violation: infeas });
        }
        row.alpha = step.alpha;
        row.backtracks = step.backtracks;
        trace.rows.push(row);
        if cfg.record_iterates {
            trace.iterates.push(phi.clone());
        }
        j = step.j_new;
        state = step.state;
        prev_alpha = Some(step.alpha);
        warm = Some(pdas_state);
    }
    Ok((phi, trace))
}

/// `j(φ) = ½ φᵀ Q φ + cᵀ φ` on a box with an optional mass row; a cheap
/// surrogate with a computable minimizer.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub q: CsrMatrix,
    pub c: Vec<f64>,
    pub constraints: Constraints,
    pub h: CsrMatrix,
    pub l2: CsrMatrix,
}

impl ReducedProblem for QuadraticProblem {
    type State = ();

    fn dim(&self) -> usize {
        self.c.len()
    }

    fn evaluate(&self, phi: &[f64]) -> Result<(f64, ())> {
        Ok((0.5 * self.q.form(phi, phi) + dot(&self.c, phi), ()))
    }

    fn gradient(&self, phi: &[f64], _: &()) -> Vec<f64> {
        let mut g = self.q.mul_vec(phi);
        axpy(1.0, &self.c, &mut g);
        g
    }

    fn constraints(&self) -> &Constraints {
        &self.constraints
    }

    fn h_form(&self) -> &CsrMatrix {
        &self.h
    }

    fn l2_form(&self) -> &CsrMatrix {
        &self.l2
    }
}

/// Checks the trace-level invariants: `j` strictly decreasing and negative
/// slopes while a step is taken, and `λ` inside its bounds. Returns a list
/// of human-readable violations.
pub fn trace_violations(rows: &[TraceRow], lambda_min: f64, lambda_max: f64) -> Vec<String> {
    let mut out = Vec::new();
    let slack = |x: f64| 1e-12 * (1.0 + x.abs());
    for (i, r) in rows.iter().enumerate() {
        if !r.j.is_finite() {
            out.push(format!("k={}: non-finite j", r.k));
        }
        if r.alpha > 0.0 && !(r.slope < 0.0) {
            out.push(format!("k={}: nonnegative slope {:e}", r.k, r.slope));
        }
        if r.lambda < lambda_min - slack(lambda_min) || r.lambda > lambda_max + slack(lambda_max) {
            out.push(format!("k={}: lambda {:e} outside [{:e}, {:e}]", r.k, r.lambda, lambda_min, lambda_max));
        }
        if let Some(next) = rows.get(i + 1) {
            if r.alpha > 0.0 && !(next.j < r.j) {
                out.push(format!("k={}: j did not decrease ({:e} -> {:e})", r.k, r.j, next.j));
            }
        }
    }
    out
}
