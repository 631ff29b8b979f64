//! Primal-dual active-set solution of the projection-type subproblem
//!
//! ```text
//!     min ½ yᵀ A y + bᵀ y   s.t.  lower ≤ y ≤ upper,  wᵀ y = target
//! ```
//!
//! where `A` is a sparse symmetric matrix plus an optional matrix-free term.
//! Each active-set iteration solves the equality-constrained system on the
//! inactive nodes through a bordered system: directly with a sparse Cholesky
//! factor when `A` is purely sparse, through a sparse saddle-point system
//! when the matrix-free term has an exact sparse description, and by
//! projected preconditioned CG (preconditioned with the sparse part)
//! otherwise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::metrics::{ImplicitTerm, SaddleTerm};
use crate::sparse::{axpy, dot, CholeskyFactor, CsrMatrix, LuFactor, Pattern, SymbolicCholesky, SymbolicLu};

/// Integral-type equality row `wᵀ y = target`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassRow {
    pub weights: Vec<f64>,
    pub target: f64,
}

/// Pointwise box plus an optional mass row.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mass: Option<MassRow>,
}

impl Constraints {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Largest violation of any bound, or of the mass row scaled by `Σ|w|`.
    pub fn violation(&self, y: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for ((&yi, &lo), &hi) in y.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(lo - yi).max(yi - hi);
        }
        if let Some(m) = &self.mass {
            let scale: f64 = m.weights.iter().map(|w| w.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
            worst = worst.max((dot(&m.weights, y) - m.target).abs() / scale);
        }
        worst.max(0.0)
    }

    /// Clamps `raw + s` into the box with the scalar shift `s` chosen so
    /// that the mass row holds. Needs positive weights.
    pub fn shift_into(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let clamp = |s: f64| -> Vec<f64> {
            raw.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&r, (&lo, &hi))| (r + s).clamp(lo, hi))
                .collect()
        };
        let Some(m) = &self.mass else {
            return Ok(clamp(0.0));
        };
        if m.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(VmptError::InfeasibleVolumeFraction("mass weights must be positive".into()));
        }
        let mass_at = |s: f64| dot(&m.weights, &clamp(s)) - m.target;
        let min_mass = dot(&m.weights, &self.lower);
        let max_mass = dot(&m.weights, &self.upper);
        let slack = 1e-12 * m.weights.iter().sum::<f64>();
        if m.target < min_mass - slack || m.target > max_mass + slack {
            return Err(VmptError::InfeasibleVolumeFraction(format!(
                "target {} outside attainable range [{min_mass}, {max_mass}]",
                m.target
            )));
        }
        let span = raw
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&r, (&lo, &hi))| (r - lo).abs().max((hi - r).abs()))
            .fold(0.0_f64, f64::max)
            + 1.0;
        let (mut a, mut b) = (-span, span);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mass_at(mid) > 0.0 {
                b = mid;
            } else {
                a = mid;
            }
            if b - a <= f64::EPSILON * span {
                break;
            }
        }
        let mut y = clamp(0.5 * (a + b));
        // remove the bisection residue on strictly interior nodes
        let defect = dot(&m.weights, &y) - m.target;
        let interior: Vec<usize> = (0..y.len())
            .filter(|&i| y[i] > self.lower[i] && y[i] < self.upper[i])
            .collect();
        let w_int: f64 = interior.iter().map(|&i| m.weights[i]).sum();
        if w_int > 0.0 {
            let s = defect / w_int;
            for &i in &interior {
                y[i] = (y[i] - s).clamp(self.lower[i], self.upper[i]);
            }
        }
        Ok(y)
    }
}

/// Quadratic term of the subproblem: sparse part plus optional matrix-free
/// part. `constant_kernel` marks a sparse part whose null space is exactly
/// the constants (H¹-type forms).
#[derive(Clone, Copy)]
pub struct QpOperator<'a> {
    pub sparse: &'a CsrMatrix,
    pub implicit: Option<&'a dyn ImplicitTerm>,
    pub constant_kernel: bool,
}

impl<'a> QpOperator<'a> {
    pub fn sparse(sparse: &'a CsrMatrix) -> Self {
        Self { sparse, implicit: None, constant_kernel: false }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.sparse.mul_vec(x);
        if let Some(t) = self.implicit {
            t.apply_add(x, &mut y);
        }
        y
    }

    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(&self.apply(x), y)
    }
}

/// `min ½ yᵀ A y + bᵀ y` over [`Constraints`].
#[derive(Clone)]
pub struct QpProblem<'a> {
    pub op: QpOperator<'a>,
    pub b: Vec<f64>,
    pub constraints: &'a Constraints,
}

impl QpProblem<'_> {
    pub fn objective(&self, y: &[f64]) -> f64 {
        0.5 * self.op.form(y, y) + dot(&self.b, y)
    }

    /// `A y + b`
    pub fn residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply(y);
        axpy(1.0, &self.b, &mut r);
        r
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PdasConfig {
    /// Active-set predictor weight, multiplied by `diag(A)` per node.
    pub c: f64,
    pub max_iterations: usize,
    /// Relative tolerance of the projected CG used for matrix-free operators.
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for PdasConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iterations: 200, cg_tolerance: 1e-10, cg_max_iterations: 2000 }
    }
}

/// Converged active sets and multipliers. `multiplier` is `A y + b + ν w`,
/// i.e. `μ_lower - μ_upper`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSetState {
    pub active_lower: Vec<bool>,
    pub active_upper: Vec<bool>,
    pub multiplier: Vec<f64>,
    pub mass_multiplier: f64,
    pub iterations: usize,
    pub cg_iterations: usize,
}

impl ActiveSetState {
    pub fn is_active(&self, i: usize) -> bool {
        self.active_lower[i] || self.active_upper[i]
    }

    pub fn num_active(&self) -> usize {
        (0..self.active_lower.len()).filter(|&i| self.is_active(i)).count()
    }
}

/// Solves `S_FF x_F + ν w_F = r_F, w_Fᵀ x_F = t` on the free set `F` with a
/// single factorization of `S` (rows outside `F` pinned).
struct BorderedSolver<'a> {
    free: &'a [bool],
    weights: Option<&'a [f64]>,
    factor: CholeskyFactor,
    mode: BorderMode,
}

enum BorderMode {
    /// `S_FF` is nonsingular; `w_solve = S_FF⁻¹ w_F`.
    Regular { w_solve: Option<Vec<f64>>, w_s_w: f64 },
    /// Every node free and `S 1 = 0`: node `pin` is pinned and the constant
    /// component is restored from the mass row.
    ConstantKernel { pin: usize },
}

impl<'a> BorderedSolver<'a> {
    fn new(
        symbolic: &SymbolicCholesky,
        sparse: &CsrMatrix,
        free: &'a [bool],
        weights: Option<&'a [f64]>,
        constant_kernel: bool,
    ) -> Result<Self> {
        let all_free = free.iter().all(|&f| f);
        if constant_kernel && all_free {
            let w = weights.ok_or(VmptError::IndefiniteOperator)?;
            let pin = 0;
            let mut pinned = vec![false; free.len()];
            pinned[pin] = true;
            let mut s = sparse.clone();
            s.pin_rows(&pinned);
            let factor = symbolic.factorize(&s).map_err(|_| VmptError::IndefiniteOperator)?;
            if !(w.iter().sum::<f64>().abs() > 0.0) {
                return Err(VmptError::IndefiniteOperator);
            }
            return Ok(Self { free, weights, factor, mode: BorderMode::ConstantKernel { pin } });
        }
        let fixed: Vec<bool> = free.iter().map(|f| !f).collect();
        let mut s = sparse.clone();
        s.pin_rows(&fixed);
        let factor = symbolic.factorize(&s).map_err(|_| VmptError::IndefiniteOperator)?;
        let (w_solve, w_s_w) = match weights {
            Some(w) => {
                let wf: Vec<f64> = w.iter().zip(free).map(|(&wi, &f)| if f { wi } else { 0.0 }).collect();
                let x2 = factor.solve(&wf);
                let wsw = dot(&wf, &x2);
                (Some(x2), wsw)
            }
            None => (None, 0.0),
        };
        if weights.is_some() && !(w_s_w > 0.0) {
            return Err(VmptError::IndefiniteOperator);
        }
        Ok(Self { free, weights, factor, mode: BorderMode::Regular { w_solve, w_s_w } })
    }

    /// Removes the mass-row component of `v` along the `S`-orthogonal
    /// correction, so `w_Fᵀ v_F = t` holds to roundoff.
    fn restore_mass(&self, v: &mut [f64], target: f64) {
        let Some(w) = self.weights else { return };
        let wv: f64 = (0..v.len()).filter(|&i| self.free[i]).map(|i| w[i] * v[i]).sum();
        match &self.mode {
            BorderMode::Regular { w_solve: Some(x2), w_s_w } => axpy(-(wv - target) / w_s_w, x2, v),
            BorderMode::Regular { .. } => {}
            BorderMode::ConstantKernel { .. } => {
                let shift = (wv - target) / w.iter().sum::<f64>();
                v.iter_mut().for_each(|x| *x -= shift);
            }
        }
    }

    /// Returns `(x, ν)`; `x` vanishes outside `F`. Entries of `r` outside `F`
    /// are ignored.
    fn solve(&self, r: &[f64], target: f64) -> (Vec<f64>, f64) {
        let mut rhs: Vec<f64> = r.iter().zip(self.free).map(|(&ri, &f)| if f { ri } else { 0.0 }).collect();
        match &self.mode {
            BorderMode::Regular { w_solve, w_s_w } => {
                self.factor.solve_in_place(&mut rhs);
                match (self.weights, w_solve) {
                    (Some(w), Some(x2)) => {
                        let wx1: f64 = w.iter().zip(&rhs).zip(self.free).filter(|(_, &f)| f).map(|((wi, xi), _)| wi * xi).sum();
                        let nu = (wx1 - target) / w_s_w;
                        axpy(-nu, x2, &mut rhs);
                        (rhs, nu)
                    }
                    _ => (rhs, 0.0),
                }
            }
            BorderMode::ConstantKernel { pin } => {
                let w = self.weights.expect("constant-kernel mode needs a mass row");
                let w_sum: f64 = w.iter().sum();
                let nu = rhs.iter().sum::<f64>() / w_sum;
                axpy(-nu, w, &mut rhs);
                rhs[*pin] = 0.0;
                self.factor.solve_in_place(&mut rhs);
                let shift = (target - dot(w, &rhs)) / w_sum;
                rhs.iter_mut().for_each(|x| *x += shift);
                (rhs, nu)
            }
        }
    }
}

/// Reusable PDAS solver; keeps the symbolic analysis of the sparse part.
///
/// Plain PDAS can cycle for two-sided bounds with a mass row. A repeated
/// active set (or the iteration cap) switches to a primal feasible
/// active-set method, which decreases the objective monotonically and
/// terminates; it starts from the better of `y_init` and the last PDAS
/// iterate made feasible.
#[derive(Debug, Default)]
pub struct PdasSolver {
    symbolic: Option<SymbolicCholesky>,
    saddle_symbolic: Option<SymbolicLu>,
    pub config: PdasConfig,
}

/// Free-set system for `A = S + Bᵀ (s K)⁻¹ B` in the unknowns `(x, ζ, ν)`:
///
/// ```text
///     S_FF x + B_Fᵀ ζ + ν w_F = r_F
///     B_F x - s K ζ           = 0
///     w_Fᵀ x                  = t
/// ```
///
/// Eliminating `ζ` recovers the original system, so the solve is exact.
struct SaddleSystem<'t> {
    n: usize,
    aux: usize,
    term: SaddleTerm<'t>,
    symbolic: SymbolicLu,
}

impl SaddleSystem<'_> {
    fn pattern(sparse: &CsrMatrix, term: &SaddleTerm<'_>, mass: bool) -> Pattern {
        let n = sparse.dim();
        let aux = term.inner.dim();
        let dim = n + aux + usize::from(mass);
        let a = sparse.pattern().entries();
        let b = term.coupling.iter().flat_map(|&(r, v, _)| [(n + r, v), (v, n + r)]);
        let k = term.inner.pattern().entries().map(|(i, j)| (n + i, n + j));
        let w = (0..n).filter(|_| mass).flat_map(|i| [(i, dim - 1), (dim - 1, i)]);
        Pattern::from_entries(dim, a.chain(b).chain(k).chain(w))
    }

    /// Factorizes the system on `F`, with `diag(shift)` added to `S` if given.
    fn factor(
        &self,
        sparse: &CsrMatrix,
        free: &[bool],
        weights: Option<&[f64]>,
        shift: Option<&[f64]>,
    ) -> Result<SaddleFactor> {
        let n = self.n;
        let mut m = CsrMatrix::zeros(Arc::clone(self.symbolic.pattern()));
        let sp = sparse.pattern();
        for i in 0..n {
            for k in sp.row(i) {
                let j = sp.col(k);
                if free[i] && free[j] {
                    m.add(i, j, sparse.values()[k]);
                } else if i == j {
                    m.add(i, i, 1.0);
                }
            }
            if let (Some(d), true) = (shift, free[i]) {
                m.add(i, i, d[i]);
            }
        }
        for &(r, v, val) in &self.term.coupling {
            if free[v] {
                m.add(n + r, v, val);
                m.add(v, n + r, val);
            }
        }
        let kp = self.term.inner.pattern();
        for i in 0..self.aux {
            for k in kp.row(i) {
                m.add(n + i, n + kp.col(k), -self.term.scale * self.term.inner.values()[k]);
            }
        }
        if let Some(w) = weights {
            let last = n + self.aux;
            for i in (0..n).filter(|&i| free[i]) {
                m.add(i, last, w[i]);
                m.add(last, i, w[i]);
            }
        }
        let lu = self.symbolic.factorize(&m)?;
        Ok(SaddleFactor { lu, n, dim: self.symbolic.pattern().dim(), mass: weights.is_some() })
    }
}

struct SaddleFactor {
    lu: LuFactor,
    n: usize,
    dim: usize,
    mass: bool,
}

impl SaddleFactor {
    /// Returns `(x, ν)`; entries of `r` outside `F` are ignored.
    fn solve(&self, free: &[bool], r: &[f64], target: f64) -> Result<(Vec<f64>, f64)> {
        let mut rhs = vec![0.0; self.dim];
        for i in (0..self.n).filter(|&i| free[i]) {
            rhs[i] = r[i];
        }
        if self.mass {
            rhs[self.dim - 1] = target;
        }
        self.lu.solve_in_place(&mut rhs);
        let nu = if self.mass { rhs[self.dim - 1] } else { 0.0 };
        rhs.truncate(self.n);
        if rhs.iter().any(|v| !v.is_finite()) || !nu.is_finite() {
            return Err(VmptError::IndefiniteOperator);
        }
        Ok((rhs, nu))
    }
}

/// Iterations spent so far across the phases of one solve.
#[derive(Default)]
struct Counts {
    iterations: usize,
    cg: usize,
}

enum Pass {
    Converged(Vec<f64>, ActiveSetState),
    /// No convergence; carries the last equality-constrained solution.
    Stalled(Option<Vec<f64>>),
}

enum ShiftedSolver<'s> {
    Saddle(SaddleFactor, &'s [bool]),
    Bordered(BorderedSolver<'s>),
}

impl ShiftedSolver<'_> {
    fn solve(&self, r: &[f64], target: f64) -> Result<(Vec<f64>, f64)> {
        match self {
            Self::Saddle(f, free) => f.solve(free, r, target),
            Self::Bordered(b) => Ok(b.solve(r, target)),
        }
    }
}

/// Per-solve factorization data shared by all active-set iterations.
struct EqpContext<'t> {
    symbolic: SymbolicCholesky,
    saddle: Option<SaddleSystem<'t>>,
}

/// Bound value of fixed nodes, zero elsewhere.
fn fixed_values(cons: &Constraints, lo_set: &[bool], hi_set: &[bool]) -> Vec<f64> {
    (0..lo_set.len())
        .map(|i| {
            if lo_set[i] {
                cons.lower[i]
            } else if hi_set[i] {
                cons.upper[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// `A y + b + ν w` with `ν` fitted by least squares over the free nodes,
/// zeroed on free nodes.
fn multipliers(qp: &QpProblem<'_>, y: &[f64], lo_set: &[bool], hi_set: &[bool]) -> (Vec<f64>, f64) {
    let n = y.len();
    let free: Vec<bool> = (0..n).map(|i| !lo_set[i] && !hi_set[i]).collect();
    let mut mu = qp.residual(y);
    let nu = match &qp.constraints.mass {
        Some(m) => {
            let w = &m.weights;
            let num: f64 = (0..n).filter(|&i| free[i]).map(|i| w[i] * mu[i]).sum();
            let den: f64 = (0..n).filter(|&i| free[i]).map(|i| w[i] * w[i]).sum();
            let nu = if den > 0.0 { -num / den } else { bound_only_multiplier(&mu, w, lo_set) };
            axpy(nu, w, &mut mu);
            nu
        }
        None => 0.0,
    };
    for i in 0..n {
        if free[i] {
            mu[i] = 0.0;
        }
    }
    (mu, nu)
}

/// With every node at a bound the sign conditions only confine `ν` to an
/// interval; take its midpoint, or the least violating value if empty.
fn bound_only_multiplier(r: &[f64], w: &[f64], lo_set: &[bool]) -> f64 {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..r.len() {
        if w[i] <= 0.0 {
            continue;
        }
        let b = -r[i] / w[i];
        if lo_set[i] {
            lo = lo.max(b);
        } else {
            hi = hi.min(b);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

impl PdasSolver {
    pub fn new(config: PdasConfig) -> Self {
        Self { symbolic: None, saddle_symbolic: None, config }
    }

    fn symbolic_for(&mut self, a: &CsrMatrix) -> Result<SymbolicCholesky> {
        match &self.symbolic {
            Some(s) if **s.pattern() == **a.pattern() => Ok(s.clone()),
            _ => {
                let s = SymbolicCholesky::analyze(a.pattern())?;
                self.symbolic = Some(s.clone());
                Ok(s)
            }
        }
    }

    fn context<'t>(&mut self, qp: &QpProblem<'t>) -> Result<EqpContext<'t>> {
        let symbolic = self.symbolic_for(qp.op.sparse)?;
        let Some(term) = qp.op.implicit.and_then(|t| t.saddle()) else {
            return Ok(EqpContext { symbolic, saddle: None });
        };
        let pattern = SaddleSystem::pattern(qp.op.sparse, &term, qp.constraints.mass.is_some());
        let symbolic_lu = match &self.saddle_symbolic {
            Some(s) if **s.pattern() == pattern => s.clone(),
            _ => {
                let s = SymbolicLu::analyze(&Arc::new(pattern))?;
                self.saddle_symbolic = Some(s.clone());
                s
            }
        };
        let saddle = SaddleSystem { n: qp.b.len(), aux: term.inner.dim(), term, symbolic: symbolic_lu };
        Ok(EqpContext { symbolic, saddle: Some(saddle) })
    }

    /// Minimizer over the affine set where the fixed nodes sit at their
    /// bounds and the mass row holds. Returns the full vector and the CG
    /// iterations spent on a matrix-free term.
    fn solve_eqp(
        &self,
        qp: &QpProblem<'_>,
        ctx: &EqpContext<'_>,
        lo_set: &[bool],
        hi_set: &[bool],
    ) -> Result<(Vec<f64>, usize)> {
        let n = qp.b.len();
        let cons = qp.constraints;
        let weights = cons.mass.as_ref().map(|m| m.weights.as_slice());
        let target = cons.mass.as_ref().map_or(0.0, |m| m.target);
        let free: Vec<bool> = (0..n).map(|i| !lo_set[i] && !hi_set[i]).collect();
        let y_fixed = fixed_values(cons, lo_set, hi_set);
        if !free.iter().any(|&f| f) {
            return Ok((y_fixed, 0));
        }
        let coupling = qp.op.apply(&y_fixed);
        let rhs: Vec<f64> = (0..n).map(|i| -(qp.b[i] + coupling[i])).collect();
        let target_free =
            target - weights.map_or(0.0, |w| (0..n).filter(|&i| !free[i]).map(|i| w[i] * y_fixed[i]).sum());
        if let Some(saddle) = &ctx.saddle {
            let factor = saddle.factor(qp.op.sparse, &free, weights, None)?;
            let (mut x, _) = factor.solve(&free, &rhs, target_free)?;
            for i in (0..n).filter(|&i| !free[i]) {
                x[i] = y_fixed[i];
            }
            return Ok((x, 0));
        }
        let border = BorderedSolver::new(&ctx.symbolic, qp.op.sparse, &free, weights, qp.op.constant_kernel)?;
        let (mut x, _) = border.solve(&rhs, target_free);
        let mut cg = 0;
        if qp.op.implicit.is_some() {
            cg = projected_cg(&qp.op, &border, &free, &rhs, &mut x, &self.config)?;
            border.restore_mass(&mut x, target_free);
        }
        for i in 0..n {
            if !free[i] {
                x[i] = y_fixed[i];
            }
        }
        Ok((x, cg))
    }

    /// Runs the active-set iteration. `warm` seeds the initial active sets;
    /// otherwise the iteration starts with every node inactive.
    pub fn solve(
        &mut self,
        qp: &QpProblem<'_>,
        y_init: &[f64],
        warm: Option<&ActiveSetState>,
    ) -> Result<(Vec<f64>, ActiveSetState)> {
        let n = qp.b.len();
        assert_eq!(qp.constraints.dim(), n);
        assert_eq!(y_init.len(), n);
        let ctx = self.context(qp)?;
        let (lo_set, hi_set) = match warm {
            Some(w) if w.active_lower.len() == n => (w.active_lower.clone(), w.active_upper.clone()),
            _ => (vec![false; n], vec![false; n]),
        };
        let mut count = Counts::default();
        let mut fallback_start = match self.active_set_loop(qp, &ctx, lo_set, hi_set, self.config.max_iterations, &mut count)? {
            Pass::Converged(y, state) => return Ok((y, state)),
            Pass::Stalled(last) => last,
        };
        if ctx.saddle.is_some() || qp.op.implicit.is_none() {
            if let Some((x, lo, hi)) = self.interior_point(qp, &ctx, y_init, &mut count) {
                // crossover: the interior solution predicts the active sets
                match self.active_set_loop(qp, &ctx, lo, hi, 20, &mut count)? {
                    Pass::Converged(y, state) => return Ok((y, state)),
                    Pass::Stalled(_) => fallback_start = Some(x),
                }
            }
        }
        self.primal_active_set(qp, &ctx, y_init, fallback_start.as_deref(), count.iterations, count.cg)
    }

    /// Plain PDAS from the given sets. Stops when a set repeats, when the
    /// number of changed nodes keeps growing, or after `max_iterations`.
    fn active_set_loop(
        &self,
        qp: &QpProblem<'_>,
        ctx: &EqpContext<'_>,
        mut lo_set: Vec<bool>,
        mut hi_set: Vec<bool>,
        max_iterations: usize,
        count: &mut Counts,
    ) -> Result<Pass> {
        let n = qp.b.len();
        let cons = qp.constraints;
        let diag = qp.op.sparse.diagonal();
        let c: Vec<f64> = diag.iter().map(|&d| self.config.c * if d > 0.0 { d } else { 1.0 }).collect();
        let range_scale = range_scale(cons);
        let mut seen = std::collections::HashSet::new();
        let mut last_y = None;
        let (mut last_changes, mut growing) = (usize::MAX, 0);

        for _ in 0..max_iterations {
            count.iterations += 1;
            if cons.mass.is_some() && lo_set.iter().zip(&hi_set).all(|(a, b)| *a || *b) {
                // a mass row needs at least one free node
                let k = (0..n)
                    .min_by(|&i, &j| c[i].partial_cmp(&c[j]).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap_or(0);
                lo_set[k] = false;
                hi_set[k] = false;
            }
            if !seen.insert((lo_set.clone(), hi_set.clone())) {
                break;
            }
            let (mut y, cg) = self.solve_eqp(qp, ctx, &lo_set, &hi_set)?;
            count.cg += cg;
            let (mu, nu) = multipliers(qp, &y, &lo_set, &hi_set);

            let mut new_lo = vec![false; n];
            let mut new_hi = vec![false; n];
            for i in 0..n {
                let slack = 1e-13 * c[i] * range_scale;
                new_lo[i] = mu[i] + c[i] * (cons.lower[i] - y[i]) > slack;
                new_hi[i] = mu[i] + c[i] * (cons.upper[i] - y[i]) < -slack;
            }
            if new_lo == lo_set && new_hi == hi_set {
                for i in 0..n {
                    y[i] = y[i].clamp(cons.lower[i], cons.upper[i]);
                }
                let state = ActiveSetState {
                    active_lower: lo_set,
                    active_upper: hi_set,
                    multiplier: mu,
                    mass_multiplier: nu,
                    iterations: count.iterations,
                    cg_iterations: count.cg,
                };
                return Ok(Pass::Converged(y, state));
            }
            let changes = (0..n).filter(|&i| new_lo[i] != lo_set[i] || new_hi[i] != hi_set[i]).count();
            growing = if changes > last_changes { growing + 1 } else { 0 };
            last_changes = changes;
            last_y = Some(y);
            lo_set = new_lo;
            hi_set = new_hi;
            if growing >= 3 && changes > n / 20 {
                break;
            }
        }
        Ok(Pass::Stalled(last_y))
    }

    /// Factorization of `A + diag(shift)` on all nodes with the mass row.
    fn shifted_solver<'s>(
        &self,
        qp: &QpProblem<'_>,
        ctx: &'s EqpContext<'_>,
        all_free: &'s [bool],
        weights: Option<&'s [f64]>,
        shift: &[f64],
    ) -> Result<ShiftedSolver<'s>> {
        if let Some(saddle) = &ctx.saddle {
            return Ok(ShiftedSolver::Saddle(saddle.factor(qp.op.sparse, all_free, weights, Some(shift))?, all_free));
        }
        let mut a = qp.op.sparse.clone();
        for (i, d) in shift.iter().enumerate() {
            a.add(i, i, *d);
        }
        Ok(ShiftedSolver::Bordered(BorderedSolver::new(&ctx.symbolic, &a, all_free, weights, false)?))
    }

    /// Mehrotra predictor-corrector interior-point method for the same QP.
    /// Unlike PDAS it does not rely on `A` being an M-matrix. Returns the
    /// final iterate with predicted active sets, or `None` on breakdown.
    fn interior_point(
        &self,
        qp: &QpProblem<'_>,
        ctx: &EqpContext<'_>,
        y_start: &[f64],
        count: &mut Counts,
    ) -> Option<(Vec<f64>, Vec<bool>, Vec<bool>)> {
        let cons = qp.constraints;
        let n = qp.b.len();
        let (lo, hi) = (&cons.lower, &cons.upper);
        let has_lo: Vec<bool> = lo.iter().map(|v| v.is_finite()).collect();
        let has_hi: Vec<bool> = hi.iter().map(|v| v.is_finite()).collect();
        let nb = has_lo.iter().chain(&has_hi).filter(|b| **b).count();
        if nb == 0 {
            return None;
        }
        let weights = cons.mass.as_ref().map(|m| m.weights.as_slice());
        let target = cons.mass.as_ref().map_or(0.0, |m| m.target);
        let all_free = vec![true; n];

        let mut x = cons.shift_into(y_start).unwrap_or_else(|_| y_start.to_vec());
        for i in 0..n {
            let margin = if has_lo[i] && has_hi[i] { 0.01 * (hi[i] - lo[i]) } else { 0.01 };
            if has_lo[i] {
                x[i] = x[i].max(lo[i] + margin);
            }
            if has_hi[i] {
                x[i] = x[i].min(hi[i] - margin);
            }
        }
        let inf_norm = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let bscale = inf_norm(&qp.b);
        let z0 = (inf_norm(&qp.residual(&x)) + bscale).max(f64::MIN_POSITIVE);
        let mut zl: Vec<f64> = has_lo.iter().map(|&b| if b { z0 } else { 0.0 }).collect();
        let mut zu: Vec<f64> = has_hi.iter().map(|&b| if b { z0 } else { 0.0 }).collect();
        let mut nu = 0.0;
        let wsum = weights.map_or(1.0, |w| w.iter().map(|v| v.abs()).sum());
        let mut mu0 = None;

        for _ in 0..150 {
            count.iterations += 1;
            let sl: Vec<f64> = (0..n).map(|i| if has_lo[i] { x[i] - lo[i] } else { 1.0 }).collect();
            let su: Vec<f64> = (0..n).map(|i| if has_hi[i] { hi[i] - x[i] } else { 1.0 }).collect();
            let mut rd = qp.residual(&x);
            for i in 0..n {
                rd[i] += zu[i] - zl[i];
            }
            if let Some(w) = weights {
                axpy(nu, w, &mut rd);
            }
            let rp = weights.map_or(0.0, |w| dot(w, &x) - target);
            let mu = (dot(&zl, &sl) + dot(&zu, &su)
                - (0..n).filter(|&i| !has_lo[i]).map(|i| zl[i]).sum::<f64>()
                - (0..n).filter(|&i| !has_hi[i]).map(|i| zu[i]).sum::<f64>())
                / nb as f64;
            let mu0 = *mu0.get_or_insert(mu);
            if mu <= 1e-13 * mu0 && inf_norm(&rd) <= 1e-11 * (1.0 + bscale) && rp.abs() <= 1e-13 * wsum {
                break;
            }
            let shift: Vec<f64> = (0..n).map(|i| zl[i] / sl[i] + zu[i] / su[i]).collect();
            let solver = self.shifted_solver(qp, ctx, &all_free, weights, &shift).ok()?;
            // complementarity targets: (rl, ru) with sl zl → rl, su zu → ru
            let direction = |rl: &[f64], ru: &[f64]| -> Option<(Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
                let r: Vec<f64> = (0..n).map(|i| -rd[i] + rl[i] / sl[i] - ru[i] / su[i]).collect();
                let (dx, dnu) = solver.solve(&r, -rp).ok()?;
                let dzl = (0..n).map(|i| if has_lo[i] { (rl[i] - zl[i] * dx[i]) / sl[i] } else { 0.0 }).collect();
                let dzu = (0..n).map(|i| if has_hi[i] { (ru[i] + zu[i] * dx[i]) / su[i] } else { 0.0 }).collect();
                Some((dx, dnu, dzl, dzu))
            };
            let max_step = |dx: &[f64], dzl: &[f64], dzu: &[f64]| -> f64 {
                let mut a = 1.0_f64;
                for i in 0..n {
                    if has_lo[i] {
                        if dx[i] < 0.0 {
                            a = a.min(-sl[i] / dx[i]);
                        }
                        if dzl[i] < 0.0 {
                            a = a.min(-zl[i] / dzl[i]);
                        }
                    }
                    if has_hi[i] {
                        if dx[i] > 0.0 {
                            a = a.min(su[i] / dx[i]);
                        }
                        if dzu[i] < 0.0 {
                            a = a.min(-zu[i] / dzu[i]);
                        }
                    }
                }
                a
            };
            let rl: Vec<f64> = (0..n).map(|i| if has_lo[i] { -sl[i] * zl[i] } else { 0.0 }).collect();
            let ru: Vec<f64> = (0..n).map(|i| if has_hi[i] { -su[i] * zu[i] } else { 0.0 }).collect();
            let (dx, _, dzl, dzu) = direction(&rl, &ru)?;
            let a_aff = max_step(&dx, &dzl, &dzu);
            let mut mu_aff = 0.0;
            for i in 0..n {
                if has_lo[i] {
                    mu_aff += (sl[i] + a_aff * dx[i]) * (zl[i] + a_aff * dzl[i]);
                }
                if has_hi[i] {
                    mu_aff += (su[i] - a_aff * dx[i]) * (zu[i] + a_aff * dzu[i]);
                }
            }
            mu_aff /= nb as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let rl: Vec<f64> =
                (0..n).map(|i| if has_lo[i] { sigma * mu - sl[i] * zl[i] - dx[i] * dzl[i] } else { 0.0 }).collect();
            let ru: Vec<f64> =
                (0..n).map(|i| if has_hi[i] { sigma * mu - su[i] * zu[i] + dx[i] * dzu[i] } else { 0.0 }).collect();
            let (dx, dnu, dzl, dzu) = direction(&rl, &ru)?;
            let alpha = (0.995 * max_step(&dx, &dzl, &dzu)).min(1.0);
            axpy(alpha, &dx, &mut x);
            axpy(alpha, &dzl, &mut zl);
            axpy(alpha, &dzu, &mut zu);
            nu += alpha * dnu;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let range = range_scale(cons);
        let zscale = zl.iter().chain(&zu).fold(0.0_f64, |m, v| m.max(*v)).max(f64::MIN_POSITIVE);
        let lo_set: Vec<bool> = (0..n).map(|i| has_lo[i] && zl[i] / zscale > (x[i] - lo[i]) / range).collect();
        let hi_set: Vec<bool> =
            (0..n).map(|i| has_hi[i] && !lo_set[i] && zu[i] / zscale > (hi[i] - x[i]) / range).collect();
        Some((x, lo_set, hi_set))
    }

    /// Primal feasible active-set method: move towards the equality-
    /// constrained minimizer until a bound blocks, release the most violated
    /// multiplier at stationary points.
    fn primal_active_set(
        &self,
        qp: &QpProblem<'_>,
        ctx: &EqpContext<'_>,
        y_init: &[f64],
        pdas_y: Option<&[f64]>,
        iterations_before: usize,
        cg_before: usize,
    ) -> Result<(Vec<f64>, ActiveSetState)> {
        let cons = qp.constraints;
        let n = qp.b.len();
        let scale = range_scale(cons);
        let feasible = |y: &[f64]| -> Option<Vec<f64>> {
            let z = cons.shift_into(y).ok()?;
            (cons.violation(&z) <= 1e-12).then_some(z)
        };
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        if cons.violation(y_init) <= 1e-12 {
            candidates.push(y_init.iter().zip(cons.lower.iter().zip(&cons.upper)).map(|(v, (l, h))| v.clamp(*l, *h)).collect());
        } else if let Some(z) = feasible(y_init) {
            candidates.push(z);
        }
        if let Some(z) = pdas_y.and_then(feasible) {
            candidates.push(z);
        }
        let mut y = candidates
            .into_iter()
            .min_by(|a, b| qp.objective(a).partial_cmp(&qp.objective(b)).unwrap_or(std::cmp::Ordering::Equal))
            .ok_or_else(|| VmptError::InfeasibleVolumeFraction("no feasible starting point for the subproblem".into()))?;

        let snap = 1e-13 * scale;
        let (mut lo_set, mut hi_set) = snap_to_bounds(cons, &mut y, snap);
        let bscale = qp.b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut cg_total = cg_before;
        let cap = 20 * n + 200;
        for it in 1..=cap {
            let free: Vec<bool> = (0..n).map(|i| !lo_set[i] && !hi_set[i]).collect();
            let (y_hat, cg) = self.solve_eqp(qp, ctx, &lo_set, &hi_set)?;
            cg_total += cg;
            let d: Vec<f64> = y_hat.iter().zip(&y).map(|(a, b)| a - b).collect();
            let dmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let ymax = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if dmax <= 1e-13 * (1.0 + ymax) {
                y = y_hat;
                let (mu, nu) = multipliers(qp, &y, &lo_set, &hi_set);
                let mscale = 1e-11 * (1.0 + bscale + mu.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
                let mut worst = (mscale, None);
                for i in 0..n {
                    let v = if lo_set[i] { -mu[i] } else if hi_set[i] { mu[i] } else { 0.0 };
                    if v > worst.0 {
                        worst = (v, Some(i));
                    }
                }
                match worst.1 {
                    Some(i) => {
                        lo_set[i] = false;
                        hi_set[i] = false;
                    }
                    None => {
                        let state = ActiveSetState {
                            active_lower: lo_set,
                            active_upper: hi_set,
                            multiplier: mu,
                            mass_multiplier: nu,
                            iterations: iterations_before + it,
                            cg_iterations: cg_total,
                        };
                        return Ok((y, state));
                    }
                }
            } else {
                let mut t = 1.0;
                let mut block: Option<(usize, bool)> = None;
                for i in 0..n {
                    if !free[i] || d[i] == 0.0 {
                        continue;
                    }
                    let ti = if d[i] < 0.0 { (cons.lower[i] - y[i]) / d[i] } else { (cons.upper[i] - y[i]) / d[i] };
                    if ti < t {
                        t = ti.max(0.0);
                        block = Some((i, d[i] < 0.0));
                    }
                }
                axpy(t, &d, &mut y);
                if let Some((i, lower)) = block {
                    if lower {
                        lo_set[i] = true;
                        y[i] = cons.lower[i];
                    } else {
                        hi_set[i] = true;
                        y[i] = cons.upper[i];
                    }
                }
            }
        }
        Err(VmptError::MaxPdasIterations { iterations: iterations_before + cap })
    }
}

/// Active sets of the nodes within `snap` of a bound; those entries are set
/// exactly to the bound.
fn snap_to_bounds(cons: &Constraints, y: &mut [f64], snap: f64) -> (Vec<bool>, Vec<bool>) {
    let n = y.len();
    let mut lo_set = vec![false; n];
    let mut hi_set = vec![false; n];
    for i in 0..n {
        if y[i] - cons.lower[i] <= snap {
            lo_set[i] = true;
            y[i] = cons.lower[i];
        } else if cons.upper[i] - y[i] <= snap {
            hi_set[i] = true;
            y[i] = cons.upper[i];
        }
    }
    (lo_set, hi_set)
}

fn range_scale(cons: &Constraints) -> f64 {
    cons.lower
        .iter()
        .zip(&cons.upper)
        .map(|(lo, hi)| if (hi - lo).is_finite() { hi - lo } else { 1.0 })
        .fold(0.0, f64::max)
        .max(1.0)
}

/// Projected preconditioned CG for the free-set system with a matrix-free
/// term. `x` enters feasible for the constraints on `F` and is refined in
/// the null space of the active rows and the mass row.
fn projected_cg(
    op: &QpOperator<'_>,
    border: &BorderedSolver<'_>,
    free: &[bool],
    rhs: &[f64],
    x: &mut [f64],
    cfg: &PdasConfig,
) -> Result<usize> {
    let restrict = |v: &mut [f64]| {
        for (vi, &f) in v.iter_mut().zip(free) {
            if !f {
                *vi = 0.0;
            }
        }
    };
    let mut ax = op.apply(x);
    restrict(&mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(a, b)| a - b).collect();
    restrict(&mut r);
    let (mut z, _) = border.solve(&r, 0.0);
    let mut rz = dot(&r, &z);
    if !(rz > 0.0) {
        return Ok(0);
    }
    let rz0 = rz;
    let mut best = (rz, x.to_vec());
    let mut p = z.clone();
    for it in 1..=cfg.cg_max_iterations {
        let mut q = op.apply(&p);
        restrict(&mut q);
        let pq = dot(&p, &q);
        if !(pq > -1e-8 * rz) {
            return Err(VmptError::IndefiniteOperator);
        }
        // curvature at roundoff level relative to rz: the residual is noise
        if pq < 1e-8 * rz {
            return Ok(it - 1);
        }
        let alpha = rz / pq;
        axpy(alpha, &p, x);
        axpy(-alpha, &q, &mut r);
        z = border.solve(&r, 0.0).0;
        let rz_new = dot(&r, &z);
        if rz_new <= cfg.cg_tolerance * cfg.cg_tolerance * rz0 || rz_new <= 0.0 {
            return Ok(it);
        }
        if rz_new < best.0 {
            best = (rz_new, x.to_vec());
        } else if rz_new > 1e6 * best.0 {
            // lost orthogonality in roundoff; fall back to the best iterate
            x.copy_from_slice(&best.1);
            return Ok(it);
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        border.restore_mass(&mut p, 0.0);
    }
    x.copy_from_slice(&best.1);
    Ok(cfg.cg_max_iterations)
}

/// One-shot convenience wrapper around [`PdasSolver`].
pub fn solve_projection(
    qp: &QpProblem<'_>,
    y_init: &[f64],
    c_pdas: f64,
) -> Result<(Vec<f64>, ActiveSetState)> {
    let mut solver = PdasSolver::new(PdasConfig { c: c_pdas, ..PdasConfig::default() });
    solver.solve(qp, y_init, None)
}

/// Diagnostic summary of the optimality system at a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `‖(A y + b + ν w)_F‖` over nodes strictly inside the box.
    pub stationarity: f64,
    pub primal_violation: f64,
    /// Largest wrong-signed multiplier on nodes at a bound.
    pub dual_violation: f64,
}

/// Evaluates the KKT conditions, choosing ν by least squares over the
/// interior nodes. `tol` decides which nodes count as being at a bound.
pub fn kkt_report(qp: &QpProblem<'_>, y: &[f64], tol: f64) -> KktReport {
    let cons = qp.constraints;
    let n = y.len();
    let mut g = qp.residual(y);
    let at_lo: Vec<bool> = (0..n).map(|i| y[i] <= cons.lower[i] + tol).collect();
    let at_hi: Vec<bool> = (0..n).map(|i| y[i] >= cons.upper[i] - tol).collect();
    if let Some(m) = &cons.mass {
        let inner: Vec<usize> = (0..n).filter(|&i| !at_lo[i] && !at_hi[i]).collect();
        let den: f64 = inner.iter().map(|&i| m.weights[i] * m.weights[i]).sum();
        if den > 0.0 {
            let nu = -inner.iter().map(|&i| m.weights[i] * g[i]).sum::<f64>() / den;
            axpy(nu, &m.weights, &mut g);
        }
    }
    let mut stat = 0.0;
    let mut dual: f64 = 0.0;
    for i in 0..n {
        if at_lo[i] && !at_hi[i] {
            dual = dual.max(-g[i]);
        } else if at_hi[i] && !at_lo[i] {
            dual = dual.max(g[i]);
        } else if !at_lo[i] {
            stat += g[i] * g[i];
        }
    }
    KktReport { stationarity: stat.sqrt(), primal_violation: cons.violation(y), dual_violation: dual.max(0.0) }
}

/// Smallest value of `(A y + b)ᵀ (η - y)` over probe points `η` of the
/// feasible set: every mass-preserving transfer between two nodes taken to
/// the largest feasible extent, plus `probe_count` random feasible points
/// drawn with `seed`. Nonnegative (up to rounding) exactly at the solution.
pub fn vi_residual(qp: &QpProblem<'_>, y: &[f64], probe_count: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let cons = qp.constraints;
    let n = y.len();
    let r = qp.residual(y);
    let mut best = f64::INFINITY;
    match &cons.mass {
        Some(m) => {
            let cap_up: Vec<f64> = (0..n).map(|i| (cons.upper[i] - y[i]).max(0.0).min(1e300) * m.weights[i]).collect();
            let cap_dn: Vec<f64> = (0..n).map(|i| (y[i] - cons.lower[i]).max(0.0).min(1e300) * m.weights[i]).collect();
            let ratio: Vec<f64> = (0..n).map(|i| r[i] / m.weights[i]).collect();
            let partners = pair_candidates(&ratio, n);
            for i in 0..n {
                if cap_up[i] <= 0.0 {
                    continue;
                }
                for &j in &partners {
                    if i == j || cap_dn[j] <= 0.0 {
                        continue;
                    }
                    let t = cap_up[i].min(cap_dn[j]);
                    best = best.min(t * (ratio[i] - ratio[j]));
                }
            }
        }
        None => {
            for i in 0..n {
                let up = cons.upper[i] - y[i];
                let dn = cons.lower[i] - y[i];
                if up > 0.0 && up.is_finite() {
                    best = best.min(r[i] * up);
                }
                if dn < 0.0 && dn.is_finite() {
                    best = best.min(r[i] * dn);
                }
            }
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probe_count {
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let (lo, hi) = (cons.lower[i].max(y[i] - 1.0), cons.upper[i].min(y[i] + 1.0));
                rng.random_range(lo..=hi)
            })
            .collect();
        if let Ok(eta) = cons.shift_into(&raw) {
            let d: Vec<f64> = eta.iter().zip(y).map(|(e, yi)| e - yi).collect();
            best = best.min(dot(&r, &d));
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Receiving nodes for mass transfers: all nodes for small problems, the
/// extreme ratios otherwise.
fn pair_candidates(ratio: &[f64], n: usize) -> Vec<usize> {
    if n <= 400 {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| ratio[b].partial_cmp(&ratio[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out: Vec<usize> = idx.iter().take(64).copied().collect();
    out.extend(idx.iter().rev().take(64));
    out
}

/// Norm induced by the sparse-plus-implicit operator.
pub fn operator_norm(op: &QpOperator<'_>, x: &[f64]) -> f64 {
    op.form(x, x).max(0.0).sqrt()
}
