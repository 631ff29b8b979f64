//! The family of inner products `a_k` used to build the projection-type
//! subproblem: L², H¹ (mean-free), scaled H¹, a second-order form built on
//! the linearized state equation, and an L-BFGS update of the scaled H¹
//! product.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::fem::{ElasticitySystem, StateSolution};
use crate::pdas::QpOperator;
use crate::sparse::{axpy, dot, CsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L2,
    H1,
    ScaledH1,
    SecondOrder,
    Lbfgs,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::L2, MetricKind::H1, MetricKind::ScaledH1, MetricKind::SecondOrder, MetricKind::Lbfgs];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::L2 => "l2",
            MetricKind::H1 => "h1",
            MetricKind::ScaledH1 => "scaled_h1",
            MetricKind::SecondOrder => "second_order",
            MetricKind::Lbfgs => "lbfgs",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = VmptError;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| VmptError::Config(format!("unknown metric `{s}` (expected l2|h1|scaled_h1|second_order|lbfgs)")))
    }
}

/// Norm in which a metric's coercivity constant is stated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoercivityNorm {
    /// The mean-free H¹ product `(∇p, ∇y)`.
    H,
    /// Discrete L²; used only by the L² metric, which is not coercive in H.
    L2,
}

/// Matrix-free contribution to a metric: `out += T p`.
pub trait ImplicitTerm: Send + Sync {
    fn apply_add(&self, p: &[f64], out: &mut [f64]);

    /// Exact sparse description `T = Bᵀ (s K)⁻¹ B`, if the term has one.
    /// Subproblem solves then use a saddle-point factorization instead of CG.
    fn saddle(&self) -> Option<SaddleTerm<'_>> {
        None
    }
}

/// `T = Bᵀ (scale · inner)⁻¹ B` with sparse `B` and SPD `inner`.
pub struct SaddleTerm<'t> {
    /// Entries `(row, node, value)` of `B`; repeated positions add up.
    pub coupling: Vec<(usize, usize, f64)>,
    pub inner: &'t CsrMatrix,
    pub scale: f64,
}

/// A symmetric positive (semi)definite bilinear form on nodal vectors.
pub struct MetricForm<'a> {
    pub kind: MetricKind,
    sparse: Arc<CsrMatrix>,
    implicit: Option<Box<dyn ImplicitTerm + 'a>>,
    /// Coercivity constant: `a(p, p) ≥ c1 ‖p‖²` in [`Self::coercivity_norm`].
    pub c1: f64,
    pub coercivity_norm: CoercivityNorm,
    /// Sparse part annihilates constants; definite only on mean-free fields.
    pub constant_kernel: bool,
}

impl fmt::Debug for MetricForm<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricForm")
            .field("kind", &self.kind)
            .field("c1", &self.c1)
            .field("implicit", &self.implicit.is_some())
            .finish()
    }
}

impl<'a> MetricForm<'a> {
    pub fn sparse_part(&self) -> &CsrMatrix {
        &self.sparse
    }

    pub fn has_implicit(&self) -> bool {
        self.implicit.is_some()
    }

    /// `A p`
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = self.sparse.mul_vec(p);
        if let Some(t) = &self.implicit {
            t.apply_add(p, &mut out);
        }
        out
    }

    /// `a(p, y)`
    pub fn form(&self, p: &[f64], y: &[f64]) -> f64 {
        dot(&self.apply(p), y)
    }

    pub fn operator(&self) -> QpOperator<'_> {
        QpOperator {
            sparse: &self.sparse,
            implicit: self.implicit.as_deref().map(|t| t as &dyn ImplicitTerm),
            constant_kernel: self.constant_kernel,
        }
    }
}

/// `scale · (∇p, ∇y)` given the assembled H-form. `c1 = scale`.
pub fn make_h1_metric(h_form: &Arc<CsrMatrix>, scale: f64) -> MetricForm<'static> {
    assert!(scale > 0.0, "metric scale must be positive");
    let kind = if scale == 1.0 { MetricKind::H1 } else { MetricKind::ScaledH1 };
    let sparse = if scale == 1.0 { Arc::clone(h_form) } else { Arc::new(h_form.scaled(scale)) };
    MetricForm { kind, sparse, implicit: None, c1: scale, coercivity_norm: CoercivityNorm::H, constant_kernel: true }
}

/// `(p, y)_{L²}`; its coercivity constant refers to the L² norm only.
pub fn make_l2_metric(l2_form: &Arc<CsrMatrix>) -> MetricForm<'static> {
    MetricForm {
        kind: MetricKind::L2,
        sparse: Arc::clone(l2_form),
        implicit: None,
        c1: 1.0,
        coercivity_norm: CoercivityNorm::L2,
        constant_kernel: false,
    }
}

/// `2 Gᵀ K⁻¹ G p`: the elastic part of the second-order metric, equal to
/// `2 ∫ C E(z_p) : E(z_y)` tested against `y`.
pub struct LinearizedStateTerm<'a> {
    system: &'a ElasticitySystem,
    state: &'a StateSolution,
}

impl ImplicitTerm for LinearizedStateTerm<'_> {
    fn apply_add(&self, p: &[f64], out: &mut [f64]) {
        let gp = self.system.apply_sensitivity(self.state, p);
        let kinv = self.system.solve_with(&self.state.factor, &gp);
        let back = self.system.apply_sensitivity_transpose(self.state, &kinv);
        axpy(2.0, &back, out);
    }

    fn saddle(&self) -> Option<SaddleTerm<'_>> {
        Some(SaddleTerm {
            coupling: self.system.sensitivity_entries(self.state),
            inner: &self.state.stiffness,
            scale: 0.5,
        })
    }
}

/// Second-order metric `γε (p, y)_H + 2 ∫ C(m+φ_k) E(z_p) : E(z_y)` at the
/// current state. `c1 = γε`.
pub fn make_second_order_metric<'a>(
    h_form: &Arc<CsrMatrix>,
    gamma_eps: f64,
    system: &'a ElasticitySystem,
    state: &'a StateSolution,
) -> MetricForm<'a> {
    MetricForm {
        kind: MetricKind::SecondOrder,
        sparse: Arc::new(h_form.scaled(gamma_eps)),
        implicit: Some(Box::new(LinearizedStateTerm { system, state })),
        c1: gamma_eps,
        coercivity_norm: CoercivityNorm::H,
        constant_kernel: true,
    }
}

/// The same second-order form written through the sensitivity of the
/// stiffness: `γε (p, y)_H - 2 ∫ C'(m+φ_k)(y) E(z_p) : E(u_k)`.
pub fn second_order_form_via_sensitivity(
    h_form: &CsrMatrix,
    gamma_eps: f64,
    system: &ElasticitySystem,
    state: &StateSolution,
    p: &[f64],
    y: &[f64],
) -> f64 {
    let z_p = system.solve_linearized_state(state, p);
    gamma_eps * h_form.form(p, y) + system.sensitivity_coupling(state, &z_p, y)
}

/// Stored curvature pairs for the L-BFGS metric.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    pub depth: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl Default for LbfgsMemory {
    fn default() -> Self {
        Self::new(10)
    }
}

impl LbfgsMemory {
    pub fn new(depth: usize) -> Self {
        Self { depth, pairs: VecDeque::with_capacity(depth + 1) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|(p, y)| (p.as_slice(), y.as_slice()))
    }

    /// Stores `(p, y)` when `⟨y, p⟩ > 1e-12 ‖y‖ ‖p‖`, evicting the oldest
    /// pair beyond `depth`. Returns whether the pair was accepted.
    pub fn update(&mut self, p: Vec<f64>, y: Vec<f64>) -> bool {
        let yp = dot(&y, &p);
        let scale = dot(&y, &y).sqrt() * dot(&p, &p).sqrt();
        if !(yp > 1e-12 * scale) || !yp.is_finite() {
            return false;
        }
        self.pairs.push_back((p, y));
        while self.pairs.len() > self.depth {
            self.pairs.pop_front();
        }
        true
    }
}

/// Low-rank correction of the recursive BFGS update:
/// `Σ_i [ -s_i s_iᵀ / ⟨s_i, p_i⟩ + y_i y_iᵀ / ⟨y_i, p_i⟩ ]` with
/// `s_i = a_i(p_i, ·)` from the form before pair `i` was added.
pub struct LbfgsTerm {
    s: Vec<Vec<f64>>,
    s_coef: Vec<f64>,
    y: Vec<Vec<f64>>,
    y_coef: Vec<f64>,
}

impl LbfgsTerm {
    pub fn build(base: &CsrMatrix, memory: &LbfgsMemory) -> Self {
        let mut term = LbfgsTerm { s: Vec::new(), s_coef: Vec::new(), y: Vec::new(), y_coef: Vec::new() };
        for (p, y) in memory.pairs() {
            let mut s = base.mul_vec(p);
            term.apply_add(p, &mut s);
            let sp = dot(&s, p);
            let yp = dot(y, p);
            term.s.push(s);
            term.s_coef.push(1.0 / sp);
            term.y.push(y.to_vec());
            term.y_coef.push(1.0 / yp);
        }
        term
    }
}

impl ImplicitTerm for LbfgsTerm {
    fn apply_add(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..self.s.len() {
            let a = dot(&self.s[i], p) * self.s_coef[i];
            axpy(-a, &self.s[i], out);
            let b = dot(&self.y[i], p) * self.y_coef[i];
            axpy(b, &self.y[i], out);
        }
    }
}

/// L-BFGS metric over the base form `base` (typically `γε (·,·)_H`).
/// Coercivity is not guaranteed; `c1` reports the base constant.
pub fn make_lbfgs_metric(base: &Arc<CsrMatrix>, base_c1: f64, memory: &LbfgsMemory) -> MetricForm<'static> {
    let implicit: Option<Box<dyn ImplicitTerm>> =
        if memory.is_empty() { None } else { Some(Box::new(LbfgsTerm::build(base, memory))) };
    MetricForm {
        kind: MetricKind::Lbfgs,
        sparse: Arc::clone(base),
        implicit,
        c1: base_c1,
        coercivity_norm: CoercivityNorm::H,
        constant_kernel: true,
    }
}

/// Updates the L-BFGS memory from consecutive iterates and gradients.
pub fn lbfgs_update(memory: &mut LbfgsMemory, p_k: Vec<f64>, y_k: Vec<f64>) -> bool {
    memory.update(p_k, y_k)
}
