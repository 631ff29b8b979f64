//! Two-phase mean-compliance problem in shifted coordinates.
//!
//! The design variable is the vector field `φ = (φ¹, φ²)` with `φ + m ≥ 0`,
//! `φ¹ + φ² = 0` pointwise and zero mean, where `m` holds the volume
//! fractions. The pointwise sum eliminates `φ² = -φ¹`, so the computational
//! representation is the scalar nodal field `φ¹` with the box
//! `-m₁ ≤ φ¹ ≤ m₂` and one mass row. All forms are stated for the vector
//! field: `(p, y)_H = 2 (∇p¹, ∇y¹)`, and a dual vector `g` pairs with a
//! scalar direction `v` as `gᵀ v`, meaning the direction `(v, -v)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::fem::{assemble_h1_form, assemble_l2_form, ElasticitySystem, StateSolution, StiffnessModel, TriMesh};
use crate::pdas::{Constraints, MassRow};
use crate::solver::ReducedProblem;
use crate::sparse::{dot, CsrMatrix};

/// Nodal values of the shifted hard-phase component `φ¹`; `φ² = -φ¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField(pub Vec<f64>);

impl PhaseField {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Both components `(φ¹, φ²)` of the shifted field.
    pub fn components(&self) -> [Vec<f64>; 2] {
        [self.0.clone(), self.0.iter().map(|v| -v).collect()]
    }

    /// Unshifted phase concentrations `φ + m`.
    pub fn concentrations(&self, m: &[f64; 2]) -> [Vec<f64>; 2] {
        [self.0.iter().map(|v| v + m[0]).collect(), self.0.iter().map(|v| m[1] - v).collect()]
    }
}

/// The admissible set in shifted coordinates: `φ ≥ -m`, `Σ φⁱ = 0`,
/// mean value zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet {
    pub volume_fraction: [f64; 2],
    pub constraints: Constraints,
}

impl FeasibleSet {
    /// Accepts volume fractions `m ≥ 0` with `Σ m = 1`; only two phases are
    /// supported by the scalar reduction.
    pub fn new(volume_fraction: &[f64], weights: Vec<f64>) -> Result<Self> {
        if volume_fraction.len() != 2 {
            return Err(VmptError::InfeasibleVolumeFraction(format!(
                "{} phases requested; the solver supports two",
                volume_fraction.len()
            )));
        }
        let m = [volume_fraction[0], volume_fraction[1]];
        if m.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (m[0] + m[1] - 1.0).abs() > 1e-12 {
            return Err(VmptError::InfeasibleVolumeFraction(format!("{m:?} is not a probability vector")));
        }
        let n = weights.len();
        let constraints = Constraints {
            lower: vec![-m[0]; n],
            upper: vec![m[1]; n],
            mass: Some(MassRow { weights, target: 0.0 }),
        };
        Ok(Self { volume_fraction: m, constraints })
    }

    pub fn violation(&self, phi: &[f64]) -> f64 {
        self.constraints.violation(phi)
    }

    /// True when the set is the single point `φ ≡ 0` (some phase has zero
    /// volume fraction).
    pub fn is_degenerate(&self) -> bool {
        self.volume_fraction.iter().any(|&m| m == 0.0)
    }
}

/// Maps an arbitrary nodal field to a feasible one: clamp to the box, then
/// apply the scalar shift that restores the mean while keeping the bounds.
pub fn project_feasible(raw: &[f64], set: &FeasibleSet) -> Result<PhaseField> {
    if set.is_degenerate() {
        if set.violation(raw) <= 1e-12 {
            return Ok(PhaseField(raw.to_vec()));
        }
        return Err(VmptError::InfeasibleVolumeFraction(format!(
            "volume fractions {:?} admit only φ ≡ 0",
            set.volume_fraction
        )));
    }
    set.constraints.shift_into(raw).map(PhaseField)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialGuess {
    /// `φ₀ ≡ 0`, i.e. the unshifted field equals `m` everywhere.
    Uniform,
    /// Seeded uniform noise over the box, then [`project_feasible`].
    Random,
}

pub fn initial_guess(kind: InitialGuess, set: &FeasibleSet, seed: u64) -> Result<PhaseField> {
    let n = set.constraints.dim();
    match kind {
        InitialGuess::Uniform => Ok(PhaseField::zeros(n)),
        InitialGuess::Random => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = (-set.volume_fraction[0], set.volume_fraction[1]);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
            project_feasible(&raw, set)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    /// Interface width ε.
    pub epsilon: f64,
    /// Perimeter weight γ.
    pub gamma: f64,
    pub volume_fraction: [f64; 2],
    pub stiffness: StiffnessModel,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self { epsilon: 0.04, gamma: 0.5, volume_fraction: [0.5, 0.5], stiffness: StiffnessModel::default() }
    }
}

impl ProblemParams {
    pub fn gamma_eps(&self) -> f64 {
        self.gamma * self.epsilon
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(VmptError::InvalidConfig(format!(
                "epsilon and gamma must be positive and finite, got {} and {}",
                self.epsilon, self.gamma
            )));
        }
        Ok(())
    }
}

/// Everything computed when evaluating `j`: value, its parts and the
/// factorized state.
#[derive(Debug)]
pub struct Evaluation {
    pub j: f64,
    pub compliance: f64,
    pub gl_energy: f64,
    pub state: StateSolution,
}

/// Reduced functional `j(φ) = ∫_{Γ_g} g·S(φ+m) + γ E(φ+m)` on a mesh.
#[derive(Debug)]
pub struct PhaseFieldProblem {
    mesh: Arc<TriMesh>,
    params: ProblemParams,
    elasticity: ElasticitySystem,
    /// Scalar `(∇p, ∇y)`.
    stiffness: CsrMatrix,
    /// Scalar `(p, y)_{L²}`.
    mass: CsrMatrix,
    /// `(p, y)_H` for the two-component field.
    h_form: Arc<CsrMatrix>,
    /// Lumped `(p, y)_{L²}` for the two-component field. Lumping keeps the
    /// subproblem operator an M-matrix, for which the active-set iteration
    /// is known to terminate.
    l2_form: Arc<CsrMatrix>,
    weights: Vec<f64>,
    feasible: FeasibleSet,
}

impl PhaseFieldProblem {
    pub fn new(mesh: Arc<TriMesh>, params: ProblemParams) -> Result<Self> {
        params.validate()?;
        let elasticity = ElasticitySystem::new(Arc::clone(&mesh), params.stiffness)?;
        let stiffness = assemble_h1_form(&mesh);
        let mass = assemble_l2_form(&mesh);
        let h_form = Arc::new(stiffness.scaled(2.0));
        let l2_form = Arc::new(mass.lumped().scaled(2.0));
        let weights = mass.mul_vec(&vec![1.0; mesh.num_nodes()]);
        let feasible = FeasibleSet::new(&params.volume_fraction, weights.clone())?;
        Ok(Self { mesh, params, elasticity, stiffness, mass, h_form, l2_form, weights, feasible })
    }

    /// Same problem with the traction multiplied by `s`.
    pub fn with_load_scale(mut self, s: f64) -> Self {
        self.elasticity.scale_load(s);
        self
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn params(&self) -> &ProblemParams {
        &self.params
    }

    pub fn elasticity(&self) -> &ElasticitySystem {
        &self.elasticity
    }

    pub fn feasible_set(&self) -> &FeasibleSet {
        &self.feasible
    }

    pub fn h_form_arc(&self) -> &Arc<CsrMatrix> {
        &self.h_form
    }

    pub fn l2_form_arc(&self) -> &Arc<CsrMatrix> {
        &self.l2_form
    }

    pub fn scalar_stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn scalar_mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Mass weights `∫ N_i` defining the mean-value row.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Unshifted hard-phase concentration `c = φ¹ + m₁`.
    pub fn concentration(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().map(|v| v + self.params.volume_fraction[0]).collect()
    }

    /// Ginzburg–Landau energy `∫ ε/2 |∇(φ+m)|² + ψ₀(φ+m)/ε` with
    /// `ψ₀(c) = ½ (1 - c·c)`; for two phases `ψ₀ = c (1 - c)`.
    /// Returns `(gradient part, potential part)`; both integrated exactly.
    pub fn gl_energy_parts(&self, phi: &[f64]) -> (f64, f64) {
        let eps = self.params.epsilon;
        let c = self.concentration(phi);
        // L annihilates constants and ψ₀ ≥ 0 on the box: both forms are
        // arranged to avoid cancellation
        let mean = dot(&self.weights, &c) / self.weights.iter().sum::<f64>();
        let centered: Vec<f64> = c.iter().map(|v| v - mean).collect();
        let grad_part = eps * self.stiffness.form(&centered, &centered);
        let complement: Vec<f64> = c.iter().map(|v| 1.0 - v).collect();
        let potential = self.mass.form(&c, &complement) / eps;
        (grad_part, potential)
    }

    pub fn gl_energy(&self, phi: &[f64]) -> f64 {
        let (a, b) = self.gl_energy_parts(phi);
        a + b
    }

    pub fn evaluate_j(&self, phi: &[f64]) -> Result<Evaluation> {
        let c = self.concentration(phi);
        let state = self.elasticity.solve_state(&c)?;
        let gl = self.gl_energy(phi);
        let compliance = state.compliance;
        Ok(Evaluation { j: compliance + self.params.gamma * gl, compliance, gl_energy: gl, state })
    }

    /// Dual vector of `j'(φ)`:
    /// `γ (2ε L c + M (1 - 2c) / ε) - Σ_e q'(c_e) (u_eᵀ ΔK_e u_e) / 3`.
    pub fn evaluate_gradient(&self, phi: &[f64], state: &StateSolution) -> Vec<f64> {
        let (eps, gamma) = (self.params.epsilon, self.params.gamma);
        let c = self.concentration(phi);
        let lc = self.stiffness.mul_vec(&c);
        let mc = self.mass.mul_vec(&c);
        let elastic = self.elasticity.energy_sensitivity(state);
        (0..c.len())
            .map(|i| gamma * (2.0 * eps * lc[i] + (self.weights[i] - 2.0 * mc[i]) / eps) - elastic[i])
            .collect()
    }

    /// `√(γε) ‖∇v‖_{L²}` for the two-component direction.
    pub fn scaled_gradient_norm(&self, v: &[f64]) -> f64 {
        (self.params.gamma_eps() * self.h_form.form(v, v).max(0.0)).sqrt()
    }
}

impl ReducedProblem for PhaseFieldProblem {
    type State = Evaluation;

    fn dim(&self) -> usize {
        self.mesh.num_nodes()
    }

    fn evaluate(&self, phi: &[f64]) -> Result<(f64, Evaluation)> {
        let e = self.evaluate_j(phi)?;
        Ok((e.j, e))
    }

    fn gradient(&self, phi: &[f64], state: &Evaluation) -> Vec<f64> {
        self.evaluate_gradient(phi, &state.state)
    }

    fn constraints(&self) -> &Constraints {
        &self.feasible.constraints
    }

    fn h_form(&self) -> &CsrMatrix {
        &self.h_form
    }

    fn l2_form(&self) -> &CsrMatrix {
        &self.l2_form
    }
}
