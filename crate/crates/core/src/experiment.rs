//! Reproducible runs of the cantilever problem: configuration, metric
//! selection, sweeps, result tables and field export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::fem::{Isotropic, StiffnessModel, TriMesh};
use crate::metrics::{
    make_h1_metric, make_l2_metric, make_lbfgs_metric, make_second_order_metric, LbfgsMemory, MetricForm, MetricKind,
};
use crate::phasefield::{initial_guess, Evaluation, InitialGuess, PhaseFieldProblem, ProblemParams};
use crate::solver::{fmt_f64, parse_f64, vmpt_solve, MetricFactory, SolverConfig, SolverTrace};
use crate::sparse::CsrMatrix;

/// Builds `a_k` for the phase-field problem. Holds the L-BFGS memory and
/// the previous iterate and gradient needed to update it.
pub struct PhaseFieldMetrics {
    kind: MetricKind,
    memory: LbfgsMemory,
    previous: Option<(Vec<f64>, Vec<f64>)>,
    scaled_base: Option<Arc<CsrMatrix>>,
    /// Pairs rejected by the curvature test.
    pub skipped_pairs: usize,
}

impl PhaseFieldMetrics {
    pub fn new(kind: MetricKind) -> Self {
        Self::with_depth(kind, 10)
    }

    pub fn with_depth(kind: MetricKind, depth: usize) -> Self {
        Self { kind, memory: LbfgsMemory::new(depth), previous: None, scaled_base: None, skipped_pairs: 0 }
    }

    pub fn memory(&self) -> &LbfgsMemory {
        &self.memory
    }

    fn scaled_base(&mut self, problem: &PhaseFieldProblem) -> Arc<CsrMatrix> {
        let ge = problem.params().gamma_eps();
        Arc::clone(self.scaled_base.get_or_insert_with(|| Arc::new(problem.h_form_arc().scaled(ge))))
    }
}

impl MetricFactory<PhaseFieldProblem> for PhaseFieldMetrics {
    fn metric<'a>(
        &mut self,
        problem: &'a PhaseFieldProblem,
        _k: usize,
        phi: &[f64],
        grad: &[f64],
        state: &'a Evaluation,
    ) -> Result<MetricForm<'a>> {
        let ge = problem.params().gamma_eps();
        Ok(match self.kind {
            MetricKind::L2 => make_l2_metric(problem.l2_form_arc()),
            MetricKind::H1 => make_h1_metric(problem.h_form_arc(), 1.0),
            MetricKind::ScaledH1 => {
                let mut m = make_h1_metric(&self.scaled_base(problem), 1.0);
                m.kind = MetricKind::ScaledH1;
                m.c1 = ge;
                m
            }
            MetricKind::SecondOrder => {
                make_second_order_metric(problem.h_form_arc(), ge, problem.elasticity(), &state.state)
            }
            MetricKind::Lbfgs => {
                if let Some((p0, g0)) = self.previous.take() {
                    let p: Vec<f64> = phi.iter().zip(&p0).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = grad.iter().zip(&g0).map(|(a, b)| a - b).collect();
                    if !self.memory.update(p, y) {
                        self.skipped_pairs += 1;
                    }
                }
                self.previous = Some((phi.to_vec(), grad.to_vec()));
                make_lbfgs_metric(&self.scaled_base(problem), ge, &self.memory)
            }
        })
    }
}

/// Starting step scale: `0.005 / (γε)` for metrics measured in the plain
/// H or L² product, `0.005` for those built on `γε (·,·)_H`; both describe
/// the same first step for the H-type metrics.
pub fn default_lambda0(kind: MetricKind, params: &ProblemParams) -> f64 {
    match kind {
        MetricKind::L2 | MetricKind::H1 => 0.005 / params.gamma_eps(),
        MetricKind::ScaledH1 | MetricKind::SecondOrder | MetricKind::Lbfgs => 0.005,
    }
}

/// Which quantity the stopping test compares with `tol`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    /// `‖v_k‖_H ≤ tol`.
    HNorm,
    /// `√(γε) ‖∇v_k‖_{L²} ≤ tol`.
    #[default]
    ScaledGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    #[default]
    MeshSweep,
    MetricCompare,
    BfgsSweep,
}

/// Material data as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialConfig {
    pub young_hard: f64,
    pub young_soft: f64,
    pub poisson: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self { young_hard: 1.0, young_soft: 1e-4, poisson: 0.3 }
    }
}

impl MaterialConfig {
    pub fn model(&self) -> StiffnessModel {
        StiffnessModel {
            hard: Isotropic { young: self.young_hard, poisson: self.poisson },
            soft: Isotropic { young: self.young_soft, poisson: self.poisson },
        }
    }
}

/// Everything needed to reproduce a single solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub h: f64,
    pub metric: MetricKind,
    pub epsilon: f64,
    pub gamma: f64,
    pub tol: f64,
    pub seed: u64,
    pub init: InitialGuess,
    pub volume_fraction: [f64; 2],
    pub k_max: usize,
    pub stopping: StoppingRule,
    /// Defaults to [`default_lambda0`].
    pub lambda0: Option<f64>,
    pub lbfgs_depth: usize,
    pub lx: f64,
    pub ly: f64,
    pub load_length: f64,
    pub material: MaterialConfig,
    pub strict_invariants: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            h: 1.0 / 32.0,
            metric: MetricKind::H1,
            epsilon: 0.04,
            gamma: 0.5,
            tol: 1e-5,
            seed: 0,
            init: InitialGuess::Uniform,
            volume_fraction: [0.5, 0.5],
            k_max: 50_000,
            stopping: StoppingRule::ScaledGradient,
            lambda0: None,
            lbfgs_depth: 10,
            lx: 2.0,
            ly: 1.0,
            load_length: 0.25,
            material: MaterialConfig::default(),
            strict_invariants: false,
        }
    }
}

impl RunSpec {
    pub fn params(&self) -> ProblemParams {
        ProblemParams {
            epsilon: self.epsilon,
            gamma: self.gamma,
            volume_fraction: self.volume_fraction,
            stiffness: self.material.model(),
        }
    }

    pub fn build_problem(&self) -> Result<PhaseFieldProblem> {
        let mesh = Arc::new(TriMesh::cantilever(self.h, self.lx, self.ly, self.load_length)?);
        PhaseFieldProblem::new(mesh, self.params())
    }

    pub fn solver_config(&self) -> SolverConfig {
        let params = self.params();
        let mut cfg = SolverConfig::with_lambda0(self.lambda0.unwrap_or_else(|| default_lambda0(self.metric, &params)));
        cfg.tol = self.tol;
        cfg.k_max = self.k_max;
        cfg.strict_invariants = self.strict_invariants;
        cfg.stop_scale = match self.stopping {
            StoppingRule::HNorm => 1.0,
            StoppingRule::ScaledGradient => params.gamma_eps().sqrt(),
        };
        cfg
    }

    /// Short directory-safe label, e.g. `03_h1_h0.03125`.
    pub fn label(&self, index: usize) -> String {
        format!("{index:02}_{}_h{}", self.metric, self.h)
    }
}

/// A solved run with everything needed for reporting and export.
#[derive(Debug)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub trace: SolverTrace,
    pub problem: PhaseFieldProblem,
    pub phi: Vec<f64>,
    pub displacement: Vec<f64>,
    pub lbfgs_skipped_pairs: usize,
}

/// Solves one run. `timing = false` reports zero seconds so that outputs
/// are byte-reproducible.
pub fn run_single(spec: &RunSpec, timing: bool) -> Result<RunOutcome> {
    let start = Instant::now();
    let problem = spec.build_problem()?;
    let cfg = spec.solver_config();
    let phi0 = initial_guess(spec.init, problem.feasible_set(), spec.seed)?;
    let mut factory = PhaseFieldMetrics::with_depth(spec.metric, spec.lbfgs_depth);
    let (phi, trace) = vmpt_solve(&problem, &mut factory, &cfg, phi0.values())?;
    let eval = problem.evaluate_j(&phi)?;
    let seconds = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let row = ResultRow {
        h: spec.h,
        metric: spec.metric.to_string(),
        iters: trace.iterations(),
        cpu_seconds: seconds,
        j_final: eval.j,
        compliance: eval.compliance,
        gl_energy: eval.gl_energy,
        terminate_reason: trace.termination.to_string(),
    };
    Ok(RunOutcome {
        row,
        trace,
        displacement: eval.state.displacement.clone(),
        problem,
        phi,
        lbfgs_skipped_pairs: factory.skipped_pairs,
    })
}

pub const RESULTS_HEADER: &str = "h,metric,iters,cpu_seconds,j_final,compliance,gl_energy,terminate_reason";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub h: f64,
    pub metric: String,
    pub iters: usize,
    pub cpu_seconds: f64,
    pub j_final: f64,
    pub compliance: f64,
    pub gl_energy: f64,
    pub terminate_reason: String,
}

impl ResultRow {
    /// Row for a run that failed before producing a result.
    pub fn failed(spec: &RunSpec, err: &VmptError) -> Self {
        Self {
            h: spec.h,
            metric: spec.metric.to_string(),
            iters: 0,
            cpu_seconds: 0.0,
            j_final: f64::NAN,
            compliance: f64::NAN,
            gl_energy: f64::NAN,
            terminate_reason: format!("error: {err}").replace([',', '\n', '\r'], ";"),
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            fmt_f64(self.h),
            self.metric,
            self.iters,
            fmt_f64(self.cpu_seconds),
            fmt_f64(self.j_final),
            fmt_f64(self.compliance),
            fmt_f64(self.gl_energy),
            self.terminate_reason
        )
    }
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

pub fn read_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => return Err(VmptError::Config(format!("results header mismatch: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 2;
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(VmptError::Config(format!("results line {lineno}: expected 8 fields")));
        }
        let real = |s: &str| parse_f64(s).map_err(|e| VmptError::Config(format!("results line {lineno}: {e}")));
        rows.push(ResultRow {
            h: real(f[0])?,
            metric: f[1].to_string(),
            iters: f[2].parse().map_err(|e| VmptError::Config(format!("results line {lineno}: {e}")))?,
            cpu_seconds: real(f[3])?,
            j_final: real(f[4])?,
            compliance: real(f[5])?,
            gl_energy: real(f[6])?,
            terminate_reason: f[7].to_string(),
        });
    }
    Ok(rows)
}

/// Aligned plain-text rendering of the result table.
pub fn format_table(rows: &[ResultRow]) -> String {
    let header: Vec<String> = RESULTS_HEADER.split(',').map(str::to_string).collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.h),
                r.metric.clone(),
                r.iters.to_string(),
                format!("{:.2}", r.cpu_seconds),
                short(r.j_final),
                short(r.compliance),
                short(r.gl_energy),
                r.terminate_reason.clone(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(cells.iter()) {
        let line: Vec<String> = row.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn short(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        fmt_f64(x)
    }
}

/// A list of runs plus where and how to report them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub table: TableKind,
    pub out: PathBuf,
    /// Report measured seconds; off gives byte-identical output files.
    pub timing: bool,
    /// Solve runs concurrently.
    pub parallel: bool,
    /// Values shared by all runs; individual runs override them.
    pub defaults: RunSpec,
    /// Cartesian product of mesh sizes and metrics appended to `runs`.
    pub sweep: Option<SweepSpec>,
    pub runs: Vec<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub h: Vec<f64>,
    pub metrics: Vec<MetricKind>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            table: TableKind::MeshSweep,
            out: PathBuf::from("out"),
            timing: true,
            parallel: true,
            defaults: RunSpec::default(),
            sweep: None,
            runs: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| VmptError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| VmptError::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves overrides and the sweep into concrete runs, in order:
    /// explicit runs first, then the sweep grouped by metric.
    pub fn expand(&self) -> Result<Vec<RunSpec>> {
        let base = toml::Table::try_from(&self.defaults).map_err(|e| VmptError::Config(e.to_string()))?;
        let mut runs = Vec::new();
        for (i, overrides) in self.runs.iter().enumerate() {
            let mut merged = base.clone();
            for (k, v) in overrides {
                merged.insert(k.clone(), v.clone());
            }
            let run: RunSpec = merged.try_into().map_err(|e| VmptError::Config(format!("runs[{i}]: {e}")))?;
            runs.push(run);
        }
        if let Some(sweep) = &self.sweep {
            for &metric in &sweep.metrics {
                for &h in &sweep.h {
                    runs.push(RunSpec { h, metric, ..self.defaults.clone() });
                }
            }
        }
        self.validate(&runs)?;
        Ok(runs)
    }

    fn validate(&self, runs: &[RunSpec]) -> Result<()> {
        for (i, r) in runs.iter().enumerate() {
            if !(r.h > 0.0 && r.h.is_finite()) {
                return Err(VmptError::Config(format!("run {i}: h must be positive")));
            }
            let is_sweep = matches!(self.table, TableKind::MeshSweep | TableKind::BfgsSweep);
            let level = -r.h.log2();
            if is_sweep && (level.fract() != 0.0 || !(3.0..=8.0).contains(&level)) {
                return Err(VmptError::Config(format!("run {i}: sweep mesh sizes must be 2^-3 … 2^-8, got {}", r.h)));
            }
        }
        Ok(())
    }
}

/// Runs every spec (concurrently when requested), writes per-run outputs
/// under `out/<label>/` and `out/results.csv`, and returns the rows in spec
/// order. Failed runs are reported in their row instead of aborting.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let runs = spec.expand()?;
    fs::create_dir_all(&spec.out)?;
    let work = |(i, run): (usize, &RunSpec)| -> ResultRow {
        match run_single(run, spec.timing) {
            Ok(outcome) => {
                let dir = spec.out.join(run.label(i));
                match write_run_outputs(&dir, &outcome) {
                    Ok(()) => outcome.row,
                    Err(e) => ResultRow { terminate_reason: format!("error: {e}").replace(',', ";"), ..outcome.row },
                }
            }
            Err(e) => ResultRow::failed(run, &e),
        }
    };
    let rows: Vec<ResultRow> = if spec.parallel {
        runs.par_iter().enumerate().map(work).collect()
    } else {
        runs.iter().enumerate().map(work).collect()
    };
    let file = fs::File::create(spec.out.join("results.csv"))?;
    write_results_csv(&rows, BufWriter::new(file))?;
    Ok(rows)
}

/// `trace.csv`, `final.csv` and `final.vtk` for one run.
pub fn write_run_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.trace.write_csv(BufWriter::new(fs::File::create(dir.join("trace.csv"))?))?;
    let c = outcome.problem.concentration(&outcome.phi);
    let mesh = outcome.problem.mesh();
    write_nodal_csv(mesh, &c, &outcome.displacement, BufWriter::new(fs::File::create(dir.join("final.csv"))?))?;
    write_vtk(mesh, &c, &outcome.displacement, BufWriter::new(fs::File::create(dir.join("final.vtk"))?))?;
    Ok(())
}

/// Nodal dump `x,y,phi,ux,uy` with `phi` the hard-phase concentration.
pub fn write_nodal_csv<W: Write>(mesh: &TriMesh, phi: &[f64], u: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x,y,phi,ux,uy")?;
    for (i, p) in mesh.vertices.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(phi[i]),
            fmt_f64(u[2 * i]),
            fmt_f64(u[2 * i + 1])
        )?;
    }
    w.flush()
}

/// Legacy ASCII VTK unstructured grid with point data `phi` and `u`.
pub fn write_vtk<W: Write>(mesh: &TriMesh, phi: &[f64], u: &[f64], mut w: W) -> std::io::Result<()> {
    let n = mesh.num_nodes();
    let t = mesh.num_triangles();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "phase field and displacement")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {n} double")?;
    for p in &mesh.vertices {
        writeln!(w, "{} {} 0", fmt_f64(p[0]), fmt_f64(p[1]))?;
    }
    writeln!(w, "CELLS {t} {}", 4 * t)?;
    for tri in &mesh.triangles {
        writeln!(w, "3 {} {} {}", tri[0], tri[1], tri[2])?;
    }
    writeln!(w, "CELL_TYPES {t}")?;
    for _ in 0..t {
        writeln!(w, "5")?;
    }
    writeln!(w, "POINT_DATA {n}")?;
    writeln!(w, "SCALARS phi double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in phi {
        writeln!(w, "{}", fmt_f64(*v))?;
    }
    writeln!(w, "VECTORS u double")?;
    for i in 0..n {
        writeln!(w, "{} {} 0", fmt_f64(u[2 * i]), fmt_f64(u[2 * i + 1]))?;
    }
    w.flush()
}
