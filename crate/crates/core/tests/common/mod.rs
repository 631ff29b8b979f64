//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmpt::fem::{assemble_h1_form, line_forms, BoundarySpec, TriMesh};
use vmpt::pdas::{Constraints, MassRow};
use vmpt::sparse::CsrMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dense(a: &CsrMatrix) -> DMatrix<f64> {
    let d = a.to_dense();
    let n = d.len();
    DMatrix::from_fn(n, n, |i, j| d[i][j])
}

/// Box-and-mass QP `min ½ yᵀAy + bᵀy` in dense form.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mass: Option<(Vec<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Free,
    Lower,
    Upper,
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        let y = DVector::from_column_slice(y);
        0.5 * y.dot(&(&self.a * &y)) + self.b.dot(&y)
    }

    /// Solves the KKT system for a fixed pattern; returns `y` when the
    /// pattern yields a feasible point with correctly signed multipliers.
    pub fn try_pattern(&self, pat: &[Slot], tol: f64) -> Option<Vec<f64>> {
        let n = self.n();
        let mut y = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| pat[i] == Slot::Free).collect();
        for i in 0..n {
            match pat[i] {
                Slot::Lower => y[i] = self.lower[i],
                Slot::Upper => y[i] = self.upper[i],
                Slot::Free => {}
            }
            if !y[i].is_finite() {
                return None;
            }
        }
        let nf = free.len();
        let extra = usize::from(self.mass.is_some());
        let mut nu = 0.0;
        if nf > 0 {
            let dim = nf + extra;
            let mut k = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    k[(p, q)] = self.a[(i, j)];
                }
                let mut r = -self.b[i];
                for j in 0..n {
                    if pat[j] != Slot::Free {
                        r -= self.a[(i, j)] * y[j];
                    }
                }
                rhs[p] = r;
            }
            if let Some((w, t)) = &self.mass {
                let mut r = *t;
                for j in 0..n {
                    if pat[j] != Slot::Free {
                        r -= w[j] * y[j];
                    }
                }
                for (p, &i) in free.iter().enumerate() {
                    k[(p, nf)] = w[i];
                    k[(nf, p)] = w[i];
                }
                rhs[nf] = r;
            }
            let sol = k.lu().solve(&rhs)?;
            for (p, &i) in free.iter().enumerate() {
                y[i] = sol[p];
            }
            if extra == 1 {
                nu = sol[nf];
            }
        }
        for &i in &free {
            if y[i] < self.lower[i] - tol || y[i] > self.upper[i] + tol {
                return None;
            }
        }
        let yv = DVector::from_column_slice(&y);
        let r = &self.a * &yv + &self.b;
        match &self.mass {
            Some((w, t)) => {
                let mass: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
                if (mass - t).abs() > tol * (1.0 + t.abs()) {
                    return None;
                }
                if nf > 0 {
                    self.signs_ok(pat, &r, nu, w, tol).then_some(y)
                } else {
                    // ν is free: need an interval of admissible values
                    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                    for i in 0..n {
                        let bound = -r[i] / w[i];
                        match pat[i] {
                            Slot::Lower => lo = lo.max(bound),
                            Slot::Upper => hi = hi.min(bound),
                            Slot::Free => {}
                        }
                    }
                    (lo <= hi + tol).then_some(y)
                }
            }
            None => self.signs_ok(pat, &r, 0.0, &vec![0.0; n], tol).then_some(y),
        }
    }

    fn signs_ok(&self, pat: &[Slot], r: &DVector<f64>, nu: f64, w: &[f64], tol: f64) -> bool {
        (0..self.n()).all(|i| {
            let g = r[i] + nu * w[i];
            match pat[i] {
                Slot::Lower => g >= -tol,
                Slot::Upper => g <= tol,
                Slot::Free => true,
            }
        })
    }

    /// Approximate solution by projected Gauss–Seidel for fixed ν and
    /// bisection on ν. Used only to order the exact enumeration.
    pub fn guess(&self) -> Vec<f64> {
        let n = self.n();
        let solve_box = |nu: f64| -> Vec<f64> {
            let mut y: Vec<f64> =
                (0..n).map(|i| 0.0f64.clamp(self.lower[i].max(-1e6), self.upper[i].min(1e6))).collect();
            for _ in 0..4000 {
                for i in 0..n {
                    let wi = self.mass.as_ref().map_or(0.0, |(w, _)| w[i]);
                    let mut r = self.b[i] + nu * wi;
                    for j in 0..n {
                        if j != i {
                            r += self.a[(i, j)] * y[j];
                        }
                    }
                    let aii = self.a[(i, i)];
                    y[i] = (-r / aii).clamp(self.lower[i], self.upper[i]);
                }
            }
            y
        };
        match &self.mass {
            None => solve_box(0.0),
            Some((w, t)) => {
                let mass = |y: &[f64]| -> f64 { w.iter().zip(y).map(|(a, b)| a * b).sum() };
                let (mut lo, mut hi) = (-1e4, 1e4);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if mass(&solve_box(mid)) > *t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                solve_box(0.5 * (lo + hi))
            }
        }
    }

    /// Exact minimizer by enumeration of active patterns, visited in order
    /// of Hamming distance from the pattern of `guess`. The KKT point is
    /// unique for these strictly convex problems, so the first admissible
    /// pattern is the answer. `full = true` skips the ordering and scans
    /// every pattern, checking that exactly one distinct solution exists.
    pub fn solve(&self, full: bool) -> Vec<f64> {
        let n = self.n();
        if full {
            let mut found: Option<Vec<f64>> = None;
            let total = 3usize.pow(n as u32);
            for code in 0..total {
                let pat = decode(code, n);
                if let Some(y) = self.try_pattern(&pat, 1e-11) {
                    if let Some(prev) = &found {
                        let diff = prev.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                        assert!(diff < 1e-8, "two distinct KKT points");
                    } else {
                        found = Some(y);
                    }
                }
            }
            return found.expect("no KKT pattern found");
        }
        let g = self.guess();
        let tol_b = 1e-7;
        let base: Vec<Slot> = (0..n)
            .map(|i| {
                if g[i] <= self.lower[i] + tol_b {
                    Slot::Lower
                } else if g[i] >= self.upper[i] - tol_b {
                    Slot::Upper
                } else {
                    Slot::Free
                }
            })
            .collect();
        for d in 0..=n {
            let mut hit = None;
            for_each_subset(n, d, &mut |idx: &[usize]| {
                if hit.is_some() {
                    return;
                }
                // each chosen index takes one of the two other slot values
                for mask in 0..(1usize << d) {
                    let mut pat = base.clone();
                    for (b, &i) in idx.iter().enumerate() {
                        let others = others(base[i]);
                        pat[i] = others[(mask >> b) & 1];
                    }
                    if let Some(y) = self.try_pattern(&pat, 1e-11) {
                        hit = Some(y);
                        return;
                    }
                }
            });
            if let Some(y) = hit {
                return y;
            }
        }
        panic!("no KKT pattern found");
    }
}

fn others(s: Slot) -> [Slot; 2] {
    match s {
        Slot::Free => [Slot::Lower, Slot::Upper],
        Slot::Lower => [Slot::Free, Slot::Upper],
        Slot::Upper => [Slot::Free, Slot::Lower],
    }
}

fn decode(mut code: usize, n: usize) -> Vec<Slot> {
    (0..n)
        .map(|_| {
            let s = match code % 3 {
                0 => Slot::Free,
                1 => Slot::Lower,
                _ => Slot::Upper,
            };
            code /= 3;
            s
        })
        .collect()
}

fn for_each_subset(n: usize, d: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, d: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == d {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < d - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, d, cur, f);
            cur.pop();
        }
    }
    rec(0, n, d, &mut Vec::with_capacity(d), f);
}

/// A random QP instance in both sparse and dense form.
pub struct Instance {
    pub a: CsrMatrix,
    pub b: Vec<f64>,
    pub constraints: Constraints,
    pub constant_kernel: bool,
    pub dense: DenseQp,
}

/// Small scalar H¹ forms: 1D chains and 2D grids with at most 20 nodes.
pub fn small_h1_form(rng: &mut ChaCha8Rng) -> CsrMatrix {
    if rng.random_bool(0.5) {
        let n = rng.random_range(3..=20);
        line_forms(n, rng.random_range(0.5..3.0)).0
    } else {
        let shapes = [(1, 1), (2, 1), (3, 1), (2, 2), (3, 2), (4, 2), (3, 3), (4, 3)];
        let (nx, ny) = shapes[rng.random_range(0..shapes.len())];
        let mesh = TriMesh::new(nx, ny, nx as f64 * 0.5, ny as f64 * 0.5, BoundarySpec::cantilever(ny as f64 * 0.5, 0.1))
            .unwrap();
        assemble_h1_form(&mesh)
    }
}

/// `A = L + diag(shift)` with random box, mass row and linear term. With
/// probability ½ the shift is zero so `A` has the constants as kernel and
/// the mass row is always present.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let l = small_h1_form(rng);
    let n = l.dim();
    let singular = rng.random_bool(0.5);
    let mut a = l.clone();
    if !singular {
        for i in 0..n {
            a.add(i, i, rng.random_range(0.01..2.0));
        }
    }
    let with_mass = singular || rng.random_bool(0.7);
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..-0.05)).collect();
    let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let mass = with_mass.then(|| {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
        let y0: Vec<f64> = (0..n).map(|i| rng.random_range(lower[i]..upper[i])).collect();
        let t: f64 = w.iter().zip(&y0).map(|(a, b)| a * b).sum();
        (w, t)
    });
    let scale = rng.random_range(0.1..20.0);
    let b: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let constraints = Constraints {
        lower: lower.clone(),
        upper: upper.clone(),
        mass: mass.clone().map(|(weights, target)| MassRow { weights, target }),
    };
    let dense = DenseQp { a: dense(&a), b: DVector::from_vec(b.clone()), lower, upper, mass };
    Instance { a, b, constraints, constant_kernel: singular, dense }
}

/// `‖x - y‖_A`.
pub fn a_norm_diff(a: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(y).map(|(p, q)| p - q));
    d.dot(&(a * &d)).max(0.0).sqrt()
}

/// Ginzburg–Landau energy of the hard-phase concentration `c` computed
/// triangle by triangle: the gradient term from the constant P1 gradient and
/// `∫ c(1-c)` with the exact P1 quadrature `∫ c_i c_j = A(1+δ_ij)/12`.
pub fn gl_energy_oracle(mesh: &TriMesh, c: &[f64], eps: f64) -> f64 {
    let mut grad_part = 0.0;
    let mut pot = 0.0;
    for t in mesh.triangles.iter().rev() {
        let p: Vec<[f64; 2]> = t.iter().map(|&i| mesh.vertices[i]).collect();
        let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
        let (c0, c1, c2) = (c[t[0]], c[t[1]], c[t[2]]);
        // gradient from the plane through the three points
        let det = 2.0 * area;
        let gx = ((c1 - c0) * (p[2][1] - p[0][1]) - (c2 - c0) * (p[1][1] - p[0][1])) / det;
        let gy = ((c2 - c0) * (p[1][0] - p[0][0]) - (c1 - c0) * (p[2][0] - p[0][0])) / det;
        // two phases: |∇φ|² = 2 |∇c|²
        grad_part += area * 2.0 * (gx * gx + gy * gy);
        let lin = area * (c0 + c1 + c2) / 3.0;
        let quad = area / 12.0 * (c0 * c0 + c1 * c1 + c2 * c2 + (c0 + c1 + c2).powi(2));
        pot += lin - quad;
    }
    0.5 * eps * grad_part + pot / eps
}

pub fn cantilever_mesh(h: f64) -> Arc<TriMesh> {
    Arc::new(TriMesh::cantilever(h, 2.0, 1.0, 0.25).unwrap())
}

/// Random feasible field for a problem with box `[-m₁, m₂]` and mass row.
pub fn random_feasible(rng: &mut ChaCha8Rng, cons: &Constraints) -> Vec<f64> {
    let raw: Vec<f64> = (0..cons.dim()).map(|i| rng.random_range(cons.lower[i]..cons.upper[i])).collect();
    cons.shift_into(&raw).unwrap()
}
