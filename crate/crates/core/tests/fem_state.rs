mod common;

use std::sync::Arc;

use common::{cantilever_mesh, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vmpt::fem::{
    assemble_h1_form, assemble_l2_form, BoundarySpec, Edge, ElasticitySystem, Isotropic, StiffnessModel,
    TractionPatch, TriMesh,
};
use vmpt::sparse::{dot, norm};

/// `D` built from the Lamé parameters rather than `(E, ν)` directly.
fn lame_matrix(young: f64, poisson: f64) -> [[f64; 3]; 3] {
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = young / (2.0 * (1.0 + poisson));
    [[lambda + 2.0 * mu, lambda, 0.0], [lambda, lambda + 2.0 * mu, 0.0], [0.0, 0.0, mu]]
}

/// Dense plane-strain stiffness of a mesh with a uniform material.
fn dense_stiffness(mesh: &TriMesh, d: &[[f64; 3]; 3]) -> DMatrix<f64> {
    let n = 2 * mesh.num_nodes();
    let mut k = DMatrix::zeros(n, n);
    for t in &mesh.triangles {
        let p: Vec<[f64; 2]> = t.iter().map(|&i| mesh.vertices[i]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        // gradients of the barycentric coordinates
        let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
        let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
        let mut bm = DMatrix::zeros(3, 6);
        for a in 0..3 {
            bm[(0, 2 * a)] = b[a] / det;
            bm[(1, 2 * a + 1)] = c[a] / det;
            bm[(2, 2 * a)] = c[a] / det;
            bm[(2, 2 * a + 1)] = b[a] / det;
        }
        let dm = DMatrix::from_fn(3, 3, |i, j| d[i][j]);
        let ke = 0.5 * det * bm.transpose() * dm * &bm;
        for a in 0..6 {
            for bb in 0..6 {
                let (ga, gb) = (2 * t[a / 2] + a % 2, 2 * t[bb / 2] + bb % 2);
                k[(ga, gb)] += ke[(a, bb)];
            }
        }
    }
    k
}

fn unit_patch() -> Arc<TriMesh> {
    let bc = BoundarySpec {
        dirichlet: Edge::Left,
        traction: TractionPatch { edge: Edge::Right, from: 0.0, to: 1.0, g: [0.3, -1.0] },
    };
    Arc::new(TriMesh::new(1, 1, 1.0, 1.0, bc).unwrap())
}

#[test]
fn two_triangle_patch_matches_dense_compliance() {
    let mesh = unit_patch();
    let model = StiffnessModel::default();
    let sys = ElasticitySystem::new(Arc::clone(&mesh), model).unwrap();
    for &c in &[1.0, 0.7, 0.0] {
        let state = sys.solve_state(&vec![c; 4]).unwrap();
        let q = c * c;
        let ds = lame_matrix(model.soft.young, model.soft.poisson);
        let dh = lame_matrix(model.hard.young, model.hard.poisson);
        let mut d = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = ds[i][j] + q * (dh[i][j] - ds[i][j]);
            }
        }
        let k = dense_stiffness(&mesh, &d);
        // right-edge nodes 1 and 3 carry the free dofs
        let free = [2, 3, 6, 7];
        let kff = DMatrix::from_fn(4, 4, |i, j| k[(free[i], free[j])]);
        // unit-length edge with constant traction: half the load per node
        let f = DVector::from_vec(vec![0.15, -0.5, 0.15, -0.5]);
        let u = kff.lu().solve(&f).unwrap();
        let compliance = f.dot(&u);
        assert!((state.compliance - compliance).abs() <= 1e-10 * compliance, "c = {c}");
        for (a, &g) in free.iter().enumerate() {
            assert!((state.displacement[g] - u[a]).abs() <= 1e-10 * u.amax());
        }
    }
}

#[test]
fn load_vector_integrates_partial_patch() {
    let mesh = TriMesh::cantilever(0.25, 2.0, 1.0, 0.25).unwrap();
    let f = mesh.load_vector();
    let total_y: f64 = f.iter().skip(1).step_by(2).sum();
    let total_x: f64 = f.iter().step_by(2).sum();
    assert!((total_y + 0.25).abs() < 1e-14);
    assert_eq!(total_x, 0.0);
}

#[test]
fn displacement_is_linear_in_the_load() {
    let mesh = cantilever_mesh(0.125);
    let c = vec![0.6; mesh.num_nodes()];
    let base = ElasticitySystem::new(Arc::clone(&mesh), StiffnessModel::default()).unwrap();
    let u = base.solve_state(&c).unwrap();
    let mut scaled = ElasticitySystem::new(Arc::clone(&mesh), StiffnessModel::default()).unwrap();
    scaled.scale_load(-2.5);
    let us = scaled.solve_state(&c).unwrap();
    for (a, b) in u.displacement.iter().zip(&us.displacement) {
        assert!((b + 2.5 * a).abs() <= 1e-12 * (1.0 + a.abs()));
    }
    assert!((us.compliance - 6.25 * u.compliance).abs() <= 1e-12 * us.compliance);
}

#[test]
fn scaling_both_moduli_scales_the_displacement_inversely() {
    let mesh = cantilever_mesh(0.125);
    let mut r = rng(3);
    let c: Vec<f64> = (0..mesh.num_nodes()).map(|_| r.random_range(0.0..1.0)).collect();
    let m = StiffnessModel::default();
    let s = 7.0;
    let m2 = StiffnessModel {
        hard: Isotropic { young: s * m.hard.young, ..m.hard },
        soft: Isotropic { young: s * m.soft.young, ..m.soft },
    };
    let u1 = ElasticitySystem::new(Arc::clone(&mesh), m).unwrap().solve_state(&c).unwrap();
    let u2 = ElasticitySystem::new(Arc::clone(&mesh), m2).unwrap().solve_state(&c).unwrap();
    let scale = norm(&u1.displacement);
    for (a, b) in u1.displacement.iter().zip(&u2.displacement) {
        assert!((a - s * b).abs() <= 1e-10 * scale);
    }
}

#[test]
fn linearized_state_matches_finite_differences() {
    let mesh = cantilever_mesh(0.125);
    let sys = ElasticitySystem::new(Arc::clone(&mesh), StiffnessModel::default()).unwrap();
    let mut r = rng(17);
    let n = mesh.num_nodes();
    let c: Vec<f64> = (0..n).map(|_| r.random_range(0.2..0.8)).collect();
    let p: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let state = sys.solve_state(&c).unwrap();
    let z = sys.solve_linearized_state(&state, &p);
    let err = |t: f64| {
        let ct: Vec<f64> = c.iter().zip(&p).map(|(a, b)| a + t * b).collect();
        let ut = sys.solve_state(&ct).unwrap().displacement;
        let d: Vec<f64> =
            (0..ut.len()).map(|i| (ut[i] - state.displacement[i]) / t - z[i]).collect();
        norm(&d) / norm(&z)
    };
    let (e1, e2) = (err(1e-3), err(1e-4));
    assert!(e2 < 1e-3, "{e2:e}");
    // one-sided differences converge at first order
    let ratio = e1 / e2;
    assert!((5.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn linearized_state_is_linear_in_the_direction() {
    let mesh = cantilever_mesh(0.125);
    let sys = ElasticitySystem::new(Arc::clone(&mesh), StiffnessModel::default()).unwrap();
    let mut r = rng(5);
    let n = mesh.num_nodes();
    let c: Vec<f64> = (0..n).map(|_| r.random_range(0.1..0.9)).collect();
    let state = sys.solve_state(&c).unwrap();
    let p: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -2.3);
    let comb: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + b * y).collect();
    let zc = sys.solve_linearized_state(&state, &comb);
    let zp = sys.solve_linearized_state(&state, &p);
    let zq = sys.solve_linearized_state(&state, &q);
    let scale = norm(&zc);
    for i in 0..zc.len() {
        assert!((zc[i] - a * zp[i] - b * zq[i]).abs() <= 1e-12 * scale);
    }
}

#[test]
fn sensitivity_transpose_is_adjoint() {
    let mesh = cantilever_mesh(0.125);
    let sys = ElasticitySystem::new(Arc::clone(&mesh), StiffnessModel::default()).unwrap();
    let mut r = rng(8);
    let n = mesh.num_nodes();
    let c: Vec<f64> = (0..n).map(|_| r.random_range(0.1..0.9)).collect();
    let state = sys.solve_state(&c).unwrap();
    let p: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let lhs = dot(&sys.apply_sensitivity(&state, &p), &w);
    let rhs = dot(&p, &sys.apply_sensitivity_transpose(&state, &w));
    assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
}

#[test]
fn scalar_forms_reproduce_area_and_constants() {
    let mesh = cantilever_mesh(0.25);
    let n = mesh.num_nodes();
    let ones = vec![1.0; n];
    let l = assemble_h1_form(&mesh);
    let m = assemble_l2_form(&mesh);
    assert!(l.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
    assert!((m.form(&ones, &ones) - 2.0).abs() < 1e-13);
    let x: Vec<f64> = mesh.vertices.iter().map(|v| v[0]).collect();
    // ∫ |∇x|² = area, ∫ x² over [0,2]×[0,1] = 8/3
    assert!((l.form(&x, &x) - 2.0).abs() < 1e-12);
    assert!((m.form(&x, &x) - 8.0 / 3.0).abs() < 1e-2);
    assert!(l.asymmetry() == 0.0 && m.asymmetry() == 0.0);
}
