//! Fast exact solver for the projection system.
//!
//! Every prism of the mesh is cut into the six tetrahedra of the Kuhn
//! triangulation of its box, so P1 gradients only couple vertices joined by an
//! axis-parallel edge. Away from the edges of the space-time box the system
//! therefore agrees with the Kronecker form
//! `1/2 (Kt x My x Mx + Mt x Ky x Mx + Mt x My x Kx) + delta/2 Mt x My x Mx`
//! of one-dimensional stiffness and lumped mass matrices. On the box edges a
//! single Kuhn box contributes and the couplings depend on the diagonal
//! direction. The tensor part is inverted by separable cosine/Fourier modes
//! and the edge defect, supported on `O(nx + nt)` dofs, by a Woodbury
//! correction. Periodic wrap cells sort their vertices differently, which
//! spreads the defect over `O(nx nt)` dofs; past a size cap the correction is
//! dropped and the tensor inverse serves as a preconditioner only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::assembly::SparseSystem;
use crate::mesh::{BoundaryCondition, SpaceTimeMesh};

/// One-dimensional generalized eigenbasis `K V = M V diag(lambda)`, `V^T M V = I`.
#[derive(Debug, Clone)]
struct Axis {
    n: usize,
    /// `v[j * n + k]`: mode `k` at node `j`.
    v: Vec<f64>,
    vt: Vec<f64>,
    lambda: Vec<f64>,
    mass: Vec<f64>,
    h: f64,
    periodic: bool,
}

impl Axis {
    fn from_modes(h: f64, periodic: bool, mass: Vec<f64>, mode: impl Fn(usize, usize) -> f64, lambda: Vec<f64>) -> Self {
        let n = mass.len();
        let mut v = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                v[j * n + k] = mode(j, k);
            }
        }
        // normalize columns in the mass inner product
        for k in 0..n {
            let norm = (0..n).map(|j| mass[j] * v[j * n + k] * v[j * n + k]).sum::<f64>().sqrt();
            for j in 0..n {
                v[j * n + k] /= norm;
            }
        }
        let mut vt = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                vt[k * n + j] = v[j * n + k];
            }
        }
        Axis { n, v, vt, lambda, mass, h, periodic }
    }

    fn mass_entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.mass[i]
        } else {
            0.0
        }
    }

    fn stiffness_entry(&self, i: usize, j: usize) -> f64 {
        let ih = 1.0 / self.h;
        let n = self.n;
        let d = (i + n - j) % n;
        if self.periodic {
            match (d, n) {
                (0, _) => 2.0 * ih,
                (1, 2) => -2.0 * ih,
                (1, _) => -ih,
                (d, n) if d == n - 1 => -ih,
                _ => 0.0,
            }
        } else if i == j {
            if i == 0 || i == n - 1 {
                ih
            } else {
                2.0 * ih
            }
        } else if i.abs_diff(j) == 1 {
            -ih
        } else {
            0.0
        }
    }

    /// `intervals + 1` nodes with natural boundary conditions.
    fn neumann(intervals: usize, h: f64) -> Self {
        let n = intervals + 1;
        let mut mass = vec![h; n];
        mass[0] *= 0.5;
        mass[n - 1] *= 0.5;
        let theta = |k: usize| std::f64::consts::PI * k as f64 / intervals as f64;
        let lambda = (0..n).map(|k| (2.0 - 2.0 * theta(k).cos()) / (h * h)).collect();
        Axis::from_modes(h, false, mass, |j, k| (theta(k) * j as f64).cos(), lambda)
    }

    /// `n` nodes on a circle.
    fn periodic(n: usize, h: f64) -> Self {
        let freq = |k: usize| k.div_ceil(2);
        let theta = |k: usize| std::f64::consts::TAU * freq(k) as f64 / n as f64;
        let lambda = (0..n).map(|k| (2.0 - 2.0 * theta(k).cos()) / (h * h)).collect();
        let mode = |j: usize, k: usize| {
            let a = theta(k) * j as f64;
            if k % 2 == 1 && 2 * freq(k) != n {
                a.sin()
            } else {
                a.cos()
            }
        };
        Axis::from_modes(h, true, vec![h; n], mode, lambda)
    }
}

/// `out[o][a][i] = sum_j b[j][a] data[o][j][i]` on a `(outer, n, inner)` array.
fn along_middle(data: &[f64], out: &mut [f64], n: usize, inner: usize, b: &[f64]) {
    let block = n * inner;
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        dst.fill(0.0);
        for j in 0..n {
            let row = &src[j * inner..(j + 1) * inner];
            for a in 0..n {
                let c = b[j * n + a];
                for (d, s) in dst[a * inner..(a + 1) * inner].iter_mut().zip(row) {
                    *d += c * s;
                }
            }
        }
    }
}

/// `out[o][a] = sum_j data[o][j] b[j][a]` on an `(outer, n)` array.
fn along_last(data: &[f64], out: &mut [f64], n: usize, b: &[f64]) {
    for (src, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        dst.fill(0.0);
        for (j, s) in src.iter().enumerate() {
            for (d, c) in dst.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *d += s * c;
            }
        }
    }
}

/// Exact inverse of `1/2 K + delta/2 N` on a space-time mesh.
#[derive(Debug, Clone)]
pub struct TensorSolver {
    time: Axis,
    space: Axis,
    inv_eig: Vec<f64>,
    /// Dofs touched by the defect `A - T`.
    support: Vec<usize>,
    /// `A - T` restricted to the support.
    defect: DMatrix<f64>,
    capacitance: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    exact: bool,
}

impl TensorSolver {
    /// Largest defect support that is corrected exactly.
    pub const MAX_CORRECTION: usize = 1500;

    pub fn new(mesh: &SpaceTimeMesh, system: &SparseSystem) -> Result<Self> {
        let delta = system.delta;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidDelta(delta));
        }
        let time = Axis::neumann(mesh.nt(), mesh.ht());
        let space = match mesh.bc() {
            BoundaryCondition::Neumann => Axis::neumann(mesh.nx(), mesh.hx()),
            BoundaryCondition::Periodic => Axis::periodic(mesh.nx(), mesh.hx()),
        };
        let (nt1, side) = (time.n, space.n);
        let ns = side * side;
        if system.dim() != nt1 * ns {
            return Err(Error::LengthMismatch { expected: nt1 * ns, got: system.dim() });
        }
        let mut inv_eig = Vec::with_capacity(nt1 * ns);
        for lt in &time.lambda {
            for ly in &space.lambda {
                for lx in &space.lambda {
                    inv_eig.push(1.0 / (0.5 * (lt + ly + lx) + 0.5 * delta));
                }
            }
        }

        // defect entries A - T, with T the tensor part
        let split = |i: usize| [i / ns, (i % ns) / side, i % side];
        let axes = [&time, &space, &space];
        let mut defect = Vec::new();
        let mut scale = 0.0f64;
        for i in 0..system.dim() {
            let a = split(i);
            for (j, v) in system.matrix.row(i) {
                let b = split(j);
                let m: [f64; 3] = std::array::from_fn(|d| axes[d].mass_entry(a[d], b[d]));
                let kk: [f64; 3] = std::array::from_fn(|d| axes[d].stiffness_entry(a[d], b[d]));
                let t = 0.5 * (kk[0] * m[1] * m[2] + m[0] * kk[1] * m[2] + m[0] * m[1] * kk[2])
                    + 0.5 * delta * m[0] * m[1] * m[2];
                scale = scale.max(v.abs());
                if v != t {
                    defect.push((i, j, v - t));
                }
            }
        }
        defect.retain(|e| e.2.abs() > 1e-13 * scale);
        let mut support: Vec<usize> = defect.iter().flat_map(|e| [e.0, e.1]).collect();
        support.sort_unstable();
        support.dedup();
        let dropped = support.len() > Self::MAX_CORRECTION;
        if dropped {
            support.clear();
            defect.clear();
        }
        let q = support.len();
        let local = |i: usize| support.binary_search(&i).unwrap();
        let mut e_s = DMatrix::<f64>::zeros(q, q);
        for &(i, j, v) in &defect {
            e_s[(local(i), local(j))] += v;
        }

        let exact = !dropped;
        let mut solver = TensorSolver { time, space, inv_eig, support, defect: e_s, capacitance: None, exact };
        if q > 0 {
            let n = solver.dim();
            // G = U^T T^{-1} U, capacitance I + G E
            let mut g = DMatrix::<f64>::zeros(q, q);
            let mut e = vec![0.0; n];
            let mut col = vec![0.0; n];
            for (b, &ib) in solver.support.iter().enumerate() {
                e[ib] = 1.0;
                solver.apply_tensor(&e, &mut col);
                e[ib] = 0.0;
                for (a, &ia) in solver.support.iter().enumerate() {
                    g[(a, b)] = col[ia];
                }
            }
            let cap = DMatrix::<f64>::identity(q, q) + g * &solver.defect;
            solver.capacitance = Some(cap.lu());
        }
        Ok(solver)
    }

    pub fn dim(&self) -> usize {
        self.inv_eig.len()
    }

    /// Number of dofs where the system departs from its tensor part, when corrected.
    pub fn n_corrections(&self) -> usize {
        self.support.len()
    }

    /// Whether `solve` inverts the assembled system rather than its tensor part.
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    fn apply_tensor(&self, r: &[f64], out: &mut [f64]) {
        let (nt1, side) = (self.time.n, self.space.n);
        let ns = side * side;
        let mut tmp = vec![0.0; r.len()];
        along_last(r, out, side, &self.space.v);
        along_middle(out, &mut tmp, side, side, &self.space.v);
        along_middle(&tmp, out, nt1, ns, &self.time.v);
        for (c, d) in out.iter_mut().zip(&self.inv_eig) {
            *c *= d;
        }
        along_middle(out, &mut tmp, nt1, ns, &self.time.vt);
        along_middle(&tmp, out, side, side, &self.space.vt);
        tmp.copy_from_slice(out);
        along_last(&tmp, out, side, &self.space.vt);
    }

    /// `out = (1/2 K + delta/2 N)^{-1} r`, or its tensor approximation when not exact.
    pub fn solve(&self, r: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if r.len() != n || out.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: r.len().min(out.len()) });
        }
        self.apply_tensor(r, out);
        let Some(lu) = &self.capacitance else {
            return Ok(());
        };
        let ut_y = DVector::from_iterator(self.support.len(), self.support.iter().map(|&i| out[i]));
        let w = lu.solve(&ut_y).ok_or_else(|| Error::InvalidConfig("singular edge correction".into()))?;
        let ew = &self.defect * w;
        let mut rhs = r.to_vec();
        for (&i, v) in self.support.iter().zip(ew.iter()) {
            rhs[i] -= v;
        }
        self.apply_tensor(&rhs, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_system;

    fn check_axis(ax: &Axis, stiff: impl Fn(usize, usize) -> f64) {
        let n = ax.n;
        for a in 0..n {
            for b in 0..n {
                let mvv: f64 = (0..n).map(|j| ax.mass[j] * ax.v[j * n + a] * ax.v[j * n + b]).sum();
                let kvv: f64 = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| ax.v[i * n + a] * stiff(i, j) * ax.v[j * n + b])
                    .sum();
                let id = if a == b { 1.0 } else { 0.0 };
                assert!((mvv - id).abs() < 1e-12, "mass {a} {b}: {mvv}");
                assert!((kvv - id * ax.lambda[a]).abs() < 1e-9 * (1.0 + ax.lambda[a]), "stiff {a} {b}: {kvv}");
            }
        }
    }

    #[test]
    fn axis_bases_diagonalize_the_one_dimensional_operators() {
        let h = 0.2;
        let ax = Axis::neumann(5, h);
        check_axis(&ax, |i, j| {
            let n = 6;
            if i == j {
                (if i == 0 || i == n - 1 { 1.0 } else { 2.0 }) / h
            } else if i.abs_diff(j) == 1 {
                -1.0 / h
            } else {
                0.0
            }
        });
        for n in [4, 5] {
            let h = 1.0 / n as f64;
            let ax = Axis::periodic(n, h);
            check_axis(&ax, |i, j| {
                let d = (i + n - j) % n;
                if d == 0 {
                    2.0 / h
                } else if d == 1 || d == n - 1 {
                    -1.0 / h
                } else {
                    0.0
                }
            });
        }
    }

    #[test]
    fn solve_inverts_the_assembled_system() {
        for (bc, nx, nt) in [(BoundaryCondition::Neumann, 5, 3), (BoundaryCondition::Periodic, 4, 4), (BoundaryCondition::Periodic, 5, 2)] {
            let mesh = SpaceTimeMesh::new(nx, nt, bc).unwrap();
            let delta = 0.3;
            let sys = assemble_system(&mesh, delta).unwrap();
            let ts = TensorSolver::new(&mesh, &sys).unwrap();
            // the defect lives on the edges of the space-time box
            if bc == BoundaryCondition::Neumann {
                assert!(ts.n_corrections() <= 8 * (nx + 1) + 4 * (nt - 1));
            }
            assert!(ts.is_exact());
            let r: Vec<f64> = (0..ts.dim()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let mut x = vec![0.0; ts.dim()];
            ts.solve(&r, &mut x).unwrap();
            let ax = sys.matrix.mul_vec(&x);
            let err = ax.iter().zip(&r).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-11, "{bc:?}: {err}");
        }
    }
}
