//! Space-time elliptic system behind the projection onto discrete solutions
//! of the continuity equation, its preconditioned CG solver, and the
//! projection itself.
//!
//! With `psi` ranging over the P1 basis, the discrete continuity equation
//! reads `B(psi) = int int rho d_t psi + m . grad_x psi + <z, psi>` where
//! `B(psi) = int_D psi(1) u_B - psi(0) u_A` and `<z, psi>` is the lumped
//! space-time pairing used for every nodal source quantity. The projection
//! multiplier `phi` solves
//!
//! ```text
//! int int 1/2 grad phi . grad psi + delta/2 <phi, psi> = B(psi) - int int p . grad psi - <z, psi>
//! ```
//!
//! and the projected state is `p + 1/2 grad phi`, `z + delta/2 phi`.

use crate::error::{Error, Result};
use crate::mesh::{P0Field, P1Field, SpaceTimeMesh, State};
use crate::spectral::TensorSolver;

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Sparsity pattern of P1 couplings on the mesh, with zero values.
    fn p1_pattern(mesh: &SpaceTimeMesh) -> Self {
        let n = mesh.n_vertices();
        assert!(n <= u32::MAX as usize, "too many vertices for 32-bit column indices");
        let mut rows: Vec<Vec<usize>> = vec![Vec::with_capacity(16); n];
        for tet in mesh.tets() {
            for &i in tet {
                for &j in tet {
                    if !rows[i].contains(&j) {
                        rows[i].push(j);
                    }
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            cols.extend(r.iter().map(|&j| j as u32));
            row_ptr.push(cols.len());
        }
        let nnz = cols.len();
        CsrMatrix { n, row_ptr, cols, values: vec![0.0; nnz] }
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[lo..hi].binary_search(&(j as u32)).ok().map(|k| lo + k)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j).expect("entry outside the P1 sparsity pattern");
        self.values[k] += v;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Nonzero entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[lo..hi].iter().map(|&c| c as usize).zip(self.values[lo..hi].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert!(x.len() == self.n && y.len() == self.n);
        for (yi, w) in y.iter_mut().zip(self.row_ptr.windows(2)) {
            let (cols, vals) = (&self.cols[w[0]..w[1]], &self.values[w[0]..w[1]]);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                // SAFETY: every column index is below n by construction of the pattern
                acc += v * unsafe { x.get_unchecked(c as usize) };
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// Dense copy, for small test problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// P1 stiffness matrix `int int grad phi . grad psi` over space-time.
pub fn assemble_stiffness(mesh: &SpaceTimeMesh) -> CsrMatrix {
    let mut a = CsrMatrix::p1_pattern(mesh);
    for (e, tet) in mesh.tets().iter().enumerate() {
        let g = mesh.gradients(e);
        let vol = mesh.tet_volume(e);
        for i in 0..4 {
            for j in 0..4 {
                let gij = g[i][0] * g[j][0] + g[i][1] * g[j][1] + g[i][2] * g[j][2];
                a.add(tet[i], tet[j], vol * gij);
            }
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    Jacobi,
    /// Separable spectral inverse with an exact correction on the box edges.
    #[default]
    Tensor,
}

impl Preconditioner {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preconditioner::Jacobi => "jacobi",
            Preconditioner::Tensor => "tensor",
        }
    }
}

impl std::str::FromStr for Preconditioner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "jacobi" => Ok(Preconditioner::Jacobi),
            "tensor" => Ok(Preconditioner::Tensor),
            other => Err(format!("unknown preconditioner '{other}' (expected tensor or jacobi)")),
        }
    }
}

/// Operator `1/2 K + delta/2 N` of the projection problem.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub diag: Vec<f64>,
    pub delta: f64,
    tensor: Option<Box<TensorSolver>>,
}

impl SparseSystem {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn preconditioner(&self) -> Preconditioner {
        if self.tensor.is_some() {
            Preconditioner::Tensor
        } else {
            Preconditioner::Jacobi
        }
    }

    /// `z = M^{-1} r` for the preconditioner `M`; returns `r . z`.
    fn precondition(&self, r: &[f64], z: &mut [f64], inv_diag: &[f64]) -> Result<f64> {
        match &self.tensor {
            Some(ts) => {
                ts.solve(r, z)?;
                Ok(dot(r, z))
            }
            None => {
                let mut rz = 0.0;
                for ((z, r), d) in z.iter_mut().zip(r).zip(inv_diag) {
                    *z = r * d;
                    rz += r * *z;
                }
                Ok(rz)
            }
        }
    }

    /// Default CG iteration cap `10 sqrt(n) + 500`.
    pub fn default_maxit(&self) -> usize {
        10 * (self.dim() as f64).sqrt().ceil() as usize + 500
    }
}

pub fn assemble_system(mesh: &SpaceTimeMesh, delta: f64) -> Result<SparseSystem> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidDelta(delta));
    }
    let mut matrix = assemble_stiffness(mesh);
    for v in matrix.values.iter_mut() {
        *v *= 0.5;
    }
    for (i, w) in mesh.node_weights().iter().enumerate() {
        matrix.add(i, i, 0.5 * delta * w);
    }
    let diag = matrix.diagonal();
    Ok(SparseSystem { matrix, diag, delta, tensor: None })
}

/// System with the chosen CG preconditioner.
pub fn assemble_system_with(mesh: &SpaceTimeMesh, delta: f64, precond: Preconditioner) -> Result<SparseSystem> {
    let mut system = assemble_system(mesh, delta)?;
    if precond == Preconditioner::Tensor {
        system.tensor = Some(Box::new(TensorSolver::new(mesh, &system)?));
    }
    Ok(system)
}

/// Endpoint densities, one value per spatial triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub ua: Vec<f64>,
    pub ub: Vec<f64>,
}

impl BoundaryData {
    pub fn new(mesh: &SpaceTimeMesh, ua: Vec<f64>, ub: Vec<f64>) -> Result<Self> {
        for (name, u) in [("u_A", &ua), ("u_B", &ub)] {
            if u.len() != mesh.n_triangles() {
                return Err(Error::LengthMismatch { expected: mesh.n_triangles(), got: u.len() });
            }
            if let Some(v) = u.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative, found {v}")));
            }
        }
        Ok(BoundaryData { ua, ub })
    }

    /// Builds the data from per-cell values (`nx * nx`, row-major), copying
    /// each to both triangles of its cell.
    pub fn from_cells(mesh: &SpaceTimeMesh, ua: &[f64], ub: &[f64]) -> Result<Self> {
        let expand = |c: &[f64]| -> Result<Vec<f64>> {
            if c.len() * 2 != mesh.n_triangles() {
                return Err(Error::LengthMismatch { expected: mesh.n_triangles() / 2, got: c.len() });
            }
            Ok(c.iter().flat_map(|&v| [v, v]).collect())
        };
        BoundaryData::new(mesh, expand(ua)?, expand(ub)?)
    }

    pub fn mass_a(&self, mesh: &SpaceTimeMesh) -> f64 {
        self.ua.iter().sum::<f64>() * mesh.triangle_area()
    }

    pub fn mass_b(&self, mesh: &SpaceTimeMesh) -> f64 {
        self.ub.iter().sum::<f64>() * mesh.triangle_area()
    }
}

/// `B(psi_i) = int_D psi_i(1) u_B - psi_i(0) u_A dx` for every nodal basis function.
pub fn boundary_functional(mesh: &SpaceTimeMesh, bdata: &BoundaryData) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    let third = mesh.triangle_area() / 3.0;
    let nt = mesh.nt();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        for &s in tri {
            out[mesh.dof(nt, s)] += third * bdata.ub[t];
            out[mesh.dof(0, s)] -= third * bdata.ua[t];
        }
    }
    out
}

/// `int int rho d_t psi_i + m . grad_x psi_i + <z, psi_i>` for every nodal basis function.
pub fn ce_pairing(mesh: &SpaceTimeMesh, state: &State) -> Vec<f64> {
    let mut out: Vec<f64> = state.z.iter().zip(mesh.node_weights()).map(|(z, w)| z * w).collect();
    let [mx, my] = &state.m;
    for (e, tet) in mesh.tets().iter().enumerate() {
        let g = mesh.gradients(e);
        let vol = mesh.tet_volume(e);
        let (r, a, b) = (vol * state.rho[e], vol * mx[e], vol * my[e]);
        for (j, &v) in tet.iter().enumerate() {
            out[v] += r * g[j][0] + a * g[j][1] + b * g[j][2];
        }
    }
    out
}

/// Right-hand side of the projection problem.
pub fn assemble_rhs(mesh: &SpaceTimeMesh, state: &State, bdata: &BoundaryData) -> Vec<f64> {
    let mut b = boundary_functional(mesh, bdata);
    for (bi, pi) in b.iter_mut().zip(ce_pairing(mesh, state)) {
        *bi -= pi;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final `||A x - b|| / ||b||`.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned CG from a zero initial guess.
pub fn cg_solve(system: &SparseSystem, rhs: &[f64], tol: f64, maxit: usize) -> Result<P1Field> {
    let mut x = vec![0.0; system.dim()];
    cg_solve_from(system, rhs, &mut x, tol, maxit, |_| {})?;
    Ok(P1Field(x))
}

/// Preconditioned CG starting from `x`, which is overwritten with the
/// solution. `observe` sees every iterate.
pub fn cg_solve_from(
    system: &SparseSystem,
    rhs: &[f64],
    x: &mut [f64],
    tol: f64,
    maxit: usize,
    mut observe: impl FnMut(&[f64]),
) -> Result<CgReport> {
    let n = system.dim();
    if rhs.len() != n || x.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: rhs.len().min(x.len()) });
    }
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let a = &system.matrix;
    let mut r = a.mul_vec(x);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri = bi - *ri;
    }
    let mut rnorm = dot(&r, &r).sqrt();
    if rnorm <= tol * bnorm {
        return Ok(CgReport { iterations: 0, relative_residual: rnorm / bnorm });
    }
    let inv_diag: Vec<f64> = system.diag.iter().map(|d| 1.0 / d).collect();
    let mut zv = vec![0.0; n];
    let mut rz = system.precondition(&r, &mut zv, &inv_diag)?;
    let mut p = zv.clone();
    let mut ap = vec![0.0; n];
    for it in 1..=maxit {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonConvergence { iterations: it, residual: rnorm / bnorm });
        }
        let alpha = rz / pap;
        let mut rr = 0.0;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
            rr += *ri * *ri;
        }
        observe(x);
        rnorm = rr.sqrt();
        if rnorm <= tol * bnorm {
            return Ok(CgReport { iterations: it, relative_residual: rnorm / bnorm });
        }
        let rz_new = system.precondition(&r, &mut zv, &inv_diag)?;
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, z) in p.iter_mut().zip(&zv) {
            *pi = z + beta * *pi;
        }
    }
    Err(Error::NonConvergence { iterations: maxit, residual: rnorm / bnorm })
}

/// Orthogonal projection onto the discrete continuity-equation solutions,
/// keeping the last multiplier as CG warm start.
#[derive(Debug, Clone)]
pub struct CeProjector {
    boundary: Vec<f64>,
    phi: Vec<f64>,
    prev_phi: Option<Vec<f64>>,
    tol: f64,
    maxit: usize,
    last: Option<CgReport>,
}

impl CeProjector {
    pub fn new(mesh: &SpaceTimeMesh, bdata: &BoundaryData, system: &SparseSystem, tol: f64, maxit: usize) -> Self {
        CeProjector {
            boundary: boundary_functional(mesh, bdata),
            phi: vec![0.0; system.dim()],
            prev_phi: None,
            tol,
            maxit,
            last: None,
        }
    }

    pub fn last_report(&self) -> Option<CgReport> {
        self.last
    }

    /// Multiplier of the most recent projection.
    pub fn multiplier(&self) -> &[f64] {
        &self.phi
    }

    pub fn project(&mut self, mesh: &SpaceTimeMesh, system: &SparseSystem, state: &State) -> Result<State> {
        state.check(mesh)?;
        let mut b = self.boundary.clone();
        for (bi, pi) in b.iter_mut().zip(ce_pairing(mesh, state)) {
            *bi -= pi;
        }
        // Linear extrapolation of the last two multipliers as initial guess.
        let mut guess = self.phi.clone();
        if let Some(prev) = &self.prev_phi {
            for (g, p) in guess.iter_mut().zip(prev) {
                *g += *g - p;
            }
        }
        let report = cg_solve_from(system, &b, &mut guess, self.tol, self.maxit, |_| {})?;
        self.prev_phi = Some(std::mem::replace(&mut self.phi, guess));
        self.last = Some(report);

        // K annihilates constants, so shifting phi by a constant only moves the
        // source; choose the shift that makes the psi = 1 row exact.
        let resid: f64 = {
            let aphi = system.matrix.mul_vec(&self.phi);
            b.iter().zip(&aphi).map(|(b, a)| b - a).sum()
        };
        let total_weight: f64 = mesh.node_weights().iter().sum();
        let shift = resid / (0.5 * system.delta * total_weight);
        for v in self.phi.iter_mut() {
            *v += shift;
        }

        Ok(apply_multiplier(mesh, state, &self.phi, system.delta))
    }
}

/// `p + 1/2 grad phi`, `z + delta/2 phi`.
pub fn apply_multiplier(mesh: &SpaceTimeMesh, state: &State, phi: &[f64], delta: f64) -> State {
    let [gt, gx, gy] = mesh.gradient_p1(&P1Field(phi.to_vec()));
    let half = |p: &P0Field, g: &P0Field| P0Field(p.iter().zip(g.iter()).map(|(p, g)| p + 0.5 * g).collect());
    State {
        rho: half(&state.rho, &gt),
        m: [half(&state.m[0], &gx), half(&state.m[1], &gy)],
        z: P1Field(state.z.iter().zip(phi).map(|(z, f)| z + 0.5 * delta * f).collect()),
    }
}

/// Single cold-start projection onto the discrete continuity-equation solutions.
pub fn project_ce(
    mesh: &SpaceTimeMesh,
    state: &State,
    bdata: &BoundaryData,
    system: &SparseSystem,
    tol: f64,
    maxit: usize,
) -> Result<State> {
    CeProjector::new(mesh, bdata, system, tol, maxit).project(mesh, system, state)
}
