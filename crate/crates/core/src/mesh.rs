//! Space-time tetrahedral mesh of `[0,1] x (0,1)^2` and the finite element
//! spaces living on it.
//!
//! The spatial square is divided into `nx x nx` cells, each cut into two
//! triangles along the diagonal through its lower-left corner. Every prism
//! `(k ht, (k+1) ht) x T` is then split into three tetrahedra with the
//! staircase rule: the triangle's vertices are sorted by global index and the
//! tetrahedra are `(a0,a1,a2,b2)`, `(a0,a1,b1,b2)` and `(a0,b0,b1,b2)`, with
//! `a` the bottom and `b` the top copy of a vertex. Every vertical quad face
//! is therefore cut along the diagonal joining the bottom of its lower-index
//! vertex to the top of its higher-index vertex, on both sides, so the mesh is
//! conforming.
//!
//! Degrees of freedom are numbered time-major: `k * n_spatial + s`, where the
//! spatial index is `row * (nx + 1) + col` for Neumann meshes and
//! `(row mod nx) * nx + (col mod nx)` for periodic ones.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryCondition {
    #[default]
    Neumann,
    Periodic,
}

impl BoundaryCondition {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryCondition::Neumann => "neumann",
            BoundaryCondition::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for BoundaryCondition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "neumann" => Ok(BoundaryCondition::Neumann),
            "periodic" => Ok(BoundaryCondition::Periodic),
            other => Err(format!("unknown boundary condition '{other}' (expected neumann or periodic)")),
        }
    }
}

/// Barycentric gradients `d lambda_i / d(t,x,y)` of the four vertices of a tetrahedron.
pub type TetGradients = [[f64; 3]; 4];

/// Conforming tetrahedral triangulation of the space-time cylinder.
#[derive(Debug, Clone)]
pub struct SpaceTimeMesh {
    nx: usize,
    nt: usize,
    hx: f64,
    ht: f64,
    bc: BoundaryCondition,
    n_spatial: usize,
    /// `(t, x, y)` of every degree of freedom.
    vertices: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    /// Gradients for the tetrahedra of one time layer; layers repeat.
    layer_gradients: Vec<TetGradients>,
    tet_volume: f64,
    /// Spatial triangles as spatial dof triples, cell-major then lower/upper.
    triangles: Vec<[usize; 3]>,
    slice_weights: Vec<f64>,
    node_weights: Vec<f64>,
}

impl SpaceTimeMesh {
    pub fn new(nx: usize, nt: usize, bc: BoundaryCondition) -> Result<Self> {
        if nx < 2 || nt < 2 {
            return Err(Error::InvalidMeshSize { nx, nt });
        }
        let hx = 1.0 / nx as f64;
        let ht = 1.0 / nt as f64;
        let side = match bc {
            BoundaryCondition::Neumann => nx + 1,
            BoundaryCondition::Periodic => nx,
        };
        let n_spatial = side * side;
        let sdof = |r: usize, c: usize| (r % side) * side + (c % side);

        // Spatial triangles with their unwrapped corner positions.
        let mut triangles = Vec::with_capacity(2 * nx * nx);
        let mut corners = Vec::with_capacity(2 * nx * nx);
        for r in 0..nx {
            for c in 0..nx {
                let lower = [(r, c), (r, c + 1), (r + 1, c + 1)];
                let upper = [(r, c), (r + 1, c + 1), (r + 1, c)];
                for tri in [lower, upper] {
                    triangles.push(tri.map(|(r, c)| sdof(r, c)));
                    corners.push(tri.map(|(r, c)| [c as f64 * hx, r as f64 * hx]));
                }
            }
        }

        let tet_volume = hx * hx * ht / 6.0;
        let mut layer_tets: Vec<[(usize, usize); 4]> = Vec::with_capacity(6 * nx * nx);
        let mut layer_gradients = Vec::with_capacity(6 * nx * nx);
        for (tri, pos) in triangles.iter().zip(&corners) {
            let mut order = [0usize, 1, 2];
            order.sort_by_key(|&i| tri[i]);
            let [o0, o1, o2] = order;
            // (time offset, local corner)
            let pattern = [
                [(0, o0), (0, o1), (0, o2), (1, o2)],
                [(0, o0), (0, o1), (1, o1), (1, o2)],
                [(0, o0), (1, o0), (1, o1), (1, o2)],
            ];
            for mut local in pattern {
                let point = |(off, i): (usize, usize)| [off as f64 * ht, pos[i][0], pos[i][1]];
                let mut pts = local.map(point);
                if signed_volume(&pts) < 0.0 {
                    local.swap(2, 3);
                    pts.swap(2, 3);
                }
                layer_gradients.push(barycentric_gradients(&pts));
                layer_tets.push(local.map(|(off, i)| (off, tri[i])));
            }
        }

        let mut tets = Vec::with_capacity(nt * layer_tets.len());
        for k in 0..nt {
            for lt in &layer_tets {
                tets.push(lt.map(|(off, s)| (k + off) * n_spatial + s));
            }
        }

        let mut vertices = Vec::with_capacity(n_spatial * (nt + 1));
        for k in 0..=nt {
            for r in 0..side {
                for c in 0..side {
                    vertices.push([k as f64 * ht, c as f64 * hx, r as f64 * hx]);
                }
            }
        }

        let area = 0.5 * hx * hx;
        let mut slice_weights = vec![0.0; n_spatial];
        for tri in &triangles {
            for &s in tri {
                slice_weights[s] += area / 3.0;
            }
        }

        let mut node_weights = Vec::with_capacity(n_spatial * (nt + 1));
        for k in 0..=nt {
            let tau = time_weight(k, nt, ht);
            node_weights.extend(slice_weights.iter().map(|w| tau * w));
        }

        Ok(SpaceTimeMesh {
            nx,
            nt,
            hx,
            ht,
            bc,
            n_spatial,
            vertices,
            tets,
            layer_gradients,
            tet_volume,
            triangles,
            slice_weights,
            node_weights,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn ht(&self) -> f64 {
        self.ht
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// Spatial degrees of freedom per time node.
    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Tetrahedra per time slab.
    pub fn tets_per_slab(&self) -> usize {
        self.layer_gradients.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn tet(&self, e: usize) -> [usize; 4] {
        self.tets[e]
    }

    /// Volume of tetrahedron `e` (all tetrahedra are congruent in volume).
    pub fn tet_volume(&self, _e: usize) -> f64 {
        self.tet_volume
    }

    pub fn gradients(&self, e: usize) -> &TetGradients {
        &self.layer_gradients[e % self.layer_gradients.len()]
    }

    /// Spatial triangles as triples of spatial dofs.
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle_area(&self) -> f64 {
        0.5 * self.hx * self.hx
    }

    /// Time slab containing tetrahedron `e`.
    pub fn slab_of(&self, e: usize) -> usize {
        e / self.layer_gradients.len()
    }

    /// Spatial triangle under tetrahedron `e`.
    pub fn triangle_of(&self, e: usize) -> usize {
        (e % self.layer_gradients.len()) / 3
    }

    pub fn dof(&self, k: usize, s: usize) -> usize {
        k * self.n_spatial + s
    }

    /// Weights `w_s` with `sum_s w_s psi_s = int_D psi dx` for spatial P1 `psi`.
    pub fn spatial_slice_weights(&self, k: usize) -> Result<&[f64]> {
        if k > self.nt {
            return Err(Error::TimeNodeOutOfRange { k, nt: self.nt });
        }
        Ok(&self.slice_weights)
    }

    /// Trapezoidal time weight of node `k`.
    pub fn time_weight(&self, k: usize) -> f64 {
        time_weight(k, self.nt, self.ht)
    }

    /// Diagonal lumped space-time weights `tau_k * w_s` for every dof.
    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    /// Per-tet constant gradient `(d/dt, d/dx, d/dy)` of a P1 field.
    pub fn gradient_p1(&self, phi: &P1Field) -> [P0Field; 3] {
        let n = self.n_tets();
        let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (e, tet) in self.tets.iter().enumerate() {
            let g = self.gradients(e);
            let mut acc = [0.0; 3];
            for (j, &v) in tet.iter().enumerate() {
                for d in 0..3 {
                    acc[d] += phi[v] * g[j][d];
                }
            }
            for d in 0..3 {
                out[d][e] = acc[d];
            }
        }
        out.map(P0Field)
    }

    /// P1 interpolant of a function of `(t, x, y)`.
    pub fn interpolate(&self, f: impl Fn(f64, f64, f64) -> f64) -> P1Field {
        P1Field(self.vertices.iter().map(|&[t, x, y]| f(t, x, y)).collect())
    }

    /// Consistent P1 mass matrix as `(row, col, value)` triplets, one per element pair.
    ///
    /// The elemental matrix `vol/20 (1 + delta_ij)` integrates products of P1
    /// functions exactly.
    pub fn mass_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(16 * self.n_tets());
        for e in 0..self.n_tets() {
            let tet = self.tets[e];
            let vol = self.tet_volume(e);
            for i in 0..4 {
                for j in 0..4 {
                    let m = if i == j { vol / 10.0 } else { vol / 20.0 };
                    out.push((tet[i], tet[j], m));
                }
            }
        }
        out
    }
}

fn time_weight(k: usize, nt: usize, ht: f64) -> f64 {
    if k == 0 || k == nt {
        0.5 * ht
    } else {
        ht
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn det3(c: [[f64; 3]; 3]) -> f64 {
    c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
}

fn signed_volume(p: &[[f64; 3]; 4]) -> f64 {
    det3([sub(p[1], p[0]), sub(p[2], p[0]), sub(p[3], p[0])]) / 6.0
}

fn barycentric_gradients(p: &[[f64; 3]; 4]) -> TetGradients {
    // Rows of the edge matrix E are p_i - p_0; grad lambda_i (i>=1) are the
    // columns of E^{-1}.
    let e = [sub(p[1], p[0]), sub(p[2], p[0]), sub(p[3], p[0])];
    let det = det3(e);
    let cof = |r: usize, c: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        e[r1][c1] * e[r2][c2] - e[r1][c2] * e[r2][c1]
    };
    // inv[i][j] = cof(j, i) / det
    let mut g = [[0.0; 3]; 4];
    for i in 0..3 {
        for d in 0..3 {
            g[i + 1][d] = cof(i, d) / det;
        }
    }
    for d in 0..3 {
        g[0][d] = -(g[1][d] + g[2][d] + g[3][d]);
    }
    g
}

macro_rules! field_newtype {
    ($name:ident, $what:literal) => {
        #[doc = $what]
        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(n: usize) -> Self {
                $name(vec![0.0; n])
            }

            pub fn constant(n: usize, c: f64) -> Self {
                $name(vec![c; n])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }
    };
}

field_newtype!(P0Field, "Piecewise constant field, one value per tetrahedron.");
field_newtype!(P1Field, "Continuous piecewise linear field, one value per vertex dof.");

/// Optimization variable: density and momentum per tetrahedron, nodal source.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub rho: P0Field,
    pub m: [P0Field; 2],
    pub z: P1Field,
}

impl State {
    pub fn zeros(mesh: &SpaceTimeMesh) -> Self {
        let n = mesh.n_tets();
        State {
            rho: P0Field::zeros(n),
            m: [P0Field::zeros(n), P0Field::zeros(n)],
            z: P1Field::zeros(mesh.n_vertices()),
        }
    }

    pub fn check(&self, mesh: &SpaceTimeMesh) -> Result<()> {
        for f in [&self.rho, &self.m[0], &self.m[1]] {
            if f.len() != mesh.n_tets() {
                return Err(Error::LengthMismatch { expected: mesh.n_tets(), got: f.len() });
            }
        }
        if self.z.len() != mesh.n_vertices() {
            return Err(Error::LengthMismatch { expected: mesh.n_vertices(), got: self.z.len() });
        }
        Ok(())
    }

    /// `a * self + b * other`, componentwise.
    pub fn combine(&self, a: f64, other: &State, b: f64) -> State {
        let lin = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| a * x + b * y).collect::<Vec<_>>();
        State {
            rho: P0Field(lin(&self.rho, &other.rho)),
            m: [P0Field(lin(&self.m[0], &other.m[0])), P0Field(lin(&self.m[1], &other.m[1]))],
            z: P1Field(lin(&self.z, &other.z)),
        }
    }

    /// Inner product `int rho rho' + m.m' + (1/delta) z z'` with the lumped
    /// pairing for the nodal source.
    pub fn weighted_dot(&self, other: &State, mesh: &SpaceTimeMesh, delta: f64) -> f64 {
        let mut p = 0.0;
        for e in 0..mesh.n_tets() {
            p += mesh.tet_volume(e)
                * (self.rho[e] * other.rho[e] + self.m[0][e] * other.m[0][e] + self.m[1][e] * other.m[1][e]);
        }
        let w = mesh.node_weights();
        let zz: f64 = self.z.iter().zip(other.z.iter()).zip(w).map(|((a, b), w)| w * a * b).sum();
        p + zz / delta
    }

    pub fn weighted_distance(&self, other: &State, mesh: &SpaceTimeMesh, delta: f64) -> f64 {
        let d = self.combine(1.0, other, -1.0);
        d.weighted_dot(&d, mesh, delta).max(0.0).sqrt()
    }
}
