//! Douglas-Rachford splitting between the action `F1` (transport plus source
//! penalty) and the indicator `F2` of the discrete continuity-equation
//! solutions:
//!
//! ```text
//! q^n = proj_CE(x^{n-1})
//! x^n = x^{n-1} + alpha (prox_{gamma F1}(2 q^n - x^{n-1}) - q^n)
//! ```
//!
//! Both proxes are taken in the weighted norm `int rho^2 + |m|^2 + z^2/delta`.

use std::time::Instant;

use crate::assembly::{assemble_system_with, BoundaryData, CeProjector, Preconditioner, SparseSystem};
use crate::energy::{energy, mass_balance_defect};
use crate::error::{Error, Result};
use crate::mesh::{BoundaryCondition, P0Field, P1Field, SpaceTimeMesh, State};
use crate::prox::{
    prox_source_l1l1, prox_source_l2huber_warm, prox_source_l2l2, prox_transport, HuberSolverOptions, SourceKind,
    SourceModel,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop when the fixed-point residual falls below `fp_tol` times its first value.
    pub fp_tol: f64,
    pub cg_tol: f64,
    /// `None` selects `10 sqrt(n) + 500`.
    pub cg_maxit: Option<usize>,
    pub preconditioner: Preconditioner,
    pub source: SourceModel,
    pub bc: BoundaryCondition,
    pub huber: HuberSolverOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            delta: 1.0,
            gamma: 1.0,
            alpha: 1.8,
            max_iters: 5000,
            fp_tol: 1e-5,
            cg_tol: 1e-9,
            cg_maxit: None,
            preconditioner: Preconditioner::Tensor,
            source: SourceModel::default(),
            bc: BoundaryCondition::Neumann,
            huber: HuberSolverOptions::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return bad("alpha must lie in (0,2)".to_string());
        }
        if self.max_iters == 0 {
            return bad("iters must be at least 1".to_string());
        }
        if !(self.fp_tol > 0.0) {
            return bad(format!("fp-tol must be positive, got {}", self.fp_tol));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return bad(format!("cg-tol must lie in (0,1), got {}", self.cg_tol));
        }
        if self.cg_maxit == Some(0) {
            return bad("cg-maxit must be at least 1".to_string());
        }
        SourceModel::new(self.source.kind, self.source.beta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iter: usize,
    pub fixed_point_residual: f64,
    /// Total action of the feasible iterate.
    pub energy: f64,
    pub transport_energy: f64,
    pub source_energy: f64,
    pub mass_balance_defect: f64,
    pub infeasible_volume: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxItersReached,
}

#[derive(Debug, Clone)]
pub struct GeodesicResult {
    /// Last continuity-equation feasible iterate.
    pub state: State,
    /// Last auxiliary iterate, usable as a restart point.
    pub aux: State,
    pub stats: Vec<IterationStats>,
    pub config: SolverConfig,
    pub wall_seconds: f64,
    pub termination: Termination,
}

impl GeodesicResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_stats(&self) -> Option<&IterationStats> {
        self.stats.last()
    }
}

/// Linear blend of the endpoints with zero momentum and the time-constant
/// source `u_B - u_A`, projected nodally onto P1.
pub fn initialize(mesh: &SpaceTimeMesh, bdata: &BoundaryData) -> State {
    let mut state = State::zeros(mesh);
    for e in 0..mesh.n_tets() {
        let t = (mesh.slab_of(e) as f64 + 0.5) * mesh.ht();
        let tri = mesh.triangle_of(e);
        state.rho[e] = (1.0 - t) * bdata.ua[tri] + t * bdata.ub[tri];
    }
    let w = mesh.spatial_slice_weights(0).expect("node 0 exists");
    let mut diff = vec![0.0; mesh.n_spatial()];
    let third = mesh.triangle_area() / 3.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        for &s in tri {
            diff[s] += third * (bdata.ub[t] - bdata.ua[t]);
        }
    }
    for (d, w) in diff.iter_mut().zip(w) {
        *d /= w;
    }
    for k in 0..=mesh.nt() {
        for s in 0..mesh.n_spatial() {
            state.z[mesh.dof(k, s)] = diff[s];
        }
    }
    state
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub aux: State,
    pub feasible: State,
    /// `prox_{gamma F1}(2 q - x)`.
    pub prox: State,
    /// Weighted distance between `prox` and `feasible`.
    pub residual: f64,
}

/// Relaxed update `x + alpha (prox - q)`.
pub fn relaxed_update(aux: &State, feasible: &State, prox: &State, alpha: f64) -> State {
    let lin = |x: &[f64], q: &[f64], p: &[f64]| -> Vec<f64> {
        x.iter().zip(q).zip(p).map(|((x, q), p)| x + alpha * (p - q)).collect()
    };
    State {
        rho: P0Field(lin(&aux.rho, &feasible.rho, &prox.rho)),
        m: [
            P0Field(lin(&aux.m[0], &feasible.m[0], &prox.m[0])),
            P0Field(lin(&aux.m[1], &feasible.m[1], &prox.m[1])),
        ],
        z: P1Field(lin(&aux.z, &feasible.z, &prox.z)),
    }
}

/// Douglas-Rachford solver bound to one mesh and endpoint pair.
pub struct DrSolver<'a> {
    mesh: &'a SpaceTimeMesh,
    bdata: &'a BoundaryData,
    config: SolverConfig,
    system: SparseSystem,
    projector: CeProjector,
    huber_warm: Vec<f64>,
}

impl<'a> DrSolver<'a> {
    pub fn new(mesh: &'a SpaceTimeMesh, bdata: &'a BoundaryData, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let system = assemble_system_with(mesh, config.delta, config.preconditioner)?;
        let maxit = config.cg_maxit.unwrap_or_else(|| system.default_maxit());
        let projector = CeProjector::new(mesh, bdata, &system, config.cg_tol, maxit);
        Ok(DrSolver { mesh, bdata, config, system, projector, huber_warm: vec![0.0; mesh.n_vertices()] })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn system(&self) -> &SparseSystem {
        &self.system
    }

    pub fn project(&mut self, state: &State) -> Result<State> {
        self.projector.project(self.mesh, &self.system, state)
    }

    /// `prox_{gamma F1}` in the weighted norm.
    ///
    /// The `l2l2` and `l1l1` closed forms are written for the unhalved prox
    /// convention, so they receive `2 gamma` here; with that the DR iteration
    /// minimizes exactly the penalties reported by `source_energy`.
    pub fn prox_f1(&mut self, y: &State) -> Result<State> {
        let gamma = self.config.gamma;
        let (rho, m) = prox_transport(&y.rho, &y.m, gamma)?;
        let z = match self.config.source.kind {
            SourceKind::None => P1Field::zeros(y.z.len()),
            SourceKind::L2L2 => prox_source_l2l2(&y.z, 2.0 * gamma),
            SourceKind::L1L1 => prox_source_l1l1(&y.z, 2.0 * gamma),
            SourceKind::L2Huber => {
                let w = self.mesh.spatial_slice_weights(0)?;
                prox_source_l2huber_warm(
                    &y.z,
                    gamma,
                    self.config.delta,
                    self.config.source.beta,
                    w,
                    &mut self.huber_warm,
                    &self.config.huber,
                )?
            }
        };
        Ok(State { rho, m, z })
    }

    pub fn step(&mut self, aux: &State) -> Result<StepOutput> {
        let feasible = self.project(aux)?;
        let reflected = feasible.combine(2.0, aux, -1.0);
        let prox = self.prox_f1(&reflected)?;
        let residual = prox.weighted_distance(&feasible, self.mesh, self.config.delta);
        let aux = relaxed_update(aux, &feasible, &prox, self.config.alpha);
        Ok(StepOutput { aux, feasible, prox, residual })
    }

    fn stats(&self, iter: usize, out: &StepOutput) -> IterationStats {
        let e = energy(&out.feasible, &self.config.source, self.config.delta, self.mesh);
        IterationStats {
            iter,
            fixed_point_residual: out.residual,
            energy: e.total,
            transport_energy: e.transport,
            source_energy: e.source,
            mass_balance_defect: mass_balance_defect(&out.feasible, self.bdata, self.mesh),
            infeasible_volume: e.infeasible_volume,
            cg_iterations: self.projector.last_report().map_or(0, |r| r.iterations),
        }
    }

    /// Runs from the projected linear-blend initialization.
    pub fn run(&mut self, observe: impl FnMut(&IterationStats)) -> Result<GeodesicResult> {
        let start = initialize(self.mesh, self.bdata);
        let start = self.project(&start)?;
        self.run_from(start, observe)
    }

    pub fn run_from(&mut self, mut aux: State, mut observe: impl FnMut(&IterationStats)) -> Result<GeodesicResult> {
        aux.check(self.mesh)?;
        let clock = Instant::now();
        self.huber_warm.copy_from_slice(&aux.z);
        let mut stats = Vec::with_capacity(self.config.max_iters.min(100_000));
        let mut initial = None;
        let mut feasible = aux.clone();
        let mut termination = Termination::MaxItersReached;
        for iter in 1..=self.config.max_iters {
            let out = self.step(&aux)?;
            let s = self.stats(iter, &out);
            observe(&s);
            stats.push(s);
            let r0 = *initial.get_or_insert(out.residual);
            // residuals at rounding level count as converged (exact fixed points give r0 ~ eps)
            let floor = 1e-14 * out.feasible.weighted_dot(&out.feasible, self.mesh, self.config.delta).sqrt();
            aux = out.aux;
            feasible = out.feasible;
            if out.residual <= self.config.fp_tol * r0 || out.residual <= floor {
                termination = Termination::Converged;
                break;
            }
        }
        Ok(GeodesicResult {
            state: feasible,
            aux,
            stats,
            config: self.config,
            wall_seconds: clock.elapsed().as_secs_f64(),
            termination,
        })
    }
}

/// Solves for the geodesic between the endpoints of `bdata`.
pub fn run(mesh: &SpaceTimeMesh, bdata: &BoundaryData, config: SolverConfig) -> Result<GeodesicResult> {
    DrSolver::new(mesh, bdata, config)?.run(|_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{ce_residual, source_energy};

    fn mesh(nx: usize, nt: usize) -> SpaceTimeMesh {
        SpaceTimeMesh::new(nx, nt, BoundaryCondition::Neumann).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let c = SolverConfig { alpha: 2.5, ..Default::default() };
        assert_eq!(c.validate(), Err(Error::InvalidConfig("alpha must lie in (0,2)".into())));
        assert!(SolverConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { delta: -1.0, ..Default::default() }.validate().is_err());
        let c = SolverConfig { source: SourceModel { kind: SourceKind::L2Huber, beta: 0.0 }, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn initialization_examples() {
        let m = mesh(4, 3);
        let u: Vec<f64> = (0..m.n_triangles()).map(|t| (t % 4) as f64).collect();
        let bd = BoundaryData::new(&m, u.clone(), u).unwrap();
        let s = initialize(&m, &bd);
        assert!(s.z.iter().all(|v| v.abs() < 1e-14));
        let per = m.tets_per_slab();
        for e in 0..per {
            for j in 1..m.nt() {
                assert_eq!(s.rho[e], s.rho[e + j * per]);
            }
        }

        let bd = BoundaryData::new(&m, vec![0.0; m.n_triangles()], vec![1.0; m.n_triangles()]).unwrap();
        let s = initialize(&m, &bd);
        let total: f64 = s.z.iter().zip(m.node_weights()).map(|(z, w)| z * w).sum();
        assert!((total - 1.0).abs() < 1e-13);
        let l2 = SourceModel { kind: SourceKind::L2L2, beta: 0.1 };
        assert!((source_energy(&s.z, &l2, 1.0, &m) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn zero_problem_stays_zero() {
        let m = mesh(3, 3);
        let bd = BoundaryData::new(&m, vec![0.0; m.n_triangles()], vec![0.0; m.n_triangles()]).unwrap();
        let mut solver = DrSolver::new(&m, &bd, SolverConfig::default()).unwrap();
        let out = solver.step(&State::zeros(&m)).unwrap();
        assert_eq!(out.aux, State::zeros(&m));
        assert_eq!(out.feasible, State::zeros(&m));
    }

    #[test]
    fn stationary_pair_is_a_fixed_point() {
        let m = mesh(3, 3);
        let u = vec![0.8; m.n_triangles()];
        let bd = BoundaryData::new(&m, u.clone(), u).unwrap();
        let mut solver = DrSolver::new(&m, &bd, SolverConfig::default()).unwrap();
        let x = solver.project(&initialize(&m, &bd)).unwrap();
        let out = solver.step(&x).unwrap();
        assert!(out.aux.weighted_distance(&x, &m, 1.0) < 1e-12);
        assert!(out.residual < 1e-12);
    }

    #[test]
    fn relaxed_update_with_identity_prox() {
        let m = mesh(2, 2);
        let mut x = State::zeros(&m);
        let mut q = State::zeros(&m);
        for e in 0..m.n_tets() {
            x.rho[e] = e as f64;
            q.rho[e] = 0.5 * e as f64 + 1.0;
        }
        // prox = identity applied to 2q - x
        let p = q.combine(2.0, &x, -1.0);
        let next = relaxed_update(&x, &q, &p, 1.0);
        assert!(next.weighted_distance(&q, &m, 1.0) < 1e-12);
    }

    #[test]
    fn feasible_iterates_satisfy_ce() {
        let m = mesh(4, 4);
        let ua: Vec<f64> = (0..m.n_triangles()).map(|t| 1.0 + 0.5 * ((t as f64) * 0.3).sin()).collect();
        let ub: Vec<f64> = (0..m.n_triangles()).map(|t| 1.0 + 0.5 * ((t as f64) * 0.7).cos()).collect();
        let bd = BoundaryData::new(&m, ua, ub).unwrap();
        let cfg = SolverConfig { max_iters: 30, ..Default::default() };
        let mut solver = DrSolver::new(&m, &bd, cfg).unwrap();
        let res = solver.run(|s| assert!(s.mass_balance_defect < 1e-12)).unwrap();
        assert!(ce_residual(&res.state, &bd, &m) < 1e-8);
        assert_eq!(res.stats.len(), 30);
    }
}
