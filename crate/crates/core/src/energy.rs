//! Discrete action functionals, time profiles and continuity-equation defects.

use crate::assembly::{boundary_functional, ce_pairing, BoundaryData};
use crate::mesh::{P1Field, SpaceTimeMesh, State};
use crate::prox::{huber, SourceKind, SourceModel};

/// Value of the kinetic action density, with `+inf` kept out of band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionValue {
    Finite(f64),
    Infeasible,
}

impl ActionValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            ActionValue::Finite(v) => Some(v),
            ActionValue::Infeasible => None,
        }
    }
}

/// `Phi(rho, m) = |m|^2 / rho` for `rho > 0`, `0` at `(0, 0)`, infeasible otherwise.
/// `eps_rho` and `eps_m` are the numerical zeros of the case split.
pub fn phi_with_eps(rho: f64, m: [f64; 2], eps_rho: f64, eps_m: f64) -> ActionValue {
    let m2 = m[0] * m[0] + m[1] * m[1];
    if rho > eps_rho {
        ActionValue::Finite(m2 / rho)
    } else if rho >= -eps_rho && m2.sqrt() <= eps_m {
        ActionValue::Finite(0.0)
    } else {
        ActionValue::Infeasible
    }
}

pub fn phi(rho: f64, m: [f64; 2]) -> ActionValue {
    phi_with_eps(rho, m, 1e-12, 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub transport: f64,
    pub source: f64,
    pub total: f64,
    /// Space-time volume of tetrahedra where `Phi` is infinite (excluded from `transport`).
    pub infeasible_volume: f64,
}

/// `sum_e vol_e Phi(rho_e, m_e)` and the volume of infeasible tetrahedra.
///
/// The zero thresholds scale with the largest slab density.
pub fn transport_energy(state: &State, mesh: &SpaceTimeMesh) -> (f64, f64) {
    let scale = state.rho.iter().fold(0.0f64, |a, &r| a.max(r.abs())).max(f64::MIN_POSITIVE);
    let eps = 1e-12 * scale;
    let mut energy = 0.0;
    let mut infeasible = 0.0;
    for e in 0..mesh.n_tets() {
        let vol = mesh.tet_volume(e);
        match phi_with_eps(state.rho[e], [state.m[0][e], state.m[1][e]], eps, eps) {
            ActionValue::Finite(v) => energy += vol * v,
            ActionValue::Infeasible => infeasible += vol,
        }
    }
    (energy, infeasible)
}

/// Per-node spatial integrals `S_k = sum_s w_s r(z_{k,s})`.
pub fn slice_integrals(z: &P1Field, mesh: &SpaceTimeMesh, r: impl Fn(f64) -> f64) -> Vec<f64> {
    let w = mesh.spatial_slice_weights(0).expect("node 0 exists");
    z.chunks(mesh.n_spatial())
        .map(|zk| zk.iter().zip(w).map(|(z, w)| w * r(*z)).sum())
        .collect()
}

/// Source penalty of the given model with trapezoidal weights in time.
///
/// * `l2huber`: `(1/delta) sum_k tau_k S_k^2` with `S_k` the Huber slice integral,
/// * `l2l2`: `(1/delta) int int z^2`,
/// * `l1l1`: `(1/delta) int int |z|`,
/// * `none`: `0`.
pub fn source_energy(z: &P1Field, model: &SourceModel, delta: f64, mesh: &SpaceTimeMesh) -> f64 {
    let nw = mesh.node_weights();
    match model.kind {
        SourceKind::None => 0.0,
        SourceKind::L2L2 => z.iter().zip(nw).map(|(z, w)| w * z * z).sum::<f64>() / delta,
        SourceKind::L1L1 => z.iter().zip(nw).map(|(z, w)| w * z.abs()).sum::<f64>() / delta,
        SourceKind::L2Huber => {
            let s = slice_integrals(z, mesh, |v| huber(v, model.beta));
            s.iter().enumerate().map(|(k, sk)| mesh.time_weight(k) * sk * sk).sum::<f64>() / delta
        }
    }
}

pub fn energy(state: &State, model: &SourceModel, delta: f64, mesh: &SpaceTimeMesh) -> EnergyBreakdown {
    let (transport, infeasible_volume) = transport_energy(state, mesh);
    let source = source_energy(&state.z, model, delta, mesh);
    EnergyBreakdown { transport, source, total: transport + source, infeasible_volume }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeProfile {
    pub t: f64,
    /// Density mass at the node: mean of the adjacent slab masses (the single
    /// adjacent slab at `t = 0` and `t = 1`).
    pub mass: f64,
    pub src_abs: f64,
    pub src_pos: f64,
    pub src_neg: f64,
}

/// Mass of every time slab, `sum_{e in slab} vol_e rho_e / ht`.
pub fn slab_masses(state: &State, mesh: &SpaceTimeMesh) -> Vec<f64> {
    state
        .rho
        .chunks(mesh.tets_per_slab())
        .enumerate()
        .map(|(j, slab)| {
            let base = j * mesh.tets_per_slab();
            slab.iter().enumerate().map(|(i, r)| mesh.tet_volume(base + i) * r).sum::<f64>() / mesh.ht()
        })
        .collect()
}

pub fn time_profiles(state: &State, mesh: &SpaceTimeMesh) -> Vec<TimeProfile> {
    let slabs = slab_masses(state, mesh);
    let abs = slice_integrals(&state.z, mesh, f64::abs);
    let pos = slice_integrals(&state.z, mesh, |v| v.max(0.0));
    let neg = slice_integrals(&state.z, mesh, |v| (-v).max(0.0));
    let nt = mesh.nt();
    (0..=nt)
        .map(|k| {
            let mass = match k {
                0 => slabs[0],
                k if k == nt => slabs[nt - 1],
                k => 0.5 * (slabs[k - 1] + slabs[k]),
            };
            TimeProfile { t: k as f64 * mesh.ht(), mass, src_abs: abs[k], src_pos: pos[k], src_neg: neg[k] }
        })
        .collect()
}

/// Euclidean norm of the discrete continuity-equation defect over all nodal test functions.
pub fn ce_residual(state: &State, bdata: &BoundaryData, mesh: &SpaceTimeMesh) -> f64 {
    let b = boundary_functional(mesh, bdata);
    ce_pairing(mesh, state)
        .iter()
        .zip(&b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `|(mass_B - mass_A) - int int z|` with the pairing of the `psi = 1` test function.
pub fn mass_balance_defect(state: &State, bdata: &BoundaryData, mesh: &SpaceTimeMesh) -> f64 {
    let source: f64 = state.z.iter().zip(mesh.node_weights()).map(|(z, w)| z * w).sum();
    ((bdata.mass_b(mesh) - bdata.mass_a(mesh)) - source).abs()
}
