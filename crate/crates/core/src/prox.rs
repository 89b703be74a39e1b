//! Proximal maps of the transport and source parts of the action.
//!
//! The transport prox is computed through the Moreau identity from the
//! projection onto `K = {(a, b) : a + |b|^2/4 <= 0}`, the domain of the convex
//! conjugate of `Phi(rho, m) = |m|^2 / rho`. Source proxes act on nodal
//! values: the `l2l2` and `l1l1` closed forms are pointwise, the Huber model
//! couples all nodes of one time slice and is solved slice by slice.

use crate::error::{Error, Result};
use crate::mesh::{P0Field, P1Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceKind {
    /// No source: mass is conserved.
    None,
    L2L2,
    /// Experimental; geodesics need not exist for this model.
    L1L1,
    #[default]
    L2Huber,
}

impl SourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::None => "none",
            SourceKind::L2L2 => "l2l2",
            SourceKind::L1L1 => "l1l1",
            SourceKind::L2Huber => "l2huber",
        }
    }
}

impl std::str::FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(SourceKind::None),
            "l2l2" => Ok(SourceKind::L2L2),
            "l1l1" => Ok(SourceKind::L1L1),
            "l2huber" => Ok(SourceKind::L2Huber),
            other => Err(format!("unknown source model '{other}' (expected none, l2l2, l1l1 or l2huber)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceModel {
    pub kind: SourceKind,
    /// Huber threshold, only read by `L2Huber`.
    pub beta: f64,
}

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel { kind: SourceKind::L2Huber, beta: 0.1 }
    }
}

impl SourceModel {
    pub fn new(kind: SourceKind, beta: f64) -> Result<Self> {
        if kind == SourceKind::L2Huber && !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive for l2huber, got {beta}")));
        }
        Ok(SourceModel { kind, beta })
    }
}

/// Huber function: `s^2/(2 beta)` for `|s| <= beta`, `|s| - beta/2` beyond.
pub fn huber(s: f64, beta: f64) -> f64 {
    let a = s.abs();
    if a <= beta {
        s * s / (2.0 * beta)
    } else {
        a - 0.5 * beta
    }
}

pub fn huber_derivative(s: f64, beta: f64) -> f64 {
    if s.abs() <= beta {
        s / beta
    } else {
        s.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaboloidPoint {
    pub a: f64,
    pub b: [f64; 2],
}

impl ParaboloidPoint {
    /// `a + |b|^2 / 4`; nonpositive iff the point lies in K.
    pub fn constraint(&self) -> f64 {
        self.a + 0.25 * (self.b[0] * self.b[0] + self.b[1] * self.b[1])
    }
}

/// Euclidean projection onto `K = {(a, b) : a + |b|^2/4 <= 0}`.
///
/// For exterior points the projection is `(a - l, b / (1 + l/2))` where `l > 0`
/// is the unique root of `f(l) = (a - l)(1 + l/2)^2 + |b|^2/4`. The root lies in
/// `[max(a, 0), a + |b|^2/4]`, where `f` is concave and decreasing, so Newton
/// started from the right end decreases monotonically onto it; bisection
/// guards against rounding.
pub fn proj_paraboloid(a: f64, b: [f64; 2]) -> Result<ParaboloidPoint> {
    let b2 = b[0] * b[0] + b[1] * b[1];
    let c = a + 0.25 * b2;
    if !c.is_finite() {
        return Err(Error::RootFindFailure { a, b2 });
    }
    if c <= 0.0 {
        return Ok(ParaboloidPoint { a, b });
    }
    let f = |l: f64| {
        let s = 1.0 + 0.5 * l;
        ((a - l) * s * s + 0.25 * b2, -s * s + (a - l) * s)
    };
    let (mut lo, mut hi) = (a.max(0.0), c);
    let mut l = hi;
    let mut converged = false;
    for _ in 0..200 {
        let (fl, dfl) = f(l);
        if fl == 0.0 {
            converged = true;
            break;
        }
        if fl > 0.0 {
            lo = l;
        } else {
            hi = l;
        }
        let newton = l - fl / dfl;
        let next = if dfl < 0.0 && newton >= lo && newton <= hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - l).abs();
        l = next;
        if step <= 4.0 * f64::EPSILON * l.max(1.0) || hi - lo <= 4.0 * f64::EPSILON * hi.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged || !l.is_finite() {
        return Err(Error::RootFindFailure { a, b2 });
    }
    let s = 1.0 / (1.0 + 0.5 * l);
    let bb = [b[0] * s, b[1] * s];
    let mut out = ParaboloidPoint { a: a - l, b: bb };
    if out.constraint() > 0.0 {
        out.a = -0.25 * (bb[0] * bb[0] + bb[1] * bb[1]);
    }
    Ok(out)
}

/// `prox_{gamma Phi}(x) = x - gamma proj_K(x / gamma)` for one `(rho, m)` point.
pub fn prox_transport_point(rho: f64, m: [f64; 2], gamma: f64) -> Result<(f64, [f64; 2])> {
    let p = proj_paraboloid(rho / gamma, [m[0] / gamma, m[1] / gamma])?;
    Ok((rho - gamma * p.a, [m[0] - gamma * p.b[0], m[1] - gamma * p.b[1]]))
}

/// Transport prox applied independently on every tetrahedron.
pub fn prox_transport(rho: &P0Field, m: &[P0Field; 2], gamma: f64) -> Result<(P0Field, [P0Field; 2])> {
    let n = rho.len();
    let (mut r, mut mx, mut my) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for e in 0..n {
        let (rr, mm) = prox_transport_point(rho[e], [m[0][e], m[1][e]], gamma)?;
        r[e] = rr;
        mx[e] = mm[0];
        my[e] = mm[1];
    }
    Ok((P0Field(r), [P0Field(mx), P0Field(my)]))
}

/// Pointwise `z / (1 + gamma)`.
pub fn prox_source_l2l2(z: &P1Field, gamma: f64) -> P1Field {
    P1Field(z.iter().map(|v| v / (1.0 + gamma)).collect())
}

/// Pointwise soft threshold at `gamma / 2`.
pub fn prox_source_l1l1(z: &P1Field, gamma: f64) -> P1Field {
    let t = 0.5 * gamma;
    P1Field(z.iter().map(|&v| if v.abs() <= t { 0.0 } else { v - t * v.signum() }).collect())
}

/// Controls for the Huber slice solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberSolverOptions {
    pub max_iters: usize,
    /// Stop once `||G|| <= grad_tol * max(1, ||z||)` where `G` is the gradient
    /// divided by the node weights.
    pub grad_tol: f64,
}

impl Default for HuberSolverOptions {
    fn default() -> Self {
        HuberSolverOptions { max_iters: 2000, grad_tol: 1e-8 }
    }
}

/// Objective `gamma (sum w r(s))^2 + 1/2 sum w (s - z)^2` of one slice.
pub fn huber_slice_objective(s: &[f64], z: &[f64], w: &[f64], gamma: f64, beta: f64) -> f64 {
    let mut big_s = 0.0;
    let mut quad = 0.0;
    for i in 0..s.len() {
        big_s += w[i] * huber(s[i], beta);
        quad += w[i] * (s[i] - z[i]) * (s[i] - z[i]);
    }
    gamma * big_s * big_s + 0.5 * quad
}

/// Gradient of [`huber_slice_objective`].
pub fn huber_slice_gradient(s: &[f64], z: &[f64], w: &[f64], gamma: f64, beta: f64) -> Vec<f64> {
    let big_s: f64 = s.iter().zip(w).map(|(s, w)| w * huber(*s, beta)).sum();
    (0..s.len())
        .map(|i| w[i] * (2.0 * gamma * big_s * huber_derivative(s[i], beta) + s[i] - z[i]))
        .collect()
}

/// Minimizes one slice objective by Barzilai-Borwein gradient descent with a
/// nonmonotone backtracking safeguard, starting from `s` (overwritten).
/// Returns the number of iterations.
pub fn solve_huber_slice(
    s: &mut [f64],
    z: &[f64],
    w: &[f64],
    gamma: f64,
    beta: f64,
    opts: &HuberSolverOptions,
) -> std::result::Result<usize, (usize, f64)> {
    let n = s.len();
    let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = opts.grad_tol * znorm.max(1.0);
    let scaled_grad = |s: &[f64], g: &mut [f64]| {
        let big_s: f64 = s.iter().zip(w).map(|(s, w)| w * huber(*s, beta)).sum();
        for i in 0..n {
            g[i] = 2.0 * gamma * big_s * huber_derivative(s[i], beta) + s[i] - z[i];
        }
    };
    let wdot = |a: &[f64], b: &[f64]| -> f64 { (0..n).map(|i| w[i] * a[i] * b[i]).sum() };

    let mut g = vec![0.0; n];
    scaled_grad(s, &mut g);
    let mut gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gnorm <= target {
        return Ok(0);
    }
    let mut f = huber_slice_objective(s, z, w, gamma, beta);
    const MEMORY: usize = 8;
    let mut recent = vec![f];
    let mut step = 1.0;
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    for it in 1..=opts.max_iters {
        let g2w = wdot(&g, &g);
        let f_ref = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-15 * f_ref.abs().max(1e-300);
        let mut t = step;
        let mut f_trial;
        let mut halvings = 0;
        loop {
            for i in 0..n {
                trial[i] = s[i] - t * g[i];
            }
            f_trial = huber_slice_objective(&trial, z, w, gamma, beta);
            if f_trial <= f_ref - 1e-4 * t * g2w + slack || halvings >= 60 {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        scaled_grad(&trial, &mut g_trial);
        // BB1 step in the weighted metric: <ds, ds>_w / <ds, dg>_w with ds = -t g.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let ds = trial[i] - s[i];
            let dg = g_trial[i] - g[i];
            ss += w[i] * ds * ds;
            sy += w[i] * ds * dg;
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-6, 1e6) } else { 1.0 };
        s.copy_from_slice(&trial);
        g.copy_from_slice(&g_trial);
        f = f_trial;
        recent.push(f);
        if recent.len() > MEMORY {
            recent.remove(0);
        }
        gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm <= target {
            return Ok(it);
        }
    }
    Err((opts.max_iters, gnorm))
}

/// Huber source prox, slice by slice.
///
/// Each time node `k` solves `min_s gamma (sum_i w_i r(s_i))^2 + 1/2 sum_i w_i (s_i - z_i)^2`;
/// the common `1/delta` of both terms cancels. `warm` (same layout as `z`)
/// seeds the descent and receives the result.
pub fn prox_source_l2huber_warm(
    z: &P1Field,
    gamma: f64,
    delta: f64,
    beta: f64,
    slice_weights: &[f64],
    warm: &mut [f64],
    opts: &HuberSolverOptions,
) -> Result<P1Field> {
    if !(delta > 0.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let ns = slice_weights.len();
    if ns == 0 || z.len() % ns != 0 || warm.len() != z.len() {
        return Err(Error::LengthMismatch { expected: z.len(), got: warm.len() });
    }
    for (k, (zk, sk)) in z.chunks(ns).zip(warm.chunks_mut(ns)).enumerate() {
        solve_huber_slice(sk, zk, slice_weights, gamma, beta, opts)
            .map_err(|(iterations, gradient)| Error::HuberNonConvergence { slice: k, iterations, gradient })?;
    }
    Ok(P1Field(warm.to_vec()))
}

/// Cold-start variant of [`prox_source_l2huber_warm`].
pub fn prox_source_l2huber(
    z: &P1Field,
    gamma: f64,
    delta: f64,
    beta: f64,
    slice_weights: &[f64],
) -> Result<P1Field> {
    let mut warm = z.0.clone();
    prox_source_l2huber_warm(z, gamma, delta, beta, slice_weights, &mut warm, &HuberSolverOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0, 0.1), 0.0);
        assert!((huber(0.05, 0.1) - 0.0125).abs() < 1e-15);
        assert!((huber(1.0, 0.1) - 0.95).abs() < 1e-15);
        assert!((huber(-1.0, 0.1) - 0.95).abs() < 1e-15);
        assert!((huber_derivative(3.0, 0.1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let p = proj_paraboloid(-1.0, [2.0, 0.0]).unwrap();
        assert_eq!(p, ParaboloidPoint { a: -1.0, b: [2.0, 0.0] });

        let p = proj_paraboloid(1.0, [0.0, 0.0]).unwrap();
        assert!(p.a.abs() < 1e-14 && p.b == [0.0, 0.0]);

        let p = proj_paraboloid(0.0, [2.0, 0.0]).unwrap();
        // bisection oracle on l (1 + l/2)^2 = 1
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + 0.5 * mid).powi(2) < 1.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((p.a + lo).abs() < 1e-12);
        assert!((p.b[0] - 2.0 / (1.0 + 0.5 * lo)).abs() < 1e-12);
        assert!((p.a + 0.5943).abs() < 1e-4 && (p.b[0] - 1.5418).abs() < 1e-4);
        assert!(p.constraint().abs() < 1e-12);
    }

    #[test]
    fn projection_rejects_nan() {
        assert!(matches!(proj_paraboloid(f64::NAN, [0.0, 0.0]), Err(Error::RootFindFailure { .. })));
    }

    #[test]
    fn transport_prox_examples() {
        let (r, m) = prox_transport_point(1.0, [0.0, 0.0], 1.0).unwrap();
        assert!((r - 1.0).abs() < 1e-14 && m == [0.0, 0.0]);
        let (r, m) = prox_transport_point(-2.0, [0.0, 0.0], 1.0).unwrap();
        assert_eq!((r, m), (0.0, [0.0, 0.0]));
    }

    #[test]
    fn closed_form_source_proxes() {
        let z = P1Field(vec![2.0, 0.0, 3.0]);
        assert_eq!(prox_source_l2l2(&z, 1.0).0, vec![1.0, 0.0, 1.5]);
        assert_eq!(prox_source_l2l2(&P1Field(vec![3.0]), 2.0).0, vec![1.0]);
        let z = P1Field(vec![0.2, 1.0, -1.0, 0.5]);
        assert_eq!(prox_source_l1l1(&z, 1.0).0, vec![0.0, 0.5, -0.5, 0.0]);
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d
            } else {
                a = c
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn huber_single_node() {
        let w = [1.0];
        let z = P1Field(vec![5.0]);
        let out = prox_source_l2huber(&z, 0.0, 1.0, 0.1, &w).unwrap();
        assert!((out[0] - 5.0).abs() < 1e-12);

        let out = prox_source_l2huber(&z, 1.0, 1.0, 0.1, &w).unwrap();
        let oracle = golden_section(|s| huber_slice_objective(&[s], &[5.0], &w, 1.0, 0.1), 0.0, 5.0);
        assert!((oracle - 1.7).abs() < 1e-7);
        assert!((out[0] - 1.7).abs() < 1e-9, "{}", out[0]);
    }

    #[test]
    fn huber_zero_slice_stays_zero() {
        let w = vec![0.25; 4];
        let z = P1Field(vec![0.0; 8]);
        let out = prox_source_l2huber(&z, 3.0, 1.0, 0.1, &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huber_reports_nonconvergence() {
        let w = vec![0.1; 10];
        let z: Vec<f64> = (0..10).map(|i| i as f64 - 3.0).collect();
        let mut s = z.clone();
        let opts = HuberSolverOptions { max_iters: 1, grad_tol: 1e-14 };
        assert!(solve_huber_slice(&mut s, &z, &w, 50.0, 0.1, &opts).is_err());
    }
}
