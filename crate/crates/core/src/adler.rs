//! Lock solutions of the classic and amplitude-aware Adler systems, locking
//! ranges and frequency sweeps.
//!
//! All angles of a solution are referenced to the oscillator current, so
//! `phi_0` is the angle of the injected current and `psi` the angle of the
//! total current. `psi > 0` corresponds to injection above the free-running
//! frequency. A locked stage satisfies `theta_vi + psi - theta_iv = -180/N`.

use crate::error::{domain, Error, Result};
use crate::phasor::{wrap_deg, wrap_rad};
use crate::stage::{baseline_at, CalibrationTable, FreeRunningPoint, KAngleMode, StageParams};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Injected current relative to the free-running oscillator current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    /// |I_inj| = epsilon · I_osc_fr.
    pub epsilon: f64,
    pub f_inj: f64,
    /// Every node receives a phase-rotated copy of the reference.
    pub multi_phase: bool,
}

impl InjectionSpec {
    pub fn new(epsilon: f64, f_inj: f64) -> Self {
        InjectionSpec {
            epsilon,
            f_inj,
            multi_phase: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return domain(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(self.f_inj > 0.0) {
            return domain(format!("f_inj must be > 0, got {}", self.f_inj));
        }
        if !self.multi_phase {
            return domain("only multi-phase injection is modeled");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockSolution {
    pub phi_0: f64,
    pub psi: f64,
    pub theta_vi: f64,
    /// Effective current-to-voltage angle used by the phase condition.
    pub theta_iv: f64,
    pub i_t_mag: f64,
    pub i_osc_mag: f64,
    pub v_osc_mag: f64,
    pub f_inj: f64,
    pub f_fr: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnlockReason {
    NoRoot,
    AmplitudeCollapse,
    MaxIter,
}

impl std::fmt::Display for UnlockReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UnlockReason::NoRoot => "NO_ROOT",
            UnlockReason::AmplitudeCollapse => "AMPLITUDE_COLLAPSE",
            UnlockReason::MaxIter => "MAX_ITER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LockOutcome {
    Locked(LockSolution),
    Unlocked { reason: UnlockReason },
}

impl LockOutcome {
    pub fn solution(&self) -> Option<&LockSolution> {
        match self {
            LockOutcome::Locked(s) => Some(s),
            LockOutcome::Unlocked { .. } => None,
        }
    }

    pub fn is_locked(&self) -> bool {
        matches!(self, LockOutcome::Locked(_))
    }
}

/// Which system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Closed-form triangle with amplitudes fixed at free-running values.
    Classic,
    /// Amplitude laws active, unknowns (V_osc, φ0).
    Extended,
    /// Extended solver with the amplitude laws held constant; the injected
    /// conversion angle becomes the second unknown.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Residual 2-norm tolerance in normalized units.
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative finite-difference step of the Jacobian.
    pub jacobian_step: f64,
    pub grid_v: usize,
    pub grid_phi: usize,
    /// Amplitude span of the fallback grid, relative to V_osc_fr.
    pub grid_v_span: (f64, f64),
    /// Absolute edge tolerance of locking-range bisection, hertz.
    pub edge_tol_hz: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            max_iter: 50,
            max_halvings: 8,
            jacobian_step: 1e-6,
            grid_v: 100,
            grid_phi: 360,
            grid_v_span: (0.5, 1.5),
            edge_tol_hz: 1e6,
        }
    }
}

/// Stable-branch injection angle of the classic triangle for a required ψ.
///
/// Solves tan ψ = ε sin φ0 / (1 + ε cos φ0) on the branch through φ0 = 0.
/// Returns `None` when |ψ| exceeds arcsin ε.
pub fn classic_phi0(epsilon: f64, psi_deg: f64) -> Option<f64> {
    let psi = psi_deg.to_radians();
    if epsilon == 0.0 {
        return (psi_deg.abs() <= 1e-12).then_some(0.0);
    }
    let s = psi.sin() / epsilon;
    if s.abs() > 1.0 {
        return None;
    }
    Some((psi + s.asin()).to_degrees())
}

fn classic_required_psi(base: &FreeRunningPoint, p: &StageParams, ratio: f64) -> (f64, f64, f64) {
    let stage = p.stage_phase();
    match p.k_angle_mode {
        KAngleMode::ThetaIv => {
            let theta_iv = base.theta_iv_fr * ratio;
            (theta_iv - stage - base.theta_vi_fr, base.theta_vi_fr, theta_iv)
        }
        KAngleMode::ThetaVi => {
            let theta_vi = base.theta_vi_fr * ratio;
            (base.theta_iv_fr - stage - theta_vi, theta_vi, base.theta_iv_fr)
        }
    }
}

/// Classic Adler lock: amplitudes frozen, conversion angle scaled with
/// frequency as θ_fr/f_fr = θ_inj/f_inj.
pub fn solve_classic(base: &FreeRunningPoint, inj: &InjectionSpec, p: &StageParams) -> Result<LockOutcome> {
    inj.validate()?;
    base.validate()?;
    let ratio = inj.f_inj / base.f_fr;
    let (psi_req, theta_vi, theta_iv) = classic_required_psi(base, p, ratio);
    let Some(phi_0) = classic_phi0(inj.epsilon, psi_req) else {
        return Ok(LockOutcome::Unlocked {
            reason: UnlockReason::NoRoot,
        });
    };
    let i_t = Complex64::new(1.0, 0.0) + Complex64::from_polar(inj.epsilon, phi_0.to_radians());
    Ok(LockOutcome::Locked(LockSolution {
        phi_0: wrap_deg(phi_0),
        psi: psi_req,
        theta_vi,
        theta_iv,
        i_t_mag: i_t.norm() * base.i_osc_fr,
        i_osc_mag: base.i_osc_fr,
        v_osc_mag: base.v_osc_fr,
        f_inj: inj.f_inj,
        f_fr: base.f_fr,
        residual_norm: 0.0,
    }))
}

/// Normalized residual system for one operating point.
struct System<'a> {
    base: FreeRunningPoint,
    p: &'a StageParams,
    epsilon: f64,
    /// f_inj / f_fr
    ratio: f64,
    kind: SolverKind,
}

struct Evaluated {
    r: [f64; 2],
    theta_vi: f64,
    theta_iv: f64,
    i_osc: f64,
    i_t: Complex64,
    v: f64,
}

impl System<'_> {
    /// `x[0]` is V/V_fr (extended) or θ_inj/θ_fr (frozen); `x[1]` is φ0 in radians.
    fn eval(&self, x: [f64; 2]) -> Option<Evaluated> {
        let b = &self.base;
        let stage = self.p.stage_phase();
        match self.kind {
            SolverKind::Extended => {
                let v = x[0];
                if !(v > 0.0) {
                    return None;
                }
                let dv = (v - 1.0) * b.v_osc_fr;
                let theta_vi = b.theta_vi_fr + self.p.a_vi * dv;
                let i_osc = (1.0 + self.p.g_m * dv / b.i_osc_fr).max(0.0);
                let psi_req = (b.theta_iv_fr - stage - theta_vi).to_radians();
                let i_t = Complex64::new(i_osc, 0.0) + Complex64::from_polar(self.epsilon, x[1]);
                let r1 = wrap_rad(i_t.arg() - psi_req);
                let angle_ratio = match self.p.k_angle_mode {
                    KAngleMode::ThetaIv => 1.0,
                    KAngleMode::ThetaVi => theta_vi / b.theta_vi_fr,
                };
                let r2 = 1.0 - i_t.norm() * angle_ratio / (v * self.ratio);
                Some(Evaluated {
                    r: [r1, r2],
                    theta_vi,
                    theta_iv: b.theta_iv_fr,
                    i_osc,
                    i_t,
                    v,
                })
            }
            SolverKind::Frozen => {
                let u = x[0];
                let (theta_vi, theta_iv) = match self.p.k_angle_mode {
                    KAngleMode::ThetaIv => (b.theta_vi_fr, b.theta_iv_fr * u),
                    KAngleMode::ThetaVi => (b.theta_vi_fr * u, b.theta_iv_fr),
                };
                let psi_req = (theta_iv - stage - theta_vi).to_radians();
                let i_t = Complex64::new(1.0, 0.0) + Complex64::from_polar(self.epsilon, x[1]);
                let r1 = wrap_rad(i_t.arg() - psi_req);
                let r2 = 1.0 - u / self.ratio;
                Some(Evaluated {
                    r: [r1, r2],
                    theta_vi,
                    theta_iv,
                    i_osc: 1.0,
                    i_t,
                    v: 1.0,
                })
            }
            SolverKind::Classic => unreachable!("classic mode has a closed form"),
        }
    }

    fn norm(&self, x: [f64; 2]) -> Option<f64> {
        self.eval(x).map(|e| e.r[0].hypot(e.r[1]))
    }

    fn solution(&self, x: [f64; 2]) -> Option<LockSolution> {
        let e = self.eval(x)?;
        let b = &self.base;
        Some(LockSolution {
            phi_0: wrap_deg(x[1].to_degrees()),
            psi: wrap_deg(e.i_t.arg().to_degrees()),
            theta_vi: e.theta_vi,
            theta_iv: e.theta_iv,
            i_t_mag: e.i_t.norm() * b.i_osc_fr,
            i_osc_mag: e.i_osc * b.i_osc_fr,
            v_osc_mag: e.v * b.v_osc_fr,
            f_inj: b.f_fr * self.ratio,
            f_fr: b.f_fr,
            residual_norm: e.r[0].hypot(e.r[1]),
        })
    }
}

enum NewtonEnd {
    Converged([f64; 2]),
    MaxIter,
    Collapse,
    Stalled,
}

fn newton(sys: &System, mut x: [f64; 2], o: &SolverOptions) -> NewtonEnd {
    let Some(mut e) = sys.eval(x) else {
        return NewtonEnd::Collapse;
    };
    for _ in 0..o.max_iter {
        let f0 = e.r[0].hypot(e.r[1]);
        if f0 < o.tolerance {
            return NewtonEnd::Converged(x);
        }
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let h = o.jacobian_step * x[j].abs().max(1.0);
            let mut xh = x;
            xh[j] += h;
            let Some(eh) = sys.eval(xh) else {
                return NewtonEnd::Collapse;
            };
            for (i, row) in jac.iter_mut().enumerate() {
                let mut d = eh.r[i] - e.r[i];
                if i == 0 {
                    d = wrap_rad(d);
                }
                row[j] = d / h;
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            return NewtonEnd::Stalled;
        }
        let step = [
            -(jac[1][1] * e.r[0] - jac[0][1] * e.r[1]) / det,
            -(-jac[1][0] * e.r[0] + jac[0][0] * e.r[1]) / det,
        ];
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=o.max_halvings {
            let trial = [x[0] + lambda * step[0], wrap_rad(x[1] + lambda * step[1])];
            match sys.eval(trial) {
                None => return NewtonEnd::Collapse,
                Some(et) if et.r[0].hypot(et.r[1]) < f0 => {
                    accepted = Some((trial, et));
                    break;
                }
                Some(_) => lambda *= 0.5,
            }
        }
        match accepted {
            Some((xn, en)) => {
                x = xn;
                e = en;
            }
            None => return NewtonEnd::Stalled,
        }
    }
    if e.r[0].hypot(e.r[1]) < o.tolerance {
        NewtonEnd::Converged(x)
    } else {
        NewtonEnd::MaxIter
    }
}

/// Coarse scan followed by Newton polish of every local minimum; of the
/// converged roots, the largest-amplitude one is the stable branch.
fn grid_fallback(sys: &System, o: &SolverOptions) -> (Option<[f64; 2]>, bool) {
    let (nv, np) = (o.grid_v.max(2), o.grid_phi.max(3));
    let (v0, v1) = match sys.kind {
        SolverKind::Frozen => {
            let (lo, hi) = (sys.ratio * 0.5, sys.ratio * 1.5);
            (lo, hi)
        }
        _ => o.grid_v_span,
    };
    let vs: Vec<f64> = (0..nv).map(|i| v0 + (v1 - v0) * i as f64 / (nv - 1) as f64).collect();
    let phis: Vec<f64> = (0..np).map(|j| PI - 2.0 * PI * j as f64 / np as f64).collect();
    let norms: Vec<f64> = vs
        .iter()
        .flat_map(|&v| phis.iter().map(move |&ph| (v, ph)))
        .map(|(v, ph)| sys.norm([v, ph]).unwrap_or(f64::INFINITY))
        .collect();
    let at = |i: usize, j: usize| norms[i * np + j];
    let mut minima: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..nv {
        for j in 0..np {
            let c = at(i, j);
            if !c.is_finite() {
                continue;
            }
            let mut is_min = true;
            'nb: for di in [-1i64, 0, 1] {
                for dj in [-1i64, 0, 1] {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ii = i as i64 + di;
                    if ii < 0 || ii >= nv as i64 {
                        continue;
                    }
                    let jj = (j as i64 + dj).rem_euclid(np as i64) as usize;
                    if at(ii as usize, jj) < c {
                        is_min = false;
                        break 'nb;
                    }
                }
            }
            if is_min {
                minima.push((c, i, j));
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut best: Option<[f64; 2]> = None;
    let mut hit_max_iter = false;
    for &(_, i, j) in minima.iter().take(8) {
        match newton(sys, [vs[i], phis[j]], o) {
            NewtonEnd::Converged(x) => {
                if best.is_none_or(|b| x[0] > b[0]) {
                    best = Some(x);
                }
            }
            NewtonEnd::MaxIter => hit_max_iter = true,
            _ => {}
        }
    }
    (best, hit_max_iter)
}

fn seed_for(sys: &System) -> [f64; 2] {
    // classic geometry with the required angle clamped to the reachable edge
    let (psi_req, _, _) = classic_required_psi(&sys.base, sys.p, sys.ratio);
    let eps = sys.epsilon;
    let edge = eps.asin().to_degrees();
    let phi = classic_phi0(eps, psi_req.clamp(-edge, edge)).unwrap_or(0.0);
    let first = match sys.kind {
        SolverKind::Frozen => sys.ratio,
        _ => 1.0,
    };
    [first, phi.to_radians()]
}

/// Unseeded extended solves also start from a ring of injection angles and
/// keep the largest-amplitude root, so they land on the stable branch even
/// where the classic guess sits in the other basin.
const START_ANGLES: usize = 12;

fn starts(sys: &System, seed: Option<[f64; 2]>) -> Vec<[f64; 2]> {
    match seed {
        Some(x) => vec![x],
        None => {
            let x0 = seed_for(sys);
            let mut v = vec![x0];
            if sys.kind == SolverKind::Extended {
                let step = 2.0 * PI / START_ANGLES as f64;
                v.extend((0..START_ANGLES).map(|k| [x0[0], -PI + k as f64 * step]));
            }
            v
        }
    }
}

fn solve_system(sys: &System, seed: Option<[f64; 2]>, o: &SolverOptions) -> LockOutcome {
    let mut collapse = false;
    let mut max_iter = false;
    let mut best: Option<LockSolution> = None;
    // only the primary start decides the unlock reason
    for (k, x0) in starts(sys, seed).into_iter().enumerate() {
        match newton(sys, x0, o) {
            NewtonEnd::Converged(x) => {
                if let Some(s) = sys.solution(x) {
                    if best.is_none_or(|b| s.v_osc_mag > b.v_osc_mag) {
                        best = Some(s);
                    }
                }
            }
            NewtonEnd::Collapse => collapse |= k == 0,
            NewtonEnd::MaxIter => max_iter |= k == 0,
            NewtonEnd::Stalled => {}
        }
    }
    if let Some(s) = best {
        return LockOutcome::Locked(s);
    }
    let (root, grid_max_iter) = grid_fallback(sys, o);
    if let Some(s) = root.and_then(|x| sys.solution(x)) {
        return LockOutcome::Locked(s);
    }
    let reason = if collapse {
        UnlockReason::AmplitudeCollapse
    } else if max_iter || grid_max_iter {
        UnlockReason::MaxIter
    } else {
        UnlockReason::NoRoot
    };
    LockOutcome::Unlocked { reason }
}

fn seed_from_solution(s: &LockSolution, base: &FreeRunningPoint, kind: SolverKind, mode: KAngleMode) -> [f64; 2] {
    let first = match kind {
        SolverKind::Frozen => match mode {
            KAngleMode::ThetaIv => s.theta_iv / base.theta_iv_fr,
            KAngleMode::ThetaVi => s.theta_vi / base.theta_vi_fr,
        },
        _ => s.v_osc_mag / base.v_osc_fr,
    };
    [first, s.phi_0.to_radians()]
}

/// Solve one operating point against an explicit baseline.
pub fn solve_at(
    base: &FreeRunningPoint,
    inj: &InjectionSpec,
    p: &StageParams,
    kind: SolverKind,
    seed: Option<&LockSolution>,
    o: &SolverOptions,
) -> Result<LockOutcome> {
    inj.validate()?;
    base.validate()?;
    if kind == SolverKind::Classic {
        return solve_classic(base, inj, p);
    }
    if p.k_angle_mode == KAngleMode::ThetaVi && base.theta_vi_fr == 0.0 {
        return domain("theta_vi closure needs a non-zero free-running theta_VI");
    }
    let sys = System {
        base: *base,
        p,
        epsilon: inj.epsilon,
        ratio: inj.f_inj / base.f_fr,
        kind,
    };
    let seed = seed.map(|s| seed_from_solution(s, base, kind, p.k_angle_mode));
    Ok(solve_system(&sys, seed, o))
}

/// Extended solve at a free-running frequency inside the calibrated table.
pub fn solve_extended(
    table: &CalibrationTable,
    f_fr: f64,
    inj: &InjectionSpec,
    p: &StageParams,
    o: &SolverOptions,
) -> Result<LockOutcome> {
    let base = baseline_at(table, f_fr)?;
    solve_at(&base, inj, p, SolverKind::Extended, None, o)
}

/// Phasor-closure and phase-condition errors of a solution, recomputed from
/// its reported fields. Closure is relative to |I_osc|; phase in degrees.
pub fn solution_errors(s: &LockSolution, epsilon: f64, i_osc_fr: f64, n_stages: usize) -> (f64, f64) {
    let i_osc = Complex64::new(s.i_osc_mag, 0.0);
    let i_inj = Complex64::from_polar(epsilon * i_osc_fr, s.phi_0.to_radians());
    let i_t = Complex64::from_polar(s.i_t_mag, s.psi.to_radians());
    let closure = (i_osc + i_inj - i_t).norm() / s.i_osc_mag;
    let phase = wrap_deg(s.theta_vi + s.psi - s.theta_iv + 180.0 / n_stages as f64).abs();
    (closure, phase)
}

/// Which frequency is swept while the other stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Injection fixed, free-running frequency swept.
    Ffr,
    /// Free-running fixed, injection frequency swept.
    Finj,
}

impl std::fmt::Display for SweepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepMode::Ffr => "ffr",
            SweepMode::Finj => "finj",
        })
    }
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffr" => Ok(SweepMode::Ffr),
            "finj" => Ok(SweepMode::Finj),
            other => domain(format!("unknown sweep mode '{other}' (ffr | finj)")),
        }
    }
}

/// Problem setup shared by range and sweep operations.
#[derive(Debug, Clone, Copy)]
pub struct Scenario<'a> {
    pub table: &'a CalibrationTable,
    pub params: &'a StageParams,
    pub mode: SweepMode,
    /// The frequency held fixed: f_inj in `Ffr` mode, f_fr in `Finj` mode.
    pub fixed_hz: f64,
    pub kind: SolverKind,
    pub options: SolverOptions,
}

impl Scenario<'_> {
    fn point(&self, swept: f64, epsilon: f64) -> Result<(FreeRunningPoint, InjectionSpec)> {
        let (f_fr, f_inj) = match self.mode {
            SweepMode::Ffr => (swept, self.fixed_hz),
            SweepMode::Finj => (self.fixed_hz, swept),
        };
        let base = baseline_at(self.table, f_fr)?;
        Ok((base, InjectionSpec::new(epsilon, f_inj)))
    }

    /// Solve at one swept-variable value.
    pub fn solve(&self, swept: f64, epsilon: f64, seed: Option<&LockSolution>) -> Result<LockOutcome> {
        let (base, inj) = self.point(swept, epsilon)?;
        solve_at(&base, &inj, self.params, self.kind, seed, &self.options)
    }

    fn swept_range(&self) -> (f64, f64) {
        match self.mode {
            SweepMode::Ffr => self.table.f_range(),
            SweepMode::Finj => (0.5 * self.fixed_hz, 2.0 * self.fixed_hz),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockingRange {
    pub f_lo: f64,
    pub f_hi: f64,
    pub width: f64,
    pub asymmetry: f64,
    pub f_ref: f64,
    pub epsilon: f64,
    /// An edge reached the calibrated table boundary instead of a lock edge.
    pub clipped: bool,
}

impl LockingRange {
    pub fn new(f_lo: f64, f_hi: f64, f_ref: f64, epsilon: f64, clipped: bool) -> Self {
        let width = f_hi - f_lo;
        let asymmetry = if width > 0.0 {
            ((f_hi - f_ref) - (f_ref - f_lo)) / width
        } else {
            0.0
        };
        LockingRange {
            f_lo,
            f_hi,
            width,
            asymmetry,
            f_ref,
            epsilon,
            clipped,
        }
    }
}

/// Maximal contiguous locked interval around the trivial point, found by
/// outward continuation stepping and bisection of the solver's feasibility.
pub fn locking_range(sc: &Scenario, epsilon: f64) -> Result<LockingRange> {
    if !(epsilon > 0.0) {
        return domain(format!("locking range needs epsilon > 0, got {epsilon}"));
    }
    let f_ref = sc.fixed_hz;
    let centre = match sc.solve(f_ref, epsilon, None)? {
        LockOutcome::Locked(s) => s,
        LockOutcome::Unlocked { reason } => {
            return Err(Error::ModelInconsistency(format!(
                "trivial lock point at {f_ref} Hz is unlocked ({reason})"
            )))
        }
    };
    let (lim_lo, lim_hi) = sc.swept_range();
    let half_guess = f_ref * epsilon.asin().to_degrees() / sc.params.theta_iv.max(1.0);
    let tol = sc.options.edge_tol_hz;
    let mut clipped = false;
    let mut edges = [0.0; 2];
    for (k, dir) in [-1.0f64, 1.0].into_iter().enumerate() {
        let limit = if dir < 0.0 { lim_lo } else { lim_hi };
        let mut inside = (f_ref, centre);
        let mut step = (half_guess / 8.0).max(tol);
        let outside = loop {
            let mut f = inside.0 + dir * step;
            let at_limit = (dir < 0.0 && f <= limit) || (dir > 0.0 && f >= limit);
            if at_limit {
                f = limit;
            }
            match sc.solve(f, epsilon, Some(&inside.1))? {
                LockOutcome::Locked(s) if sc.kind == SolverKind::Classic || continuous(&s, &inside.1) => {
                    inside = (f, s);
                    if at_limit {
                        clipped = true;
                        break None;
                    }
                    step = (step * 1.5).min((0.25 * half_guess).max(tol));
                }
                _ => break Some(f),
            }
        };
        edges[k] = match outside {
            None => inside.0,
            Some(mut out) => {
                while (out - inside.0).abs() > tol {
                    let mid = 0.5 * (out + inside.0);
                    match sc.solve(mid, epsilon, Some(&inside.1))? {
                        LockOutcome::Locked(s) if sc.kind == SolverKind::Classic || continuous(&s, &inside.1) => {
                            inside = (mid, s)
                        }
                        _ => out = mid,
                    }
                }
                0.5 * (out + inside.0)
            }
        };
    }
    Ok(LockingRange::new(edges[0], edges[1], f_ref, epsilon, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sweep_var_hz: f64,
    pub epsilon: f64,
    pub outcome: LockOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub mode: SweepMode,
    pub fixed_hz: f64,
    pub k_angle_mode: KAngleMode,
    pub rows: Vec<SweepRow>,
}

/// CSV header shared by solver and oracle sweep tables.
pub const SWEEP_HEADER: [&str; 10] = [
    "sweep_var_hz",
    "epsilon",
    "locked",
    "phi0_deg",
    "psi_deg",
    "theta_vi_deg",
    "i_t_a",
    "i_osc_a",
    "v_osc_v",
    "residual",
];

fn same_branch(a: &LockSolution, b: &LockSolution) -> bool {
    wrap_deg(a.phi_0 - b.phi_0).abs() < 1.0 && (a.v_osc_mag / b.v_osc_mag - 1.0).abs() < 0.01
}

/// One ε block over a grid: independent solves first, then a sequential
/// continuation pass outward from the grid point nearest the fixed frequency.
fn sweep_block(sc: &Scenario, epsilon: f64, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let first: Vec<LockOutcome> = grid
        .par_iter()
        .map(|&f| sc.solve(f, epsilon, None))
        .collect::<Result<_>>()?;
    let centre = grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - sc.fixed_hz).abs().total_cmp(&(b.1 - sc.fixed_hz).abs()))
        .map(|(i, _)| i)
        .unwrap();
    let mut out: Vec<Option<LockOutcome>> = vec![None; grid.len()];
    out[centre] = Some(first[centre]);
    let order: [Vec<usize>; 2] = [(0..centre).rev().collect(), (centre + 1..grid.len()).collect()];
    for side in order {
        let mut prev = first[centre].solution().copied();
        for i in side {
            let chosen = match prev {
                None => match first[i] {
                    LockOutcome::Unlocked { reason } => LockOutcome::Unlocked { reason },
                    LockOutcome::Locked(_) => LockOutcome::Unlocked {
                        reason: UnlockReason::NoRoot,
                    },
                },
                Some(seed) => {
                    let cont = sc.solve(grid[i], epsilon, Some(&seed))?;
                    match cont {
                        LockOutcome::Locked(b) if sc.kind == SolverKind::Classic || continuous(&b, &seed) => {
                            match first[i] {
                                LockOutcome::Locked(a) if same_branch(&a, &b) => first[i],
                                _ => cont,
                            }
                        }
                        _ => match first[i] {
                            LockOutcome::Unlocked { reason } => LockOutcome::Unlocked { reason },
                            LockOutcome::Locked(_) => LockOutcome::Unlocked {
                                reason: UnlockReason::NoRoot,
                            },
                        },
                    }
                }
            };
            prev = chosen.solution().copied();
            out[i] = Some(chosen);
        }
    }
    Ok(grid
        .iter()
        .zip(out)
        .map(|(&f, o)| SweepRow {
            sweep_var_hz: f,
            epsilon,
            outcome: o.unwrap(),
        })
        .collect())
}

fn continuous(a: &LockSolution, b: &LockSolution) -> bool {
    wrap_deg(a.phi_0 - b.phi_0).abs() < 30.0 && (a.v_osc_mag / b.v_osc_mag - 1.0).abs() < 0.1
}

/// Sweep the free variable over `grid` for each ε.
pub fn sweep(sc: &Scenario, epsilons: &[f64], grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        return domain("sweep grid is empty");
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len() * epsilons.len());
    for &eps in epsilons {
        rows.extend(sweep_block(sc, eps, &grid)?);
    }
    Ok(SweepTable {
        mode: sc.mode,
        fixed_hz: sc.fixed_hz,
        k_angle_mode: sc.params.k_angle_mode,
        rows,
    })
}

/// Free-running frequency swept at fixed injection frequency.
pub fn sweep_ffr(
    table: &CalibrationTable,
    f_inj: f64,
    epsilons: &[f64],
    p: &StageParams,
    grid: &[f64],
    o: &SolverOptions,
) -> Result<SweepTable> {
    let sc = Scenario {
        table,
        params: p,
        mode: SweepMode::Ffr,
        fixed_hz: f_inj,
        kind: SolverKind::Extended,
        options: *o,
    };
    sweep(&sc, epsilons, grid)
}

/// Injection frequency swept at fixed free-running frequency.
pub fn sweep_finj(
    table: &CalibrationTable,
    f_fr: f64,
    epsilons: &[f64],
    p: &StageParams,
    grid: &[f64],
    o: &SolverOptions,
) -> Result<SweepTable> {
    let sc = Scenario {
        table,
        params: p,
        mode: SweepMode::Finj,
        fixed_hz: f_fr,
        kind: SolverKind::Extended,
        options: *o,
    };
    sweep(&sc, epsilons, grid)
}

/// Row of a sweep CSV as read back; `None` fields belong to unlocked rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep_var_hz: f64,
    pub epsilon: f64,
    pub locked: bool,
    pub phi0_deg: Option<f64>,
    pub psi_deg: Option<f64>,
    pub theta_vi_deg: Option<f64>,
    pub i_t_a: Option<f64>,
    pub i_osc_a: Option<f64>,
    pub v_osc_v: Option<f64>,
    pub residual: Option<f64>,
    pub source: Option<String>,
}

impl SweepRecord {
    pub fn fields(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        let mut f = vec![
            format!("{:e}", self.sweep_var_hz),
            format!("{}", self.epsilon),
            if self.locked { "1".into() } else { "0".into() },
            opt(self.phi0_deg),
            opt(self.psi_deg),
            opt(self.theta_vi_deg),
            opt(self.i_t_a),
            opt(self.i_osc_a),
            opt(self.v_osc_v),
            opt(self.residual),
        ];
        if let Some(s) = &self.source {
            f.push(s.clone());
        }
        f
    }
}

impl From<&SweepRow> for SweepRecord {
    fn from(r: &SweepRow) -> Self {
        let s = r.outcome.solution();
        SweepRecord {
            sweep_var_hz: r.sweep_var_hz,
            epsilon: r.epsilon,
            locked: s.is_some(),
            phi0_deg: s.map(|s| s.phi_0),
            psi_deg: s.map(|s| s.psi),
            theta_vi_deg: s.map(|s| s.theta_vi),
            i_t_a: s.map(|s| s.i_t_mag),
            i_osc_a: s.map(|s| s.i_osc_mag),
            v_osc_v: s.map(|s| s.v_osc_mag),
            residual: s.map(|s| s.residual_norm),
            source: None,
        }
    }
}

impl SweepTable {
    pub fn records(&self) -> Vec<SweepRecord> {
        self.rows.iter().map(SweepRecord::from).collect()
    }
}

/// Write records; a `source` column is added when any record carries one.
pub fn write_sweep_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let with_source = records.iter().any(|r| r.source.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = SWEEP_HEADER.to_vec();
    if with_source {
        header.push("source");
    }
    w.write_record(&header)?;
    for r in records {
        let mut f = r.fields();
        if with_source && r.source.is_none() {
            f.push("solver".into());
        }
        w.write_record(&f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < SWEEP_HEADER.len() || cols[..SWEEP_HEADER.len()] != SWEEP_HEADER {
        return Err(Error::Format(format!("unexpected sweep header {cols:?}")));
    }
    let has_source = cols.get(SWEEP_HEADER.len()) == Some(&"source");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|e| Error::Format(format!("column {}: {e}", SWEEP_HEADER[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].trim().is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let locked = match rec[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Format(format!("locked must be 0 or 1, got '{other}'"))),
        };
        out.push(SweepRecord {
            sweep_var_hz: num(0)?,
            epsilon: num(1)?,
            locked,
            phi0_deg: opt(3)?,
            psi_deg: opt(4)?,
            theta_vi_deg: opt(5)?,
            i_t_a: opt(6)?,
            i_osc_a: opt(7)?,
            v_osc_v: opt(8)?,
            residual: opt(9)?,
            source: has_source.then(|| rec[SWEEP_HEADER.len()].to_string()),
        });
    }
    Ok(out)
}
