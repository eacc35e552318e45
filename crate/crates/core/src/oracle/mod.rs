//! Time-domain behavioral oracle: ring simulation, measurement, calibration
//! and locked sweeps used as ground truth for the phasor solver.

mod measure;
mod sim;

pub use measure::{
    check_sustained, detect_lock, extract_fundamental, free_running_frequency, measure_operating_point, LockCriteria,
    LockReport, MeasuredPoint, StagePhasors, MIN_PERIODS,
};
pub use sim::{
    complement_of, driver_of, initial_state, kcl_residual, ring_offsets_deg, simulate, Branch, Drive, Limiter,
    LimiterKind, OracleConfig, WaveRecord,
};

use crate::adler::{LockingRange, SweepMode};
use crate::error::{domain, Error, Result};
use crate::stage::{
    fit_linear_laws, CalibrationSample, CalibrationTable, FitResiduals, FreeRunningPoint, KAngleMode, LinearLaws,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Describing function of tanh: fundamental of tanh(x·cos θ) per unit drive.
fn tanh_describing(x: f64) -> f64 {
    let n = 2000;
    let h = PI / n as f64;
    let f = |t: f64| (x * t.cos()).tanh() * t.cos();
    let mut s = f(0.0) + f(PI);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 / PI * s * h / 3.0
}

/// Circuit targets from which a ring configuration is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub n_stages: usize,
    /// Frequency at which the output conductance gives the target angle.
    pub f_design: f64,
    pub c_node: f64,
    /// Target current-to-voltage angle at `f_design`, degrees.
    pub theta_iv_deg: f64,
    /// Target node amplitude.
    pub amplitude: f64,
    /// Main-branch drive at the target amplitude, g·A/I_sat.
    pub main_drive: f64,
    /// Limiter conductance relative to the output conductance.
    pub limiter_ratio: f64,
    /// Cross-coupled drive at the target amplitude.
    pub cc_drive: f64,
    pub limiter_kind: LimiterKind,
    pub limiter_order: u32,
    /// Coupling high-pass time constant in design periods.
    pub hp_periods: f64,
    pub samples_per_period: f64,
    pub warmup_periods: f64,
    pub settle_periods: f64,
    pub measure_periods: f64,
}

impl Design {
    pub fn config(&self) -> Result<OracleConfig> {
        if self.limiter_order < 1 {
            return domain("limiter order must be >= 1");
        }
        let wc = 2.0 * PI * self.f_design * self.c_node;
        let g_out = wc / self.theta_iv_deg.to_radians().tan();
        let i_main = wc * self.amplitude / tanh_describing(self.main_drive);
        let g_main = self.main_drive * i_main / self.amplitude;
        let p = self.limiter_order;
        // fundamental gain of the limiter nonlinearity at v = v_ref
        let kk = match self.limiter_kind {
            LimiterKind::Envelope => 1.0,
            LimiterKind::Rail => binomial(p, (p - 1) / 2) / 2f64.powi(p as i32 - 1),
        };
        let g_lim = self.limiter_ratio * g_out / (p.max(2) - 1) as f64 / kk;
        let g_cc = g_out + kk * g_lim;
        let i_cc = g_cc * self.amplitude / self.cc_drive;
        let period = 1.0 / self.f_design;
        let cfg = OracleConfig {
            n_stages: self.n_stages,
            c_node: self.c_node,
            main: Branch { g: g_main, i_sat: i_main },
            cc: Branch { g: g_cc, i_sat: i_cc },
            g_out,
            limiter: Limiter {
                kind: self.limiter_kind,
                g: g_lim,
                v_ref: self.amplitude,
                order: p,
            },
            g_hp: self.c_node / (self.hp_periods * period),
            injection: None,
            dt: period / self.samples_per_period,
            t_warmup: self.warmup_periods * period,
            t_settle: self.settle_periods * period,
            t_measure: self.measure_periods * period,
            seed: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// The tuned two-stage ring used by the reference configuration.
pub fn reference_design() -> Design {
    Design {
        n_stages: 2,
        f_design: 7e9,
        c_node: 100e-15,
        theta_iv_deg: 88.5,
        amplitude: 0.4,
        main_drive: 2.5,
        limiter_ratio: 47.0,
        cc_drive: 0.70,
        limiter_kind: LimiterKind::Envelope,
        limiter_order: 2,
        hp_periods: 20.0,
        samples_per_period: 512.0,
        warmup_periods: 150.0,
        settle_periods: 500.0,
        measure_periods: 128.0,
    }
}

/// Simulate and measure in one step.
pub fn run_point(cfg: &OracleConfig, crit: &LockCriteria) -> Result<MeasuredPoint> {
    let rec = simulate(cfg)?;
    measure_operating_point(&rec, cfg, crit)
}

/// Free-running baseline of a configuration (injection removed).
pub fn free_running_point(cfg: &OracleConfig) -> Result<(FreeRunningPoint, MeasuredPoint)> {
    let m = run_point(&cfg.free_running(), &LockCriteria::default())?;
    let p = FreeRunningPoint {
        f_fr: m.f,
        v_osc_fr: m.v_osc(),
        i_osc_fr: m.i_osc(),
        theta_vi_fr: m.theta_vi(),
        theta_iv_fr: m.theta_iv(),
    };
    Ok((p, m))
}

fn sample_of(m: &MeasuredPoint, c: f64) -> CalibrationSample {
    CalibrationSample {
        v_in_amp: m.v_in(),
        theta_vi: m.theta_vi(),
        i_osc_amp: m.i_osc(),
        f: m.f,
        c,
    }
}

/// Injection probe used to excite amplitude variation during calibration:
/// strength relative to I_osc_fr and injection frequency relative to f_fr,
/// both at the template capacitance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub epsilon: f64,
    pub ratio: f64,
}

pub fn default_probes() -> Vec<Probe> {
    let mut probes: Vec<Probe> = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35]
        .iter()
        .map(|&epsilon| Probe { epsilon, ratio: 1.0 })
        .collect();
    for ratio in [0.80, 0.85, 0.90, 0.95, 1.05, 1.10, 1.15, 1.20, 1.25] {
        probes.push(Probe { epsilon: 0.2, ratio });
    }
    for ratio in [1.30, 1.35] {
        probes.push(Probe { epsilon: 0.3, ratio });
    }
    probes
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub table: CalibrationTable,
    pub laws: LinearLaws,
    /// Free-running point at the template capacitance.
    pub reference: FreeRunningPoint,
    pub reference_c: f64,
    pub samples: Vec<CalibrationSample>,
    /// Free-running measurements across the capacitance sweep, in grid order.
    pub sweep: Vec<(f64, MeasuredPoint)>,
    /// Probes that did not lock and were skipped.
    pub skipped_probes: Vec<Probe>,
}

/// Free-running capacitance sweep plus locked injection probes, fitted to
/// the linear stage laws.
pub fn calibrate(template: &OracleConfig, c_grid: &[f64], probes: &[Probe], mode: KAngleMode) -> Result<Calibration> {
    if c_grid.len() < 3 {
        return domain(format!("capacitance grid needs >= 3 points, got {}", c_grid.len()));
    }
    let crit = LockCriteria::default();
    let sweep: Vec<(f64, MeasuredPoint)> = c_grid
        .par_iter()
        .map(|&c| {
            free_running_point(&template.time_scaled(c))
                .map(|(_, m)| (c, m))
                .map_err(|e| match e {
                    Error::NoOscillation(msg) => Error::NoOscillation(format!("at C = {c:e} F: {msg}")),
                    other => other,
                })
        })
        .collect::<Result<_>>()?;
    let (reference, _) = free_running_point(template)?;
    let probed: Vec<(Probe, Result<MeasuredPoint>)> = probes
        .par_iter()
        .map(|p| {
            let cfg = template.with_injection(p.epsilon * reference.i_osc_fr, p.ratio * reference.f_fr);
            (*p, run_point(&cfg, &crit))
        })
        .collect();
    let mut samples: Vec<CalibrationSample> = sweep.iter().map(|(c, m)| sample_of(m, *c)).collect();
    let mut skipped = Vec::new();
    for (p, r) in probed {
        match r {
            Ok(m) => samples.push(sample_of(&m, template.c_node)),
            Err(Error::Refused(_)) => skipped.push(p),
            Err(e) => return Err(e),
        }
    }
    let laws = fit_linear_laws(&samples)?;
    let theta_iv = sweep.iter().map(|(_, m)| m.theta_iv()).sum::<f64>() / sweep.len() as f64;
    let params = laws.into_params(theta_iv, template.c_node, template.n_stages, mode)?;
    let points = sweep
        .iter()
        .map(|(_, m)| FreeRunningPoint {
            f_fr: m.f,
            v_osc_fr: m.v_osc(),
            i_osc_fr: m.i_osc(),
            theta_vi_fr: m.theta_vi(),
            theta_iv_fr: m.theta_iv(),
        })
        .collect();
    let table = CalibrationTable::new(points, params, FitResiduals::from(&laws))?;
    Ok(Calibration {
        table,
        laws,
        reference,
        reference_c: template.c_node,
        samples,
        sweep,
        skipped_probes: skipped,
    })
}

/// Free-running band swept by the reference calibration, hertz.
pub const REFERENCE_BAND_HZ: (f64, f64) = (4.0e9, 11.0e9);

/// Calibration over `n` capacitances whose free-running frequencies span
/// `f_lo..f_hi`.
pub fn calibrate_band(
    template: &OracleConfig,
    f_lo: f64,
    f_hi: f64,
    n: usize,
    probes: &[Probe],
    mode: KAngleMode,
) -> Result<Calibration> {
    let (reference, _) = free_running_point(template)?;
    let grid = capacitance_grid(template.c_node, reference.f_fr, f_lo, f_hi, n);
    calibrate(template, &grid, probes, mode)
}

/// Evenly spaced capacitances giving free-running frequencies from `f_lo`
/// to `f_hi`, using the template's measured frequency.
pub fn capacitance_grid(c_ref: f64, f_ref: f64, f_lo: f64, f_hi: f64, n: usize) -> Vec<f64> {
    let (c_lo, c_hi) = (c_ref * f_ref / f_hi, c_ref * f_ref / f_lo);
    (0..n)
        .map(|i| c_lo + (c_hi - c_lo) * i as f64 / (n.max(2) - 1) as f64)
        .collect()
}

/// Oracle counterpart of a solver sweep: the free-running frequency is set
/// through the node capacitance, the strength is relative to I_osc_fr.
#[derive(Debug, Clone)]
pub struct OracleScenario<'a> {
    pub template: &'a OracleConfig,
    /// Free-running point of the template.
    pub reference: FreeRunningPoint,
    pub mode: SweepMode,
    pub fixed_hz: f64,
    pub criteria: LockCriteria,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutcome {
    Locked(MeasuredPoint),
    Unlocked(LockReport),
}

impl OracleOutcome {
    pub fn is_locked(&self) -> bool {
        matches!(self, OracleOutcome::Locked(_))
    }

    pub fn point(&self) -> Option<&MeasuredPoint> {
        match self {
            OracleOutcome::Locked(m) => Some(m),
            OracleOutcome::Unlocked(_) => None,
        }
    }
}

impl<'a> OracleScenario<'a> {
    /// Default lock criteria plus a quench guard at half the free-running
    /// amplitude.
    pub fn new(template: &'a OracleConfig, reference: FreeRunningPoint, mode: SweepMode, fixed_hz: f64) -> Self {
        OracleScenario {
            template,
            reference,
            mode,
            fixed_hz,
            criteria: LockCriteria {
                min_amplitude: 0.5 * reference.v_osc_fr,
                ..LockCriteria::default()
            },
        }
    }

    pub fn config_at(&self, swept: f64, epsilon: f64) -> OracleConfig {
        let (f_fr, f_inj) = match self.mode {
            SweepMode::Ffr => (swept, self.fixed_hz),
            SweepMode::Finj => (self.fixed_hz, swept),
        };
        let c = self.template.c_node * self.reference.f_fr / f_fr;
        self.template
            .time_scaled(c)
            .with_injection(epsilon * self.reference.i_osc_fr, f_inj)
    }

    pub fn run(&self, swept: f64, epsilon: f64) -> Result<OracleOutcome> {
        let cfg = self.config_at(swept, epsilon);
        let rec = simulate(&cfg)?;
        let f_inj = cfg.injection.as_ref().map_or(0.0, |d| d.f);
        let lock = detect_lock(&rec, f_inj, &self.criteria)?;
        if !lock.locked {
            return Ok(OracleOutcome::Unlocked(lock));
        }
        measure_operating_point(&rec, &cfg, &self.criteria).map(OracleOutcome::Locked)
    }

    pub fn sweep(&self, epsilon: f64, grid: &[f64]) -> Result<Vec<(f64, OracleOutcome)>> {
        grid.par_iter()
            .map(|&x| self.run(x, epsilon).map(|o| (x, o)))
            .collect()
    }

    /// Contiguous locked interval around the trivial point: outward steps,
    /// then bisection of each edge to `tol_hz`.
    pub fn locking_range(&self, epsilon: f64, tol_hz: f64) -> Result<LockingRange> {
        let f_ref = self.fixed_hz;
        if !self.run(f_ref, epsilon)?.is_locked() {
            return Err(Error::ModelInconsistency(format!(
                "oracle is not locked at the trivial point {f_ref} Hz"
            )));
        }
        let theta_iv = self.reference.theta_iv_fr.abs().max(1.0);
        let step = f_ref * epsilon.asin().to_degrees() / theta_iv / 4.0;
        let edges: Vec<f64> = [-1.0f64, 1.0]
            .par_iter()
            .map(|&dir| -> Result<f64> {
                let mut inside = f_ref;
                let mut outside = f_ref + dir * step;
                while self.run(outside, epsilon)?.is_locked() {
                    inside = outside;
                    outside += dir * step;
                    if (outside - f_ref).abs() > 0.5 * f_ref {
                        return domain("oracle lock extends beyond half the reference frequency");
                    }
                }
                while (outside - inside).abs() > tol_hz {
                    let mid = 0.5 * (inside + outside);
                    if self.run(mid, epsilon)?.is_locked() {
                        inside = mid;
                    } else {
                        outside = mid;
                    }
                }
                Ok(0.5 * (inside + outside))
            })
            .collect::<Result<_>>()?;
        Ok(LockingRange::new(edges[0], edges[1], f_ref, epsilon, false))
    }
}
