//! Phasor extraction, lock detection and operating-point measurement on
//! recorded waveforms.

use super::sim::{driver_of, OracleConfig, WaveRecord};
use crate::error::{Error, Result};
use crate::phasor::{angle_between, wrap_deg, Phasor};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const MIN_PERIODS: usize = 16;

/// Single-bin projection of `x` onto frequency `f` over the largest whole
/// number of periods in the record. Angles are referred to cos(2π·f·t) with
/// t = t0 + n·dt.
pub fn extract_fundamental(x: &[f64], t0: f64, dt: f64, f: f64) -> Result<Phasor> {
    let periods = x.len() as f64 * dt * f;
    if !(periods >= MIN_PERIODS as f64) {
        return Err(Error::InsufficientWindow {
            periods,
            needed: MIN_PERIODS,
        });
    }
    let m = ((periods.floor() / (f * dt)).round() as usize).min(x.len());
    Ok(Phasor::from_complex(project(&x[..m], t0, dt, f)))
}

fn project(x: &[f64], t0: f64, dt: f64, f: f64) -> Complex64 {
    let w = 2.0 * PI * f;
    let rot = Complex64::from_polar(1.0, -w * dt);
    let mut e = Complex64::from_polar(1.0, -w * t0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        if n % 1024 == 0 {
            e = Complex64::from_polar(1.0, -w * (t0 + n as f64 * dt));
        }
        acc += v * e;
        e *= rot;
    }
    acc * (2.0 / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockCriteria {
    pub block_periods: usize,
    /// Largest tolerated block-to-block drift, degrees per period.
    pub max_drift_deg_per_period: f64,
    /// Largest tolerated first-to-last drift over the window, degrees.
    pub max_total_drift_deg: f64,
    /// Fundamental amplitude of the first node below which the ring counts
    /// as quenched rather than locked, volts. Zero disables the check.
    pub min_amplitude: f64,
}

impl Default for LockCriteria {
    fn default() -> Self {
        LockCriteria {
            block_periods: 8,
            max_drift_deg_per_period: 0.5,
            max_total_drift_deg: 2.0,
            min_amplitude: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockReport {
    pub locked: bool,
    pub max_drift_deg_per_period: f64,
    pub total_drift_deg: f64,
    /// Fundamental amplitude of the first node at the injection frequency.
    pub amplitude: f64,
}

/// Phase of the first node against the injection tone, block by block.
pub fn detect_lock(rec: &WaveRecord, f_inj: f64, crit: &LockCriteria) -> Result<LockReport> {
    let x = &rec.v[0];
    let spb = (crit.block_periods as f64 / (f_inj * rec.dt)).round() as usize;
    let blocks = x.len().checked_div(spb).unwrap_or(0);
    if blocks < 2 {
        return Err(Error::InsufficientWindow {
            periods: x.len() as f64 * rec.dt * f_inj,
            needed: 2 * crit.block_periods,
        });
    }
    let mut phases = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let seg = &x[b * spb..(b + 1) * spb];
        let z = project(seg, rec.time(b * spb), rec.dt, f_inj);
        phases.push(z.arg().to_degrees());
    }
    let mut unwrapped = vec![phases[0]];
    let mut max_step: f64 = 0.0;
    for w in phases.windows(2) {
        let d = wrap_deg(w[1] - w[0]);
        max_step = max_step.max(d.abs());
        let last = *unwrapped.last().unwrap();
        unwrapped.push(last + d);
    }
    let per_period = max_step / crit.block_periods as f64;
    let total = (unwrapped[blocks - 1] - unwrapped[0]).abs();
    let amplitude = project(&x[..blocks * spb], rec.t0, rec.dt, f_inj).norm();
    Ok(LockReport {
        locked: per_period < crit.max_drift_deg_per_period
            && total < crit.max_total_drift_deg
            && amplitude >= crit.min_amplitude,
        max_drift_deg_per_period: per_period,
        total_drift_deg: total,
        amplitude,
    })
}

/// Oscillation frequency from interpolated rising zero crossings of the
/// first node, with the standard error of the mean period propagated.
pub fn free_running_frequency(rec: &WaveRecord) -> Result<(f64, f64)> {
    check_sustained(rec)?;
    let x = &rec.v[0];
    let mut crossings = Vec::new();
    for n in 1..x.len() {
        if x[n - 1] < 0.0 && x[n] >= 0.0 {
            let frac = -x[n - 1] / (x[n] - x[n - 1]);
            crossings.push(rec.time(n - 1) + frac * rec.dt);
        }
    }
    if crossings.len() < MIN_PERIODS + 1 {
        return Err(Error::NoOscillation(format!(
            "only {} rising crossings in the record",
            crossings.len()
        )));
    }
    let periods: Vec<f64> = crossings.windows(2).map(|w| w[1] - w[0]).collect();
    let n = periods.len() as f64;
    let mean = periods.iter().sum::<f64>() / n;
    let var = periods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let se_period = (var / n).sqrt();
    let f = 1.0 / mean;
    Ok((f, f * se_period / mean))
}

/// Rejects records whose first-node peak is negligible or whose last fifth
/// departs from the first fifth by more than 10 %.
pub fn check_sustained(rec: &WaveRecord) -> Result<()> {
    let x = &rec.v[0];
    let fifth = x.len() / 5;
    if fifth == 0 {
        return Err(Error::NoOscillation("empty record".into()));
    }
    let peak = |s: &[f64]| s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let head = peak(&x[..fifth]);
    let tail = peak(&x[x.len() - fifth..]);
    if tail < 1e-4 {
        return Err(Error::NoOscillation(format!("peak amplitude {tail:.3e} V")));
    }
    if (tail - head).abs() > 0.1 * head {
        return Err(Error::NoOscillation(format!(
            "amplitude moves from {head:.4} V to {tail:.4} V inside the window"
        )));
    }
    Ok(())
}

/// Phasors of one stage, measured at its positive node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePhasors {
    pub v_in: Phasor,
    pub v_out: Phasor,
    pub i_gm: Phasor,
    pub i_cs: Phasor,
    pub i_osc: Phasor,
    pub i_t: Phasor,
    pub i_inj: Phasor,
    pub theta_vi: f64,
    pub theta_iv: f64,
    /// Angle of the load current measured from the oscillator current.
    pub psi: f64,
    /// Angle of the injected current measured from the oscillator current.
    pub phi_0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredPoint {
    pub f: f64,
    pub f_stderr: f64,
    pub lock: Option<LockReport>,
    pub stages: Vec<StagePhasors>,
    /// Third-harmonic to fundamental ratio on the first node.
    pub h3_ratio: f64,
}

impl MeasuredPoint {
    fn mean(&self, g: impl Fn(&StagePhasors) -> f64) -> f64 {
        self.stages.iter().map(g).sum::<f64>() / self.stages.len() as f64
    }

    pub fn v_osc(&self) -> f64 {
        self.mean(|s| s.v_out.magnitude())
    }

    pub fn v_in(&self) -> f64 {
        self.mean(|s| s.v_in.magnitude())
    }

    pub fn i_osc(&self) -> f64 {
        self.mean(|s| s.i_osc.magnitude())
    }

    pub fn i_t(&self) -> f64 {
        self.mean(|s| s.i_t.magnitude())
    }

    pub fn theta_vi(&self) -> f64 {
        self.mean(|s| s.theta_vi)
    }

    pub fn theta_iv(&self) -> f64 {
        self.mean(|s| s.theta_iv)
    }

    pub fn psi(&self) -> f64 {
        self.mean(|s| s.psi)
    }

    pub fn phi_0(&self) -> Option<f64> {
        if self.stages.iter().all(|s| s.phi_0.is_some()) {
            Some(self.mean(|s| s.phi_0.unwrap()))
        } else {
            None
        }
    }

    /// Per stage, θ_VI + ψ − θ_IV wrapped; equals −180/N on a consistent ring.
    pub fn ring_phase_sums(&self) -> Vec<f64> {
        self.stages
            .iter()
            .map(|s| wrap_deg(s.theta_vi + s.psi - s.theta_iv))
            .collect()
    }
}

/// Measure every stage at the injection frequency (refusing unlocked
/// records) or, without injection, at the free-running frequency.
pub fn measure_operating_point(rec: &WaveRecord, cfg: &OracleConfig, crit: &LockCriteria) -> Result<MeasuredPoint> {
    let (f, f_stderr, lock) = match &cfg.injection {
        Some(d) if d.amplitude > 0.0 => {
            let lock = detect_lock(rec, d.f, crit)?;
            if !lock.locked {
                return Err(Error::Refused(format!(
                    "record is not locked to {:.6e} Hz (drift {:.3} deg/period, total {:.3} deg, amplitude {:.4} V)",
                    d.f, lock.max_drift_deg_per_period, lock.total_drift_deg, lock.amplitude
                )));
            }
            (d.f, 0.0, Some(lock))
        }
        _ => {
            let (f, se) = free_running_frequency(rec)?;
            (f, se, None)
        }
    };
    let fund = |x: &[f64]| extract_fundamental(x, rec.t0, rec.dt, f);
    let mut stages = Vec::with_capacity(cfg.n_stages);
    for s in 0..cfg.n_stages {
        let k = 2 * s;
        // Input of opposite sense: the complement of the driving node.
        let v_in = fund(&rec.v[driver_of(k, cfg.n_stages) ^ 1])?;
        let v_out = fund(&rec.v[k])?;
        let i_gm = fund(&rec.i_main[k])?;
        let i_cs = fund(&rec.i_cc[k])?;
        let i_osc = i_gm + i_cs;
        let i_t = fund(&rec.i_total[k])?;
        let i_inj = fund(&rec.i_inj[k])?;
        let phi_0 = if i_inj.is_zero() {
            None
        } else {
            Some(angle_between(i_inj, i_osc)?)
        };
        stages.push(StagePhasors {
            v_in,
            v_out,
            i_gm,
            i_cs,
            i_osc,
            i_t,
            i_inj,
            theta_vi: angle_between(i_osc, v_in)?,
            theta_iv: angle_between(i_t, v_out)?,
            psi: angle_between(i_t, i_osc)?,
            phi_0,
        });
    }
    let h1 = fund(&rec.v[0])?.magnitude();
    let h3 = extract_fundamental(&rec.v[0], rec.t0, rec.dt, 3.0 * f)?.magnitude();
    Ok(MeasuredPoint {
        f,
        f_stderr,
        lock,
        stages,
        h3_ratio: h3 / h1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tone(n: usize, dt: f64, f: f64, a: f64, deg: f64) -> Vec<f64> {
        (0..n)
            .map(|i| a * (2.0 * PI * f * i as f64 * dt + deg.to_radians()).cos())
            .collect()
    }

    #[test]
    fn extracts_known_tone() {
        let f = 5e9;
        let dt = 1.0 / (512.0 * f);
        let x = tone(512 * 40, dt, f, 0.3, 40.0);
        let p = extract_fundamental(&x, 0.0, dt, f).unwrap();
        assert_relative_eq!(p.magnitude(), 0.3, epsilon = 1e-9);
        assert_relative_eq!(p.angle(), 40.0, epsilon = 1e-7);
    }

    #[test]
    fn off_grid_samples_per_period() {
        let f = 6.3e9;
        let dt = 1.0 / (500.0 * 6.0e9);
        let x = tone(40_000, dt, f, 1.0, -120.0);
        let p = extract_fundamental(&x, 0.0, dt, f).unwrap();
        assert_relative_eq!(p.magnitude(), 1.0, epsilon = 2e-3);
        assert!((p.angle() + 120.0).abs() < 0.2);
    }

    #[test]
    fn ignores_harmonics() {
        let f = 5e9;
        let dt = 1.0 / (512.0 * f);
        let a = tone(512 * 32, dt, f, 1.0, 10.0);
        let b = tone(512 * 32, dt, 3.0 * f, 0.2, 77.0);
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let p = extract_fundamental(&x, 0.0, dt, f).unwrap();
        assert_relative_eq!(p.magnitude(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(p.angle(), 10.0, epsilon = 1e-7);
    }

    #[test]
    fn short_window_is_rejected() {
        let f = 5e9;
        let dt = 1.0 / (512.0 * f);
        let x = tone(512 * 15, dt, f, 1.0, 0.0);
        match extract_fundamental(&x, 0.0, dt, f) {
            Err(Error::InsufficientWindow { needed, .. }) => assert_eq!(needed, 16),
            other => panic!("expected insufficient window, got {other:?}"),
        }
    }

    fn record_of(v0: Vec<f64>, dt: f64) -> WaveRecord {
        let n = v0.len();
        let z = vec![vec![0.0; n]; 4];
        WaveRecord {
            t0: 0.0,
            dt,
            v: vec![v0, vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            i_main: z.clone(),
            i_cc: z.clone(),
            i_inj: z.clone(),
            i_total: z,
        }
    }

    #[test]
    fn lock_detection_tracks_drift() {
        let f = 5e9;
        let dt = 1.0 / (512.0 * f);
        let locked = record_of(tone(512 * 128, dt, f, 0.3, 20.0), dt);
        assert!(detect_lock(&locked, f, &LockCriteria::default()).unwrap().locked);
        // 0.1 % detuning slips 0.36 deg per period
        let slipping = record_of(tone(512 * 128, dt, f * 1.001, 0.3, 20.0), dt);
        let r = detect_lock(&slipping, f, &LockCriteria::default()).unwrap();
        assert!(!r.locked);
        assert!(r.total_drift_deg > 2.0);
        let quench = LockCriteria {
            min_amplitude: 0.5,
            ..LockCriteria::default()
        };
        let r = detect_lock(&locked, f, &quench).unwrap();
        assert!(!r.locked);
        assert!((r.amplitude - 0.3).abs() < 1e-9);
    }

    #[test]
    fn zero_crossing_frequency() {
        let f = 6.17e9;
        let dt = 1.0 / (512.0 * 6e9);
        let rec = record_of(tone(512 * 64, dt, f, 0.3, 33.0), dt);
        let (fm, se) = free_running_frequency(&rec).unwrap();
        assert!((fm - f).abs() / f < 1e-7);
        assert!(se < 1e3);
    }

    #[test]
    fn decayed_record_is_not_oscillating() {
        let f = 6e9;
        let dt = 1.0 / (512.0 * f);
        let x: Vec<f64> = tone(512 * 64, dt, f, 0.3, 0.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v * (-(i as f64) / 4000.0).exp())
            .collect();
        assert!(matches!(free_running_frequency(&record_of(x, dt)), Err(Error::NoOscillation(_))));
        let flat = record_of(vec![0.0; 512 * 64], dt);
        assert!(matches!(free_running_frequency(&flat), Err(Error::NoOscillation(_))));
    }
}
