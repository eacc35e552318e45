//! Single-stage model: the linear amplitude laws, the charging constant and
//! the calibrated free-running baseline.

use crate::error::{domain, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

/// Which conversion angle enters the frequency constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KAngleMode {
    /// Current-to-voltage angle, consistent with the charging-delay derivation.
    #[default]
    ThetaIv,
    /// Transconductance angle, as in the printed closure.
    ThetaVi,
}

impl std::str::FromStr for KAngleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta_iv" => Ok(KAngleMode::ThetaIv),
            "theta_vi" => Ok(KAngleMode::ThetaVi),
            other => domain(format!("unknown k-angle mode '{other}' (theta_iv | theta_vi)")),
        }
    }
}

impl std::fmt::Display for KAngleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KAngleMode::ThetaIv => "theta_iv",
            KAngleMode::ThetaVi => "theta_vi",
        })
    }
}

/// Calibrated stage model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    /// Slope of θ_VI against input amplitude, degrees per volt.
    pub a_vi: f64,
    /// Intercept of the θ_VI law, degrees.
    pub theta_vi_0: f64,
    /// Slope of |I_osc| against input amplitude, amperes per volt.
    pub g_m: f64,
    /// Intercept of the current law, amperes.
    pub i_osc_0: f64,
    /// Current-to-voltage lag, degrees, stored positive.
    pub theta_iv: f64,
    /// Per-node load capacitance, farads.
    pub c_load: f64,
    pub n_stages: usize,
    pub k_angle_mode: KAngleMode,
}

/// A law evaluation that may have been clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

impl StageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_load > 0.0) {
            return domain(format!("C_load must be > 0, got {}", self.c_load));
        }
        if self.n_stages < 2 || !self.n_stages.is_multiple_of(2) {
            return domain(format!("N_stages must be even and >= 2, got {}", self.n_stages));
        }
        if !(self.g_m >= 0.0) {
            return domain(format!("G_m must be >= 0, got {}", self.g_m));
        }
        if !(self.theta_iv > 0.0 && self.theta_iv < 90.0) {
            return domain(format!("theta_IV must lie in (0, 90) degrees, got {}", self.theta_iv));
        }
        Ok(())
    }

    /// Per-stage phase target 180/N in degrees.
    pub fn stage_phase(&self) -> f64 {
        180.0 / self.n_stages as f64
    }

    pub fn theta_vi_of_amplitude(&self, v_in: f64) -> Result<f64> {
        if !(v_in >= 0.0) {
            return domain(format!("input amplitude must be >= 0, got {v_in}"));
        }
        Ok(self.a_vi * v_in + self.theta_vi_0)
    }

    pub fn i_osc_of_amplitude(&self, v_in: f64) -> Result<Clamped> {
        if !(v_in >= 0.0) {
            return domain(format!("input amplitude must be >= 0, got {v_in}"));
        }
        let raw = self.g_m * v_in + self.i_osc_0;
        Ok(if raw < 0.0 {
            Clamped { value: 0.0, clamped: true }
        } else {
            Clamped { value: raw, clamped: false }
        })
    }
}

/// k = I_t·θ_IV / (2π·f·V_osc·C) with θ_IV in radians.
pub fn k_coefficient(i_t: f64, theta_iv_deg: f64, f: f64, v_osc: f64, c: f64) -> Result<f64> {
    for (name, v) in [("i_t", i_t), ("theta_iv", theta_iv_deg), ("f", f), ("v_osc", v_osc), ("c", c)] {
        if !(v > 0.0) || !v.is_finite() {
            return domain(format!("k coefficient needs {name} > 0, got {v}"));
        }
    }
    Ok(i_t * theta_iv_deg.to_radians() / (2.0 * PI * f * v_osc * c))
}

/// Free-running operating point at one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeRunningPoint {
    pub f_fr: f64,
    pub v_osc_fr: f64,
    pub i_osc_fr: f64,
    pub theta_vi_fr: f64,
    pub theta_iv_fr: f64,
}

impl FreeRunningPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_fr > 0.0 && self.v_osc_fr > 0.0 && self.i_osc_fr > 0.0) {
            return domain(format!("free-running magnitudes must be > 0: {self:?}"));
        }
        Ok(())
    }
}

/// One observation of a stage: input amplitude against the output current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub v_in_amp: f64,
    pub theta_vi: f64,
    pub i_osc_amp: f64,
    pub f: f64,
    pub c: f64,
}

/// Least-squares line with its quality figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    pub slope: f64,
    pub intercept: f64,
    pub rms: f64,
    pub r_squared: f64,
}

impl LawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Fitted angle and current laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearLaws {
    pub theta: LawFit,
    pub current: LawFit,
}

impl LinearLaws {
    /// Stage parameters from the fit; a falling current law is rejected.
    pub fn into_params(self, theta_iv: f64, c_load: f64, n_stages: usize, mode: KAngleMode) -> Result<StageParams> {
        if self.current.slope < 0.0 {
            return Err(Error::Fit(format!("current law slope {} S is negative", self.current.slope)));
        }
        let p = StageParams {
            a_vi: self.theta.slope,
            theta_vi_0: self.theta.intercept,
            g_m: self.current.slope,
            i_osc_0: self.current.intercept,
            theta_iv,
            c_load,
            n_stages,
            k_angle_mode: mode,
        };
        p.validate()?;
        Ok(p)
    }
}

fn ols(x: &[f64], y: &[f64]) -> LawFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - slope * xi - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LawFit {
        slope,
        intercept,
        rms: (ss_res / n).sqrt(),
        r_squared,
    }
}

/// Ordinary least squares for both laws against the input amplitude.
pub fn fit_linear_laws(samples: &[CalibrationSample]) -> Result<LinearLaws> {
    if samples.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 samples, got {}", samples.len())));
    }
    let v: Vec<f64> = samples.iter().map(|s| s.v_in_amp).collect();
    if samples.iter().any(|s| !(s.v_in_amp > 0.0)) {
        return Err(Error::Fit("input amplitudes must be > 0".into()));
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi - lo <= 1e-12 * hi {
        return Err(Error::Fit("rank-deficient design: all input amplitudes equal".into()));
    }
    let theta: Vec<f64> = samples.iter().map(|s| s.theta_vi).collect();
    let current: Vec<f64> = samples.iter().map(|s| s.i_osc_amp).collect();
    Ok(LinearLaws {
        theta: ols(&v, &theta),
        current: ols(&v, &current),
    })
}

/// Per-law RMS residuals of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResiduals {
    pub theta_vi_rms_deg: f64,
    pub i_osc_rms_a: f64,
    pub theta_vi_r2: f64,
    pub i_osc_r2: f64,
}

impl From<&LinearLaws> for FitResiduals {
    fn from(l: &LinearLaws) -> Self {
        FitResiduals {
            theta_vi_rms_deg: l.theta.rms,
            i_osc_rms_a: l.current.rms,
            theta_vi_r2: l.theta.r_squared,
            i_osc_r2: l.current.r_squared,
        }
    }
}

/// Free-running baseline over frequency plus the fitted stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub samples: Vec<FreeRunningPoint>,
    pub params: StageParams,
    pub fit_residuals: FitResiduals,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    f_fr_hz: f64,
    v_osc_fr_v: f64,
    i_osc_fr_a: f64,
    theta_vi_fr_deg: f64,
    theta_iv_fr_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    params: StageParams,
    fit_residuals: FitResiduals,
}

impl CalibrationTable {
    /// Builds a table, sorting samples by frequency.
    pub fn new(mut samples: Vec<FreeRunningPoint>, params: StageParams, fit_residuals: FitResiduals) -> Result<Self> {
        samples.sort_by(|a, b| a.f_fr.total_cmp(&b.f_fr));
        let t = CalibrationTable {
            samples,
            params,
            fit_residuals,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 3 {
            return domain(format!("calibration table needs >= 3 samples, got {}", self.samples.len()));
        }
        for w in self.samples.windows(2) {
            if !(w[1].f_fr > w[0].f_fr) {
                return domain("calibration samples must be strictly increasing in f_fr");
            }
        }
        for s in &self.samples {
            s.validate()?;
        }
        self.params.validate()
    }

    pub fn f_range(&self) -> (f64, f64) {
        (self.samples[0].f_fr, self.samples[self.samples.len() - 1].f_fr)
    }

    pub fn contains(&self, f_fr: f64) -> bool {
        let (lo, hi) = self.f_range();
        f_fr >= lo && f_fr <= hi
    }

    /// Writes `<stem>.csv` and the `<stem>.toml` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for s in &self.samples {
            w.serialize(CsvRow {
                f_fr_hz: s.f_fr,
                v_osc_fr_v: s.v_osc_fr,
                i_osc_fr_a: s.i_osc_fr,
                theta_vi_fr_deg: s.theta_vi_fr,
                theta_iv_fr_deg: s.theta_iv_fr,
            })?;
        }
        w.flush()?;
        let side = Sidecar {
            params: self.params,
            fit_residuals: self.fit_residuals,
        };
        let text = toml::to_string(&side).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.toml")), text)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mut r = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
        let mut samples = Vec::new();
        for row in r.deserialize() {
            let row: CsvRow = row?;
            samples.push(FreeRunningPoint {
                f_fr: row.f_fr_hz,
                v_osc_fr: row.v_osc_fr_v,
                i_osc_fr: row.i_osc_fr_a,
                theta_vi_fr: row.theta_vi_fr_deg,
                theta_iv_fr: row.theta_iv_fr_deg,
            });
        }
        let text = fs::read_to_string(dir.join(format!("{stem}.toml")))?;
        let side: Sidecar = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let t = CalibrationTable {
            samples,
            params: side.params,
            fit_residuals: side.fit_residuals,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Piecewise-linear interpolation of the baseline; no extrapolation.
pub fn baseline_at(table: &CalibrationTable, f_fr: f64) -> Result<FreeRunningPoint> {
    let (lo, hi) = table.f_range();
    if !(f_fr >= lo && f_fr <= hi) {
        return Err(Error::OutOfRange {
            what: "f_fr",
            value: f_fr,
            lo,
            hi,
        });
    }
    let s = &table.samples;
    let j = s.partition_point(|p| p.f_fr <= f_fr);
    if j > 0 && s[j - 1].f_fr == f_fr {
        return Ok(s[j - 1]);
    }
    let (a, b) = (s[j - 1], s[j]);
    let t = (f_fr - a.f_fr) / (b.f_fr - a.f_fr);
    let mix = |x: f64, y: f64| x + t * (y - x);
    Ok(FreeRunningPoint {
        f_fr,
        v_osc_fr: mix(a.v_osc_fr, b.v_osc_fr),
        i_osc_fr: mix(a.i_osc_fr, b.i_osc_fr),
        theta_vi_fr: mix(a.theta_vi_fr, b.theta_vi_fr),
        theta_iv_fr: mix(a.theta_iv_fr, b.theta_iv_fr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(a_vi: f64, theta_vi_0: f64, g_m: f64, i_osc_0: f64) -> StageParams {
        StageParams {
            a_vi,
            theta_vi_0,
            g_m,
            i_osc_0,
            theta_iv: 85.0,
            c_load: 100e-15,
            n_stages: 2,
            k_angle_mode: KAngleMode::ThetaIv,
        }
    }

    fn table() -> CalibrationTable {
        let pts = [(6.0e9, 0.40, 1.0e-3, -5.0), (7.0e9, 0.42, 1.1e-3, -4.0), (8.5e9, 0.44, 1.3e-3, -3.0)];
        let samples = pts
            .iter()
            .map(|&(f, v, i, th)| FreeRunningPoint {
                f_fr: f,
                v_osc_fr: v,
                i_osc_fr: i,
                theta_vi_fr: th,
                theta_iv_fr: 85.0,
            })
            .collect();
        let res = FitResiduals {
            theta_vi_rms_deg: 0.0,
            i_osc_rms_a: 0.0,
            theta_vi_r2: 1.0,
            i_osc_r2: 1.0,
        };
        CalibrationTable::new(samples, params(0.0, -5.0, 0.0, 1e-3), res).unwrap()
    }

    #[test]
    fn angle_law_examples() {
        assert_eq!(params(0.0, -5.0, 0.0, 0.0).theta_vi_of_amplitude(0.3).unwrap(), -5.0);
        assert_relative_eq!(params(-10.0, -1.0, 0.0, 0.0).theta_vi_of_amplitude(0.4).unwrap(), -5.0, epsilon = 1e-12);
        assert!(params(0.0, 0.0, 0.0, 0.0).theta_vi_of_amplitude(-0.1).is_err());
    }

    #[test]
    fn current_law_examples() {
        assert_eq!(params(0.0, 0.0, 0.0, 0.7e-3).i_osc_of_amplitude(0.9).unwrap().value, 0.7e-3);
        let i = params(0.0, 0.0, 2e-3, 0.2e-3).i_osc_of_amplitude(0.4).unwrap();
        assert_relative_eq!(i.value, 1.0e-3, epsilon = 1e-15);
        assert!(!i.clamped);
        let neg = params(0.0, 0.0, 1e-3, -1e-3).i_osc_of_amplitude(0.5).unwrap();
        assert!(neg.clamped);
        assert_eq!(neg.value, 0.0);
    }

    #[test]
    fn k_coefficient_examples() {
        let k = k_coefficient(1e-3, 85.0, 7e9, 0.4, 100e-15).unwrap();
        let expect = 1e-3 * 85f64.to_radians() / (2.0 * PI * 7e9 * 0.4 * 1e-13);
        assert_relative_eq!(k, expect, max_relative = 1e-14);
        assert_relative_eq!(k, 0.8434, epsilon = 5e-4);
        let k2 = k_coefficient(2e-3, 85.0, 7e9, 0.4, 100e-15).unwrap();
        assert_relative_eq!(k2, 2.0 * k, max_relative = 1e-14);
        assert!(k_coefficient(0.0, 85.0, 7e9, 0.4, 1e-13).is_err());
        assert!(k_coefficient(1e-3, 85.0, 7e9, 0.4, -1e-13).is_err());
    }

    #[test]
    fn fit_recovers_exact_laws() {
        let samples: Vec<_> = (0..7)
            .map(|i| {
                let v = 0.30 + 0.025 * i as f64;
                CalibrationSample {
                    v_in_amp: v,
                    theta_vi: -10.0 * v - 1.0,
                    i_osc_amp: 2e-3 * v + 0.2e-3,
                    f: 7e9,
                    c: 1e-13,
                }
            })
            .collect();
        let l = fit_linear_laws(&samples).unwrap();
        assert_relative_eq!(l.theta.slope, -10.0, max_relative = 1e-9);
        assert_relative_eq!(l.theta.intercept, -1.0, max_relative = 1e-9);
        assert_relative_eq!(l.current.slope, 2e-3, max_relative = 1e-9);
        assert_relative_eq!(l.current.intercept, 0.2e-3, max_relative = 1e-9);
        assert!(l.theta.r_squared > 1.0 - 1e-12);
        assert!(fit_linear_laws(&samples[..2]).is_err());
        let flat: Vec<_> = samples.iter().map(|s| CalibrationSample { v_in_amp: 0.4, ..*s }).collect();
        assert!(fit_linear_laws(&flat).is_err());
    }

    #[test]
    fn baseline_interpolation() {
        let t = table();
        assert_eq!(baseline_at(&t, 7.0e9).unwrap(), t.samples[1]);
        assert_eq!(baseline_at(&t, 6.0e9).unwrap(), t.samples[0]);
        assert_eq!(baseline_at(&t, 8.5e9).unwrap(), t.samples[2]);
        let mid = baseline_at(&t, 6.5e9).unwrap();
        assert_relative_eq!(mid.v_osc_fr, 0.41, epsilon = 1e-15);
        assert_relative_eq!(mid.i_osc_fr, 1.05e-3, epsilon = 1e-15);
        assert_relative_eq!(mid.theta_vi_fr, -4.5, epsilon = 1e-12);
        assert!(matches!(baseline_at(&t, 5.0e9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn table_rejects_unsorted_or_short() {
        let mut t = table();
        t.samples.swap(0, 1);
        assert!(t.validate().is_err());
        let mut short = table();
        short.samples.truncate(2);
        assert!(short.validate().is_err());
    }

    #[test]
    fn table_round_trips_through_files() {
        let dir = std::env::temp_dir().join(format!("ilro-stage-{}", std::process::id()));
        let t = table();
        t.save(&dir, "calibration").unwrap();
        let back = CalibrationTable::load(&dir, "calibration").unwrap();
        assert_eq!(back, t);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn params_validation() {
        let mut p = params(0.0, -5.0, 0.0, 1e-3);
        assert!(p.validate().is_ok());
        p.n_stages = 3;
        assert!(p.validate().is_err());
        p.n_stages = 2;
        p.theta_iv = 95.0;
        assert!(p.validate().is_err());
        p.theta_iv = 85.0;
        p.g_m = -1.0;
        assert!(p.validate().is_err());
        assert_eq!("theta_vi".parse::<KAngleMode>().unwrap(), KAngleMode::ThetaVi);
        assert!("theta".parse::<KAngleMode>().is_err());
    }

    proptest! {
        #[test]
        fn laws_are_affine(a in -50.0f64..50.0, b in -10.0f64..10.0, g in 0.0f64..5e-3,
                           v1 in 0.0f64..1.0, v2 in 0.0f64..1.0, alpha in 0.0f64..1.0) {
            let p = params(a, b, g, 1e-3);
            let vm = alpha * v1 + (1.0 - alpha) * v2;
            let lhs = p.theta_vi_of_amplitude(vm).unwrap();
            let rhs = alpha * p.theta_vi_of_amplitude(v1).unwrap() + (1.0 - alpha) * p.theta_vi_of_amplitude(v2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            let il = p.i_osc_of_amplitude(vm).unwrap().value;
            let ir = alpha * p.i_osc_of_amplitude(v1).unwrap().value + (1.0 - alpha) * p.i_osc_of_amplitude(v2).unwrap().value;
            prop_assert!((il - ir).abs() <= 1e-15);
        }

        #[test]
        fn fit_round_trip(a in -50.0f64..50.0, b in -10.0f64..10.0, g in 1e-4f64..5e-3, i0 in 0.0f64..1e-3) {
            let samples: Vec<_> = (0..10).map(|i| {
                let v = 0.2 + 0.03 * i as f64;
                CalibrationSample { v_in_amp: v, theta_vi: a * v + b, i_osc_amp: g * v + i0, f: 7e9, c: 1e-13 }
            }).collect();
            let l = fit_linear_laws(&samples).unwrap();
            prop_assert!((l.theta.slope - a).abs() <= 1e-9 * a.abs().max(1.0));
            prop_assert!((l.theta.intercept - b).abs() <= 1e-9 * b.abs().max(1.0));
            prop_assert!((l.current.slope - g).abs() <= 1e-9 * g);
            prop_assert!((l.current.intercept - i0).abs() <= 1e-9 * g.max(i0));
        }

        #[test]
        fn k_invariant_under_joint_scaling(s in 0.1f64..10.0) {
            let k = k_coefficient(1e-3, 85.0, 7e9, 0.4, 1e-13).unwrap();
            let ks = k_coefficient(s * 1e-3, 85.0, 7e9, s * 0.4, 1e-13).unwrap();
            prop_assert!((k - ks).abs() <= 1e-12 * k);
        }

        #[test]
        fn baseline_stays_within_brackets(f in 6.0e9f64..8.5e9) {
            let t = table();
            let b = baseline_at(&t, f).unwrap();
            let j = t.samples.partition_point(|p| p.f_fr <= f).clamp(1, t.samples.len() - 1);
            let (lo, hi) = (t.samples[j - 1], t.samples[j]);
            prop_assert!(b.v_osc_fr >= lo.v_osc_fr.min(hi.v_osc_fr) && b.v_osc_fr <= lo.v_osc_fr.max(hi.v_osc_fr));
            prop_assert!(b.i_osc_fr >= lo.i_osc_fr.min(hi.i_osc_fr) && b.i_osc_fr <= lo.i_osc_fr.max(hi.i_osc_fr));
            prop_assert!(b.theta_vi_fr >= lo.theta_vi_fr.min(hi.theta_vi_fr) - 1e-12
                && b.theta_vi_fr <= lo.theta_vi_fr.max(hi.theta_vi_fr) + 1e-12);
        }
    }
}
