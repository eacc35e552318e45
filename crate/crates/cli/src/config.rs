//! Run configuration: strict TOML with unit-suffixed physical scalars.

use anyhow::{bail, Context, Result};
use ilro::oracle::{Design, LimiterKind, LockCriteria, Probe};
use ilro::{KAngleMode, SolverOptions, SweepMode};
use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

pub trait Unit {
    const SYMBOL: &'static str;
    /// Whether SI prefixes are accepted in front of the symbol.
    const PREFIXED: bool = true;
}

macro_rules! unit {
    ($name:ident, $sym:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name;
        impl Unit for $name {
            const SYMBOL: &'static str = $sym;
        }
    };
}

unit!(Hertz, "Hz");
unit!(Farad, "F");
unit!(Volt, "V");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degree;
impl Unit for Degree {
    const SYMBOL: &'static str = "deg";
    const PREFIXED: bool = false;
}

/// Scalar in SI base units, written with a mandatory unit suffix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantity<U>(pub f64, PhantomData<U>);

impl<U> Quantity<U> {
    pub fn new(v: f64) -> Self {
        Quantity(v, PhantomData)
    }
}

fn prefix_scale(c: char) -> Option<f64> {
    Some(match c {
        'a' => 1e-18,
        'f' => 1e-15,
        'p' => 1e-12,
        'n' => 1e-9,
        'u' | 'µ' => 1e-6,
        'm' => 1e-3,
        'k' => 1e3,
        'M' => 1e6,
        'G' => 1e9,
        'T' => 1e12,
        _ => return None,
    })
}

/// Parses strings such as `7GHz`, `100 fF` or `88.5deg`.
pub fn parse_quantity<U: Unit>(text: &str) -> std::result::Result<f64, String> {
    let t = text.trim();
    let body = t
        .strip_suffix(U::SYMBOL)
        .ok_or_else(|| format!("'{t}' lacks the unit suffix '{}'", U::SYMBOL))?
        .trim_end();
    let bad = || format!("'{t}' is not a number followed by '{}'", U::SYMBOL);
    let value = match body.parse::<f64>() {
        Ok(v) => v,
        Err(_) if U::PREFIXED => {
            let c = body.chars().last().ok_or_else(bad)?;
            let scale = prefix_scale(c).ok_or_else(bad)?;
            let num = body[..body.len() - c.len_utf8()].trim_end();
            num.parse::<f64>().map_err(|_| bad())? * scale
        }
        Err(_) => return Err(bad()),
    };
    if !value.is_finite() {
        return Err(bad());
    }
    Ok(value)
}

impl<'de, U: Unit> Deserialize<'de> for Quantity<U> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<U>(PhantomData<U>);
        impl<U: Unit> Visitor<'_> for V<U> {
            type Value = Quantity<U>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a string with a '{}' unit suffix", U::SYMBOL)
            }
            fn visit_str<E: de::Error>(self, s: &str) -> std::result::Result<Self::Value, E> {
                parse_quantity::<U>(s).map(Quantity::new).map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                Err(E::custom(format!("bare number {v} needs a '{}' unit suffix", U::SYMBOL)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                Err(E::custom(format!("bare number {v} needs a '{}' unit suffix", U::SYMBOL)))
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

impl<U> fmt::Display for Quantity<U>
where
    U: Unit,
{
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{:e}{}", self.0, U::SYMBOL)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub k_angle: Option<KAngleMode>,
    #[serde(default = "default_verbosity")]
    pub verbosity: u8,
    pub oracle: Option<OracleSection>,
    pub stage: StageSection,
    pub injection: InjectionSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub compare: CompareSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_verbosity() -> u8 {
    1
}

/// Behavioral ring and measurement settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub n_stages: usize,
    pub f_design: Quantity<Hertz>,
    pub c_node: Quantity<Farad>,
    pub theta_iv: Quantity<Degree>,
    pub amplitude: Quantity<Volt>,
    pub main_drive: f64,
    pub limiter_ratio: f64,
    pub cc_drive: f64,
    pub limiter: LimiterKind,
    pub limiter_order: u32,
    pub hp_periods: f64,
    pub samples_per_period: f64,
    pub warmup_periods: f64,
    pub settle_periods: f64,
    pub measure_periods: f64,
    pub seed: u64,
    pub block_periods: usize,
    pub max_drift_per_period: Quantity<Degree>,
    pub max_total_drift: Quantity<Degree>,
    /// Quench guard as a fraction of the free-running amplitude.
    pub min_amplitude_fraction: f64,
    /// Edge bisection tolerance of the oracle locking range.
    pub edge_tol: Quantity<Hertz>,
}

impl OracleSection {
    pub fn design(&self) -> Design {
        Design {
            n_stages: self.n_stages,
            f_design: self.f_design.0,
            c_node: self.c_node.0,
            theta_iv_deg: self.theta_iv.0,
            amplitude: self.amplitude.0,
            main_drive: self.main_drive,
            limiter_ratio: self.limiter_ratio,
            cc_drive: self.cc_drive,
            limiter_kind: self.limiter,
            limiter_order: self.limiter_order,
            hp_periods: self.hp_periods,
            samples_per_period: self.samples_per_period,
            warmup_periods: self.warmup_periods,
            settle_periods: self.settle_periods,
            measure_periods: self.measure_periods,
        }
    }

    /// Lock criteria with the quench guard resolved against `v_osc_fr`.
    pub fn criteria(&self, v_osc_fr: f64) -> LockCriteria {
        LockCriteria {
            block_periods: self.block_periods,
            max_drift_deg_per_period: self.max_drift_per_period.0,
            max_total_drift_deg: self.max_total_drift.0,
            min_amplitude: self.min_amplitude_fraction * v_osc_fr,
        }
    }
}

/// Calibration band and table location.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub band_lo: Quantity<Hertz>,
    pub band_hi: Quantity<Hertz>,
    pub points: usize,
    /// Injection probes as `[epsilon, f_inj / f_fr]` pairs.
    pub probes: Vec<[f64; 2]>,
    #[serde(default = "default_table")]
    pub table: String,
}

fn default_table() -> String {
    "calibration".into()
}

impl StageSection {
    pub fn probes(&self) -> Vec<Probe> {
        self.probes
            .iter()
            .map(|&[epsilon, ratio]| Probe { epsilon, ratio })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSection {
    pub epsilons: Vec<f64>,
    /// Injection frequency held while the free-running frequency is swept.
    pub f_inj: Quantity<Hertz>,
    /// Free-running frequency held while the injection frequency is swept.
    pub f_fr: Quantity<Hertz>,
}

impl InjectionSection {
    pub fn fixed_hz(&self, mode: SweepMode) -> f64 {
        match mode {
            SweepMode::Ffr => self.f_inj.0,
            SweepMode::Finj => self.f_fr.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub start: Quantity<Hertz>,
    pub stop: Quantity<Hertz>,
    pub step: Quantity<Hertz>,
}

impl SweepSection {
    /// `start + i·step` up to and including `stop` within a tenth of a step.
    pub fn grid(&self) -> Vec<f64> {
        let (a, b, h) = (self.start.0, self.stop.0, self.step.0);
        let n = ((b - a) / h + 0.1).floor() as usize + 1;
        (0..n).map(|i| a + i as f64 * h).collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub jacobian_step: f64,
    pub grid_v: usize,
    pub grid_phi: usize,
    pub grid_v_span: [f64; 2],
    pub edge_tol: Quantity<Hertz>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverSection {
            tolerance: o.tolerance,
            max_iter: o.max_iter,
            max_halvings: o.max_halvings,
            jacobian_step: o.jacobian_step,
            grid_v: o.grid_v,
            grid_phi: o.grid_phi,
            grid_v_span: [o.grid_v_span.0, o.grid_v_span.1],
            edge_tol: Quantity::new(o.edge_tol_hz),
        }
    }
}

impl SolverSection {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_iter: self.max_iter,
            max_halvings: self.max_halvings,
            jacobian_step: self.jacobian_step,
            grid_v: self.grid_v,
            grid_phi: self.grid_phi,
            grid_v_span: (self.grid_v_span[0], self.grid_v_span[1]),
            edge_tol_hz: self.edge_tol.0,
        }
    }
}

/// Agreement thresholds applied per ε block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub phi0_rms: Quantity<Degree>,
    pub psi_rms: Quantity<Degree>,
    /// Relative RMS deviation of |V_osc|.
    pub v_osc_rms: f64,
    /// Relative RMS deviation of |I_t|.
    pub i_t_rms: f64,
    /// Largest band-edge deviation as a fraction of the oracle band width.
    pub edge_fraction: Option<f64>,
    /// Blocks the thresholds apply to; all blocks when absent.
    pub epsilons: Option<Vec<f64>>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            phi0_rms: Quantity::new(3.0),
            psi_rms: Quantity::new(2.0),
            v_osc_rms: 0.03,
            i_t_rms: 0.05,
            edge_fraction: None,
            epsilons: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        if !(s.step.0 > 0.0 && s.stop.0 >= s.start.0 && s.start.0 > 0.0) {
            bail!("sweep needs 0 < start <= stop and step > 0");
        }
        if self.injection.epsilons.is_empty() {
            bail!("injection.epsilons is empty");
        }
        if !(self.stage.band_lo.0 > 0.0 && self.stage.band_hi.0 > self.stage.band_lo.0) {
            bail!("stage band needs 0 < band_lo < band_hi");
        }
        Ok(())
    }

    pub fn oracle(&self) -> Result<&OracleSection> {
        self.oracle.as_ref().context("config has no [oracle] section")
    }
}
