//! Behavioral ring-oscillator ODE and its fixed-step RK4 integration.
//!
//! Node `k = 2·stage + polarity`. Each node sees a differential main
//! transconductor driven by the previous stage (the first stage is driven
//! crosswise, which closes the ring with one inversion), a differential
//! cross-coupled pair against its complementary node, an amplitude limiter,
//! an output conductance and an optional injected current.

use crate::error::{domain, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

/// Saturating transconductor: I = −I_sat·tanh(g·v_d/I_sat) for a
/// differential drive v_d; `g` is the small-signal transconductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub g: f64,
    pub i_sat: f64,
}

impl Branch {
    #[inline]
    fn current(&self, v_d: f64) -> f64 {
        if self.g == 0.0 {
            return 0.0;
        }
        -self.i_sat * (self.g * v_d / self.i_sat).tanh()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimiterKind {
    /// Odd power of the node voltage, −g·v_ref·(v/v_ref)^order.
    Rail,
    /// Conductance scaled by the ring's differential envelope,
    /// −g·(E/v_ref)^(order−1)·v with E² = (2/N)·Σ_s v_d,s². Order 1 is a plain conductance.
    Envelope,
}

/// High-order conductance that sets the free-running amplitude and its
/// dependence on injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limiter {
    pub kind: LimiterKind,
    pub g: f64,
    pub v_ref: f64,
    pub order: u32,
}

/// Injected per-node current, |I_inj|·cos(2π·f·t + offset_k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub amplitude: f64,
    pub f: f64,
    /// Per-node offsets in degrees; `None` follows the ring's phase progression.
    pub offsets_deg: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub n_stages: usize,
    /// Capacitance per node.
    pub c_node: f64,
    pub main: Branch,
    pub cc: Branch,
    pub g_out: f64,
    pub limiter: Limiter,
    /// Conductance of the cross-coupled pair's coupling high-pass; the
    /// corner time constant is C/g_hp. Zero couples at DC.
    pub g_hp: f64,
    pub injection: Option<Drive>,
    pub dt: f64,
    /// Injection is switched on at this time so the ring starts free-running.
    pub t_warmup: f64,
    /// Start of the recorded window.
    pub t_settle: f64,
    pub t_measure: f64,
    pub seed: u64,
}

/// Default per-node injection offsets in degrees: stage s leads stage s−1
/// by 180 − 180/N, complementary nodes sit 180° apart.
pub fn ring_offsets_deg(n_stages: usize) -> Vec<f64> {
    let step = 180.0 - 180.0 / n_stages as f64;
    (0..2 * n_stages)
        .map(|k| {
            let (s, pol) = (k / 2, k % 2);
            s as f64 * step + pol as f64 * 180.0
        })
        .collect()
}

/// Node driving node `k`'s main branch (same sense as the branch input).
pub fn driver_of(k: usize, n_stages: usize) -> usize {
    let (s, pol) = (k / 2, k % 2);
    if s == 0 {
        2 * (n_stages - 1) + (1 - pol)
    } else {
        2 * (s - 1) + pol
    }
}

/// Complementary node of `k`.
pub fn complement_of(k: usize) -> usize {
    k ^ 1
}

impl OracleConfig {
    pub fn n_nodes(&self) -> usize {
        2 * self.n_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 || !self.n_stages.is_multiple_of(2) {
            return domain(format!("oracle needs an even stage count >= 2, got {}", self.n_stages));
        }
        if !(self.dt > 0.0) {
            return domain("dt must be > 0");
        }
        if !(self.c_node > 0.0) {
            return domain("node capacitance must be > 0");
        }
        if !(self.main.i_sat > 0.0 && self.cc.i_sat > 0.0) {
            return domain("saturation currents must be > 0");
        }
        if !(self.g_out > 0.0) {
            return domain("g_out must be > 0");
        }
        let order_ok = match self.limiter.kind {
            LimiterKind::Rail => self.limiter.order >= 3 && self.limiter.order % 2 == 1,
            LimiterKind::Envelope => self.limiter.order >= 1,
        };
        if !order_ok || !(self.limiter.v_ref > 0.0) {
            return domain("limiter needs v_ref > 0 and an order >= 1 (odd and >= 3 for the rail kind)");
        }
        if !(self.g_hp >= 0.0) {
            return domain("g_hp must be >= 0");
        }
        if !(self.t_settle >= 0.0 && self.t_measure > 0.0 && self.t_warmup >= 0.0) {
            return domain("window times must be non-negative with t_measure > 0");
        }
        if let Some(d) = &self.injection {
            if !(d.f > 0.0 && d.amplitude >= 0.0) {
                return domain("injection needs f > 0 and amplitude >= 0");
            }
            if d.f * self.t_measure < 64.0 {
                return domain(format!(
                    "measurement window covers {:.1} injection periods, at least 64 required",
                    d.f * self.t_measure
                ));
            }
            if let Some(o) = &d.offsets_deg {
                if o.len() != self.n_nodes() {
                    return domain(format!("expected {} injection offsets, got {}", self.n_nodes(), o.len()));
                }
            }
        }
        Ok(())
    }

    /// Same circuit with every capacitance and time scaled by `c / c_node`,
    /// including the injection frequency.
    pub fn time_scaled(&self, c: f64) -> OracleConfig {
        let s = c / self.c_node;
        let mut out = self.clone();
        out.c_node = c;
        out.dt *= s;
        out.t_warmup *= s;
        out.t_settle *= s;
        out.t_measure *= s;
        if let Some(d) = &mut out.injection {
            d.f /= s;
        }
        out
    }

    pub fn with_injection(&self, amplitude: f64, f: f64) -> OracleConfig {
        let mut out = self.clone();
        out.injection = Some(Drive {
            amplitude,
            f,
            offsets_deg: self.injection.as_ref().and_then(|d| d.offsets_deg.clone()),
        });
        out
    }

    pub fn free_running(&self) -> OracleConfig {
        let mut out = self.clone();
        out.injection = None;
        out
    }
}

/// Sampled node voltages and branch currents over the measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveRecord {
    pub t0: f64,
    pub dt: f64,
    /// `v[k][n]`: node k at sample n.
    pub v: Vec<Vec<f64>>,
    pub i_main: Vec<Vec<f64>>,
    /// Cross-coupled pair plus limiter.
    pub i_cc: Vec<Vec<f64>>,
    pub i_inj: Vec<Vec<f64>>,
    /// Current into the node load, main + cc + inj.
    pub i_total: Vec<Vec<f64>>,
}

impl WaveRecord {
    pub fn len(&self) -> usize {
        self.v.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn n_nodes(&self) -> usize {
        self.v.len()
    }

    /// Dump as `t_s,v_node0..,i_main0..,i_cc0..,i_inj0..,i_total0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        let n = self.n_nodes();
        let mut header = vec!["t_s".to_string()];
        for (name, _) in self.series() {
            header.extend((0..n).map(|k| format!("{name}{k}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in 0..self.len() {
            write!(w, "{:e}", self.time(s))?;
            for (_, arr) in self.series() {
                for node in arr {
                    write!(w, ",{:e}", node[s])?;
                }
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    fn series(&self) -> [(&'static str, &Vec<Vec<f64>>); 5] {
        [
            ("v_node", &self.v),
            ("i_main", &self.i_main),
            ("i_cc", &self.i_cc),
            ("i_inj", &self.i_inj),
            ("i_total", &self.i_total),
        ]
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Antisymmetric start: each stage gets ±a with a in [5, 15] mV from the seed.
pub fn initial_state(cfg: &OracleConfig) -> Vec<f64> {
    let n = cfg.n_nodes();
    let mut x = vec![0.0; 2 * n];
    for s in 0..cfg.n_stages {
        let u = (splitmix(cfg.seed.wrapping_mul(31).wrapping_add(s as u64)) >> 11) as f64 / (1u64 << 53) as f64;
        let a = 0.01 * (0.5 + u);
        x[2 * s] = a;
        x[2 * s + 1] = -a;
    }
    x
}

struct Model {
    n: usize,
    n_stages: usize,
    inv_c: f64,
    main: Branch,
    cc: Branch,
    g_out: f64,
    lim: Limiter,
    inv_tau: f64,
    drv: Vec<usize>,
    inj_amp: f64,
    omega: f64,
    inj_cos: Vec<f64>,
    inj_sin: Vec<f64>,
    t_on: f64,
}

/// Branch currents at one state, per node.
struct Currents<'a> {
    main: &'a mut [f64],
    cc: &'a mut [f64],
    inj: &'a mut [f64],
}

impl Model {
    fn new(cfg: &OracleConfig) -> Model {
        let n = cfg.n_nodes();
        let (inj_amp, omega, offsets) = match &cfg.injection {
            Some(d) => (
                d.amplitude,
                2.0 * PI * d.f,
                d.offsets_deg.clone().unwrap_or_else(|| ring_offsets_deg(cfg.n_stages)),
            ),
            None => (0.0, 0.0, vec![0.0; n]),
        };
        Model {
            n,
            n_stages: cfg.n_stages,
            inv_c: 1.0 / cfg.c_node,
            main: cfg.main,
            cc: cfg.cc,
            g_out: cfg.g_out,
            lim: cfg.limiter,
            inv_tau: cfg.g_hp / cfg.c_node,
            drv: (0..n).map(|k| driver_of(k, cfg.n_stages)).collect(),
            inj_amp,
            omega,
            inj_cos: offsets.iter().map(|o| o.to_radians().cos()).collect(),
            inj_sin: offsets.iter().map(|o| o.to_radians().sin()).collect(),
            t_on: cfg.t_warmup,
        }
    }

    #[inline]
    fn envelope_factor(&self, x: &[f64]) -> f64 {
        let mut e2 = 0.0;
        for s in 0..self.n_stages {
            let d = 0.5 * (x[2 * s] - x[2 * s + 1]);
            e2 += d * d;
        }
        e2 *= 2.0 / self.n_stages as f64;
        (e2.sqrt() / self.lim.v_ref).powi(self.lim.order as i32 - 1)
    }

    fn currents(&self, x: &[f64], t: f64, out: Currents) {
        let n = self.n;
        let v = &x[..n];
        let u = &x[n..];
        let env = match self.lim.kind {
            LimiterKind::Envelope => self.envelope_factor(v),
            LimiterKind::Rail => 0.0,
        };
        let (wc, ws) = if self.inj_amp > 0.0 && t >= self.t_on {
            let (s, c) = (self.omega * t).sin_cos();
            (c, s)
        } else {
            (0.0, 0.0)
        };
        for k in 0..n {
            let d = self.drv[k];
            let c = k ^ 1;
            out.main[k] = self.main.current(0.5 * (v[d] - v[d ^ 1]));
            let lim = match self.lim.kind {
                LimiterKind::Rail => {
                    let r = v[k] / self.lim.v_ref;
                    -self.lim.g * self.lim.v_ref * r.powi(self.lim.order as i32)
                }
                LimiterKind::Envelope => -self.lim.g * env * v[k],
            };
            out.cc[k] = self.cc.current(0.5 * ((v[c] - u[c]) - (v[k] - u[k]))) + lim;
            // cos(wt + o) = cos wt cos o − sin wt sin o
            out.inj[k] = self.inj_amp * (wc * self.inj_cos[k] - ws * self.inj_sin[k]);
        }
    }

    fn deriv(&self, x: &[f64], t: f64, scratch: &mut [f64], dx: &mut [f64]) {
        let n = self.n;
        let (main, rest) = scratch.split_at_mut(n);
        let (cc, inj) = rest.split_at_mut(n);
        self.currents(x, t, Currents { main, cc, inj });
        for k in 0..n {
            dx[k] = (main[k] + cc[k] + inj[k] - self.g_out * x[k]) * self.inv_c;
            dx[n + k] = (x[k] - x[n + k]) * self.inv_tau;
        }
    }
}

/// Integrate the configured ring and record the measurement window.
pub fn simulate(cfg: &OracleConfig) -> Result<WaveRecord> {
    cfg.validate()?;
    let model = Model::new(cfg);
    let n = model.n;
    let m = 2 * n;
    let dt = cfg.dt;
    let start = (cfg.t_settle / dt).round() as usize;
    let count = (cfg.t_measure / dt).round() as usize;
    let mut x = initial_state(cfg);
    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut k4 = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    let mut scratch = vec![0.0; 3 * n];
    let blank = || vec![Vec::with_capacity(count); n];
    let mut rec = WaveRecord {
        t0: start as f64 * dt,
        dt,
        v: blank(),
        i_main: blank(),
        i_cc: blank(),
        i_inj: blank(),
        i_total: blank(),
    };
    let mut main = vec![0.0; n];
    let mut cc = vec![0.0; n];
    let mut inj = vec![0.0; n];
    for step in 0..start + count {
        let t = step as f64 * dt;
        if step >= start {
            model.currents(&x, t, Currents { main: &mut main, cc: &mut cc, inj: &mut inj });
            for k in 0..n {
                rec.v[k].push(x[k]);
                rec.i_main[k].push(main[k]);
                rec.i_cc[k].push(cc[k]);
                rec.i_inj[k].push(inj[k]);
                rec.i_total[k].push(main[k] + cc[k] + inj[k]);
            }
        }
        model.deriv(&x, t, &mut scratch, &mut k1);
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * dt * k1[j];
        }
        model.deriv(&tmp, t + 0.5 * dt, &mut scratch, &mut k2);
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * dt * k2[j];
        }
        model.deriv(&tmp, t + 0.5 * dt, &mut scratch, &mut k3);
        for j in 0..m {
            tmp[j] = x[j] + dt * k3[j];
        }
        model.deriv(&tmp, t + dt, &mut scratch, &mut k4);
        for j in 0..m {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration { t: t + dt });
        }
    }
    Ok(rec)
}

/// Largest |C·dV/dt − Σ branch currents| over every tenth interior sample,
/// relative to the peak total current, using central differences.
pub fn kcl_residual(rec: &WaveRecord, cfg: &OracleConfig) -> f64 {
    let mut peak: f64 = 0.0;
    for node in &rec.i_total {
        for &i in node {
            peak = peak.max(i.abs());
        }
    }
    let mut worst: f64 = 0.0;
    for k in 0..rec.n_nodes() {
        let v = &rec.v[k];
        let mut s = 1;
        while s + 1 < v.len() {
            let dvdt = (v[s + 1] - v[s - 1]) / (2.0 * rec.dt);
            let sum = rec.i_total[k][s] - cfg.g_out * v[s];
            worst = worst.max((cfg.c_node * dvdt - sum).abs());
            s += 10;
        }
    }
    worst / peak
}
