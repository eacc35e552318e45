//! Solver-versus-oracle agreement over rows locked in both tables.

use crate::config::CompareSection;
use anyhow::{bail, Result};
use ilro::adler::SweepRecord;
use ilro::wrap_angle;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub quantity: &'static str,
    /// `deg` for angles, `rel` for magnitudes relative to the oracle.
    pub unit: &'static str,
    pub rms: f64,
    pub max_abs: f64,
    pub threshold: Option<f64>,
}

impl Deviation {
    pub fn passed(&self) -> bool {
        self.threshold.is_none_or(|t| self.rms < t)
    }
}

/// Extent of the widest contiguous locked run, grid values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub epsilon: f64,
    pub common_rows: usize,
    pub deviations: Vec<Deviation>,
    pub solver_band: Option<Band>,
    pub oracle_band: Option<Band>,
    /// Solver minus oracle band edges, hertz.
    pub edge_lo_hz: Option<f64>,
    pub edge_hi_hz: Option<f64>,
    pub edge_threshold: Option<f64>,
    /// Thresholds are checked for this block; otherwise it is informational.
    pub enforced: bool,
}

impl BlockReport {
    pub fn edge_fraction(&self) -> Option<f64> {
        let b = self.oracle_band?;
        let w = b.hi - b.lo;
        let worst = self.edge_lo_hz?.abs().max(self.edge_hi_hz?.abs());
        Some(if w > 0.0 { worst / w } else if worst == 0.0 { 0.0 } else { f64::INFINITY })
    }

    pub fn disjoint(&self) -> bool {
        self.common_rows == 0
    }

    pub fn passed(&self) -> bool {
        if !self.enforced {
            return true;
        }
        if self.disjoint() || !self.deviations.iter().all(Deviation::passed) {
            return false;
        }
        match (self.edge_threshold, self.edge_fraction()) {
            (Some(t), Some(f)) => f <= t,
            (Some(_), None) => false,
            (None, _) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub blocks: Vec<BlockReport>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockReport::passed)
    }

    pub fn any_disjoint(&self) -> bool {
        self.blocks.iter().any(|b| b.enforced && b.disjoint())
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let _ = writeln!(s, "epsilon {}: {} rows locked in both", b.epsilon, b.common_rows);
            if b.disjoint() {
                let _ = writeln!(s, "  WARNING: locked bands are disjoint");
                continue;
            }
            for d in &b.deviations {
                let th = d.threshold.map_or("-".to_string(), |t| format!("{t}"));
                let _ = writeln!(
                    s,
                    "  {:<6} rms {:.4e} max {:.4e} {} (limit {th}) {}",
                    d.quantity,
                    d.rms,
                    d.max_abs,
                    d.unit,
                    match (b.enforced, d.passed()) {
                        (false, _) => "info",
                        (true, true) => "ok",
                        (true, false) => "EXCEEDED",
                    }
                );
            }
            if let (Some(lo), Some(hi)) = (b.edge_lo_hz, b.edge_hi_hz) {
                let frac = b.edge_fraction().unwrap_or(f64::NAN);
                let _ = writeln!(s, "  edges  lo {lo:+.4e} Hz hi {hi:+.4e} Hz ({frac:.4} of oracle width)");
            }
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epsilon", "quantity", "unit", "rms", "max_abs", "threshold", "passed"])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for b in &self.blocks {
            let eps = format!("{}", b.epsilon);
            for d in &b.deviations {
                w.write_record([
                    eps.clone(),
                    d.quantity.into(),
                    d.unit.into(),
                    format!("{:e}", d.rms),
                    format!("{:e}", d.max_abs),
                    opt(d.threshold),
                    u8::from(!b.enforced || d.passed()).to_string(),
                ])?;
            }
            let edge = |name: &str, v: Option<f64>| {
                [
                    eps.clone(),
                    name.into(),
                    "Hz".into(),
                    String::new(),
                    v.map(|x| format!("{:e}", x.abs())).unwrap_or_default(),
                    String::new(),
                    String::new(),
                ]
            };
            w.write_record(edge("edge_lo", b.edge_lo_hz))?;
            w.write_record(edge("edge_hi", b.edge_hi_hz))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn key(r: &SweepRecord) -> (u64, u64) {
    (r.epsilon.to_bits(), r.sweep_var_hz.to_bits())
}

fn widest_band(rows: &[&SweepRecord]) -> Option<Band> {
    let mut best: Option<(usize, Band)> = None;
    let mut run: Option<(usize, Band)> = None;
    for r in rows {
        if r.locked {
            run = Some(match run {
                Some((n, b)) => (n + 1, Band { lo: b.lo, hi: r.sweep_var_hz }),
                None => (1, Band { lo: r.sweep_var_hz, hi: r.sweep_var_hz }),
            });
            if best.is_none_or(|(n, _)| run.unwrap().0 > n) {
                best = run;
            }
        } else {
            run = None;
        }
    }
    best.map(|(_, b)| b)
}

fn block(t: &[SweepRecord], eps: f64) -> Vec<&SweepRecord> {
    let mut v: Vec<&SweepRecord> = t.iter().filter(|r| r.epsilon.to_bits() == eps.to_bits()).collect();
    v.sort_by(|a, b| a.sweep_var_hz.total_cmp(&b.sweep_var_hz));
    v
}

fn stats(x: &[f64]) -> (f64, f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    (rms, x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Errors when the two tables were not taken on the same grid.
pub fn compare(solver: &[SweepRecord], oracle: &[SweepRecord], th: &CompareSection) -> Result<CompareReport> {
    let ks: BTreeSet<_> = solver.iter().map(key).collect();
    let ko: BTreeSet<_> = oracle.iter().map(key).collect();
    if ks.len() != solver.len() || ko.len() != oracle.len() {
        bail!("a table repeats a (epsilon, frequency) row");
    }
    if ks != ko {
        bail!("tables do not share a grid ({} vs {} rows)", solver.len(), oracle.len());
    }
    let mut epsilons: Vec<f64> = Vec::new();
    for r in solver {
        if !epsilons.iter().any(|e| e.to_bits() == r.epsilon.to_bits()) {
            epsilons.push(r.epsilon);
        }
    }
    let mut blocks = Vec::new();
    for eps in epsilons {
        let (s, o) = (block(solver, eps), block(oracle, eps));
        let (mut phi, mut psi, mut v, mut it) = (vec![], vec![], vec![], vec![]);
        for (a, b) in s.iter().zip(&o) {
            if !(a.locked && b.locked) {
                continue;
            }
            let get = |r: &SweepRecord, x: Option<f64>| -> Result<f64> {
                x.ok_or_else(|| anyhow::anyhow!("locked row at {:e} Hz lacks a value", r.sweep_var_hz))
            };
            if let (Some(pa), Some(pb)) = (a.phi0_deg, b.phi0_deg) {
                phi.push(wrap_angle(pa - pb)?);
            }
            psi.push(wrap_angle(get(a, a.psi_deg)? - get(b, b.psi_deg)?)?);
            v.push(get(a, a.v_osc_v)? / get(b, b.v_osc_v)? - 1.0);
            it.push(get(a, a.i_t_a)? / get(b, b.i_t_a)? - 1.0);
        }
        let common = psi.len();
        let mut deviations = Vec::new();
        if common > 0 {
            for (quantity, unit, x, t) in [
                ("phi0", "deg", &phi, th.phi0_rms.0),
                ("psi", "deg", &psi, th.psi_rms.0),
                ("v_osc", "rel", &v, th.v_osc_rms),
                ("i_t", "rel", &it, th.i_t_rms),
            ] {
                if x.is_empty() {
                    continue;
                }
                let (rms, max_abs) = stats(x);
                deviations.push(Deviation {
                    quantity,
                    unit,
                    rms,
                    max_abs,
                    threshold: Some(t),
                });
            }
        }
        let (sb, ob) = (widest_band(&s), widest_band(&o));
        let (lo, hi) = match (sb, ob) {
            (Some(a), Some(b)) if common > 0 => (Some(a.lo - b.lo), Some(a.hi - b.hi)),
            _ => (None, None),
        };
        blocks.push(BlockReport {
            epsilon: eps,
            common_rows: common,
            deviations,
            solver_band: sb,
            oracle_band: ob,
            edge_lo_hz: lo,
            edge_hi_hz: hi,
            edge_threshold: th.edge_fraction,
            enforced: th.epsilons.as_ref().is_none_or(|v| v.iter().any(|e| e.to_bits() == eps.to_bits())),
        });
    }
    Ok(CompareReport { blocks })
}
