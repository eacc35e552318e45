//! Acceptance suite: runs every criterion against the reference oracle and
//! prints one PASS/FAIL line each. Exits non-zero if any criterion fails.

use ilro::oracle::*;
use ilro::{
    classic_phi0, k_coefficient, locking_range, sweep, wrap_angle, CalibrationTable, KAngleMode, LockingRange,
    Scenario, SolverKind, SolverOptions, StageParams, SweepMode, SweepTable,
};
use std::time::Instant;

const F_INJ: f64 = 7e9;
const STRENGTHS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];
const SWEEP_EPS: f64 = 0.2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn span(x: &[f64]) -> f64 {
    x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn wrap(x: f64) -> f64 {
    wrap_angle(x).unwrap()
}

struct Fixture {
    cfg: OracleConfig,
    cal: Calibration,
    grid: Vec<f64>,
    solver: SweepTable,
    oracle: Vec<(f64, OracleOutcome)>,
    /// Oracle locked rows contiguous with the point nearest f_inj.
    band: Vec<(f64, MeasuredPoint)>,
}

impl Fixture {
    fn scenario(&self, mode: SweepMode, kind: SolverKind) -> Scenario<'_> {
        scenario(&self.cal.table, &self.cal.table.params, mode, kind)
    }

    fn oracle_scenario(&self) -> OracleScenario<'_> {
        OracleScenario::new(&self.cfg, self.cal.reference, SweepMode::Ffr, F_INJ)
    }
}

fn scenario<'a>(t: &'a CalibrationTable, p: &'a StageParams, mode: SweepMode, kind: SolverKind) -> Scenario<'a> {
    Scenario {
        table: t,
        params: p,
        mode,
        fixed_hz: F_INJ,
        kind,
        options: SolverOptions::default(),
    }
}

fn fixture() -> Fixture {
    let cfg = reference_design().config().unwrap();
    let (lo, hi) = REFERENCE_BAND_HZ;
    let cal = calibrate_band(&cfg, lo, hi, 8, &default_probes(), KAngleMode::ThetaIv).unwrap();
    let grid: Vec<f64> = (0..105).map(|i| 4.4e9 + i as f64 * 0.05e9).collect();
    let sc = scenario(&cal.table, &cal.table.params, SweepMode::Ffr, SolverKind::Extended);
    let solver = sweep(&sc, &[SWEEP_EPS], &grid).unwrap();
    let osc = OracleScenario::new(&cfg, cal.reference, SweepMode::Ffr, F_INJ);
    let oracle = osc.sweep(SWEEP_EPS, &grid).unwrap();
    let centre = grid.iter().position(|f| (f - F_INJ).abs() < 1.0).unwrap();
    let locked = |i: usize| oracle[i].1.is_locked();
    let (mut a, mut b) = (centre, centre);
    while a > 0 && locked(a - 1) {
        a -= 1;
    }
    while b + 1 < grid.len() && locked(b + 1) {
        b += 1;
    }
    let band = (a..=b).map(|i| (grid[i], oracle[i].1.point().unwrap().clone())).collect();
    Fixture {
        cfg,
        cal,
        grid,
        solver,
        oracle,
        band,
    }
}

fn classic_reduction(fx: &Fixture) -> Verdict {
    let p = fx.cal.table.params;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for mode in [SweepMode::Ffr, SweepMode::Finj] {
        let classic = fx.scenario(mode, SolverKind::Classic);
        let frozen = fx.scenario(mode, SolverKind::Frozen);
        let r = locking_range(&classic, SWEEP_EPS).unwrap();
        for i in 0..50 {
            let f = r.f_lo + r.width * (i as f64 + 0.5) / 50.0;
            let (Some(c), Some(z)) = (
                classic.solve(f, SWEEP_EPS, None).unwrap().solution().copied(),
                frozen.solve(f, SWEEP_EPS, None).unwrap().solution().copied(),
            ) else {
                return check(false, format!("{mode} row at {f:.4e} Hz not locked in both"));
            };
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
            worst = worst.max(rel(z.phi_0, c.phi_0)).max(rel(z.psi, c.psi));
            points += 1;
        }
    }
    let _ = p;
    let mut edge_err: f64 = 0.0;
    for eps in STRENGTHS {
        let (mut inside, mut outside) = (0.0f64, 90.0f64);
        while outside - inside > 1e-10 {
            let mid = 0.5 * (inside + outside);
            if classic_phi0(eps, mid).is_some() {
                inside = mid
            } else {
                outside = mid
            }
        }
        edge_err = edge_err.max((inside - eps.asin().to_degrees()).abs());
    }
    let gap = |e: f64| 1.0 - e.atan() / e.asin();
    let limit_ok = gap(1e-4) < 1e-8 && gap(1e-3) < gap(0.05) && gap(0.05) < gap(0.2);
    check(
        worst <= 1e-9 && edge_err <= 1e-6 && limit_ok && gap(0.2) <= 0.02,
        format!(
            "frozen vs classic max rel diff {worst:.2e} over {points} rows; psi edge error {edge_err:.2e} deg; atan/asin gap {:.4} at 0.2",
            gap(0.2)
        ),
    )
}

fn ranges(fx: &Fixture, mode: SweepMode, kind: SolverKind) -> Vec<LockingRange> {
    let sc = fx.scenario(mode, kind);
    STRENGTHS.iter().map(|&e| locking_range(&sc, e).unwrap()).collect()
}

fn asymmetry_direction(fx: &Fixture) -> (Verdict, Vec<LockingRange>) {
    let ffr = ranges(fx, SweepMode::Ffr, SolverKind::Extended);
    let finj = ranges(fx, SweepMode::Finj, SolverKind::Extended);
    let classic = ranges(fx, SweepMode::Finj, SolverKind::Classic);
    let classic_ffr = ranges(fx, SweepMode::Ffr, SolverKind::Classic);
    let fmt = |r: &[LockingRange]| r.iter().map(|x| format!("{:+.3}", x.asymmetry)).collect::<Vec<_>>().join(" ");
    let pass = ffr.iter().chain(&finj).all(|r| r.asymmetry > 0.0 && !r.clipped)
        && classic.iter().all(|r| r.asymmetry.abs() < 0.02);
    println!(
        "  observed: classic free-running sweep asymmetry {} equals psi_max/theta_IV from reciprocal frequency scaling",
        fmt(&classic_ffr)
    );
    (
        check(
            pass,
            format!(
                "extended ffr [{}] finj [{}]; classic finj [{}]",
                fmt(&ffr),
                fmt(&finj),
                fmt(&classic)
            ),
        ),
        ffr,
    )
}

fn monotone_range(fx: &Fixture, solver: &[LockingRange]) -> (Verdict, Vec<LockingRange>) {
    let osc = fx.oracle_scenario();
    let oracle: Vec<LockingRange> = STRENGTHS.iter().map(|&e| osc.locking_range(e, 1e6).unwrap()).collect();
    let finj = ranges(fx, SweepMode::Finj, SolverKind::Extended);
    let rising = |r: &[LockingRange]| r.windows(2).all(|w| w[1].width > w[0].width);
    let fmt = |r: &[LockingRange]| r.iter().map(|x| format!("{:.3}", x.width / 1e9)).collect::<Vec<_>>().join(" ");
    (
        check(
            rising(solver) && rising(&finj) && rising(&oracle),
            format!(
                "widths GHz solver ffr [{}] finj [{}] oracle [{}]",
                fmt(solver),
                fmt(&finj),
                fmt(&oracle)
            ),
        ),
        oracle,
    )
}

fn agreement(fx: &Fixture, solver: &LockingRange, oracle: &LockingRange) -> Verdict {
    let (mut phi, mut psi, mut v, mut it) = (vec![], vec![], vec![], vec![]);
    for (f, m) in &fx.band {
        let i = fx.grid.iter().position(|g| g == f).unwrap();
        if let Some(s) = fx.solver.rows[i].outcome.solution() {
            phi.push(wrap(m.phi_0().unwrap() - s.phi_0));
            psi.push(m.psi() - s.psi);
            v.push(m.v_osc() / s.v_osc_mag - 1.0);
            it.push(m.i_t() / s.i_t_mag - 1.0);
        }
    }
    let lo = (solver.f_lo - oracle.f_lo).abs() / oracle.width;
    let hi = (solver.f_hi - oracle.f_hi).abs() / oracle.width;
    let (a, b, c, d) = (rms(&phi), rms(&psi), rms(&v), rms(&it));
    check(
        phi.len() >= 10 && a < 3.0 && b < 2.0 && c < 0.03 && d < 0.05 && lo < 0.05 && hi < 0.05,
        format!(
            "{} common rows: phi0 {a:.2} deg, psi {b:.2} deg, V {:.2}%, I_t {:.2}%; edges lo {:.1}% hi {:.1}% of width",
            phi.len(),
            100.0 * c,
            100.0 * d,
            100.0 * lo,
            100.0 * hi
        ),
    )
}

fn amplitude_trends(fx: &Fixture) -> Verdict {
    let (lo, hi) = (fx.band[0].0, fx.band[fx.band.len() - 1].0);
    let pos = |g: &dyn Fn(&MeasuredPoint) -> f64| {
        let b = fx.band.iter().max_by(|a, b| g(&a.1).total_cmp(&g(&b.1))).unwrap();
        (b.0 - lo) / (hi - lo)
    };
    let (vpos, ipos) = (pos(&|m| m.v_osc()), pos(&|m| m.i_t()));
    let v: Vec<f64> = fx.band.iter().map(|b| b.1.v_osc()).collect();
    let swing = span(&v) / mean(&v);
    check(
        ipos <= 1.0 / 3.0 && vpos >= 2.0 / 3.0 && (0.15..=0.25).contains(&swing),
        format!(
            "band {:.2}-{:.2} GHz; I_t peak at {ipos:.2}, V peak at {vpos:.2} of band; V {:.3}-{:.3} V, swing {:.1}% of mean",
            lo / 1e9,
            hi / 1e9,
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            100.0 * swing
        ),
    )
}

fn constancy(fx: &Fixture) -> Verdict {
    let fr_vi: Vec<f64> = fx.cal.sweep.iter().map(|(_, m)| m.theta_vi()).collect();
    let fr_iv: Vec<f64> = fx.cal.sweep.iter().map(|(_, m)| m.theta_iv()).collect();
    let th_iv: Vec<f64> = fx.band.iter().map(|b| b.1.theta_iv()).collect();
    let th_vi: Vec<f64> = fx.band.iter().map(|b| b.1.theta_vi()).collect();
    let c_ref = fx.cfg.c_node * fx.cal.reference.f_fr;
    let k: Vec<f64> = fx
        .band
        .iter()
        .map(|(f, m)| k_coefficient(m.i_t(), m.theta_iv(), F_INJ, m.v_osc(), c_ref / f).unwrap())
        .collect();
    let km = mean(&k);
    let kstd = (k.iter().map(|x| (x - km).powi(2)).sum::<f64>() / (k.len() - 1) as f64).sqrt();
    check(
        span(&fr_vi) < 2.0 && span(&fr_iv) < 2.0 && span(&th_iv) < 2.0 && span(&th_vi) > 5.0 && kstd / km < 0.05,
        format!(
            "free-running spans theta_VI {:.3} theta_IV {:.3} deg; locked spans theta_IV {:.2} theta_VI {:.2} deg; k {km:.4} std/mean {:.2}%",
            span(&fr_vi),
            span(&fr_iv),
            span(&th_iv),
            span(&th_vi),
            100.0 * kstd / km
        ),
    )
}

fn calibration_quality(fx: &Fixture) -> Verdict {
    let (a, b) = (fx.cal.laws.theta.r_squared, fx.cal.laws.current.r_squared);
    check(
        a > 0.95 && b > 0.95,
        format!(
            "R2 angle law {a:.4}, current law {b:.4} over {} samples",
            fx.cal.samples.len()
        ),
    )
}

fn integrity(fx: &Fixture) -> Verdict {
    let cfg = &fx.cfg;
    let inj = cfg.with_injection(0.2 * fx.cal.reference.i_osc_fr, 1.02 * fx.cal.reference.f_fr);
    let free = simulate(cfg).unwrap();
    let locked = simulate(&inj).unwrap();
    let kcl = kcl_residual(&free, cfg).max(kcl_residual(&locked, &inj));
    let mut slow = cfg.clone();
    slow.c_node *= 2.0;
    slow.t_settle *= 2.0;
    slow.t_measure *= 2.0;
    let f2 = free_running_point(&slow).unwrap().0.f_fr;
    let scale = (f2 / fx.cal.reference.f_fr - 0.5).abs() / 0.5;
    let mut sym: f64 = 0.0;
    for rec in [&free, &locked] {
        for k in (0..rec.n_nodes()).step_by(2) {
            for (a, b) in rec.v[k].iter().zip(&rec.v[k ^ 1]) {
                sym = sym.max((a + b).abs());
            }
        }
    }
    let replay = simulate(&inj).unwrap();
    let same = locked
        .v
        .iter()
        .chain(&locked.i_total)
        .flatten()
        .zip(replay.v.iter().chain(&replay.i_total).flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let h3 = free_running_point(cfg).unwrap().1.h3_ratio;
    check(
        kcl < 1e-3 && scale < 1e-3 && sym < 1e-6 && same && h3 < 0.15,
        format!(
            "KCL {kcl:.2e}; 2C frequency error {:.3}%; symmetry {sym:.1e} V; replay {}; h3 {h3:.3}",
            100.0 * scale,
            if same { "bitwise" } else { "differs" }
        ),
    )
}

fn report(n: usize, name: &str, v: &Verdict) -> bool {
    println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() {
    let start = Instant::now();
    let fx = fixture();
    let r = &fx.cal.reference;
    println!(
        "reference ring: f_fr {:.4} GHz, V {:.4} V, theta_VI {:.2} deg, theta_IV {:.2} deg; oracle sweep {} points, {} in band",
        r.f_fr / 1e9,
        r.v_osc_fr,
        r.theta_vi_fr,
        r.theta_iv_fr,
        fx.oracle.len(),
        fx.band.len()
    );
    let mut ok = true;
    ok &= report(1, "classic reduction", &classic_reduction(&fx));
    let (v2, solver_ffr) = asymmetry_direction(&fx);
    ok &= report(2, "asymmetry direction", &v2);
    let (v3, oracle_ranges) = monotone_range(&fx, &solver_ffr);
    ok &= report(3, "monotone range", &v3);
    ok &= report(4, "solver-oracle agreement", &agreement(&fx, &solver_ffr[3], &oracle_ranges[3]));
    ok &= report(5, "amplitude trends", &amplitude_trends(&fx));
    ok &= report(6, "constancy", &constancy(&fx));
    ok &= report(7, "calibration quality", &calibration_quality(&fx));
    ok &= report(8, "oracle integrity", &integrity(&fx));
    println!("acceptance finished in {:.1} s", start.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}
