use ilro::oracle::*;
use ilro::{wrap_angle, Error};

fn wrap_deg(x: f64) -> f64 {
    wrap_angle(x).unwrap()
}

fn reference() -> OracleConfig {
    reference_design().config().unwrap()
}

fn max_abs_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max)
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn injected(cfg: &OracleConfig, eps: f64, ratio: f64) -> (OracleConfig, ilro::FreeRunningPoint) {
    let (fr, _) = free_running_point(cfg).unwrap();
    (cfg.with_injection(eps * fr.i_osc_fr, ratio * fr.f_fr), fr)
}

#[test]
fn branch_currents_satisfy_node_law() {
    let cfg = reference();
    let rec = simulate(&cfg).unwrap();
    assert!(kcl_residual(&rec, &cfg) < 1e-3, "{}", kcl_residual(&rec, &cfg));
    let (inj, _) = injected(&cfg, 0.2, 1.02);
    let rec = simulate(&inj).unwrap();
    assert!(kcl_residual(&rec, &inj) < 1e-3, "{}", kcl_residual(&rec, &inj));
}

#[test]
fn doubling_capacitance_halves_frequency() {
    let cfg = reference();
    let (fr, _) = free_running_point(&cfg).unwrap();
    // same step, every other time doubled: the ODE itself must rescale
    let mut slow = cfg.clone();
    slow.c_node *= 2.0;
    slow.t_settle *= 2.0;
    slow.t_measure *= 2.0;
    let (fr2, _) = free_running_point(&slow).unwrap();
    assert!((fr2.f_fr / fr.f_fr - 0.5).abs() < 0.5e-3, "{} {}", fr.f_fr, fr2.f_fr);
    assert!((fr2.v_osc_fr / fr.v_osc_fr - 1.0).abs() < 1e-3);
    // with the step scaled too, the samples are identical
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg.time_scaled(2.0 * cfg.c_node)).unwrap();
    assert_eq!(a.v, b.v);
    assert_eq!(b.dt, 2.0 * a.dt);
}

#[test]
fn complementary_nodes_are_antisymmetric() {
    let cfg = reference();
    let (inj, _) = injected(&cfg, 0.2, 0.97);
    for c in [cfg, inj] {
        let rec = simulate(&c).unwrap();
        for k in (0..rec.n_nodes()).step_by(2) {
            let d = max_abs_sum(&rec.v[k], &rec.v[complement_of(k)]);
            assert!(d < 1e-6, "node {k}: {d}");
        }
        let m = measure_operating_point(&rec, &c, &LockCriteria::default()).unwrap();
        let f = m.f;
        for k in (0..rec.n_nodes()).step_by(2) {
            let a = extract_fundamental(&rec.v[k], rec.t0, rec.dt, f).unwrap();
            let b = extract_fundamental(&rec.v[k ^ 1], rec.t0, rec.dt, f).unwrap();
            assert!((a.magnitude() / b.magnitude() - 1.0).abs() < 1e-6);
            assert!((wrap_deg(a.angle() - b.angle()).abs() - 180.0).abs() < 0.5);
        }
    }
}

#[test]
fn replay_is_bitwise() {
    let (inj, _) = injected(&reference(), 0.15, 1.03);
    let a = simulate(&inj).unwrap();
    let b = simulate(&inj).unwrap();
    let bits = |r: &WaveRecord| -> Vec<u64> {
        r.v.iter()
            .chain(&r.i_total)
            .flat_map(|x| x.iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let mut other = inj.clone();
    other.seed = 7;
    assert_ne!(bits(&a), bits(&simulate(&other).unwrap()));
}

#[test]
fn free_running_reference_is_nearly_sinusoidal() {
    let cfg = reference();
    let (fr, m) = free_running_point(&cfg).unwrap();
    assert!(m.h3_ratio < 0.15, "{}", m.h3_ratio);
    assert!(fr.f_fr > 6e9 && fr.f_fr < 8.5e9, "{}", fr.f_fr);
    assert!(fr.theta_iv_fr > 80.0 && fr.theta_iv_fr < 90.0, "{}", fr.theta_iv_fr);
    assert!(fr.theta_vi_fr < 0.0 && fr.theta_vi_fr > -10.0, "{}", fr.theta_vi_fr);
    for s in m.ring_phase_sums() {
        assert!((s + 90.0).abs() < 1.0, "{s}");
    }
    assert!(m.f_stderr / m.f < 1e-4);
}

#[test]
fn oscillation_is_sustained_at_steady_state() {
    let rec = simulate(&reference()).unwrap();
    let x = &rec.v[0];
    let fifth = x.len() / 5;
    let tail = peak(&x[x.len() - fifth..]);
    let before = peak(&x[x.len() - 2 * fifth..x.len() - fifth]);
    assert!((tail / before - 1.0).abs() < 0.01, "{before} {tail}");
}

#[test]
fn ring_below_loop_gain_unity_decays() {
    let mut cfg = reference();
    cfg.cc.g = 0.0;
    cfg.limiter.g = 0.0;
    cfg.main.g = 0.5 * cfg.g_out;
    let rec = simulate(&cfg).unwrap();
    assert!(peak(&rec.v[0]) < 1e-6, "{}", peak(&rec.v[0]));
    assert!(matches!(free_running_frequency(&rec), Err(Error::NoOscillation(_))));
}

#[test]
fn larger_capacitance_is_slower() {
    let cfg = reference();
    let (fr, _) = free_running_point(&cfg).unwrap();
    let grid = capacitance_grid(cfg.c_node, fr.f_fr, 6e9, 8.5e9, 10);
    let f: Vec<f64> = grid
        .iter()
        .map(|&c| free_running_point(&cfg.time_scaled(c)).unwrap().0.f_fr)
        .collect();
    assert_eq!(f.len(), 10);
    assert!(grid.windows(2).all(|w| w[1] > w[0]));
    assert!(f.windows(2).all(|w| w[1] < w[0]), "{f:?}");
    assert!((f[0] / 8.5e9 - 1.0).abs() < 1e-3 && (f[9] / 6e9 - 1.0).abs() < 1e-3);
}

#[test]
fn centre_injection_locks_and_doubled_frequency_does_not() {
    let cfg = reference();
    let crit = LockCriteria::default();
    let (inj, fr) = injected(&cfg, 0.2, 1.0);
    let rec = simulate(&inj).unwrap();
    let r = detect_lock(&rec, fr.f_fr, &crit).unwrap();
    assert!(r.locked && r.max_drift_deg_per_period < 0.05, "{r:?}");
    let (far, fr) = injected(&cfg, 0.2, 2.0);
    let rec = simulate(&far).unwrap();
    let r = detect_lock(&rec, 2.0 * fr.f_fr, &crit).unwrap();
    assert!(!r.locked, "{r:?}");
    assert!(matches!(measure_operating_point(&rec, &far, &crit), Err(Error::Refused(_))));
}

#[test]
fn locked_ring_follows_injection_progression() {
    let cfg = reference();
    let (inj, _) = injected(&cfg, 0.2, 0.95);
    let rec = simulate(&inj).unwrap();
    let m = measure_operating_point(&rec, &inj, &LockCriteria::default()).unwrap();
    let step = 180.0 - 180.0 / cfg.n_stages as f64;
    for w in m.stages.windows(2) {
        let d = wrap_deg(w[1].v_out.angle() - w[0].v_out.angle());
        assert!((d - step).abs() < 1.0, "{d}");
    }
    for s in m.ring_phase_sums() {
        assert!((s + 90.0).abs() < 1.0, "{s}");
    }
    let phi = m.phi_0().unwrap();
    assert!(phi.abs() < 90.0 + 0.2f64.asin().to_degrees());
}

#[test]
fn free_running_sweep_calibrates() {
    let cfg = reference();
    let cal = calibrate_band(&cfg, 6e9, 8.5e9, 10, &default_probes(), ilro::KAngleMode::ThetaIv).unwrap();
    assert_eq!(cal.table.samples.len(), 10);
    assert!(cal.sweep.windows(2).all(|w| w[1].1.f < w[0].1.f));
    let th: Vec<f64> = cal.sweep.iter().map(|(_, m)| m.theta_iv()).collect();
    let mean = th.iter().sum::<f64>() / th.len() as f64;
    assert!(th.iter().all(|t| (t - mean).abs() < 2.0));
    assert!(cal.skipped_probes.is_empty(), "{:?}", cal.skipped_probes);
    let res: Vec<f64> = cal.samples.iter().map(|s| s.theta_vi - cal.laws.theta.eval(s.v_in_amp)).collect();
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    assert!((rms - cal.laws.theta.rms).abs() < 1e-9);
    assert!(res.iter().all(|r| r.abs() < 3.0 * rms), "{res:?}");
}
