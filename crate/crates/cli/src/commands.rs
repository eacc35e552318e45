//! The five workflows. Each writes its CSVs into the output directory.

use crate::compare::compare;
use crate::config::RunConfig;
use anyhow::{anyhow, Context};
use ilro::adler::{read_sweep_csv, write_sweep_csv, SweepRecord};
use ilro::oracle::{calibrate_band, free_running_point, MeasuredPoint, OracleConfig, OracleOutcome, OracleScenario};
use ilro::{
    baseline_at, locking_range, solve_at, sweep, CalibrationTable, FreeRunningPoint, InjectionSpec, KAngleMode,
    LockOutcome, LockingRange, Scenario, SolverKind, SweepMode,
};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

pub const CONFIG_ERROR: u8 = 2;
pub const MISSING_ARTIFACT: u8 = 3;
pub const COMPARE_FAILED: u8 = 4;

pub fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

pub type Outcome = std::result::Result<(), Failure>;

/// Resolved configuration plus command-line overrides.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub k_angle: Option<KAngleMode>,
    pub verbosity: u8,
}

impl Ctx {
    fn say(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbosity >= level {
            println!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn oracle_config(&self) -> Result<OracleConfig, Failure> {
        let o = self.cfg.oracle().map_err(|e| fail(CONFIG_ERROR, e))?;
        let mut cfg = o.design().config().map_err(|e| fail(CONFIG_ERROR, e.into()))?;
        cfg.seed = self.seed.unwrap_or(o.seed);
        Ok(cfg)
    }

    fn table(&self) -> Result<CalibrationTable, Failure> {
        let stem = &self.cfg.stage.table;
        for ext in ["csv", "toml"] {
            let p = self.path(&format!("{stem}.{ext}"));
            if !p.exists() {
                return Err(fail(
                    MISSING_ARTIFACT,
                    anyhow!("calibration file {} not found; run `ilro calibrate` first", p.display()),
                ));
            }
        }
        let mut t = CalibrationTable::load(&self.out, stem).context("loading calibration table")?;
        if let Some(mode) = self.k_angle {
            t.params.k_angle_mode = mode;
        }
        Ok(t)
    }

    fn scenario<'a>(&self, t: &'a CalibrationTable, mode: SweepMode, kind: SolverKind) -> Scenario<'a> {
        Scenario {
            table: t,
            params: &t.params,
            mode,
            fixed_hz: self.cfg.injection.fixed_hz(mode),
            kind,
            options: self.cfg.solver.options(),
        }
    }

    fn create_out(&self) -> Outcome {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(())
    }
}

fn kind(classic: bool) -> SolverKind {
    if classic {
        SolverKind::Classic
    } else {
        SolverKind::Extended
    }
}

pub fn calibrate(ctx: &Ctx) -> Outcome {
    let template = ctx.oracle_config()?;
    let st = &ctx.cfg.stage;
    let mode = ctx.k_angle.unwrap_or_default();
    ctx.create_out()?;
    let cal = calibrate_band(&template, st.band_lo.0, st.band_hi.0, st.points, &st.probes(), mode)
        .context("calibration sweep")?;
    cal.table.save(&ctx.out, &st.table)?;

    let mut w = csv::Writer::from_path(ctx.path("calibration_samples.csv"))?;
    w.write_record(["c_f", "f_hz", "v_in_v", "theta_vi_deg", "i_osc_a", "theta_vi_fit_deg", "i_osc_fit_a"])?;
    for s in &cal.samples {
        w.write_record([
            format!("{:e}", s.c),
            format!("{:e}", s.f),
            format!("{:e}", s.v_in_amp),
            format!("{:e}", s.theta_vi),
            format!("{:e}", s.i_osc_amp),
            format!("{:e}", cal.laws.theta.eval(s.v_in_amp)),
            format!("{:e}", cal.laws.current.eval(s.v_in_amp)),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(ctx.path("free_running.csv"))?;
    w.write_record(["c_f", "f_fr_hz", "theta_vi_deg", "theta_iv_deg", "v_osc_v", "i_osc_a", "k"])?;
    for (c, m) in &cal.sweep {
        let k = ilro::k_coefficient(m.i_t(), m.theta_iv(), m.f, m.v_osc(), *c)?;
        w.write_record([
            format!("{c:e}"),
            format!("{:e}", m.f),
            format!("{:e}", m.theta_vi()),
            format!("{:e}", m.theta_iv()),
            format!("{:e}", m.v_osc()),
            format!("{:e}", m.i_osc()),
            format!("{k:e}"),
        ])?;
    }
    w.flush()?;

    let p = cal.table.params;
    let (lo, hi) = cal.table.f_range();
    ctx.say(1, format!("calibrated {} points, f_fr {:.4e}..{:.4e} Hz", cal.table.samples.len(), lo, hi));
    ctx.say(
        1,
        format!("theta_vi law: r2={:.4} slope={:.6e} deg/V intercept={:.6e} deg", cal.laws.theta.r_squared, p.a_vi, p.theta_vi_0),
    );
    ctx.say(
        1,
        format!("current law:  r2={:.4} slope={:.6e} A/V intercept={:.6e} A", cal.laws.current.r_squared, p.g_m, p.i_osc_0),
    );
    ctx.say(1, format!("theta_iv={:.4} deg k_angle={}", p.theta_iv, p.k_angle_mode));
    if !cal.skipped_probes.is_empty() {
        ctx.say(1, format!("skipped unlocked probes: {:?}", cal.skipped_probes));
    }
    Ok(())
}

const SOLVE_HEADER: [&str; 14] = [
    "f_fr_hz",
    "f_inj_hz",
    "epsilon",
    "kind",
    "locked",
    "reason",
    "phi0_deg",
    "psi_deg",
    "theta_vi_deg",
    "theta_iv_deg",
    "i_t_a",
    "i_osc_a",
    "v_osc_v",
    "residual",
];

fn solve_fields(f_fr: f64, f_inj: f64, epsilon: f64, kind: SolverKind, o: &LockOutcome) -> Vec<(&'static str, String)> {
    let kind = match kind {
        SolverKind::Classic => "classic",
        SolverKind::Extended => "extended",
        SolverKind::Frozen => "frozen",
    };
    let mut v = vec![f_fr, f_inj].into_iter().map(|x| format!("{x:e}")).collect::<Vec<_>>();
    v.push(format!("{epsilon}"));
    v.push(kind.into());
    match o {
        LockOutcome::Locked(s) => {
            v.push("1".into());
            v.push(String::new());
            for x in [s.phi_0, s.psi, s.theta_vi, s.theta_iv, s.i_t_mag, s.i_osc_mag, s.v_osc_mag, s.residual_norm] {
                v.push(format!("{x:e}"));
            }
        }
        LockOutcome::Unlocked { reason } => {
            v.push("0".into());
            v.push(reason.to_string());
            v.extend((0..8).map(|_| String::new()));
        }
    }
    SOLVE_HEADER.iter().copied().zip(v).collect()
}

pub fn solve(ctx: &Ctx, f_fr: f64, f_inj: f64, epsilon: f64, classic: bool) -> Outcome {
    let t = ctx.table()?;
    let base = baseline_at(&t, f_fr)?;
    let inj = InjectionSpec::new(epsilon, f_inj);
    let kind = kind(classic);
    let out = solve_at(&base, &inj, &t.params, kind, None, &ctx.cfg.solver.options())?;
    let fields = solve_fields(f_fr, f_inj, epsilon, kind, &out);
    let shown: Vec<String> = fields
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!("{}", shown.join(" "));
    ctx.create_out()?;
    let mut w = csv::Writer::from_path(ctx.path("solve.csv"))?;
    w.write_record(SOLVE_HEADER)?;
    w.write_record(fields.iter().map(|(_, v)| v))?;
    w.flush()?;
    Ok(())
}

fn oracle_record(x: f64, epsilon: f64, o: &OracleOutcome) -> SweepRecord {
    let m: Option<&MeasuredPoint> = o.point();
    SweepRecord {
        sweep_var_hz: x,
        epsilon,
        locked: m.is_some(),
        phi0_deg: m.and_then(|m| m.phi_0()),
        psi_deg: m.map(|m| m.psi()),
        theta_vi_deg: m.map(|m| m.theta_vi()),
        i_t_a: m.map(|m| m.i_t()),
        i_osc_a: m.map(|m| m.i_osc()),
        v_osc_v: m.map(|m| m.v_osc()),
        residual: None,
        source: Some("oracle".into()),
    }
}

struct OracleRun {
    template: OracleConfig,
    reference: FreeRunningPoint,
}

impl OracleRun {
    fn new(ctx: &Ctx) -> Result<Self, Failure> {
        let template = ctx.oracle_config()?;
        let (reference, _) = free_running_point(&template).context("oracle free-running reference")?;
        Ok(OracleRun { template, reference })
    }

    fn scenario(&self, ctx: &Ctx, mode: SweepMode) -> Result<OracleScenario<'_>, Failure> {
        let o = ctx.cfg.oracle().map_err(|e| fail(CONFIG_ERROR, e))?;
        let mut sc = OracleScenario::new(&self.template, self.reference, mode, ctx.cfg.injection.fixed_hz(mode));
        sc.criteria = o.criteria(self.reference.v_osc_fr);
        Ok(sc)
    }
}

/// Per-panel projections of a sweep table.
fn write_panels(dir: &Path, mode: SweepMode, records: &[SweepRecord]) -> Outcome {
    let panels: [(&str, [&str; 2]); 3] = [
        ("phase", ["phi0_deg", "psi_deg"]),
        ("amplitude", ["v_osc_v", "i_t_a"]),
        ("angle", ["theta_vi_deg", "i_osc_a"]),
    ];
    for (name, cols) in panels {
        let mut w = csv::Writer::from_path(dir.join(format!("sweep_{mode}_{name}.csv")))?;
        w.write_record(["sweep_var_hz", "epsilon", "source", cols[0], cols[1]])?;
        for r in records.iter().filter(|r| r.locked) {
            let (a, b) = match name {
                "phase" => (r.phi0_deg, r.psi_deg),
                "amplitude" => (r.v_osc_v, r.i_t_a),
                _ => (r.theta_vi_deg, r.i_osc_a),
            };
            let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
            w.write_record([
                format!("{:e}", r.sweep_var_hz),
                format!("{}", r.epsilon),
                r.source.clone().unwrap_or_else(|| "solver".into()),
                opt(a),
                opt(b),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn sweep_cmd(ctx: &Ctx, mode: SweepMode, with_oracle: bool, classic: bool) -> Outcome {
    let t = ctx.table()?;
    let oracle = if with_oracle { Some(OracleRun::new(ctx)?) } else { None };
    let sc = ctx.scenario(&t, mode, kind(classic));
    let grid = ctx.cfg.sweep.grid();
    let eps = &ctx.cfg.injection.epsilons;
    let table = sweep(&sc, eps, &grid)?;
    let mut records = table.records();
    if let Some(run) = &oracle {
        let osc = run.scenario(ctx, mode)?;
        for r in &mut records {
            r.source = Some("solver".into());
        }
        for &e in eps {
            let rows = osc.sweep(e, &table.rows.iter().filter(|r| r.epsilon == e).map(|r| r.sweep_var_hz).collect::<Vec<_>>())?;
            records.extend(rows.iter().map(|(x, o)| oracle_record(*x, e, o)));
        }
    }
    ctx.create_out()?;
    let path = ctx.path(&format!("sweep_{mode}.csv"));
    write_sweep_csv(&path, &records)?;
    write_panels(&ctx.out, mode, &records)?;
    for r in &records {
        let status = if r.locked { format!("phi0={:?} v_osc={:?}", r.phi0_deg, r.v_osc_v) } else { "unlocked".into() };
        ctx.say(2, format!("{} eps={} f={:e} {status}", r.source.as_deref().unwrap_or("solver"), r.epsilon, r.sweep_var_hz));
    }
    for &e in eps {
        let count = |src: &str| {
            records
                .iter()
                .filter(|r| r.epsilon == e && r.locked && r.source.as_deref().unwrap_or("solver") == src)
                .count()
        };
        let mut line = format!("epsilon {e}: solver locked {} of {}", count("solver"), grid.len());
        if oracle.is_some() {
            line += &format!(", oracle locked {}", count("oracle"));
        }
        ctx.say(1, line);
    }
    ctx.say(1, format!("wrote {}", path.display()));
    Ok(())
}

fn range_fields(source: &str, r: &LockingRange) -> [String; 8] {
    [
        source.into(),
        format!("{}", r.epsilon),
        format!("{:e}", r.f_lo),
        format!("{:e}", r.f_hi),
        format!("{:e}", r.width),
        format!("{:e}", r.asymmetry),
        format!("{:e}", r.f_ref),
        u8::from(r.clipped).to_string(),
    ]
}

pub fn locking_range_cmd(ctx: &Ctx, mode: SweepMode, classic: bool, with_oracle: bool) -> Outcome {
    let t = ctx.table()?;
    let oracle = if with_oracle { Some(OracleRun::new(ctx)?) } else { None };
    let kind = kind(classic);
    let sc = ctx.scenario(&t, mode, kind);
    ctx.create_out()?;
    let path = ctx.path(&format!("locking_range_{mode}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["source", "epsilon", "f_lo_hz", "f_hi_hz", "width_hz", "asymmetry", "f_ref_hz", "clipped"])?;
    let label = if classic { "classic" } else { "solver" };
    for &e in &ctx.cfg.injection.epsilons {
        let r = locking_range(&sc, e)?;
        w.write_record(range_fields(label, &r))?;
        let mut line = format!(
            "epsilon {e}: f_lo={:.6e} f_hi={:.6e} width={:.6e} asymmetry={:+.4}{}",
            r.f_lo,
            r.f_hi,
            r.width,
            r.asymmetry,
            if r.clipped { " clipped" } else { "" }
        );
        if let Some(run) = &oracle {
            let osc = run.scenario(ctx, mode)?;
            let tol = ctx.cfg.oracle().map_err(|e| fail(CONFIG_ERROR, e))?.edge_tol.0;
            let o = osc.locking_range(e, tol)?;
            w.write_record(range_fields("oracle", &o))?;
            line += &format!(
                "; oracle {:.6e}..{:.6e}, edge deviation lo {:+.4} hi {:+.4} of width",
                o.f_lo,
                o.f_hi,
                (r.f_lo - o.f_lo) / o.width,
                (r.f_hi - o.f_hi) / o.width
            );
        }
        ctx.say(1, line);
    }
    w.flush()?;
    ctx.say(1, format!("wrote {}", path.display()));
    Ok(())
}

fn read_table(p: &Path) -> Result<Vec<SweepRecord>, Failure> {
    if !p.exists() {
        return Err(fail(MISSING_ARTIFACT, anyhow!("table {} not found", p.display())));
    }
    read_sweep_csv(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::from)
}

/// One joined table is split by its `source` column; two tables are taken
/// as solver then oracle.
pub fn compare_cmd(ctx: &Ctx, tables: &[PathBuf]) -> Outcome {
    let (solver, oracle) = match tables {
        [joined] => {
            let all = read_table(joined)?;
            let (o, s): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.source.as_deref() == Some("oracle"));
            if o.is_empty() {
                return Err(fail(COMPARE_FAILED, anyhow!("{} holds no oracle rows", joined.display())));
            }
            (s, o)
        }
        [a, b] => (read_table(a)?, read_table(b)?),
        _ => return Err(fail(CONFIG_ERROR, anyhow!("compare takes one joined table or two tables"))),
    };
    let report = compare(&solver, &oracle, &ctx.cfg.compare).map_err(|e| fail(COMPARE_FAILED, e))?;
    ctx.create_out()?;
    let text = report.text();
    fs::write(ctx.path("compare.txt"), &text)?;
    report.write_csv(&ctx.path("compare.csv"))?;
    if ctx.verbosity >= 1 {
        print!("{text}");
    }
    if report.any_disjoint() {
        return Err(fail(COMPARE_FAILED, anyhow!("locked bands are disjoint")));
    }
    if !report.passed() {
        return Err(fail(COMPARE_FAILED, anyhow!("agreement thresholds exceeded")));
    }
    Ok(())
}
