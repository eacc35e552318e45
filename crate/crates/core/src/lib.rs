//! Phasor model of injection-locked CMOS ring oscillators with amplitude
//! dependent stage laws, plus a behavioral time-domain oracle.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adler;
pub mod error;
pub mod oracle;
pub mod phasor;
pub mod stage;

pub use adler::{
    classic_phi0, locking_range, solve_at, solve_classic, solve_extended, sweep, sweep_ffr, sweep_finj,
    InjectionSpec, LockOutcome, LockSolution, LockingRange, Scenario, SolverKind, SolverOptions, SweepMode,
    SweepTable, UnlockReason,
};
pub use error::{Error, Result};
pub use phasor::{angle_between, phasor_add, phasor_from_polar, wrap_angle, Phasor};
pub use stage::{
    baseline_at, fit_linear_laws, k_coefficient, CalibrationSample, CalibrationTable, FreeRunningPoint,
    KAngleMode, LinearLaws, StageParams,
};
