//! Fundamental-tone phasors with angles in degrees.
//!
//! Angles live in the half-open interval (−180, 180]; a zero phasor always
//! carries angle 0 so that addition stays total.

use crate::error::{domain, Result};
use num_complex::Complex64;
use std::fmt;
use std::ops::Add;

/// Wrap an angle in degrees into (−180, 180].
pub fn wrap_angle(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return domain(format!("cannot wrap non-finite angle {x}"));
    }
    Ok(wrap_deg(x))
}

/// Infallible wrap for values already known to be finite.
pub(crate) fn wrap_deg(x: f64) -> f64 {
    let r = x.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

pub(crate) fn wrap_rad(x: f64) -> f64 {
    wrap_deg(x.to_degrees()).to_radians()
}

/// A raw angle value in degrees.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngleDeg(pub f64);

impl AngleDeg {
    pub fn wrapped(self) -> Result<AngleDeg> {
        wrap_angle(self.0).map(AngleDeg)
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }
}

/// Magnitude and angle of a single tone. Units of the magnitude are tracked
/// by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    magnitude: f64,
    angle: f64,
}

impl Phasor {
    pub const ZERO: Phasor = Phasor {
        magnitude: 0.0,
        angle: 0.0,
    };

    pub fn from_polar(magnitude: f64, angle_deg: f64) -> Result<Phasor> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return domain(format!("phasor magnitude must be finite and >= 0, got {magnitude}"));
        }
        if magnitude == 0.0 {
            return Ok(Phasor::ZERO);
        }
        Ok(Phasor {
            magnitude,
            angle: wrap_angle(angle_deg)?,
        })
    }

    pub fn from_complex(z: Complex64) -> Phasor {
        let magnitude = z.norm();
        if magnitude == 0.0 {
            return Phasor::ZERO;
        }
        Phasor {
            magnitude,
            angle: wrap_deg(z.arg().to_degrees()),
        }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle.to_radians())
    }

    pub fn magnitude(self) -> f64 {
        self.magnitude
    }

    /// Angle in degrees, in (−180, 180].
    pub fn angle(self) -> f64 {
        self.angle
    }

    pub fn is_zero(self) -> bool {
        self.magnitude == 0.0
    }
}

impl Add for Phasor {
    type Output = Phasor;

    fn add(self, rhs: Phasor) -> Phasor {
        phasor_add(self, rhs)
    }
}

impl fmt::Display for Phasor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}∠{}°", self.magnitude, self.angle)
    }
}

pub fn phasor_from_polar(magnitude: f64, angle_deg: f64) -> Result<Phasor> {
    Phasor::from_polar(magnitude, angle_deg)
}

pub fn phasor_add(a: Phasor, b: Phasor) -> Phasor {
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return b;
    }
    let z = a.to_complex() + b.to_complex();
    // residue of a cancellation at rounding level is a zero phasor
    if z.norm() <= 4.0 * f64::EPSILON * (a.magnitude + b.magnitude) {
        return Phasor::ZERO;
    }
    Phasor::from_complex(z)
}

/// Angle of `a` measured from `b`, wrapped into (−180, 180].
pub fn angle_between(a: Phasor, b: Phasor) -> Result<f64> {
    if a.is_zero() || b.is_zero() {
        return domain("angle between phasors is undefined for a zero operand");
    }
    Ok(wrap_deg(a.angle - b.angle))
}
