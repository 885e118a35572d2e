//! Balanced three-phase signals, the dq0 rotating-frame transform, phasors
//! and complex power.
//!
//! All quantities are per-unit, angles are in radians and are never wrapped:
//! a phase angle that has advanced by several turns keeps its full value so
//! that path integrals over `dθ` stay continuous.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const SQRT_2_3: f64 = 0.816_496_580_927_726;
const SQRT_3_2: f64 = 1.224_744_871_391_589;

/// Default componentwise tolerance for phasor comparisons.
pub const PHASOR_EQ_TOL: f64 = 1e-9;

/// One time sample of a symmetric (balanced) three-phase signal
/// `A·(sin θ, sin(θ − 2π/3), sin(θ + 2π/3))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreePhaseSignal {
    amplitude: f64,
    pub phase_angle: f64,
}

impl ThreePhaseSignal {
    /// Returns `None` for a negative or non-finite amplitude.
    pub fn new(amplitude: f64, phase_angle: f64) -> Option<Self> {
        if amplitude.is_finite() && amplitude >= 0.0 && phase_angle.is_finite() {
            Some(Self {
                amplitude,
                phase_angle,
            })
        } else {
            None
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Instantaneous phase values `(a, b, c)`.
    pub fn abc(&self) -> [f64; 3] {
        let (a, th) = (self.amplitude, self.phase_angle);
        [
            a * th.sin(),
            a * (th - 2.0 * PI / 3.0).sin(),
            a * (th + 2.0 * PI / 3.0).sin(),
        ]
    }
}

/// Output of the dq0 transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dq0 {
    pub d: f64,
    pub q: f64,
    pub zero: f64,
}

/// Power-invariant dq0 transform matrix for a rotating reference at `phi`.
pub fn dq0_matrix(phi: f64) -> [[f64; 3]; 3] {
    let s = SQRT_2_3;
    let z = s * std::f64::consts::FRAC_1_SQRT_2;
    let (a, b) = (2.0 * PI / 3.0, -2.0 * PI / 3.0);
    [
        [s * phi.cos(), s * (phi - a).cos(), s * (phi - b).cos()],
        [s * phi.sin(), s * (phi - a).sin(), s * (phi - b).sin()],
        [z, z, z],
    ]
}

/// Applies the dq0 transform to raw phase values.
pub fn dq0_of_abc(abc: [f64; 3], reference_angle: f64) -> Dq0 {
    let t = dq0_matrix(reference_angle);
    let row = |r: [f64; 3]| r[0] * abc[0] + r[1] * abc[1] + r[2] * abc[2];
    Dq0 {
        d: row(t[0]),
        q: row(t[1]),
        zero: row(t[2]),
    }
}

/// dq0 transform of one sample of a balanced signal.
pub fn dq0_transform(signal: &ThreePhaseSignal, reference_angle: f64) -> Dq0 {
    dq0_of_abc(signal.abc(), reference_angle)
}

/// Complex phasor `X∠φ`. Stored in polar form with an unwrapped angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    magnitude: f64,
    angle: f64,
}

impl Phasor {
    pub const ZERO: Phasor = Phasor {
        magnitude: 0.0,
        angle: 0.0,
    };

    /// Builds `magnitude∠angle`. A negative magnitude is folded into the
    /// angle (`−X∠φ = X∠(φ + π)`).
    pub fn from_polar(magnitude: f64, angle: f64) -> Self {
        if magnitude < 0.0 {
            Self {
                magnitude: -magnitude,
                angle: angle + PI,
            }
        } else {
            Self { magnitude, angle }
        }
    }

    pub fn from_complex(z: Complex64) -> Self {
        Self {
            magnitude: z.norm(),
            angle: z.arg(),
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn re(&self) -> f64 {
        self.magnitude * self.angle.cos()
    }

    pub fn im(&self) -> f64 {
        self.magnitude * self.angle.sin()
    }

    pub fn to_complex(&self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }

    /// Componentwise comparison of the rectangular parts.
    pub fn approx_eq(&self, other: &Phasor, tol: f64) -> bool {
        (self.re() - other.re()).abs() <= tol && (self.im() - other.im()).abs() <= tol
    }
}

impl From<Complex64> for Phasor {
    fn from(z: Complex64) -> Self {
        Phasor::from_complex(z)
    }
}

/// `X̄ = x_q + j·x_d`.
pub fn phasor_from_dq(d: f64, q: f64) -> Phasor {
    Phasor::from_complex(Complex64::new(q, d))
}

/// Magnitude a balanced signal of amplitude `A` maps to under the
/// power-invariant transform.
pub fn phasor_magnitude_of_amplitude(amplitude: f64) -> f64 {
    SQRT_3_2 * amplitude
}

/// Active and reactive power, generation-positive.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComplexPower {
    pub active: f64,
    pub reactive: f64,
}

impl ComplexPower {
    pub fn new(active: f64, reactive: f64) -> Self {
        Self { active, reactive }
    }

    pub fn to_complex(&self) -> Complex64 {
        Complex64::new(self.active, self.reactive)
    }
}

/// Power generated in a branch: `S = −Ī*·V̄` with voltage and current in the
/// associated reference direction.
pub fn complex_power(voltage: &Phasor, current: &Phasor) -> ComplexPower {
    let s = -current.to_complex().conj() * voltage.to_complex();
    ComplexPower::new(s.re, s.im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aligned_reference_puts_everything_on_q() {
        let s = ThreePhaseSignal::new(1.0, 0.7).unwrap();
        let out = dq0_transform(&s, 0.7);
        assert!(out.d.abs() < 1e-14);
        assert!((out.q - 1.5f64.sqrt()).abs() < 1e-14);
        assert!(out.zero.abs() < 1e-14);
    }

    #[test]
    fn zero_amplitude_maps_to_zero() {
        let s = ThreePhaseSignal::new(0.0, 1.3).unwrap();
        let out = dq0_transform(&s, -0.4);
        assert_eq!((out.d, out.q, out.zero), (0.0, 0.0, 0.0));
    }

    #[test]
    fn matrix_product_matches_closed_form() {
        // A = 2, θ − φ = π/6: closed form √(3/2)·2·(sin, cos)(π/6).
        let phi = 0.25;
        let s = ThreePhaseSignal::new(2.0, phi + PI / 6.0).unwrap();
        let out = dq0_transform(&s, phi);
        assert!((out.d - 1.224_744_871_391_589).abs() < 1e-12);
        assert!((out.q - 2.121_320_343_559_642).abs() < 1e-12);
        assert!(out.zero.abs() < 1e-12);
    }

    #[test]
    fn negative_amplitude_rejected() {
        assert!(ThreePhaseSignal::new(-1.0, 0.0).is_none());
    }

    #[test]
    fn phasor_from_axes() {
        let p = phasor_from_dq(0.0, 1.0);
        assert!(p.approx_eq(&Phasor::from_polar(1.0, 0.0), PHASOR_EQ_TOL));
        assert!((p.angle()).abs() < 1e-15);
        let p = phasor_from_dq(1.0, 0.0);
        assert!((p.magnitude() - 1.0).abs() < 1e-15);
        assert!((p.angle() - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn dq_round_trip_recovers_angle_difference() {
        let s = ThreePhaseSignal::new(1.0, 1.0).unwrap();
        let out = dq0_transform(&s, 0.7);
        let p = phasor_from_dq(out.d, out.q);
        assert!((p.magnitude() - 1.5f64.sqrt()).abs() < 1e-12);
        assert!((p.angle() - 0.3).abs() < 1e-12);
        assert!((p.magnitude() - phasor_magnitude_of_amplitude(1.0)).abs() < 1e-12);
    }

    #[test]
    fn complex_power_sign_convention() {
        let v = Phasor::from_polar(1.0, 0.0);
        let i = Phasor::from_complex(-Complex64::new(0.5, -0.2));
        let s = complex_power(&v, &i);
        assert!((s.active - 0.5).abs() < 1e-15);
        assert!((s.reactive - 0.2).abs() < 1e-15);
        let s = complex_power(&v, &Phasor::ZERO);
        assert_eq!(s.active, 0.0);
        assert_eq!(s.reactive, 0.0);
    }

    #[test]
    fn unwrapped_angle_is_kept() {
        let p = Phasor::from_polar(1.0, 7.0);
        assert_eq!(p.angle(), 7.0);
        assert!((p.magnitude() - (p.re().powi(2) + p.im().powi(2)).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn balanced_signal_has_no_zero_sequence(a in 0.0f64..5.0, th in -20.0f64..20.0, phi in -20.0f64..20.0) {
            let out = dq0_transform(&ThreePhaseSignal::new(a, th).unwrap(), phi);
            prop_assert!(out.zero.abs() <= 1e-12);
            let norm = out.d * out.d + out.q * out.q;
            let expect = 1.5 * a * a;
            prop_assert!((norm - expect).abs() <= 1e-12 * expect.max(1e-300) + 1e-300);
        }

        #[test]
        fn transform_is_linear_under_shared_reference(
            a1 in 0.0f64..3.0, t1 in -6.0f64..6.0,
            a2 in 0.0f64..3.0, t2 in -6.0f64..6.0,
            phi in -6.0f64..6.0, sign in prop::bool::ANY,
        ) {
            let s1 = ThreePhaseSignal::new(a1, t1).unwrap();
            let s2 = ThreePhaseSignal::new(a2, t2).unwrap();
            let c = if sign { 1.0 } else { -1.0 };
            let (x1, x2) = (s1.abc(), s2.abc());
            let sum = [x1[0] + c * x2[0], x1[1] + c * x2[1], x1[2] + c * x2[2]];
            let lhs = dq0_of_abc(sum, phi);
            let (r1, r2) = (dq0_transform(&s1, phi), dq0_transform(&s2, phi));
            prop_assert!((lhs.d - (r1.d + c * r2.d)).abs() < 1e-12);
            prop_assert!((lhs.q - (r1.q + c * r2.q)).abs() < 1e-12);
            prop_assert!((lhs.zero - (r1.zero + c * r2.zero)).abs() < 1e-12);
        }

        #[test]
        fn magnitude_matches_rectangular_parts(m in 0.0f64..10.0, a in -50.0f64..50.0) {
            let p = Phasor::from_polar(m, a);
            prop_assert!((p.magnitude() - p.re().hypot(p.im())).abs() <= 1e-12 * (1.0 + m));
        }
    }
}
