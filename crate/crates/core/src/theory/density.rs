//! Apparent bubble densities of a projected cylindrical vessel.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::phantom::VesselSpec;
use crate::scalar::Real;

/// Joint density value; exactly at `v = v_max(ρ)` the density is infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum JointDensity<T = f64> {
    Finite(T),
    Singular,
}

impl<T: Real> JointDensity<T> {
    /// Numeric value, `+∞` for the singular case.
    pub fn value(self) -> T {
        match self {
            JointDensity::Finite(v) => v,
            JointDensity::Singular => T::infinity(),
        }
    }

    pub fn is_singular(self) -> bool {
        matches!(self, JointDensity::Singular)
    }
}

/// Projected density `d₂(ρ) = 2·C_MB·√(R² − ρ²)`, zero outside the vessel.
pub fn apparent_density<T: Real>(rho: T, v: &VesselSpec<T>) -> T {
    let r2 = v.radius_r * v.radius_r - rho * rho;
    if r2 <= T::zero() {
        return T::zero();
    }
    T::lit(2.0) * v.c_mb * r2.sqrt()
}

/// Joint density of projected position and speed,
/// `d₂(v,ρ) = (C_MB·R/v₀)·[(1 − v/v_max(ρ))(1 − ρ²/R²)]^{-1/2}` on `0 ≤ v < v_max(ρ)`.
pub fn joint_density<T: Real>(speed: T, rho: T, v: &VesselSpec<T>) -> JointDensity<T> {
    let one = T::one();
    let frac = one - (rho / v.radius_r).powi(2);
    let vmax = v.flow_speed(rho);
    if frac <= T::zero() || speed < T::zero() || speed > vmax || v.v0 <= T::zero() {
        return JointDensity::Finite(T::zero());
    }
    let rest = one - speed / vmax;
    if rest <= T::zero() {
        return JointDensity::Singular;
    }
    JointDensity::Finite(v.c_mb * v.radius_r / v.v0 / (rest * frac).sqrt())
}

/// Density of bubbles passed by a filter tuned to `v_f` with half-width `δv`:
/// the joint density integrated over `[v_f − δv, v_f + δv] ∩ [0, v_max(ρ)]`,
/// `2C_MB·[√((1 − a/v_max)(R² − ρ²)) − √((1 − b/v_max)(R² − ρ²))]`.
pub fn filtered_density<T: Real>(rho: T, v_f: T, delta_v: T, v: &VesselSpec<T>) -> Result<T> {
    if !(delta_v > T::zero()) {
        return Err(Error::invalid(format!("delta_v must be positive, got {delta_v}")));
    }
    let r2 = v.radius_r * v.radius_r - rho * rho;
    if r2 <= T::zero() {
        return Ok(T::zero());
    }
    let vmax = v.flow_speed(rho);
    let (lo, hi) = (v_f - delta_v, v_f + delta_v);
    if vmax <= T::zero() {
        // All bubbles are static.
        return Ok(if lo <= T::zero() && hi >= T::zero() { apparent_density(rho, v) } else { T::zero() });
    }
    let a = lo.max(T::zero());
    let b = hi.min(vmax);
    if a >= b {
        return Ok(T::zero());
    }
    let term = |s: T| ((T::one() - s / vmax) * r2).max(T::zero()).sqrt();
    Ok(T::lit(2.0) * v.c_mb * (term(a) - term(b)))
}

/// `∫_a^b d₂(v,ρ) dv` by quadrature in `u = √(1 − v/v_max)`, which removes
/// the endpoint singularity.
pub fn joint_density_integral(rho: f64, a: f64, b: f64, v: &VesselSpec<f64>, rel_tol: f64) -> f64 {
    let vmax = v.flow_speed(rho);
    if vmax <= 0.0 {
        return 0.0;
    }
    let a = a.max(0.0);
    let b = b.min(vmax);
    if a >= b {
        return 0.0;
    }
    let ua = (1.0 - a / vmax).sqrt();
    let ub = (1.0 - b / vmax).max(0.0).sqrt();
    // v = v_max(1 − u²), dv = −2·v_max·u du.
    let f = |u: f64| {
        let speed = vmax * (1.0 - u * u);
        if u == 0.0 {
            // Limit of d₂·2·v_max·u as u → 0.
            let frac = 1.0 - (rho / v.radius_r).powi(2);
            return v.c_mb * v.radius_r / v.v0 / frac.sqrt() * 2.0 * vmax;
        }
        joint_density(speed, rho, v).value() * 2.0 * vmax * u
    };
    super::oracle::integrate(f, ub, ua, rel_tol, 0.0).value
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vessel() -> VesselSpec<f64> {
        VesselSpec { radius_r: 1.0, v0: 10.0, c_mb: 1000.0, ..VesselSpec::default() }
    }

    #[test]
    fn apparent_density_values() {
        let v = vessel();
        assert!((apparent_density(0.0, &v) - 2000.0).abs() < 1e-12);
        assert_eq!(apparent_density(1.0, &v), 0.0);
        assert_eq!(apparent_density(-1.0, &v), 0.0);
        assert!((apparent_density(0.5, &v) - 2000.0 * 0.75f64.sqrt()).abs() < 1e-9);
        assert!((apparent_density(0.5, &v) - 1732.05).abs() < 0.01);
    }

    #[test]
    fn joint_density_values() {
        let v = vessel();
        assert_eq!(joint_density(0.0, 0.0, &v), JointDensity::Finite(100.0));
        assert_eq!(joint_density(11.0, 0.0, &v), JointDensity::Finite(0.0));
        assert!(joint_density(10.0, 0.0, &v).is_singular());
        assert!(joint_density(7.5, 0.5, &v).value().is_infinite());
    }

    #[test]
    fn joint_density_marginalizes() {
        let v = vessel();
        for i in 0..41 {
            let rho = -0.99 + i as f64 * 0.0495;
            let integral = joint_density_integral(rho, 0.0, v.flow_speed(rho), &v, 1e-10);
            let exact = apparent_density(rho, &v);
            assert!(((integral - exact) / exact).abs() < 1e-4, "rho {rho}: {integral} vs {exact}");
        }
    }

    #[test]
    fn filtered_density_matches_passband_integral() {
        let v = vessel();
        for &(vf, dv) in &[(2.5, 1.2), (9.0, 2.0), (0.5, 1.0), (6.0, 0.3)] {
            for i in 0..25 {
                let rho = -0.96 + i as f64 * 0.08;
                let closed = filtered_density(rho, vf, dv, &v).unwrap();
                let numeric = joint_density_integral(rho, vf - dv, vf + dv, &v, 1e-12);
                assert!((closed - numeric).abs() <= 1e-6 * numeric.abs().max(1e-300), "{vf} {dv} {rho}");
            }
        }
    }

    #[test]
    fn filtered_density_gates() {
        let v = vessel();
        assert_eq!(filtered_density(0.9, 5.0, 1.0, &v).unwrap(), 0.0);
        assert!(filtered_density(0.0, 5.0, 0.0, &v).is_err());
        // Tuned to the centreline speed: nothing survives near the walls.
        let edge = filtered_density(0.95, 10.0, 1.0, &v).unwrap();
        let center = filtered_density(0.0, 10.0, 1.0, &v).unwrap();
        assert_eq!(edge, 0.0);
        assert!(center > 0.0);
    }
}
