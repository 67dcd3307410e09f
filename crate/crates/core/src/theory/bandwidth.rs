//! Velocity passband half-width from the half-maximum matched-filter criterion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psf::{autocorr_theory, PsfParams};
use crate::scalar::Real;
use crate::theory::oracle::bisect;

/// Data representation the filter acts on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeMode {
    #[default]
    Pre,
    Post,
}

/// Half-width `δv` of the velocity passband along a mismatch direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityBandwidth<T = f64> {
    /// Angle of `Δv` from the lateral axis, rad.
    pub theta: T,
    pub delta_v: T,
    /// Root `κ_δv` of the half-max condition.
    pub kappa_delta_v: T,
}

impl<T: Real> VelocityBandwidth<T> {
    pub fn passband(&self, v_f: T) -> VelocityPassband<T> {
        VelocityPassband { v_f, delta_v: self.delta_v, interval: [v_f - self.delta_v, v_f + self.delta_v], kappa_delta_v: self.kappa_delta_v }
    }
}

/// Speeds passed by a filter tuned to `v_f`: `R(v_f) = [v_f − δv, v_f + δv]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityPassband<T = f64> {
    pub v_f: T,
    pub delta_v: T,
    pub interval: [T; 2],
    pub kappa_delta_v: T,
}

/// Solves `ψ(0, Δv) = ½ψ(0, 0)` for `|Δv|` along direction `theta`.
///
/// Pre mode solves `Γ̂(κ) + 2C_g/√(4+2κ²) = ½(½ + C_g)`; when `σr = λ`
/// the `C_g` terms are below 1e-17 and this is the reduced equation
/// `(4+2κ²)^{-1/2}·exp(−4π²κ²sin²θ/(2+κ²)) = ¼`. Post mode solves
/// `(1+κ²/2)^{-1/2} = ½`.
pub fn velocity_bandwidth<T: Real>(p: &PsfParams<T>, sigma_t: T, theta: T, mode: EnvelopeMode) -> Result<VelocityBandwidth<T>> {
    p.validate()?;
    if !(sigma_t > T::zero()) {
        return Err(Error::invalid("sigma_t must be positive"));
    }
    let th = theta.as_f64();
    if !(-1e-6..=std::f64::consts::FRAC_PI_2 + 1e-6).contains(&th) {
        return Err(Error::invalid(format!("theta must lie in [0, pi/2], got {th}")));
    }
    let th = th.clamp(0.0, std::f64::consts::FRAC_PI_2);
    let ratio = (p.sigma_r / p.lambda).as_f64();
    let c_g = autocorr_theory(p).c_g.as_f64();
    let s2 = th.sin().powi(2);
    let condition = |k: f64| -> f64 {
        let k2 = k * k;
        match mode {
            EnvelopeMode::Pre => {
                let g_hat = (4.0 + 2.0 * k2).powf(-0.5)
                    * (-4.0 * std::f64::consts::PI.powi(2) * k2 * ratio * ratio * s2 / (2.0 + k2)).exp();
                g_hat + 2.0 * c_g / (4.0 + 2.0 * k2).sqrt() - 0.5 * (0.5 + c_g)
            }
            EnvelopeMode::Post => (1.0 + 0.5 * k2).powf(-0.5) - 0.5,
        }
    };
    let kappa = bisect(condition, 0.0, 1e3, 1e-15)?;
    let kappa_t = T::lit(kappa);
    Ok(VelocityBandwidth { theta, delta_v: kappa_t * p.sigma_r / sigma_t, kappa_delta_v: kappa_t })
}
