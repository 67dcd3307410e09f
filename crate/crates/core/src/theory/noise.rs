//! Noise reduction and acquisition-time bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Band-limited white noise model: flat PSD `N₀` on `|k| ≤ k_G`, `|Ω| ≤ k_G·v₀,max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec<T = f64> {
    pub n0: T,
    /// Spatial bandlimit, rad/mm.
    pub k_g: T,
    /// Maximum flow speed, mm/s.
    pub v0_max: T,
    /// Frame rate, Hz.
    pub frame_rate_f: T,
}

impl<T: Real> NoiseSpec<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n0", self.n0), ("k_g", self.k_g), ("v0_max", self.v0_max), ("frame_rate_f", self.frame_rate_f)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Temporal bandlimit `Ω_max = k_G·v₀,max`, rad/s.
    pub fn omega_max(&self) -> T {
        self.k_g * self.v0_max
    }

    pub fn period(&self) -> T {
        self.frame_rate_f.recip()
    }

    /// Noise power before filtering, `N₀·Ω_max·k_G²/(4π²)`.
    pub fn input_power(&self) -> T {
        self.n0 * self.omega_max() * self.k_g * self.k_g / (T::lit(4.0) * T::PI() * T::PI())
    }
}

/// Lower bounds on the noise reduction factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NrfBound<T = f64> {
    /// `(2/√π)·k_G·v₀,max·σt`.
    pub nrf: T,
    pub nrf_db: T,
    /// `2√π·σt·F`, valid when the frame rate sits at the Nyquist rate `Ω_max = πF`.
    pub nrf_from_frame_rate: T,
}

pub fn nrf_bound<T: Real>(n: &NoiseSpec<T>, sigma_t: T) -> Result<NrfBound<T>> {
    n.validate()?;
    if !(sigma_t > T::zero()) {
        return Err(Error::invalid("sigma_t must be positive"));
    }
    let two = T::lit(2.0);
    let sqrt_pi = T::PI().sqrt();
    let nrf = two / sqrt_pi * n.omega_max() * sigma_t;
    Ok(NrfBound { nrf, nrf_db: T::lit(10.0) * nrf.log10(), nrf_from_frame_rate: two * sqrt_pi * sigma_t * n.frame_rate_f })
}

/// Inputs of the minimum acquisition time bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcqBoundInput<T = f64> {
    /// Volumetric flow rate, mm³/s.
    pub flow_rate_q: T,
    pub diameter_d: T,
    /// Bubbles per mm³.
    pub c_mb: T,
    /// Image pixel size, mm.
    pub i_pix: T,
}

impl<T: Real> AcqBoundInput<T> {
    /// Warning text when the pixel is not small compared with the vessel.
    pub fn pixel_warning(&self) -> Option<String> {
        (self.i_pix > self.diameter_d / T::lit(5.0))
            .then(|| format!("pixel size {} mm exceeds a fifth of the diameter {} mm", self.i_pix, self.diameter_d))
    }
}

/// `T_acq ≥ [(Q/d)·C_MB·I_pix]⁻¹` in seconds.
pub fn acquisition_time_bound<T: Real>(a: &AcqBoundInput<T>) -> Result<T> {
    for (name, v) in [("flow_rate_q", a.flow_rate_q), ("diameter_d", a.diameter_d), ("c_mb", a.c_mb), ("i_pix", a.i_pix)] {
        if !(v > T::zero()) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok((a.flow_rate_q / a.diameter_d * a.c_mb * a.i_pix).recip())
}
