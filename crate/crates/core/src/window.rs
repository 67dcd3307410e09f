//! Sampled temporal windows w(t).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Shape of the temporal window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Gaussian,
}

impl WindowKind {
    /// Continuous-time frequency response `W(Ω)` of the unit-mass window.
    pub fn transfer<T: Real>(self, sigma_t: T, omega: T) -> T {
        match self {
            WindowKind::Gaussian => (-(sigma_t * omega).powi(2) * T::lit(0.5)).exp(),
        }
    }
}

/// Symmetric window sampled at multiples of `dt`, normalized so `Σ w·dt = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledWindow<T = f64> {
    pub sigma_t: T,
    pub dt: T,
    pub half_width: usize,
    /// `weights[n + half_width] = w(n·dt)`.
    pub weights: Vec<T>,
}

impl<T: Real> SampledWindow<T> {
    /// Weight at lag `n` samples, zero outside the support.
    pub fn weight(&self, n: isize) -> T {
        let h = self.half_width as isize;
        if n < -h || n > h {
            T::zero()
        } else {
            self.weights[(n + h) as usize]
        }
    }

    pub fn lags(&self) -> impl Iterator<Item = (isize, T)> + '_ {
        let h = self.half_width as isize;
        self.weights.iter().enumerate().map(move |(i, &w)| (i as isize - h, w))
    }

    pub fn mass(&self) -> T {
        self.weights.iter().copied().sum::<T>() * self.dt
    }
}

/// Gaussian window truncated at `±trunc_sigmas·σt`.
pub fn gaussian_window<T: Real>(sigma_t: T, dt: T, trunc_sigmas: T) -> Result<SampledWindow<T>> {
    if !(sigma_t > T::zero()) || !sigma_t.is_finite() {
        return Err(Error::invalid(format!("sigma_t must be positive, got {sigma_t}")));
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(trunc_sigmas >= T::lit(3.0)) || !trunc_sigmas.is_finite() {
        return Err(Error::invalid(format!("trunc_sigmas must be >= 3, got {trunc_sigmas}")));
    }
    // Small tolerance so that exact ratios like 4·0.5/0.01 do not round up.
    let hw = (trunc_sigmas * sigma_t / dt * (T::one() - T::lit(1e-12))).ceil();
    let half_width = hw.to_usize().ok_or_else(|| Error::invalid("window too long"))?;
    let norm = T::one() / (sigma_t * T::TAU().sqrt());
    let weights: Vec<T> = (0..=2 * half_width)
        .map(|i| {
            let n = i.abs_diff(half_width);
            let t = T::from_count(n) * dt;
            norm * (-(t / sigma_t).powi(2) * T::lit(0.5)).exp()
        })
        .collect();
    let mass = weights.iter().copied().sum::<T>() * dt;
    let weights = weights.into_iter().map(|w| w / mass).collect();
    Ok(SampledWindow { sigma_t, dt, half_width, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_default_window() {
        let w = gaussian_window(0.5f64, 0.01, 4.0).unwrap();
        assert_eq!(w.half_width, 200);
        assert!((w.mass() - 1.0).abs() < 1e-12);
        let peak = w.weight(0);
        assert!(w.weights.iter().all(|&v| v <= peak));
        // Unit-mass Gaussian peak 1/(σ√2π); truncation at 4σ moves it by < 1e-4.
        let continuous = 1.0 / (0.5 * std::f64::consts::TAU.sqrt());
        assert!(((peak - continuous) / continuous).abs() < 1e-4);
    }

    #[test]
    fn symmetric() {
        let w = gaussian_window(0.037f64, 0.01, 5.0).unwrap();
        for n in 0..=w.half_width as isize {
            assert_eq!(w.weight(n), w.weight(-n));
        }
    }

    #[test]
    fn collapses_to_delta() {
        let w = gaussian_window(0.001f64, 0.01, 4.0).unwrap();
        assert_eq!(w.half_width, 1);
        assert!((w.weight(0) * 0.01 - 1.0).abs() < 1e-12);
        assert!(w.weight(1) * 0.01 < 1e-20);
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(gaussian_window(0.0f64, 0.01, 4.0).is_err());
        assert!(gaussian_window(-1.0f64, 0.01, 4.0).is_err());
        assert!(gaussian_window(0.5f64, 0.01, 2.0).is_err());
    }

    #[test]
    fn transfer_matches_formula() {
        let w = WindowKind::Gaussian.transfer(0.5f64, 2.0);
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
    }
}
