//! Gaussian-envelope point-spread-function models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image};
use crate::scalar::Real;

/// Envelope width `σr` and axial wavelength `λ`, both in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfParams<T = f64> {
    pub sigma_r: T,
    pub lambda: T,
}

impl<T: Real> PsfParams<T> {
    pub fn new(sigma_r: T, lambda: T) -> Result<Self> {
        let p = Self { sigma_r, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_r > T::zero() && self.lambda > T::zero()) || !self.sigma_r.is_finite() || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "psf parameters must be positive, got sigma_r={}, lambda={}",
                self.sigma_r, self.lambda
            )));
        }
        Ok(())
    }

    /// `g_e(0) = 1/(2πσr²)`.
    pub fn g_e_peak(&self) -> T {
        T::one() / (T::TAU() * self.sigma_r * self.sigma_r)
    }

    /// Axial carrier wavenumber `2π/λ`.
    pub fn k_z(&self) -> T {
        T::TAU() / self.lambda
    }
}

/// Transverse-oscillation filter parameters: lateral wavelength `λx` and width `σx` (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToParams<T = f64> {
    pub lambda_x: T,
    pub sigma_x: T,
}

impl<T: Real> ToParams<T> {
    pub fn new(lambda_x: T, sigma_x: T) -> Result<Self> {
        let t = Self { lambda_x, sigma_x };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_x > T::zero() && self.sigma_x > T::zero()) || !self.lambda_x.is_finite() || !self.sigma_x.is_finite() {
            return Err(Error::invalid(format!(
                "TO parameters must be positive, got lambda_x={}, sigma_x={}",
                self.lambda_x, self.sigma_x
            )));
        }
        Ok(())
    }

    /// Filter centre `k0x = 2π/λx`.
    pub fn k0x(&self) -> T {
        T::TAU() / self.lambda_x
    }

    /// Oscillation wavelength of the filtered PSF, `(1+σr²/σx²)·λx`.
    pub fn lambda_x_tilde(&self, p: &PsfParams<T>) -> T {
        (T::one() + (p.sigma_r / self.sigma_x).powi(2)) * self.lambda_x
    }

    /// Lateral wavenumber of the filtered PSF, `2π/λ̃x`.
    pub fn k1x(&self, p: &PsfParams<T>) -> T {
        T::TAU() / self.lambda_x_tilde(p)
    }

    /// Factor by which the lateral envelope widens, `√(1+σx²/σr²)`.
    pub fn lateral_stretch(&self, p: &PsfParams<T>) -> T {
        (T::one() + (self.sigma_x / p.sigma_r).powi(2)).sqrt()
    }

    /// Amplitude `C^TO` of the filtered envelope.
    pub fn c_to(&self, p: &PsfParams<T>) -> T {
        let ratio = T::one() + (p.sigma_r / self.sigma_x).powi(2);
        let expo = T::lit(2.0) * T::PI() * T::PI() * p.sigma_r * p.sigma_r / self.lambda_x_tilde(p).powi(2) * ratio;
        T::lit(2.0) / self.lateral_stretch(p) * (-expo).exp()
    }

    /// Frequency response `G_T(k_x)`.
    pub fn gain(&self, kx: T) -> T {
        let k0 = self.k0x();
        let s2 = self.sigma_x * self.sigma_x * T::lit(0.5);
        (-s2 * (kx - k0).powi(2)).exp() + (-s2 * (kx + k0).powi(2)).exp()
    }
}

/// Which PSF model to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PsfMode<T = f64> {
    /// Envelope-detected Gaussian.
    Post,
    /// Gaussian envelope with axial carrier.
    Pre,
    /// Pre-envelope PSF after transverse-oscillation filtering.
    To(ToParams<T>),
}

/// Post-envelope PSF `g_e(r) = exp(−|r|²/2σr²)/(2πσr²)`.
pub fn eval_post_envelope<T: Real>(p: &PsfParams<T>, x: T, z: T) -> T {
    let s2 = p.sigma_r * p.sigma_r;
    p.g_e_peak() * (-(x * x + z * z) / (s2 + s2)).exp()
}

/// Pre-envelope PSF `g_e(r)·cos(2πz/λ)`.
pub fn eval_pre_envelope<T: Real>(p: &PsfParams<T>, x: T, z: T) -> T {
    eval_post_envelope(p, x, z) * (p.k_z() * z).cos()
}

/// Envelope of the TO-filtered PSF.
pub fn eval_to_envelope<T: Real>(p: &PsfParams<T>, t: &ToParams<T>, x: T, z: T) -> T {
    t.c_to(p) * eval_post_envelope(p, x / t.lateral_stretch(p), z)
}

/// TO-filtered PSF `g_e^TO(r)·cos(2πz/λ)·cos(2πx/λ̃x)`.
pub fn eval_to_psf<T: Real>(p: &PsfParams<T>, t: &ToParams<T>, x: T, z: T) -> T {
    eval_to_envelope(p, t, x, z) * (p.k_z() * z).cos() * (t.k1x(p) * x).cos()
}

/// Evaluates the PSF of `mode` at `(x, z)`.
pub fn eval_psf<T: Real>(p: &PsfParams<T>, mode: &PsfMode<T>, x: T, z: T) -> T {
    match mode {
        PsfMode::Post => eval_post_envelope(p, x, z),
        PsfMode::Pre => eval_pre_envelope(p, x, z),
        PsfMode::To(t) => eval_to_psf(p, t, x, z),
    }
}

/// Samples the PSF centred at the origin over `grid`.
pub fn render_psf<T: Real>(p: &PsfParams<T>, grid: &Grid2D<T>, mode: &PsfMode<T>) -> Image<T> {
    Image::from_fn(*grid, |x, z| eval_psf(p, mode, x, z))
}

/// Separable 1D factors of a PSF: `g(x, z) = fx(x)·fz(z)`.
pub(crate) struct SeparablePsf<T> {
    pub(crate) inv2sx2: T,
    pub(crate) inv2sz2: T,
    pub(crate) amp: T,
    pub(crate) kx: Option<T>,
    pub(crate) kz: Option<T>,
    /// Support half-widths beyond which the PSF is below `1e-16` of peak.
    pub(crate) reach_x: T,
    pub(crate) reach_z: T,
}

impl<T: Real> SeparablePsf<T> {
    pub(crate) fn new(p: &PsfParams<T>, mode: &PsfMode<T>) -> Self {
        let two = T::lit(2.0);
        let reach = T::lit(8.6);
        let (sx, amp, kx, kz) = match mode {
            PsfMode::Post => (p.sigma_r, p.g_e_peak(), None, None),
            PsfMode::Pre => (p.sigma_r, p.g_e_peak(), None, Some(p.k_z())),
            PsfMode::To(t) => (p.sigma_r * t.lateral_stretch(p), p.g_e_peak() * t.c_to(p), Some(t.k1x(p)), Some(p.k_z())),
        };
        Self {
            inv2sx2: T::one() / (two * sx * sx),
            inv2sz2: T::one() / (two * p.sigma_r * p.sigma_r),
            amp,
            kx,
            kz,
            reach_x: reach * sx,
            reach_z: reach * p.sigma_r,
        }
    }

    pub(crate) fn fx(&self, x: T) -> T {
        let e = (-x * x * self.inv2sx2).exp();
        match self.kx {
            Some(k) => e * (k * x).cos(),
            None => e,
        }
    }

    pub(crate) fn fz(&self, z: T) -> T {
        let e = (-z * z * self.inv2sz2).exp();
        match self.kz {
            Some(k) => e * (k * z).cos(),
            None => e,
        }
    }

    /// Adds `weight·g(r − c)` into `out` over the PSF support.
    pub(crate) fn splat(&self, grid: &Grid2D<T>, cx: T, cz: T, weight: T, out: &mut [T], fx: &mut Vec<T>) {
        let Some((ix0, ix1)) = span(grid.x0, grid.dx, grid.nx, cx, self.reach_x) else { return };
        let Some((iz0, iz1)) = span(grid.z0, grid.dz, grid.nz, cz, self.reach_z) else { return };
        fx.clear();
        fx.extend((ix0..ix1).map(|ix| self.fx(grid.x(ix) - cx)));
        let a = self.amp * weight;
        for iz in iz0..iz1 {
            let wz = a * self.fz(grid.z(iz) - cz);
            let row = &mut out[iz * grid.nx + ix0..iz * grid.nx + ix1];
            for (o, &f) in row.iter_mut().zip(fx.iter()) {
                *o += wz * f;
            }
        }
    }
}

/// Index range of samples within `reach` of `c`, or `None` if empty.
fn span<T: Real>(origin: T, d: T, n: usize, c: T, reach: T) -> Option<(usize, usize)> {
    let lo = ((c - reach - origin) / d).ceil().max(T::zero());
    let hi = ((c + reach - origin) / d).floor();
    if hi < T::zero() || lo > hi {
        return None;
    }
    let lo = lo.to_usize()?;
    let hi = (hi.to_usize()? + 1).min(n);
    (lo < hi).then_some((lo, hi))
}

/// Matched-filter autocorrelation constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFilterTheory<T = f64> {
    /// `σ̂r = √2·σr`.
    pub sigma_r_hat: T,
    /// `C_g = ½·exp(−4π²σr²/λ²)`.
    pub c_g: T,
    /// `g_e(0) = 1/(2πσr²)`.
    pub g_e_peak: T,
}

impl<T: Real> MatchedFilterTheory<T> {
    /// Peak of the self-correlated envelope, `ĝ_e(0) = g_e(0)/2`.
    pub fn g_e_hat_peak(&self) -> T {
        self.g_e_peak * T::lit(0.5)
    }

    /// `ĝ_e(r)`: the envelope autocorrelation, a Gaussian of width `σ̂r`.
    pub fn g_e_hat(&self, x: T, z: T) -> T {
        let s2 = self.sigma_r_hat * self.sigma_r_hat;
        self.g_e_hat_peak() * (-(x * x + z * z) / (s2 + s2)).exp()
    }

    /// Pre-envelope autocorrelation `R_g(r) = ½ĝ_e(r)cos(2πz/λ) + C_g·ĝ_e(r)`.
    pub fn r_g(&self, p: &PsfParams<T>, x: T, z: T) -> T {
        self.g_e_hat(x, z) * (T::lit(0.5) * (p.k_z() * z).cos() + self.c_g)
    }
}

/// Autocorrelation decomposition of the pre-envelope PSF.
pub fn autocorr_theory<T: Real>(p: &PsfParams<T>) -> MatchedFilterTheory<T> {
    let ratio = p.sigma_r / p.lambda;
    MatchedFilterTheory {
        sigma_r_hat: T::SQRT_2() * p.sigma_r,
        c_g: T::lit(0.5) * (-T::lit(4.0) * T::PI() * T::PI() * ratio * ratio).exp(),
        g_e_peak: p.g_e_peak(),
    }
}
