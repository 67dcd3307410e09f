//! Filtered bubble response with transverse oscillation.

use serde::Serialize;

use crate::psf::{eval_to_envelope, PsfParams, ToParams};
use crate::scalar::Real;

/// Closed-form description of a TO-filtered bubble seen through a mismatched velocity filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ToAttenuationReport<T = f64> {
    /// `Γ₁`, the lobe with phase `k_z·z + k₁·x`.
    pub gamma1: T,
    /// `Γ₂`, the lobe with phase `k_z·z − k₁·x`.
    pub gamma2: T,
    /// `Γ̄ = Γ₁ + Γ₂`.
    pub gamma_bar: T,
    /// `κ̃² = σt²·ΔvᵀDΔv`.
    pub kappa_tilde_sq: T,
    /// Envelope distortion `Ξ(Δv)`, row-major.
    pub xi: [[T; 2]; 2],
    /// Diagonal of `D = diag[(σr²+σx²)⁻¹, σr⁻²]`.
    pub d_matrix: [T; 2],
    /// Phase slope of lobe `j`: `θ_j(r) = k_j·r − phase_coeff[j]·(ΔvᵀD r)`.
    pub phase_coeff: [T; 2],
    /// Lobe wavevectors `k_j = (±2π/λ̃x, 2π/λ)`.
    pub k_lobes: [[T; 2]; 2],
    pub dv: [T; 2],
}

impl<T: Real> ToAttenuationReport<T> {
    /// Phase `θ_j` of lobe `j ∈ {0, 1}` at `r`.
    pub fn theta(&self, j: usize, x: T, z: T) -> T {
        let k = self.k_lobes[j];
        let dvd = self.dv[0] * self.d_matrix[0] * x + self.dv[1] * self.d_matrix[1] * z;
        k[0] * x + k[1] * z - self.phase_coeff[j] * dvd
    }

    /// `Ξ·r`.
    pub fn distort(&self, x: T, z: T) -> [T; 2] {
        [self.xi[0][0] * x + self.xi[0][1] * z, self.xi[1][0] * x + self.xi[1][1] * z]
    }
}

/// Attenuation factors, distortion matrix, and phase terms for mismatch `dv` with TO.
pub fn to_attenuation<T: Real>(dv: [T; 2], p: &PsfParams<T>, t: &ToParams<T>, sigma_t: T) -> ToAttenuationReport<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let d = [one / (p.sigma_r * p.sigma_r + t.sigma_x * t.sigma_x), one / (p.sigma_r * p.sigma_r)];
    let st2 = sigma_t * sigma_t;
    let kt2 = st2 * (d[0] * dv[0] * dv[0] + d[1] * dv[1] * dv[1]);
    let root = (one + kt2).sqrt();
    let lt = t.lambda_x_tilde(p);
    let mut gammas = [T::zero(); 2];
    let mut phase_coeff = [T::zero(); 2];
    for (j, sign) in [(0usize, one), (1, -one)] {
        let a = dv[1] / p.lambda + sign * dv[0] / lt;
        gammas[j] = (two * root).recip() * (-two * T::PI() * T::PI() * st2 * a * a / (one + kt2)).exp();
        phase_coeff[j] = T::TAU() * st2 / (one + kt2) * a;
    }
    // Ξ = I − c·ΔvΔvᵀD with c = (σt²/κ̃²)(1 − 1/√(1+κ̃²)) = σt²/(√(1+κ̃²)(1+√(1+κ̃²))).
    let c = st2 / (root * (one + root));
    let xi = [
        [one - c * dv[0] * dv[0] * d[0], -c * dv[0] * dv[1] * d[1]],
        [-c * dv[1] * dv[0] * d[0], one - c * dv[1] * dv[1] * d[1]],
    ];
    let k1 = t.k1x(p);
    let kz = p.k_z();
    ToAttenuationReport {
        gamma1: gammas[0],
        gamma2: gammas[1],
        gamma_bar: gammas[0] + gammas[1],
        kappa_tilde_sq: kt2,
        xi,
        d_matrix: d,
        phase_coeff,
        k_lobes: [[k1, kz], [-k1, kz]],
        dv,
    }
}

/// Filtered TO bubble `g_e^TO(Ξr)·(Γ₁cosθ₁ + Γ₂cosθ₂)`.
pub fn to_q<T: Real>(r: [T; 2], dv: [T; 2], p: &PsfParams<T>, t: &ToParams<T>, sigma_t: T) -> T {
    let rep = to_attenuation(dv, p, t, sigma_t);
    let [ux, uz] = rep.distort(r[0], r[1]);
    eval_to_envelope(p, t, ux, uz) * (rep.gamma1 * rep.theta(0, r[0], r[1]).cos() + rep.gamma2 * rep.theta(1, r[0], r[1]).cos())
}
