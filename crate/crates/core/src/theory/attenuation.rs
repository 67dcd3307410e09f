//! Motion-free filtered bubble response without transverse oscillation.

use serde::Serialize;

use crate::psf::{autocorr_theory, eval_post_envelope, PsfParams};
use crate::scalar::Real;

/// Closed-form description of a bubble seen through a mismatched velocity filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttenuationReport<T = f64> {
    /// Normalized mismatch `κ = (σt/σr)|Δv|`.
    pub kappa: T,
    /// Peak attenuation `Γ` (pre-envelope).
    pub gamma: T,
    /// `σr/σt`, the speed of crossing one envelope width per window width.
    pub ratio_vrt: T,
    pub dv: [T; 2],
    pub sigma_t: T,
    pub psf: PsfParams<T>,
}

impl<T: Real> AttenuationReport<T> {
    /// Envelope distortion `η(θ) = √(1 − κ²cos²θ/(1+κ²))`, θ the angle between `r` and `Δv`.
    pub fn eta(&self, theta: T) -> T {
        let k2 = self.kappa * self.kappa;
        (T::one() - k2 * theta.cos().powi(2) / (T::one() + k2)).sqrt()
    }

    /// `η` at the point `r`; `1` at `r = 0` or `Δv = 0`.
    pub fn eta_at(&self, x: T, z: T) -> T {
        let rn2 = x * x + z * z;
        let vn2 = self.dv[0] * self.dv[0] + self.dv[1] * self.dv[1];
        if rn2 == T::zero() || vn2 == T::zero() {
            return T::one();
        }
        let cos2 = (x * self.dv[0] + z * self.dv[1]).powi(2) / (rn2 * vn2);
        let k2 = self.kappa * self.kappa;
        (T::one() - k2 * cos2 / (T::one() + k2)).sqrt()
    }

    /// Axial phase shift `ζ(r, Δv) = σt²Δv_z(r·Δv)/(σr²(1+κ²))` in mm.
    pub fn zeta(&self, x: T, z: T) -> T {
        let s = self.sigma_t / self.psf.sigma_r;
        s * s * self.dv[1] * (x * self.dv[0] + z * self.dv[1]) / (T::one() + self.kappa * self.kappa)
    }

    /// Post-envelope peak attenuation `(1+κ²)^{-1/2}`.
    pub fn gamma_post(&self) -> T {
        (T::one() + self.kappa * self.kappa).sqrt().recip()
    }
}

/// Attenuation, distortion and phase shift of a pre-envelope bubble for mismatch `dv`.
pub fn attenuation_pre<T: Real>(p: &PsfParams<T>, sigma_t: T, dv: [T; 2]) -> AttenuationReport<T> {
    let ratio_vrt = p.sigma_r / sigma_t;
    let kappa = (dv[0] * dv[0] + dv[1] * dv[1]).sqrt() / ratio_vrt;
    let k2 = kappa * kappa;
    let a = sigma_t * dv[1] / p.lambda;
    let gamma = (T::one() + k2).sqrt().recip() * (-T::lit(2.0) * T::PI() * T::PI() * a * a / (T::one() + k2)).exp();
    AttenuationReport { kappa, gamma, ratio_vrt, dv, sigma_t, psf: *p }
}

/// Filtered pre-envelope bubble `Γ·g_e(ηr)·cos(2π(z − ζ)/λ)`.
pub fn q_pre<T: Real>(r: [T; 2], dv: [T; 2], p: &PsfParams<T>, sigma_t: T) -> T {
    let rep = attenuation_pre(p, sigma_t, dv);
    let eta = rep.eta_at(r[0], r[1]);
    rep.gamma * eval_post_envelope(p, eta * r[0], eta * r[1]) * (p.k_z() * (r[1] - rep.zeta(r[0], r[1]))).cos()
}

/// Filtered post-envelope bubble `g_e(ηr)/√(1+κ²)`.
pub fn q_post<T: Real>(r: [T; 2], dv: [T; 2], p: &PsfParams<T>, sigma_t: T) -> T {
    let rep = attenuation_pre(p, sigma_t, dv);
    let eta = rep.eta_at(r[0], r[1]);
    rep.gamma_post() * eval_post_envelope(p, eta * r[0], eta * r[1])
}

/// `Γ̂(Δv) = (4+2κ²)^{-1/2}·exp(−4π²(σtΔv_z/λ)²/(2+κ²))`.
pub fn gamma_hat<T: Real>(p: &PsfParams<T>, sigma_t: T, dv: [T; 2]) -> T {
    let rep = attenuation_pre(p, sigma_t, dv);
    let k2 = rep.kappa * rep.kappa;
    let a = sigma_t * dv[1] / p.lambda;
    let two = T::lit(2.0);
    (two * two + two * k2).sqrt().recip() * (-T::lit(4.0) * T::PI() * T::PI() * a * a / (two + k2)).exp()
}

/// Matched-filter output at zero lag for a pre-envelope bubble with mismatch `dv`:
/// `ψ(0,Δv) = [Γ̂ + 2C_g/√(4+2κ²)]·ĝ_e(0)`, with `ĝ_e(0) = g_e(0)/2` the
/// peak of the envelope autocorrelation.
pub fn mf_peak<T: Real>(dv: [T; 2], p: &PsfParams<T>, sigma_t: T) -> T {
    let m = autocorr_theory(p);
    let k2 = attenuation_pre(p, sigma_t, dv).kappa.powi(2);
    let two = T::lit(2.0);
    (gamma_hat(p, sigma_t, dv) + two * m.c_g / (two * two + two * k2).sqrt()) * m.g_e_hat_peak()
}

/// Matched-filter output at zero lag for a post-envelope bubble:
/// `ψ_post(0,Δv) = ĝ_e(0)·(1+κ²/2)^{-1/2}`.
pub fn mf_peak_post<T: Real>(dv: [T; 2], p: &PsfParams<T>, sigma_t: T) -> T {
    let k2 = attenuation_pre(p, sigma_t, dv).kappa.powi(2);
    autocorr_theory(p).g_e_hat_peak() / (T::one() + k2 * T::lit(0.5)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::oracle::smeared_psf;
    use proptest::prelude::*;

    const P: PsfParams<f64> = PsfParams { sigma_r: 0.3, lambda: 0.3 };

    #[test]
    fn zero_mismatch() {
        let r = attenuation_pre(&P, 0.5, [0.0, 0.0]);
        assert_eq!((r.kappa, r.gamma), (0.0, 1.0));
        assert_eq!(r.eta(0.3), 1.0);
        assert_eq!(r.zeta(0.2, 0.1), 0.0);
    }

    #[test]
    fn reference_values() {
        let r = attenuation_pre(&P, 0.5, [1.0, 0.0]);
        assert!((r.kappa - 5.0 / 3.0).abs() < 1e-12);
        assert!((r.gamma - 1.0 / (1.0 + 25.0 / 9.0f64).sqrt()).abs() < 1e-12);
        assert!((r.gamma - 0.5145).abs() < 1e-4);
        let r = attenuation_pre(&P, 0.5, [0.0, 1.0]);
        assert!((r.gamma - 2.6e-7).abs() < 0.1e-7, "{}", r.gamma);
        assert!((r.gamma_post() - 0.5145).abs() < 1e-4);
        // Small axial mismatch used for direct filtering checks.
        let r = attenuation_pre(&P, 0.5, [0.0, 0.2]);
        assert!((r.gamma - 0.1324).abs() < 1e-3, "{}", r.gamma);
    }

    #[test]
    fn perpendicular_profile_is_unwidened() {
        let dv = [0.0, 0.4];
        let rep = attenuation_pre(&P, 0.5, dv);
        for x in [0.05, 0.1, 0.3] {
            assert_eq!(rep.eta_at(x, 0.0), 1.0);
            let q = q_pre([x, 0.0], dv, &P, 0.5);
            assert!((q - rep.gamma * eval_post_envelope(&P, x, 0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_is_peak_of_q() {
        for dv in [[0.3, 0.0], [0.1, 0.2], [-0.4, 0.05]] {
            let rep = attenuation_pre(&P, 0.5, dv);
            assert!((q_pre([0.0, 0.0], dv, &P, 0.5) / P.g_e_peak() - rep.gamma).abs() < 1e-15);
        }
    }

    #[test]
    fn q_matches_quadrature_spot_checks() {
        let p = PsfParams { sigma_r: 0.25, lambda: 0.3 };
        for (r, dv, st) in [([0.1, -0.05], [0.3, 0.1], 0.5), ([0.0, 0.2], [-0.2, 0.05], 0.2), ([0.3, 0.3], [0.5, -0.4], 0.1)] {
            let q = smeared_psf(|x, z| crate::psf::eval_pre_envelope(&p, x, z), r, dv, st, 1e-11);
            assert!((q.value - q_pre(r, dv, &p, st)).abs() <= 1e-8 * q.abs_value);
            let q = smeared_psf(|x, z| eval_post_envelope(&p, x, z), r, dv, st, 1e-11);
            assert!((q.value - q_post(r, dv, &p, st)).abs() <= 1e-8 * q.abs_value);
        }
    }

    #[test]
    fn mf_peak_reference() {
        let m = autocorr_theory(&P);
        let z = mf_peak([0.0, 0.0], &P, 0.5);
        assert!((z - (0.5 + m.c_g) * m.g_e_hat_peak()).abs() < 1e-15);
        assert!((z - 0.5 * P.g_e_peak() / 2.0).abs() < 1e-15);
        assert!((mf_peak_post([0.0, 0.0], &P, 0.5) - m.g_e_hat_peak()).abs() < 1e-15);
    }

    /// `ψ(0,Δv) = ∫ R_g(tΔv) w(t) dt`, with `R_g` from the autocorrelation decomposition.
    #[test]
    fn mf_peak_matches_smeared_autocorrelation() {
        let p = PsfParams { sigma_r: 0.15, lambda: 0.3 };
        let m = autocorr_theory(&p);
        for dv in [[0.2, 0.0], [0.0, 0.1], [0.3, -0.2]] {
            let q = smeared_psf(|x, z| m.r_g(&p, x, z), [0.0, 0.0], dv, 0.4, 1e-12);
            assert!((q.value - mf_peak(dv, &p, 0.4)).abs() < 1e-9 * q.abs_value);
        }
    }

    proptest! {
        #[test]
        fn gamma_bounds_and_monotone_along_rays(th in 0.0f64..std::f64::consts::TAU, s in 0.0f64..3.0, st in 0.05f64..1.0) {
            let dir = [th.cos(), th.sin()];
            let g1 = attenuation_pre(&P, st, [s * dir[0], s * dir[1]]).gamma;
            let g2 = attenuation_pre(&P, st, [1.1 * s * dir[0] + 0.01 * dir[0], 1.1 * s * dir[1] + 0.01 * dir[1]]).gamma;
            prop_assert!(g1 > 0.0 || s > 0.0);
            prop_assert!(g1 <= 1.0);
            prop_assert!(g2 <= g1);
        }

        #[test]
        fn axial_suppression_dominates(s in 0.001f64..3.0, st in 0.05f64..1.0) {
            prop_assert!(attenuation_pre(&P, st, [0.0, s]).gamma <= attenuation_pre(&P, st, [s, 0.0]).gamma);
        }

        #[test]
        fn gamma_decreasing_in_axial(vx in -2.0f64..2.0, vz in 0.0f64..2.0, d in 0.001f64..1.0) {
            let a = attenuation_pre(&P, 0.5, [vx, vz]).gamma;
            let b = attenuation_pre(&P, 0.5, [vx, vz + d]).gamma;
            prop_assert!(b < a || (a == 0.0 && b == 0.0));
        }

        #[test]
        fn eta_monotone(k in 0.0f64..5.0, dk in 0.0f64..1.0, c in 0.0f64..1.0, dc in 0.0f64..1.0) {
            let rep = |kappa: f64| AttenuationReport { kappa, gamma: 1.0, ratio_vrt: 1.0, dv: [0.0, 0.0], sigma_t: 1.0, psf: P };
            let c2 = (c + dc).min(1.0);
            let e = rep(k).eta(c.acos());
            prop_assert!(e > 0.0 && e <= 1.0);
            prop_assert!(rep(k + dk).eta(c.acos()) <= e + 1e-15);
            prop_assert!(rep(k).eta(c2.acos()) <= e + 1e-15);
        }
    }
}
