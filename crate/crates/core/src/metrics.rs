//! Localization error, support overlap, flow velocity error and empirical attenuation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Mask};
use crate::localize::VelocityMap;
use crate::psf::PsfParams;
use crate::scalar::Real;
use crate::stack::FrameStack;

/// Anisotropic blur of the localization-error metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeParams<T = f64> {
    /// Blur width along the flow, mm.
    pub sigma_par: T,
    /// Blur width across the flow, mm.
    pub sigma_perp: T,
    /// Flow direction, rad from the x axis.
    pub theta: T,
    /// True bubble count `T`.
    pub n_bubbles_t: usize,
}

impl<T: Real> LeParams<T> {
    /// `σ_∥ = 0.3λ`, `σ_⊥ = 0.15λ`.
    pub fn for_psf(p: &PsfParams<T>, theta: T, n_bubbles_t: usize) -> Self {
        Self { sigma_par: p.lambda * T::lit(0.3), sigma_perp: p.lambda * T::lit(0.15), theta, n_bubbles_t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_perp > T::zero() && self.sigma_par >= self.sigma_perp && self.sigma_par.is_finite()) {
            return Err(Error::invalid("LE widths must satisfy sigma_par >= sigma_perp > 0"));
        }
        if !self.theta.is_finite() {
            return Err(Error::invalid("LE angle must be finite"));
        }
        if self.n_bubbles_t == 0 {
            return Err(Error::invalid("LE needs a positive true bubble count"));
        }
        Ok(())
    }

    /// `A = Σ^{-1/2}·R(θ)ᵀ`, so that `A·(cos θ, sin θ) = (1/σ_∥, 0)`.
    pub fn a_matrix(&self) -> [[T; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        let (ip, iq) = (self.sigma_par.recip(), self.sigma_perp.recip());
        [[ip * c, ip * s], [-iq * s, iq * c]]
    }

    /// `‖A d‖²`.
    pub fn weighted_sq(&self, d: [T; 2]) -> T {
        let a = self.a_matrix();
        let u = a[0][0] * d[0] + a[0][1] * d[1];
        let v = a[1][0] * d[0] + a[1][1] * d[1];
        u * u + v * v
    }

    /// Blur kernel `e(r) = exp(−‖A r‖²/2)`.
    pub fn kernel(&self, r: [T; 2]) -> T {
        (-T::lit(0.5) * self.weighted_sq(r)).exp()
    }
}

/// Evaluation summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub le: Option<f64>,
    pub iou: Option<f64>,
    pub fve: Option<f64>,
    pub attenuation: Option<f64>,
}

/// `2/(σ_∥σ_⊥πT)·‖(V̂ − V) ∗ e‖²` with `V`, `V̂` point sets blurred
/// analytically at their exact positions and the norm taken on `grid`.
pub fn localization_error<T: Real>(truth: &[[T; 2]], est: &[[T; 2]], le: &LeParams<T>, grid: &Grid2D<T>) -> Result<T> {
    le.validate()?;
    let quarter = le.sigma_perp * T::lit(0.25);
    if grid.dx > quarter * T::lit(1.000001) || grid.dz > quarter * T::lit(1.000001) {
        return Err(Error::invalid("LE grid spacing must not exceed sigma_perp/4"));
    }
    let reach = le.sigma_par * T::lit(7.0);
    // Each set is blurred separately in a canonical order, so equal sets cancel exactly.
    let blur = |pts: &[[T; 2]]| {
        let mut pts = pts.to_vec();
        pts.sort_by(|a, b| a[0].total_order(&b[0]).then(a[1].total_order(&b[1])));
        let mut img = vec![T::zero(); grid.len()];
        for p in &pts {
            let lo_x = ((p[0] - reach - grid.x0) / grid.dx).floor().max(T::zero());
            let hi_x = ((p[0] + reach - grid.x0) / grid.dx).ceil();
            let lo_z = ((p[1] - reach - grid.z0) / grid.dz).floor().max(T::zero());
            let hi_z = ((p[1] + reach - grid.z0) / grid.dz).ceil();
            if hi_x < T::zero() || hi_z < T::zero() {
                continue;
            }
            let (lx, lz) = (lo_x.to_usize().unwrap_or(0), lo_z.to_usize().unwrap_or(0));
            let hx = hi_x.to_usize().unwrap_or(usize::MAX).min(grid.nx.saturating_sub(1));
            let hz = hi_z.to_usize().unwrap_or(usize::MAX).min(grid.nz.saturating_sub(1));
            for iz in lz..=hz {
                for ix in lx..=hx {
                    img[iz * grid.nx + ix] += le.kernel([grid.x(ix) - p[0], grid.z(iz) - p[1]]);
                }
            }
        }
        img
    };
    let (e_est, e_truth) = (blur(est), blur(truth));
    let diff: Vec<T> = e_est.iter().zip(&e_truth).map(|(a, b)| *a - *b).collect();
    let sum: T = diff.iter().map(|d| *d * *d).sum();
    let norm = T::lit(2.0) / (le.sigma_par * le.sigma_perp * T::PI() * T::from_count(le.n_bubbles_t));
    Ok(norm * sum * grid.dx * grid.dz)
}

/// `|P ∩ P̂| / |P ∪ P̂|`; two empty masks score 1.
pub fn iou<T: Real>(truth: &Mask<T>, est: &Mask<T>) -> Result<f64> {
    if !truth.grid.same_shape(&est.grid) {
        return Err(Error::invalid("IoU masks have different shapes"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in truth.data.iter().zip(&est.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-pixel norm used by [`fve`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FveNorm {
    /// `|Δvx| + |Δvz|`.
    #[default]
    VectorL1,
    /// `| |v| − |v̂| |`.
    Speed,
}

/// `Σ_p ‖V(p) − V̂(p)‖ / P_v` over the pixels where the truth speed is
/// non-zero, optionally restricted to the fastest `q` fraction of them.
pub fn fve<T: Real>(truth: &VelocityMap<T>, est: &VelocityMap<T>, norm: FveNorm, fastest_q: Option<f64>) -> Result<T> {
    if !truth.grid.same_shape(&est.grid) {
        return Err(Error::invalid("FVE maps have different shapes"));
    }
    let mut support: Vec<usize> = (0..truth.grid.len()).filter(|&i| truth.speed_at(i) > T::zero()).collect();
    if support.is_empty() {
        return Err(Error::invalid("FVE truth map has no moving pixels"));
    }
    if let Some(q) = fastest_q {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::invalid("fastest_q must lie in (0, 1]"));
        }
        support.sort_by(|&a, &b| truth.speed_at(b).total_order(&truth.speed_at(a)).then(a.cmp(&b)));
        let keep = ((support.len() as f64 * q).ceil() as usize).max(1);
        support.truncate(keep);
    }
    let total: T = support
        .iter()
        .map(|&i| match norm {
            FveNorm::VectorL1 => (truth.vx[i] - est.vx[i]).fabs() + (truth.vz[i] - est.vz[i]).fabs(),
            FveNorm::Speed => (truth.speed_at(i) - est.speed_at(i)).fabs(),
        })
        .sum();
    Ok(total / T::from_count(support.len()))
}

/// Peak-magnitude ratio of a filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationMeasurement<T = f64> {
    /// `mean max|before| / mean max|after|`; `+∞` when nothing survives.
    pub ratio: T,
    pub infinite: bool,
    pub frames_used: usize,
}

/// Attenuation around a bubble that sits at `track(t)` in frame `t`.
pub fn measure_attenuation_track<T: Real>(
    before: &FrameStack<T>,
    after: &FrameStack<T>,
    track: impl Fn(usize) -> [T; 2],
    radius: T,
    frames: Range<usize>,
) -> Result<AttenuationMeasurement<T>> {
    if !before.same_shape(after) {
        return Err(Error::invalid("attenuation stacks have different shapes"));
    }
    if frames.is_empty() || frames.end > before.nt {
        return Err(Error::invalid("attenuation frame range is empty or out of bounds"));
    }
    if !(radius > T::zero()) {
        return Err(Error::invalid("attenuation window radius must be positive"));
    }
    let g = before.grid;
    let (mut sb, mut sa) = (T::zero(), T::zero());
    for t in frames.clone() {
        let p = track(t);
        if !g.contains(p[0], p[1]) {
            return Err(Error::invalid(format!("bubble position {:?} outside the grid in frame {t}", [p[0].as_f64(), p[1].as_f64()])));
        }
        let (mut mb, mut ma) = (T::zero(), T::zero());
        let (fb, fa) = (before.frame(t), after.frame(t));
        for iz in 0..g.nz {
            let dz = g.z(iz) - p[1];
            if dz.fabs() > radius {
                continue;
            }
            for ix in 0..g.nx {
                let dx = g.x(ix) - p[0];
                if dx * dx + dz * dz <= radius * radius {
                    let i = iz * g.nx + ix;
                    mb = mb.max(fb[i].fabs());
                    ma = ma.max(fa[i].fabs());
                }
            }
        }
        sb += mb;
        sa += ma;
    }
    let n = frames.len();
    if sa > T::zero() {
        Ok(AttenuationMeasurement { ratio: sb / sa, infinite: false, frames_used: n })
    } else {
        Ok(AttenuationMeasurement { ratio: T::infinity(), infinite: true, frames_used: n })
    }
}

/// Attenuation within a fixed window.
pub fn measure_attenuation<T: Real>(
    before: &FrameStack<T>,
    after: &FrameStack<T>,
    pos: [T; 2],
    radius: T,
    frames: Range<usize>,
) -> Result<AttenuationMeasurement<T>> {
    measure_attenuation_track(before, after, |_| pos, radius, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use proptest::prelude::*;

    fn le_params(theta: f64) -> LeParams<f64> {
        LeParams { sigma_par: 0.09, sigma_perp: 0.045, theta, n_bubbles_t: 1 }
    }

    fn le_grid() -> Grid2D<f64> {
        make_grid(121, 121, 0.01, 0.01, true).unwrap()
    }

    #[test]
    fn perfect_recovery_is_zero() {
        let pts = [[0.1, -0.05], [-0.2, 0.3]];
        let le = LeParams { n_bubbles_t: 2, ..le_params(0.4) };
        assert_eq!(localization_error(&pts, &pts, &le, &le_grid()).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_matches_gaussian_overlap() {
        // ∫(e(r−p) − e(r−q))² = 2πσ_∥σ_⊥(1 − exp(−‖A d‖²/4)).
        let le = le_params(0.7);
        for d in [[0.01, 0.0], [0.03, -0.02], [0.0, 0.08]] {
            let got = localization_error(&[[0.0, 0.0]], &[d], &le, &le_grid()).unwrap();
            let want = 4.0 * (1.0 - (-le.weighted_sq(d) / 4.0).exp());
            assert!((got - want).abs() < 1e-9 * want.max(1e-6), "{got} vs {want}");
        }
    }

    #[test]
    fn perpendicular_errors_cost_more() {
        let le = le_params(0.3);
        let (s, c) = 0.3f64.sin_cos();
        let m = 0.004;
        let par = localization_error(&[[0.0, 0.0]], &[[m * c, m * s]], &le, &le_grid()).unwrap();
        let perp = localization_error(&[[0.0, 0.0]], &[[-m * s, m * c]], &le, &le_grid()).unwrap();
        assert!(perp > 3.5 * par);
    }

    #[test]
    fn le_rejects_coarse_grid_and_zero_count() {
        let coarse = make_grid(40, 40, 0.03, 0.03, true).unwrap();
        assert!(localization_error(&[[0.0, 0.0]], &[], &le_params(0.0), &coarse).is_err());
        let le = LeParams { n_bubbles_t: 0, ..le_params(0.0) };
        assert!(localization_error(&[[0.0, 0.0]], &[], &le, &le_grid()).is_err());
    }

    #[test]
    fn le_ignores_ordering() {
        let a = [[0.1, 0.0], [-0.1, 0.05], [0.0, -0.2]];
        let b = [[0.11, 0.0], [-0.1, 0.06], [0.0, -0.21]];
        let rev: Vec<_> = b.iter().rev().copied().collect();
        let le = LeParams { n_bubbles_t: 3, ..le_params(1.0) };
        let x = localization_error(&a, &b, &le, &le_grid()).unwrap();
        let y = localization_error(&a, &rev, &le, &le_grid()).unwrap();
        assert!((x - y).abs() < 1e-12 * x);
    }

    fn rect(g: Grid2D<f64>, x0: f64, x1: f64) -> Mask<f64> {
        Mask::from_fn(g, |x, z| x >= x0 && x < x1 && (0.0..4.0).contains(&z))
    }

    #[test]
    fn iou_cases() {
        let g = make_grid(8, 4, 1.0, 1.0, false).unwrap();
        let a = rect(g, 0.0, 4.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &rect(g, 4.0, 8.0)).unwrap(), 0.0);
        assert!((iou(&a, &rect(g, 2.0, 6.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&Mask::empty(g), &Mask::empty(g)).unwrap(), 1.0);
        let other = make_grid(4, 4, 1.0, 1.0, false).unwrap();
        assert!(iou(&a, &Mask::empty(other)).is_err());
    }

    fn uniform_map(g: Grid2D<f64>, v: [f64; 2]) -> VelocityMap<f64> {
        let mut m = VelocityMap::zeros(g);
        m.vx.iter_mut().for_each(|x| *x = v[0]);
        m.vz.iter_mut().for_each(|x| *x = v[1]);
        m
    }

    #[test]
    fn fve_bias_along_flow() {
        let g = make_grid(6, 6, 1.0, 1.0, false).unwrap();
        let truth = uniform_map(g, [0.6, 0.8]);
        let est = uniform_map(g, [0.9, 1.2]);
        assert!((fve(&truth, &est, FveNorm::Speed, None).unwrap() - 0.5).abs() < 1e-12);
        assert!((fve(&truth, &est, FveNorm::VectorL1, None).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(fve(&truth, &truth, FveNorm::VectorL1, None).unwrap(), 0.0);
        assert!(fve(&VelocityMap::zeros(g), &est, FveNorm::Speed, None).is_err());
    }

    #[test]
    fn fve_fastest_fraction() {
        let g = make_grid(10, 1, 1.0, 1.0, false).unwrap();
        let mut truth = VelocityMap::zeros(g);
        for i in 0..10 {
            truth.vx[i] = 1.0 + i as f64;
        }
        let mut est = truth.clone();
        est.vx[9] += 2.0;
        est.vx[0] += 5.0;
        assert!((fve(&truth, &est, FveNorm::Speed, Some(0.1)).unwrap() - 2.0).abs() < 1e-12);
        assert!((fve(&truth, &est, FveNorm::Speed, None).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn attenuation_cases() {
        let g = make_grid(16, 16, 0.1, 0.1, true).unwrap();
        let mut a = FrameStack::zeros(g, 4, 0.01).unwrap();
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 - 5.0;
        }
        let mut half = a.clone();
        half.data.iter_mut().for_each(|v| *v *= 0.5);
        let m = measure_attenuation(&a, &a, [0.0, 0.0], 0.3, 1..3).unwrap();
        assert_eq!(m.ratio, 1.0);
        let m = measure_attenuation(&a, &half, [0.0, 0.0], 0.3, 1..3).unwrap();
        assert!((m.ratio - 2.0).abs() < 1e-12);
        let zero = FrameStack::zeros(g, 4, 0.01).unwrap();
        assert!(measure_attenuation(&a, &zero, [0.0, 0.0], 0.3, 0..4).unwrap().infinite);
        assert!(measure_attenuation(&a, &a, [5.0, 0.0], 0.3, 0..4).is_err());
    }

    fn small_map(g: Grid2D<f64>, vals: &[(f64, f64)]) -> VelocityMap<f64> {
        let mut m = VelocityMap::zeros(g);
        for (i, &(x, z)) in vals.iter().enumerate() {
            m.vx[i] = x;
            m.vz[i] = z;
        }
        m
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 24), b in prop::collection::vec(any::<bool>(), 24)) {
            let g = make_grid(6, 4, 1.0, 1.0, false).unwrap();
            let (ma, mb) = (Mask { grid: g, data: a }, Mask { grid: g, data: b });
            let x = iou(&ma, &mb).unwrap();
            prop_assert_eq!(x, iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn iou_grows_with_shared_pixels(a in prop::collection::vec(any::<bool>(), 24), b in prop::collection::vec(any::<bool>(), 24), i in 0usize..24) {
            let g = make_grid(6, 4, 1.0, 1.0, false).unwrap();
            let truth = Mask { grid: g, data: a };
            let est = Mask { grid: g, data: b };
            let mut more = est.clone();
            if truth.data[i] {
                more.data[i] = true;
            }
            prop_assert!(iou(&truth, &more).unwrap() >= iou(&truth, &est).unwrap());
        }

        #[test]
        fn fve_triangle_inequality(
            v in prop::collection::vec((0.1f64..5.0, -5.0f64..5.0), 9),
            w in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 9),
            u in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 9),
        ) {
            let g = make_grid(3, 3, 1.0, 1.0, false).unwrap();
            let (a, b, c) = (small_map(g, &v), small_map(g, &w), small_map(g, &u));
            // Restrict every term to the support of `a` by scoring against it.
            let support: Vec<usize> = (0..9).filter(|&i| a.speed_at(i) > 0.0).collect();
            let d = |x: &VelocityMap<f64>, y: &VelocityMap<f64>| -> f64 {
                support.iter().map(|&i| (x.vx[i] - y.vx[i]).abs() + (x.vz[i] - y.vz[i]).abs()).sum::<f64>() / support.len() as f64
            };
            let ac = fve(&a, &c, FveNorm::VectorL1, None).unwrap();
            prop_assert!((ac - d(&a, &c)).abs() < 1e-12);
            prop_assert!(ac <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn le_first_order(theta in -3.1f64..3.1, ang in 0.0f64..std::f64::consts::TAU, frac in 0.01f64..0.1) {
            let le = le_params(theta);
            let m = frac * le.sigma_perp;
            let d = [m * ang.cos(), m * ang.sin()];
            let got = localization_error(&[[0.0, 0.0]], &[d], &le, &le_grid()).unwrap();
            let want = le.weighted_sq(d);
            prop_assert!((got - want).abs() < 0.05 * want);
        }
    }
}
