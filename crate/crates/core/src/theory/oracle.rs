//! Numerical oracles: adaptive Gauss–Kronrod quadrature, bisection, and the
//! direct window-smearing integral that every closed form is checked against.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// Result of an adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct Quad {
    pub value: f64,
    /// `∫|f|`, the natural scale for relative error when `f` changes sign.
    pub abs_value: f64,
    pub error: f64,
}

/// One G7–K15 panel: (Kronrod value, |Kronrod − Gauss|, Kronrod ∫|f|).
fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut ka = WGK[7] * fc.abs();
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let (f1, f2) = (f(c - dx), f(c + dx));
        k += WGK[j] * (f1 + f2);
        ka += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    (k * h, ((k - g) * h).abs(), ka * h)
}

/// Adaptive integration of `f` over `[a, b]` until the estimated error falls
/// below `rel_tol·∫|f|` (or `abs_floor`, whichever is larger).
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_floor: f64) -> Quad {
    let mut panels: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let (v, e, av) = gk15(&mut f, a, b);
    panels.push((a, b, v, e, av));
    let mut iterations = 0;
    loop {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let abs_value: f64 = panels.iter().map(|p| p.4).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= (rel_tol * abs_value).max(abs_floor) || iterations > 4000 {
            return Quad { value, abs_value, error };
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("at least one panel");
        let (pa, pb, ..) = panels.swap_remove(worst);
        let m = 0.5 * (pa + pb);
        for (lo, hi) in [(pa, m), (m, pb)] {
            let (v, e, av) = gk15(&mut f, lo, hi);
            panels.push((lo, hi, v, e, av));
        }
        iterations += 1;
    }
}

/// Root of a continuous `f` with a sign change on `[lo, hi]`, to absolute tolerance `tol`.
pub fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(Error::NumericFailure(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `∫ g(r − tΔv)·w(t) dt` with the unit-mass Gaussian window of width `σt`,
/// integrated over `t ∈ ±6σt` by adaptive quadrature.
pub fn smeared_psf(g: impl Fn(f64, f64) -> f64, r: [f64; 2], dv: [f64; 2], sigma_t: f64, rel_tol: f64) -> Quad {
    let norm = 1.0 / (sigma_t * std::f64::consts::TAU.sqrt());
    let reach = 6.0 * sigma_t;
    integrate(
        |t| {
            let w = norm * (-0.5 * (t / sigma_t).powi(2)).exp();
            g(r[0] - t * dv[0], r[1] - t * dv[1]) * w
        },
        -reach,
        reach,
        rel_tol,
        0.0,
    )
}
