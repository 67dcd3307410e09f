//! The velocity filter `H(k,Ω) = W(Ω + k·v_f)` and the transverse-oscillation
//! filter `G_T(k_x)`, applied by 3D FFT or by direct motion-compensated
//! averaging.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::psf::{PsfParams, ToParams};
use crate::scalar::Real;
use crate::spectrum::{frequencies, to_complex, Fft3Plan};
use crate::stack::FrameStack;
use crate::theory::bandwidth::{velocity_bandwidth, EnvelopeMode};
use crate::window::{gaussian_window, WindowKind};

/// Default window truncation, in units of `σt`.
pub const DEFAULT_TRUNCATION: f64 = 4.0;

/// Selected velocity `v_f = (v_x, v_z)` mm/s and window width `σt` s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityFilterSpec<T = f64> {
    pub v_f: [T; 2],
    pub sigma_t: T,
    #[serde(default)]
    pub window: WindowKind,
}

impl<T: Real> VelocityFilterSpec<T> {
    pub fn new(v_f: [T; 2], sigma_t: T) -> Result<Self> {
        let s = Self { v_f, sigma_t, window: WindowKind::Gaussian };
        s.validate()?;
        Ok(s)
    }

    /// Filter selecting `speed` along `angle` (rad from +x towards +z).
    pub fn polar(speed: T, angle: T, sigma_t: T) -> Result<Self> {
        Self::new([speed * angle.cos(), speed * angle.sin()], sigma_t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > T::zero()) || !self.sigma_t.is_finite() {
            return Err(Error::invalid(format!("sigma_t must be positive, got {}", self.sigma_t)));
        }
        if !self.v_f[0].is_finite() || !self.v_f[1].is_finite() {
            return Err(Error::invalid("v_f must be finite"));
        }
        Ok(())
    }

    pub fn speed(&self) -> T {
        (self.v_f[0] * self.v_f[0] + self.v_f[1] * self.v_f[1]).sqrt()
    }

    /// Whether the selected direction is within `max_angle` of the lateral axis.
    pub fn is_near_lateral(&self, max_angle: T) -> bool {
        if self.speed() == T::zero() {
            return false;
        }
        let off = (self.v_f[1].fabs()).atan2(self.v_f[0].fabs());
        off <= max_angle
    }

    /// Gain at `(k, Ω)` for frames sampled every `dt`.
    ///
    /// The argument `Ω + k·v_f` is wrapped into the principal interval
    /// `[−π/dt, π/dt)`, so motion that aliases temporally is still passed.
    pub fn gain(&self, kx: T, kz: T, omega: T, dt: T) -> T {
        let period = T::TAU() / dt;
        let y = omega + kx * self.v_f[0] + kz * self.v_f[1];
        let y = y - period * (y / period).round();
        self.window.transfer(self.sigma_t, y)
    }
}

/// Real, nonnegative gain sampled on a DFT lattice, same layout as the stack.
#[derive(Clone, Debug)]
pub struct TransferFunction3D<T = f64> {
    pub nx: usize,
    pub nz: usize,
    pub nt: usize,
    pub gain: Vec<T>,
    pub spec: VelocityFilterSpec<T>,
}

impl<T: Real> TransferFunction3D<T> {
    pub fn get(&self, ix: usize, iz: usize, it: usize) -> T {
        self.gain[(it * self.nz + iz) * self.nx + ix]
    }
}

/// Samples `H(k,Ω)` on the lattice of an `nx × nz × nt` stack.
pub fn build_filter<T: Real>(grid: &Grid2D<T>, nt: usize, dt: T, spec: &VelocityFilterSpec<T>) -> Result<TransferFunction3D<T>> {
    spec.validate()?;
    crate::stack::checked_volume(grid.nx, grid.nz, nt)?;
    let kx = frequencies(grid.nx, grid.dx);
    let kz = frequencies(grid.nz, grid.dz);
    let om = frequencies(nt, dt);
    let mut gain = Vec::with_capacity(grid.len() * nt);
    for &w in &om {
        for &z in &kz {
            for &x in &kx {
                gain.push(spec.gain(x, z, w, dt));
            }
        }
    }
    Ok(TransferFunction3D { nx: grid.nx, nz: grid.nz, nt, gain, spec: *spec })
}

/// Number of zero frames padded on each side for a window of width `sigma_t`.
pub fn temporal_padding<T: Real>(sigma_t: T, dt: T) -> usize {
    (T::lit(DEFAULT_TRUNCATION) * sigma_t / dt * (T::one() - T::lit(1e-12))).ceil().to_usize().unwrap_or(0)
}

/// Holds the spectrum of a zero-padded stack so that many filters can be
/// applied with one forward transform.
pub struct FilterEngine<T: Real> {
    grid: Grid2D<T>,
    nt: usize,
    dt: T,
    pad: usize,
    plan: Fft3Plan<T>,
    spectrum: Vec<Complex<T>>,
    kx: Vec<T>,
    kz: Vec<T>,
    omega: Vec<T>,
}

impl<T: Real> FilterEngine<T> {
    /// Pads `frames` in time by `4·max_sigma_t/dt` zero frames on each side and transforms.
    pub fn new(frames: &FrameStack<T>, max_sigma_t: T) -> Result<Self> {
        if !(max_sigma_t > T::zero()) {
            return Err(Error::invalid("max_sigma_t must be positive"));
        }
        let pad = temporal_padding(max_sigma_t, frames.dt);
        let ntp = frames.nt + 2 * pad;
        let plan = Fft3Plan::new(frames.grid.nx, frames.grid.nz, ntp)?;
        let n = frames.frame_len();
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); n * ntp];
        for (dst, &src) in spectrum[pad * n..(pad + frames.nt) * n].iter_mut().zip(&frames.data) {
            dst.re = src;
        }
        plan.forward(&mut spectrum);
        Ok(Self {
            grid: frames.grid,
            nt: frames.nt,
            dt: frames.dt,
            pad,
            plan,
            spectrum,
            kx: frequencies(frames.grid.nx, frames.grid.dx),
            kz: frequencies(frames.grid.nz, frames.grid.dz),
            omega: frequencies(ntp, frames.dt),
        })
    }

    pub fn padding(&self) -> usize {
        self.pad
    }

    /// Applies `spec`, optionally preceded by the TO filter, and trims the padding.
    pub fn apply(&self, spec: &VelocityFilterSpec<T>, to: Option<&ToParams<T>>) -> Result<FrameStack<T>> {
        spec.validate()?;
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let to_gain: Option<Vec<T>> = to.map(|t| self.kx.iter().map(|&k| t.gain(k)).collect());
        let mut work = self.spectrum.clone();
        for (it, &w) in self.omega.iter().enumerate() {
            for (iz, &kz) in self.kz.iter().enumerate() {
                let row = &mut work[(it * nz + iz) * nx..(it * nz + iz + 1) * nx];
                for (ix, c) in row.iter_mut().enumerate() {
                    let mut g = spec.gain(self.kx[ix], kz, w, self.dt);
                    if let Some(tg) = &to_gain {
                        g *= tg[ix];
                    }
                    *c *= g;
                }
            }
        }
        self.plan.inverse(&mut work);
        let n = nx * nz;
        let data = work[self.pad * n..(self.pad + self.nt) * n].iter().map(|c| c.re).collect();
        Ok(FrameStack { grid: self.grid, nt: self.nt, dt: self.dt, data })
    }
}

/// `Re ifft3(fft3(b)·H)` with zero padding of `4σt/dt` frames at each end.
pub fn apply_filter_fft<T: Real>(frames: &FrameStack<T>, spec: &VelocityFilterSpec<T>) -> Result<FrameStack<T>> {
    spec.validate()?;
    FilterEngine::new(frames, spec.sigma_t)?.apply(spec, None)
}

/// Time-domain form of the filter,
/// `φ(r,t) = Σ_n w(nΔt)·b(r − v_f·nΔt, t − nΔt)·Δt`,
/// with band-limited (Fourier phase-ramp) sub-pixel shifts and zero-extended
/// temporal edges.
pub fn apply_filter_direct<T: Real>(frames: &FrameStack<T>, spec: &VelocityFilterSpec<T>) -> Result<FrameStack<T>> {
    apply_filter_direct_truncated(frames, spec, T::lit(DEFAULT_TRUNCATION))
}

/// As [`apply_filter_direct`] with the window truncated at `trunc_sigmas·σt`.
pub fn apply_filter_direct_truncated<T: Real>(frames: &FrameStack<T>, spec: &VelocityFilterSpec<T>, trunc_sigmas: T) -> Result<FrameStack<T>> {
    spec.validate()?;
    let WindowKind::Gaussian = spec.window;
    let w = gaussian_window(spec.sigma_t, frames.dt, trunc_sigmas)?;
    let (nx, nz, nt) = (frames.grid.nx, frames.grid.nz, frames.nt);
    let n = nx * nz;
    let plan = Fft3Plan::new(nx, nz, 1)?;
    let mut spectra = to_complex(&frames.data);
    plan.forward_spatial(&mut spectra);

    let kx = frequencies(nx, frames.grid.dx);
    let kz = frequencies(nz, frames.grid.dz);
    // ramps[lag][k] = w(lag·dt)·dt·exp(−i k·v_f lag·dt).
    let ramps: Vec<(isize, Vec<Complex<T>>)> = w
        .lags()
        .map(|(lag, wt)| {
            let tau = T::from_count(lag.unsigned_abs()) * frames.dt * if lag < 0 { -T::one() } else { T::one() };
            let mut r = Vec::with_capacity(n);
            for &z in &kz {
                for &x in &kx {
                    let ph = -(x * spec.v_f[0] + z * spec.v_f[1]) * tau;
                    r.push(Complex::from_polar(wt * frames.dt, ph));
                }
            }
            (lag, r)
        })
        .collect();

    let mut out = vec![Complex::new(T::zero(), T::zero()); n * nt];
    for t in 0..nt {
        let acc = &mut out[t * n..(t + 1) * n];
        for (lag, ramp) in &ramps {
            let src = t as isize - lag;
            if src < 0 || src >= nt as isize {
                continue;
            }
            let s = &spectra[src as usize * n..(src as usize + 1) * n];
            for ((a, &b), &r) in acc.iter_mut().zip(s).zip(ramp) {
                *a += b * r;
            }
        }
    }
    plan.inverse_spatial(&mut out);
    Ok(FrameStack { grid: frames.grid, nt, dt: frames.dt, data: out.into_iter().map(|c| c.re).collect() })
}

/// Per-frame lateral filtering by `G_T(k_x)`.
pub fn apply_to_filter<T: Real>(frames: &FrameStack<T>, to: &ToParams<T>) -> Result<FrameStack<T>> {
    to.validate()?;
    let (nx, nz) = (frames.grid.nx, frames.grid.nz);
    let plan = Fft3Plan::new(nx, nz, 1)?;
    let mut data = to_complex(&frames.data);
    plan.forward_spatial(&mut data);
    let gains: Vec<T> = frequencies(nx, frames.grid.dx).into_iter().map(|k| to.gain(k)).collect();
    for row in data.chunks_mut(nx) {
        for (c, &g) in row.iter_mut().zip(&gains) {
            *c *= g;
        }
    }
    plan.inverse_spatial(&mut data);
    Ok(FrameStack { grid: frames.grid, nt: frames.nt, dt: frames.dt, data: data.into_iter().map(|c| c.re).collect() })
}

/// A set of velocity filters applied to the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBankSpec<T = f64> {
    pub members: Vec<VelocityFilterSpec<T>>,
}

impl<T: Real> FilterBankSpec<T> {
    pub fn new(members: Vec<VelocityFilterSpec<T>>) -> Result<Self> {
        let b = Self { members };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("filter bank is empty"));
        }
        self.members.iter().try_for_each(VelocityFilterSpec::validate)
    }

    /// Bank covering `[v_min, v_max]` along each of `directions` (rad), with
    /// consecutive speeds `spacing_factor·2δv(θ)` apart, where `δv(θ)` is the
    /// passband half-width for mismatch along that direction.
    pub fn tiled(psf: &PsfParams<T>, sigma_t: T, directions: &[T], v_min: T, v_max: T, spacing_factor: T, mode: EnvelopeMode) -> Result<Self> {
        if !(v_min >= T::zero()) || !(v_max >= v_min) || !(spacing_factor > T::zero()) {
            return Err(Error::invalid("tiled bank needs 0 <= v_min <= v_max and spacing_factor > 0"));
        }
        let mut members = Vec::new();
        for &phi in directions {
            let theta = (phi.sin().fabs()).atan2(phi.cos().fabs()).min(T::FRAC_PI_2());
            let dv = velocity_bandwidth(psf, sigma_t, theta, mode)?.delta_v;
            let step = T::lit(2.0) * dv * spacing_factor;
            let mut s = v_min;
            loop {
                members.push(VelocityFilterSpec::polar(s, phi, sigma_t)?);
                if s >= v_max {
                    break;
                }
                s = (s + step).min(v_max);
            }
        }
        Self::new(members)
    }

    pub fn max_sigma_t(&self) -> T {
        self.members.iter().fold(T::zero(), |m, s| m.max(s.sigma_t))
    }
}

/// TO usage rule for a bank: engage the TO pre-filter only for members whose
/// direction is within `max_angle` of lateral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToRule<T = f64> {
    pub params: ToParams<T>,
    pub max_angle: T,
}

impl<T: Real> ToRule<T> {
    /// Rule with the default 10° angular tolerance.
    pub fn new(params: ToParams<T>) -> Self {
        Self { params, max_angle: T::lit(10f64.to_radians()) }
    }

    pub fn applies_to(&self, spec: &VelocityFilterSpec<T>) -> bool {
        spec.is_near_lateral(self.max_angle)
    }
}

/// Filters `frames` with every bank member in order and streams each result to `sink`.
pub fn run_filter_bank<T, F>(frames: &FrameStack<T>, bank: &FilterBankSpec<T>, to: Option<&ToRule<T>>, mut sink: F) -> Result<()>
where
    T: Real,
    F: FnMut(usize, &VelocityFilterSpec<T>, FrameStack<T>) -> Result<()>,
{
    bank.validate()?;
    let engine = FilterEngine::new(frames, bank.max_sigma_t())?;
    for (i, spec) in bank.members.iter().enumerate() {
        let wrap = |e: Error| Error::BankMember { index: i, source: Box::new(e) };
        let to_params = to.filter(|r| r.applies_to(spec)).map(|r| &r.params);
        let out = engine.apply(spec, to_params).map_err(wrap)?;
        sink(i, spec, out).map_err(wrap)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::phantom::{synthesize_frames, Bubble, FreeFlow, MotionSpec};
    use crate::psf::PsfMode;
    use crate::stack::relative_rms;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(nx: usize, nz: usize, nt: usize, seed: u64) -> FrameStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid(nx, nz, 0.05, 0.05, true).unwrap();
        FrameStack::from_vec(g, nt, 0.01, (0..nx * nz * nt).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gain_values() {
        let s = VelocityFilterSpec::new([0.0, 0.0], 0.5).unwrap();
        assert!((s.gain(3.0, -2.0, 2.0, 0.01) - (-0.5f64).exp()).abs() < 1e-15);
        let s = VelocityFilterSpec::new([1.5, -0.5], 0.5).unwrap();
        let (kx, kz) = (4.0, 2.0);
        assert_eq!(s.gain(kx, kz, -(kx * 1.5 - kz * 0.5), 0.01), 1.0);
    }

    #[test]
    fn lattice_gain_bounds() {
        let g = make_grid(8, 6, 0.05, 0.05, true).unwrap();
        let tf = build_filter(&g, 10, 0.01, &VelocityFilterSpec::new([2.0, 1.0], 0.2).unwrap()).unwrap();
        assert!(tf.gain.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let tf0 = build_filter(&g, 10, 0.01, &VelocityFilterSpec::new([0.0, 0.0], 0.2).unwrap()).unwrap();
        for it in 0..10 {
            let v = tf0.get(0, 0, it);
            assert!((0..6).all(|iz| (0..8).all(|ix| tf0.get(ix, iz, it) == v)));
        }
    }

    #[test]
    fn static_data_through_zero_velocity_filter() {
        let g = make_grid(16, 16, 0.03, 0.03, true).unwrap();
        let mut flow = FreeFlow { bubbles: vec![Bubble { pos3: [0.0; 3], vel3: [0.0; 3], id: 0 }], motion: MotionSpec::Linear };
        let p = PsfParams { sigma_r: 0.1, lambda: 0.3 };
        let (frames, _) = synthesize_frames(&mut flow, &p, &PsfMode::Pre, &g, 80, 0.01, None).unwrap();
        let out = apply_filter_fft(&frames, &VelocityFilterSpec::new([0.0, 0.0], 0.05).unwrap()).unwrap();
        assert!(relative_rms(&out, &frames, 30..50) < 1e-6);
    }

    #[test]
    fn delta_window_direct_path_is_identity() {
        let s = random_stack(8, 8, 12, 1);
        let spec = VelocityFilterSpec::new([3.0, -2.0], 0.001).unwrap();
        let out = apply_filter_direct(&s, &spec).unwrap();
        assert!(relative_rms(&out, &s, 0..12) < 1e-6);
    }

    #[test]
    fn dual_paths_agree() {
        let s = random_stack(16, 12, 48, 4);
        let spec = VelocityFilterSpec::new([0.7, -0.4], 0.03).unwrap();
        let a = apply_filter_fft(&s, &spec).unwrap();
        let b = apply_filter_direct(&s, &spec).unwrap();
        assert!(relative_rms(&a, &b, 12..36) < 1e-3);
    }

    #[test]
    fn energy_not_amplified() {
        let s = random_stack(12, 10, 30, 8);
        let out = apply_filter_fft(&s, &VelocityFilterSpec::new([1.0, 2.0], 0.02).unwrap()).unwrap();
        assert!(out.energy() <= s.energy() * (1.0 + 1e-10));
    }

    #[test]
    fn to_filter_dc_and_carrier_gain() {
        let t = ToParams::<f64> { lambda_x: 0.5, sigma_x: 0.2 };
        let g = make_grid(50, 4, 0.05, 0.05, true).unwrap();
        let c = FrameStack::from_vec(g, 1, 1.0, vec![1.0; 200]).unwrap();
        let out = apply_to_filter(&c, &t).unwrap();
        let dc = 2.0 * (-0.5 * 0.04 * t.k0x().powi(2)).exp();
        assert!(out.data.iter().all(|&v| (v - dc).abs() < 1e-12));

        let wave = crate::grid::Image::from_fn(g, |x, _| (t.k0x() * x).cos());
        let out = apply_to_filter(&FrameStack::from_image(wave.clone(), 1.0).unwrap(), &t).unwrap();
        let expect = 1.0 + (-2.0 * 0.04 * t.k0x().powi(2)).exp();
        for (o, w) in out.data.iter().zip(&wave.data) {
            assert!((o - expect * w).abs() < 1e-10);
        }
    }

    #[test]
    fn bank_of_one_equals_single_filter() {
        let s = random_stack(8, 8, 20, 2);
        let spec = VelocityFilterSpec::new([0.5, 0.5], 0.03).unwrap();
        let single = apply_filter_fft(&s, &spec).unwrap();
        let mut got = None;
        run_filter_bank(&s, &FilterBankSpec::new(vec![spec]).unwrap(), None, |_, _, f| {
            got = Some(f);
            Ok(())
        })
        .unwrap();
        assert_eq!(got.unwrap(), single);
    }

    #[test]
    fn bank_sink_errors_carry_index() {
        let s = random_stack(4, 4, 8, 2);
        let spec = VelocityFilterSpec::new([0.5, 0.5], 0.03).unwrap();
        let bank = FilterBankSpec::new(vec![spec, spec]).unwrap();
        let err = run_filter_bank(&s, &bank, None, |i, _, _| if i == 1 { Err(Error::Data("disk full".into())) } else { Ok(()) }).unwrap_err();
        assert!(matches!(err, Error::BankMember { index: 1, .. }));
        assert!(FilterBankSpec::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn to_rule_engages_near_lateral_only() {
        let r = ToRule::new(ToParams { lambda_x: 0.5, sigma_x: 0.2 });
        assert!(r.applies_to(&VelocityFilterSpec::polar(2.0, 0.1, 0.5).unwrap()));
        assert!(r.applies_to(&VelocityFilterSpec::polar(2.0, std::f64::consts::PI - 0.1, 0.5).unwrap()));
        assert!(!r.applies_to(&VelocityFilterSpec::polar(2.0, 0.3, 0.5).unwrap()));
        assert!(!r.applies_to(&VelocityFilterSpec::new([0.0, 0.0], 0.5).unwrap()));
    }

    #[test]
    fn tiled_bank_spacing() {
        let p = PsfParams { sigma_r: 0.3, lambda: 0.3 };
        let bank = FilterBankSpec::tiled(&p, 0.3, &[0.0], 0.0, 5.0, 1.0, EnvelopeMode::Pre).unwrap();
        let speeds: Vec<f64> = bank.members.iter().map(|m| m.speed()).collect();
        let dv = 6f64.sqrt();
        assert!((speeds[1] - 2.0 * dv).abs() < 1e-9);
        assert_eq!(*speeds.last().unwrap(), 5.0);
    }

    proptest! {
        #[test]
        fn gain_in_unit_interval(vx in -20.0f64..20.0, vz in -20.0f64..20.0, st in 0.001f64..2.0, kx in -100.0f64..100.0, kz in -100.0f64..100.0, w in -400.0f64..400.0) {
            let g = VelocityFilterSpec::new([vx, vz], st).unwrap().gain(kx, kz, w, 0.01);
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}
