//! Complex 3D spectra and the FFT contract.
//!
//! Forward transforms are unnormalized with kernel `e^{-i(k·r + Ωt)}`; inverse
//! transforms carry the `1/N` factor. All transforms run single-threaded and
//! are bit-reproducible.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::grid::Grid2D;
use crate::scalar::Real;
use crate::stack::{checked_volume, FrameStack};

/// Signed DFT index: `i` for the non-negative half, `i − n` otherwise.
#[inline]
pub fn signed_index(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Angular frequency of DFT bin `i` for `n` samples spaced `d` apart.
#[inline]
pub fn dft_frequency<T: Real>(i: usize, n: usize, d: T) -> T {
    let s = signed_index(i, n) as f64;
    T::lit(2.0 * std::f64::consts::PI * s) / (T::from_count(n) * d)
}

/// All bin frequencies in DFT order.
pub fn frequencies<T: Real>(n: usize, d: T) -> Vec<T> {
    (0..n).map(|i| dft_frequency(i, n, d)).collect()
}

/// DFT-order indices arranged from most negative to most positive frequency.
pub fn centered_order(n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| signed_index(i, n));
    idx
}

/// Spectrum of a `FrameStack` over `(k_x, k_z, Ω)`, same layout as the source.
#[derive(Clone, Debug)]
pub struct Spectrum3D<T = f64> {
    pub grid: Grid2D<T>,
    pub nt: usize,
    pub dt: T,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> Spectrum3D<T> {
    pub fn kx(&self, i: usize) -> T {
        dft_frequency(i, self.grid.nx, self.grid.dx)
    }

    pub fn kz(&self, i: usize) -> T {
        dft_frequency(i, self.grid.nz, self.grid.dz)
    }

    pub fn omega(&self, i: usize) -> T {
        dft_frequency(i, self.nt, self.dt)
    }

    #[inline]
    pub fn get(&self, ix: usize, iz: usize, it: usize) -> Complex<T> {
        self.data[(it * self.grid.nz + iz) * self.grid.nx + ix]
    }
}

/// Reusable plans for transforms of a fixed `(nx, nz, nt)` shape.
pub struct Fft3Plan<T: Real> {
    nx: usize,
    nz: usize,
    nt: usize,
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Fft3Plan<T> {
    pub fn new(nx: usize, nz: usize, nt: usize) -> Result<Self> {
        checked_volume(nx, nz, nt)?;
        let mut planner = FftPlanner::new();
        let fwd = [planner.plan_fft_forward(nx), planner.plan_fft_forward(nz), planner.plan_fft_forward(nt)];
        let inv = [planner.plan_fft_inverse(nx), planner.plan_fft_inverse(nz), planner.plan_fft_inverse(nt)];
        Ok(Self { nx, nz, nt, fwd, inv })
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-place unnormalized forward transform over all three axes.
    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.fwd, true);
    }

    /// In-place inverse transform including the `1/N` factor.
    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.inv, true);
        let s = T::one() / T::from_count(self.len());
        data.iter_mut().for_each(|c| *c *= s);
    }

    /// Forward transform of the two spatial axes of every frame.
    pub fn forward_spatial(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.fwd, false);
    }

    /// Inverse spatial transform of every frame, including `1/(nx·nz)`.
    pub fn inverse_spatial(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.inv, false);
        let s = T::one() / T::from_count(self.nx * self.nz);
        data.iter_mut().for_each(|c| *c *= s);
    }

    fn run(&self, data: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3], temporal: bool) {
        assert_eq!(data.len() % (self.nx * self.nz), 0, "buffer is not a whole number of frames");
        let plane = self.nx * self.nz;
        let frames = data.len() / plane;
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.scratch_len(plans)];
        if self.nx > 1 {
            plans[0].process_with_scratch(data, &mut scratch);
        }
        if self.nz > 1 {
            let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
            for f in 0..frames {
                let frame = &mut data[f * plane..(f + 1) * plane];
                transpose(frame, &mut buf, self.nz, self.nx);
                plans[1].process_with_scratch(&mut buf, &mut scratch);
                transpose(&buf, frame, self.nx, self.nz);
            }
        }
        if temporal && frames > 1 {
            debug_assert_eq!(frames, self.nt);
            const BLOCK: usize = 64;
            let mut buf = vec![Complex::new(T::zero(), T::zero()); BLOCK * frames];
            let mut p0 = 0;
            while p0 < plane {
                let b = BLOCK.min(plane - p0);
                for t in 0..frames {
                    let row = &data[t * plane + p0..t * plane + p0 + b];
                    for (j, &v) in row.iter().enumerate() {
                        buf[j * frames + t] = v;
                    }
                }
                plans[2].process_with_scratch(&mut buf[..b * frames], &mut scratch);
                for t in 0..frames {
                    let row = &mut data[t * plane + p0..t * plane + p0 + b];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = buf[j * frames + t];
                    }
                }
                p0 += b;
            }
        }
    }

    fn scratch_len(&self, plans: &[Arc<dyn Fft<T>>; 3]) -> usize {
        plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0)
    }
}

/// `dst[c][r] = src[r][c]` for a `rows × cols` row-major `src`.
fn transpose<C: Copy>(src: &[C], dst: &mut [C], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub(crate) fn to_complex<T: Real>(data: &[T]) -> Vec<Complex<T>> {
    data.iter().map(|&v| Complex::new(v, T::zero())).collect()
}

/// Unnormalized forward 3D DFT.
pub fn fft3<T: Real>(frames: &FrameStack<T>) -> Result<Spectrum3D<T>> {
    let plan = Fft3Plan::new(frames.grid.nx, frames.grid.nz, frames.nt)?;
    let mut data = to_complex(&frames.data);
    plan.forward(&mut data);
    Ok(Spectrum3D { grid: frames.grid, nt: frames.nt, dt: frames.dt, data })
}

/// Inverse 3D DFT, keeping the real part.
pub fn ifft3<T: Real>(spec: &Spectrum3D<T>) -> Result<FrameStack<T>> {
    let plan = Fft3Plan::new(spec.grid.nx, spec.grid.nz, spec.nt)?;
    let mut data = spec.data.clone();
    plan.inverse(&mut data);
    Ok(FrameStack { grid: spec.grid, nt: spec.nt, dt: spec.dt, data: data.into_iter().map(|c| c.re).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(nx: usize, nz: usize, nt: usize, seed: u64) -> FrameStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid(nx, nz, 0.03, 0.04, true).unwrap();
        let data = (0..nx * nz * nt).map(|_| rng.random_range(-1.0..1.0)).collect();
        FrameStack::from_vec(g, nt, 0.01, data).unwrap()
    }

    /// Brute-force 3D DFT, O(N²).
    fn naive_dft(s: &FrameStack<f64>) -> Vec<Complex<f64>> {
        let (nx, nz, nt) = (s.grid.nx, s.grid.nz, s.nt);
        let tau = std::f64::consts::TAU;
        let mut out = vec![Complex::new(0.0, 0.0); nx * nz * nt];
        for kt in 0..nt {
            for kz in 0..nz {
                for kx in 0..nx {
                    let mut acc = Complex::new(0.0, 0.0);
                    for t in 0..nt {
                        for z in 0..nz {
                            for x in 0..nx {
                                let ph = -tau
                                    * ((kx * x) as f64 / nx as f64
                                        + (kz * z) as f64 / nz as f64
                                        + (kt * t) as f64 / nt as f64);
                                acc += Complex::from_polar(s.get(x, z, t), ph);
                            }
                        }
                    }
                    out[(kt * nz + kz) * nx + kx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_dft() {
        let s = random_stack(5, 4, 6, 1);
        let spec = fft3(&s).unwrap();
        let reference = naive_dft(&s);
        let err = spec.data.iter().zip(&reference).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max deviation {err}");
    }

    #[test]
    fn round_trip_8cubed() {
        let s = random_stack(8, 8, 8, 7);
        let back = ifft3(&fft3(&s).unwrap()).unwrap();
        let rms = crate::stack::relative_rms(&back, &s, 0..8);
        assert!(rms < 1e-10, "rms {rms}");
    }

    #[test]
    fn parseval() {
        let s = random_stack(16, 12, 10, 3);
        let spec = fft3(&s).unwrap();
        let e_time = s.energy();
        let e_freq: f64 = spec.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / spec.data.len() as f64;
        assert!(((e_time - e_freq) / e_time).abs() < 1e-10);
    }

    #[test]
    fn constant_and_impulse() {
        let g = make_grid(4, 3, 1.0f64, 1.0, false).unwrap();
        let c = FrameStack::from_vec(g, 5, 1.0, vec![2.5; 60]).unwrap();
        let spec = fft3(&c).unwrap();
        assert!((spec.data[0].re - 2.5 * 60.0).abs() < 1e-12);
        assert!(spec.data[1..].iter().all(|v| v.norm() < 1e-12));

        let mut imp = vec![0.0; 60];
        imp[0] = 1.0;
        let spec = fft3(&FrameStack::from_vec(g, 5, 1.0, imp).unwrap()).unwrap();
        assert!(spec.data.iter().all(|v| (v - Complex::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn frequency_lattice() {
        assert_eq!(signed_index(2, 4), -2);
        assert_eq!(signed_index(2, 5), 2);
        assert_eq!(signed_index(3, 5), -2);
        let f = frequencies(4, 0.5f64);
        let step = std::f64::consts::TAU / 2.0;
        assert_eq!(f, vec![0.0, step, -2.0 * step, -step]);
        assert_eq!(centered_order(4), vec![2, 3, 0, 1]);
    }

    #[test]
    fn round_trip_f32() {
        let s = random_stack(8, 8, 8, 9).cast::<f32>();
        let back = ifft3(&fft3(&s).unwrap()).unwrap();
        assert!(crate::stack::relative_rms(&back, &s, 0..8) < 1e-5);
    }
}
