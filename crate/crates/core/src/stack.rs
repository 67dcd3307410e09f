//! The spatiotemporal data cube b(x, z, t).

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image};
use crate::scalar::Real;

/// Real image sequence: `nt` frames on a common grid, frame period `dt` seconds.
///
/// Layout is t-major, then z rows, with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack<T = f64> {
    pub grid: Grid2D<T>,
    pub nt: usize,
    pub dt: T,
    pub data: Vec<T>,
}

pub(crate) fn checked_volume(nx: usize, nz: usize, nt: usize) -> Result<usize> {
    nx.checked_mul(nz)
        .and_then(|n| n.checked_mul(nt))
        .filter(|&n| n <= isize::MAX as usize / 16)
        .ok_or_else(|| Error::invalid(format!("stack dimensions {nx}x{nz}x{nt} overflow")))
}

impl<T: Real> FrameStack<T> {
    pub fn zeros(grid: Grid2D<T>, nt: usize, dt: T) -> Result<Self> {
        Self::validate_shape(&grid, nt, dt)?;
        let n = checked_volume(grid.nx, grid.nz, nt)?;
        Ok(Self { grid, nt, dt, data: vec![T::zero(); n] })
    }

    pub fn from_vec(grid: Grid2D<T>, nt: usize, dt: T, data: Vec<T>) -> Result<Self> {
        Self::validate_shape(&grid, nt, dt)?;
        let n = checked_volume(grid.nx, grid.nz, nt)?;
        if data.len() != n {
            return Err(Error::invalid(format!("stack data length {} != {}", data.len(), n)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self { grid, nt, dt, data })
    }

    /// Single-frame stack from an image.
    pub fn from_image(img: Image<T>, dt: T) -> Result<Self> {
        Self::from_vec(img.grid, 1, dt, img.data)
    }

    fn validate_shape(grid: &Grid2D<T>, nt: usize, dt: T) -> Result<()> {
        if nt == 0 {
            return Err(Error::invalid("nt must be >= 1"));
        }
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        Grid2D::new(grid.nx, grid.nz, grid.dx, grid.dz, grid.x0, grid.z0).map(|_| ())
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[T] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frame_image(&self, t: usize) -> Image<T> {
        Image { grid: self.grid, data: self.frame(t).to_vec() }
    }

    #[inline]
    pub fn get(&self, ix: usize, iz: usize, t: usize) -> T {
        self.data[t * self.frame_len() + self.grid.index(ix, iz)]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid.same_shape(&other.grid) && self.nt == other.nt
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.fabs()))
    }

    /// Elementwise sum of two stacks of the same shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::invalid("stack shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { data, ..self.clone() })
    }

    /// Frames `range` as a new stack.
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.nt {
            return Err(Error::invalid(format!("frame range {range:?} outside 0..{}", self.nt)));
        }
        let n = self.frame_len();
        let data = self.data[range.start * n..range.end * n].to_vec();
        Ok(Self { grid: self.grid, nt: range.len(), dt: self.dt, data })
    }

    /// Converts the sample type.
    pub fn cast<U: Real>(&self) -> FrameStack<U> {
        let c = |v: T| U::lit(v.as_f64());
        FrameStack {
            grid: Grid2D {
                nx: self.grid.nx,
                nz: self.grid.nz,
                dx: c(self.grid.dx),
                dz: c(self.grid.dz),
                x0: c(self.grid.x0),
                z0: c(self.grid.z0),
            },
            nt: self.nt,
            dt: c(self.dt),
            data: self.data.iter().map(|&v| c(v)).collect(),
        }
    }
}

/// Relative RMS difference `‖a−b‖₂ / ‖b‖₂` over frames `frames`.
pub fn relative_rms<T: Real>(a: &FrameStack<T>, b: &FrameStack<T>, frames: std::ops::Range<usize>) -> T {
    let n = a.frame_len();
    let (mut num, mut den) = (T::zero(), T::zero());
    for t in frames {
        for i in 0..n {
            let (x, y) = (a.data[t * n + i], b.data[t * n + i]);
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    if den == T::zero() {
        return num.sqrt();
    }
    (num / den).sqrt()
}
