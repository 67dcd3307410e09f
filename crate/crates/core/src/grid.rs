//! Uniform 2D sampling grids and single images on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform rectangular grid in the (x, z) image plane, lengths in mm.
///
/// Sample `(ix, iz)` sits at `(x0 + ix·dx, z0 + iz·dz)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D<T = f64> {
    pub nx: usize,
    pub nz: usize,
    pub dx: T,
    pub dz: T,
    pub x0: T,
    pub z0: T,
}

impl<T: Real> Grid2D<T> {
    pub fn new(nx: usize, nz: usize, dx: T, dz: T, x0: T, z0: T) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::invalid(format!("grid dimensions must be >= 1, got {nx}x{nz}")));
        }
        if !(dx > T::zero() && dz > T::zero()) || !dx.is_finite() || !dz.is_finite() {
            return Err(Error::invalid(format!("grid spacing must be positive, got dx={dx}, dz={dz}")));
        }
        if !x0.is_finite() || !z0.is_finite() {
            return Err(Error::invalid("grid origin must be finite"));
        }
        nx.checked_mul(nz).ok_or_else(|| Error::invalid("grid size overflows"))?;
        Ok(Self { nx, nz, dx, dz, x0, z0 })
    }

    /// Grid with sample (0,0) at the origin, or centred on it.
    pub fn make(nx: usize, nz: usize, dx: T, dz: T, center_origin: bool) -> Result<Self> {
        let mut g = Self::new(nx, nz, dx, dz, T::zero(), T::zero())?;
        if center_origin {
            let half = T::lit(0.5);
            g.x0 = -dx * T::from_count(nx - 1) * half;
            g.z0 = -dz * T::from_count(nz - 1) * half;
        }
        Ok(g)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn x(&self, ix: usize) -> T {
        self.x0 + T::from_count(ix) * self.dx
    }

    #[inline]
    pub fn z(&self, iz: usize) -> T {
        self.z0 + T::from_count(iz) * self.dz
    }

    #[inline]
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        iz * self.nx + ix
    }

    pub fn x_max(&self) -> T {
        self.x(self.nx - 1)
    }

    pub fn z_max(&self) -> T {
        self.z(self.nz - 1)
    }

    /// Whether `(x, z)` lies inside the sampled extent (inclusive).
    pub fn contains(&self, x: T, z: T) -> bool {
        x >= self.x0 && x <= self.x_max() && z >= self.z0 && z <= self.z_max()
    }

    /// Index of the sample nearest to `(x, z)`, if within half a pixel of the grid.
    pub fn nearest(&self, x: T, z: T) -> Option<(usize, usize)> {
        let fx = ((x - self.x0) / self.dx).round();
        let fz = ((z - self.z0) / self.dz).round();
        if fx < T::zero() || fz < T::zero() {
            return None;
        }
        let ix = fx.to_usize()?;
        let iz = fz.to_usize()?;
        (ix < self.nx && iz < self.nz).then_some((ix, iz))
    }

    /// Finer grid covering the same pixel footprint, `factor` samples per coarse pixel.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be >= 1"));
        }
        let f = T::from_count(factor);
        let half = T::lit(0.5);
        let dx = self.dx / f;
        let dz = self.dz / f;
        Self::new(
            self.nx * factor,
            self.nz * factor,
            dx,
            dz,
            self.x0 - self.dx * half + dx * half,
            self.z0 - self.dz * half + dz * half,
        )
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.nx == other.nx && self.nz == other.nz
    }
}

/// Grid with sample (0,0) at the origin, or centred on it when `center_origin`.
pub fn make_grid<T: Real>(nx: usize, nz: usize, dx: T, dz: T, center_origin: bool) -> Result<Grid2D<T>> {
    Grid2D::make(nx, nz, dx, dz, center_origin)
}

/// A single real image on a grid, z-row-major with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f64> {
    pub grid: Grid2D<T>,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(grid: Grid2D<T>) -> Self {
        Self { grid, data: vec![T::zero(); grid.len()] }
    }

    pub fn from_vec(grid: Grid2D<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "image data length {} does not match grid {}x{}",
                data.len(),
                grid.nx,
                grid.nz
            )));
        }
        Ok(Self { grid, data })
    }

    /// Samples `f(x, z)` at every grid point.
    pub fn from_fn(grid: Grid2D<T>, mut f: impl FnMut(T, T) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for iz in 0..grid.nz {
            let z = grid.z(iz);
            for ix in 0..grid.nx {
                data.push(f(grid.x(ix), z));
            }
        }
        Self { grid, data }
    }

    #[inline]
    pub fn get(&self, ix: usize, iz: usize) -> T {
        self.data[self.grid.index(ix, iz)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iz: usize, v: T) {
        let i = self.grid.index(ix, iz);
        self.data[i] = v;
    }

    /// Largest sample and its `(ix, iz)`.
    pub fn argmax(&self) -> (T, usize, usize) {
        let mut best = (T::neg_infinity(), 0usize);
        for (i, &v) in self.data.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        (best.0, best.1 % self.grid.nx, best.1 / self.grid.nx)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.fabs()))
    }

    /// `Σ v · dx · dz`.
    pub fn integral(&self) -> T {
        self.data.iter().copied().sum::<T>() * self.grid.dx * self.grid.dz
    }
}

/// Binary image on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T = f64> {
    pub grid: Grid2D<T>,
    pub data: Vec<bool>,
}

impl<T: Real> Mask<T> {
    pub fn empty(grid: Grid2D<T>) -> Self {
        Self { grid, data: vec![false; grid.len()] }
    }

    pub fn from_fn(grid: Grid2D<T>, mut f: impl FnMut(T, T) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for iz in 0..grid.nz {
            for ix in 0..grid.nx {
                data.push(f(grid.x(ix), grid.z(iz)));
            }
        }
        Self { grid, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, ix: usize, iz: usize) -> bool {
        self.data[self.grid.index(ix, iz)]
    }

    /// 0/1 image.
    pub fn to_image(&self) -> Image<T> {
        Image { grid: self.grid, data: self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_origin() {
        let g = make_grid(3, 3, 1.0, 1.0, true).unwrap();
        assert_eq!((g.x0, g.z0), (-1.0, -1.0));
        let g = make_grid(1, 1, 0.03, 0.03, true).unwrap();
        assert_eq!((g.x0, g.z0), (0.0, 0.0));
        let g = make_grid(64, 64, 0.03, 0.03, false).unwrap();
        assert_eq!((g.x0, g.z0), (0.0, 0.0));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(make_grid::<f64>(0, 3, 1.0, 1.0, true).is_err());
        assert!(make_grid(3, 3, 0.0, 1.0, true).is_err());
        assert!(make_grid(3, 3, 1.0, -1.0, false).is_err());
    }

    #[test]
    fn lambda_over_ten_pixels() {
        let lambda = 0.3f64;
        let g = make_grid(64, 64, lambda / 10.0, lambda / 10.0, true).unwrap();
        assert!((g.dx - 0.03).abs() < 1e-15);
        assert!((g.x(0) + g.x(63)).abs() < 1e-12);
    }

    #[test]
    fn coordinates_are_affine() {
        let g = make_grid(1000, 2, 0.1f64, 0.1, false).unwrap();
        assert_eq!(g.x(999), 0.0 + 999.0 * 0.1);
    }

    #[test]
    fn refine_keeps_footprint() {
        let g = make_grid(4, 4, 1.0f64, 1.0, true).unwrap();
        let f = g.refine(4).unwrap();
        assert_eq!(f.nx, 16);
        assert!((f.x0 - (g.x0 - 0.5 + 0.125)).abs() < 1e-12);
        assert!((f.x_max() - (g.x_max() + 0.5 - 0.125)).abs() < 1e-12);
    }

    #[test]
    fn nearest_sample() {
        let g = make_grid(5, 5, 1.0f64, 1.0, false).unwrap();
        assert_eq!(g.nearest(1.4, 3.6), Some((1, 4)));
        assert_eq!(g.nearest(-0.6, 0.0), None);
        assert_eq!(g.nearest(4.4, 0.0), Some((4, 0)));
        assert_eq!(g.nearest(4.6, 0.0), None);
    }
}
