//! Microbubble phantoms: cylindrical vessels with parabolic flow, circular
//! flow bands, and synthesis of image sequences with ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Mask};
use crate::localize::VelocityMap;
use crate::psf::{PsfMode, PsfParams, SeparablePsf};
use crate::scalar::Real;
use crate::stack::FrameStack;

/// Straight cylindrical vessel whose axis lies in the (x, z) image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec<T = f64> {
    pub radius_r: T,
    /// Centreline speed, mm/s.
    pub v0: T,
    /// Bubble concentration, per mm³.
    pub c_mb: T,
    /// Flow direction in the (x, z) plane, measured from +x towards +z.
    pub axis_angle_theta: T,
    pub center: [T; 2],
    /// Elevation offset of the axis from the image plane.
    #[serde(default)]
    pub center_y: T,
    pub length: T,
}

impl<T: Real> Default for VesselSpec<T> {
    fn default() -> Self {
        Self {
            radius_r: T::one(),
            v0: T::one(),
            c_mb: T::zero(),
            axis_angle_theta: T::zero(),
            center: [T::zero(); 2],
            center_y: T::zero(),
            length: T::lit(10.0),
        }
    }
}

impl<T: Real> VesselSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_r > T::zero()) || !(self.v0 >= T::zero()) || !(self.c_mb >= T::zero()) || !(self.length > T::zero()) {
            return Err(Error::invalid("vessel needs radius > 0, length > 0, v0 >= 0, c_mb >= 0"));
        }
        Ok(())
    }

    /// Length spanning the grid diagonal plus a `4σr` margin at each end.
    pub fn default_length(grid: &Grid2D<T>, psf: &PsfParams<T>) -> T {
        let w = grid.dx * T::from_count(grid.nx);
        let h = grid.dz * T::from_count(grid.nz);
        (w * w + h * h).sqrt() + T::lit(8.0) * psf.sigma_r
    }

    /// Unit flow direction in (x, z).
    pub fn axis(&self) -> [T; 2] {
        [self.axis_angle_theta.cos(), self.axis_angle_theta.sin()]
    }

    /// In-plane unit normal to the axis.
    pub fn normal(&self) -> [T; 2] {
        [-self.axis_angle_theta.sin(), self.axis_angle_theta.cos()]
    }

    /// Parabolic profile `v₀(1 − ρ²/R²)`, zero outside the vessel.
    pub fn flow_speed(&self, rho: T) -> T {
        flow_speed(self, rho)
    }

    /// Signed in-plane distance from the axis and axial coordinate of `(x, z)`.
    pub fn local_coords(&self, x: T, z: T) -> (T, T) {
        let (dx, dz) = (x - self.center[0], z - self.center[1]);
        let a = self.axis();
        let n = self.normal();
        (dx * n[0] + dz * n[1], dx * a[0] + dz * a[1])
    }
}

/// Parabolic speed `v₀(1 − ρ²/R²)`, clamped to zero for `ρ > R`.
pub fn flow_speed<T: Real>(v: &VesselSpec<T>, rho: T) -> T {
    (v.v0 * (T::one() - (rho / v.radius_r).powi(2))).max(T::zero())
}

/// A point scatterer with 3D position (x, y, z) and velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bubble<T = f64> {
    pub pos3: [T; 3],
    pub vel3: [T; 3],
    pub id: u64,
}

impl<T: Real> Bubble<T> {
    pub fn in_plane_speed(&self) -> T {
        (self.vel3[0] * self.vel3[0] + self.vel3[2] * self.vel3[2]).sqrt()
    }
}

pub type BubbleSet<T = f64> = Vec<Bubble<T>>;

fn poisson_count<R: Rng>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Uniform point in the disk of radius `r`, by rejection from the square.
fn disk_point<R: Rng>(r: f64, rng: &mut R) -> (f64, f64) {
    loop {
        let u = rng.random_range(-r..r);
        let w = rng.random_range(-r..r);
        if u * u + w * w <= r * r {
            return (u, w);
        }
    }
}

/// Poisson-distributed bubbles uniform in the cylinder, ids from `first_id`.
pub fn sample_bubbles_with<T: Real, R: Rng>(v: &VesselSpec<T>, rng: &mut R, first_id: u64) -> BubbleSet<T> {
    let (r, len) = (v.radius_r.as_f64(), v.length.as_f64());
    let n = poisson_count(v.c_mb.as_f64() * std::f64::consts::PI * r * r * len, rng);
    let a = v.axis();
    let nrm = v.normal();
    (0..n)
        .map(|i| {
            let s = T::lit(rng.random_range(-0.5 * len..0.5 * len));
            let (u, w) = disk_point(r, rng);
            let (u, w) = (T::lit(u), T::lit(w));
            let speed = flow_speed(v, (u * u + w * w).sqrt());
            Bubble {
                pos3: [v.center[0] + s * a[0] + u * nrm[0], v.center_y + w, v.center[1] + s * a[1] + u * nrm[1]],
                vel3: [speed * a[0], T::zero(), speed * a[1]],
                id: first_id + i as u64,
            }
        })
        .collect()
}

/// Samples a vessel's bubbles from a seeded ChaCha8 generator.
pub fn sample_bubbles<T: Real>(v: &VesselSpec<T>, seed: u64) -> BubbleSet<T> {
    sample_bubbles_with(v, &mut ChaCha8Rng::seed_from_u64(seed), 0)
}

/// Circular flow band: a torus of tube radius `radius_r` around an in-plane
/// circle of radius `orbit_radius`, parabolic speed across the tube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec<T = f64> {
    pub center: [T; 2],
    pub orbit_radius: T,
    pub radius_r: T,
    pub v0: T,
    pub c_mb: T,
    /// `+1` rotates from +x towards +z, `−1` the other way.
    pub angular_sign: T,
    #[serde(default)]
    pub center_y: T,
}

impl<T: Real> RingSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_r > T::zero()) || !(self.orbit_radius > self.radius_r) || !(self.v0 >= T::zero()) || !(self.c_mb >= T::zero()) {
            return Err(Error::invalid("ring needs 0 < radius_r < orbit_radius, v0 >= 0, c_mb >= 0"));
        }
        Ok(())
    }

    /// Centripetal acceleration of a centreline bubble, mm/s².
    pub fn centripetal_acceleration(&self) -> T {
        self.v0 * self.v0 / self.orbit_radius
    }
}

/// Poisson-distributed bubbles uniform in the torus volume.
pub fn sample_ring<T: Real, R: Rng>(ring: &RingSpec<T>, rng: &mut R, first_id: u64) -> Result<BubbleSet<T>> {
    ring.validate()?;
    let (r, rm) = (ring.radius_r.as_f64(), ring.orbit_radius.as_f64());
    let volume = std::f64::consts::PI * r * r * std::f64::consts::TAU * rm;
    let n = poisson_count(ring.c_mb.as_f64() * volume, rng);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (u, w) = disk_point(r, rng);
        // Volume element of the torus grows with the distance from its centre.
        if rng.random_range(0.0..1.0) * (rm + r) > rm + u {
            continue;
        }
        let orbit = rm + u;
        let speed = ring.v0.as_f64() * (1.0 - (u * u + w * w) / (r * r));
        let sign = ring.angular_sign.as_f64().signum();
        let (s, c) = phi.sin_cos();
        out.push(Bubble {
            pos3: [ring.center[0] + T::lit(orbit * c), ring.center_y + T::lit(w), ring.center[1] + T::lit(orbit * s)],
            vel3: [T::lit(-sign * speed * s), T::zero(), T::lit(sign * speed * c)],
            id: first_id + out.len() as u64,
        });
    }
    Ok(out)
}

/// How bubbles move between frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionSpec<T = f64> {
    /// `pos += vel·dt`.
    Linear,
    /// Rotation about `center` in the (x, z) plane at `ω = speed/orbit radius`.
    Circular { center: [T; 2], angular_sign: T },
}

/// Moves every bubble forward by `dt`.
pub fn advance<T: Real>(bubbles: &[Bubble<T>], motion: &MotionSpec<T>, dt: T) -> Result<BubbleSet<T>> {
    if !(dt > T::zero()) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut out = bubbles.to_vec();
    advance_in_place(&mut out, motion, dt)?;
    Ok(out)
}

fn advance_in_place<T: Real>(bubbles: &mut [Bubble<T>], motion: &MotionSpec<T>, dt: T) -> Result<()> {
    match motion {
        MotionSpec::Linear => {
            for b in bubbles {
                for k in 0..3 {
                    b.pos3[k] += b.vel3[k] * dt;
                }
            }
        }
        MotionSpec::Circular { center, angular_sign } => {
            let sign = if *angular_sign < T::zero() { -T::one() } else { T::one() };
            for b in bubbles {
                let (ox, oz) = (b.pos3[0] - center[0], b.pos3[2] - center[1]);
                let radius = (ox * ox + oz * oz).sqrt();
                if !(radius > T::epsilon()) {
                    return Err(Error::InvalidState(format!("bubble {} sits at the rotation centre", b.id)));
                }
                let (s, c) = (sign * b.in_plane_speed() / radius * dt).sin_cos();
                b.pos3[0] = center[0] + c * ox - s * oz;
                b.pos3[2] = center[1] + s * ox + c * oz;
                let (vx, vz) = (b.vel3[0], b.vel3[2]);
                b.vel3[0] = c * vx - s * vz;
                b.vel3[2] = s * vx + c * vz;
            }
        }
    }
    Ok(())
}

/// A time-evolving bubble population with optional geometric ground truth.
pub trait Flow<T: Real> {
    fn bubbles(&self) -> &[Bubble<T>];
    fn step(&mut self, dt: T) -> Result<()>;
    /// Projected vessel support on `grid`, when the geometry is known.
    fn support(&self, _grid: &Grid2D<T>) -> Option<Mask<T>> {
        None
    }
    /// Centre-plane velocity field on `grid`, when the geometry is known.
    fn velocity_map(&self, _grid: &Grid2D<T>) -> Option<VelocityMap<T>> {
        None
    }
}

/// Explicit bubbles under a single motion law.
#[derive(Clone, Debug)]
pub struct FreeFlow<T = f64> {
    pub bubbles: BubbleSet<T>,
    pub motion: MotionSpec<T>,
}

impl<T: Real> Flow<T> for FreeFlow<T> {
    fn bubbles(&self) -> &[Bubble<T>] {
        &self.bubbles
    }

    fn step(&mut self, dt: T) -> Result<()> {
        advance_in_place(&mut self.bubbles, &self.motion, dt)
    }
}

/// Bubbles flowing through straight vessels; bubbles leaving a vessel re-enter
/// at its inlet with the same cross-section position and speed.
#[derive(Clone, Debug)]
pub struct VesselFlow<T = f64> {
    pub vessels: Vec<VesselSpec<T>>,
    bubbles: BubbleSet<T>,
    owner: Vec<usize>,
}

impl<T: Real> VesselFlow<T> {
    pub fn new(vessels: Vec<VesselSpec<T>>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bubbles = Vec::new();
        let mut owner = Vec::new();
        for (i, v) in vessels.iter().enumerate() {
            v.validate()?;
            let set = sample_bubbles_with(v, &mut rng, bubbles.len() as u64);
            owner.extend(std::iter::repeat_n(i, set.len()));
            bubbles.extend(set);
        }
        Ok(Self { vessels, bubbles, owner })
    }
}

/// Centre-plane velocity of straight vessels, fastest vessel wins where they overlap.
fn vessels_velocity_map<T: Real>(vessels: &[VesselSpec<T>], grid: &Grid2D<T>) -> VelocityMap<T> {
    let mut map = VelocityMap::zeros(*grid);
    for iz in 0..grid.nz {
        for ix in 0..grid.nx {
            let (x, z) = (grid.x(ix), grid.z(iz));
            for v in vessels {
                let (rho, s) = v.local_coords(x, z);
                if rho.fabs() > v.radius_r || s.fabs() > v.length * T::lit(0.5) {
                    continue;
                }
                let speed = v.flow_speed(rho);
                let a = v.axis();
                map.offer(ix, iz, [speed * a[0], speed * a[1]]);
            }
        }
    }
    map
}

fn vessels_support<T: Real>(vessels: &[VesselSpec<T>], grid: &Grid2D<T>) -> Mask<T> {
    Mask::from_fn(*grid, |x, z| {
        vessels.iter().any(|v| {
            let (rho, s) = v.local_coords(x, z);
            rho.fabs() <= v.radius_r && s.fabs() <= v.length * T::lit(0.5)
        })
    })
}

impl<T: Real> Flow<T> for VesselFlow<T> {
    fn bubbles(&self) -> &[Bubble<T>] {
        &self.bubbles
    }

    fn step(&mut self, dt: T) -> Result<()> {
        advance_in_place(&mut self.bubbles, &MotionSpec::Linear, dt)?;
        for (b, &i) in self.bubbles.iter_mut().zip(&self.owner) {
            let v = &self.vessels[i];
            let (_, s) = v.local_coords(b.pos3[0], b.pos3[2]);
            let half = v.length * T::lit(0.5);
            if s >= half {
                let a = v.axis();
                b.pos3[0] -= v.length * a[0];
                b.pos3[2] -= v.length * a[1];
            }
        }
        Ok(())
    }

    fn support(&self, grid: &Grid2D<T>) -> Option<Mask<T>> {
        Some(vessels_support(&self.vessels, grid))
    }

    fn velocity_map(&self, grid: &Grid2D<T>) -> Option<VelocityMap<T>> {
        Some(vessels_velocity_map(&self.vessels, grid))
    }
}

/// Bubbles circulating in a flow band around a fixed centre.
#[derive(Clone, Debug)]
pub struct RingFlow<T = f64> {
    pub ring: RingSpec<T>,
    bubbles: BubbleSet<T>,
}

impl<T: Real> RingFlow<T> {
    pub fn new(ring: RingSpec<T>, seed: u64) -> Result<Self> {
        let bubbles = sample_ring(&ring, &mut ChaCha8Rng::seed_from_u64(seed), 0)?;
        Ok(Self { ring, bubbles })
    }

    pub fn motion(&self) -> MotionSpec<T> {
        MotionSpec::Circular { center: self.ring.center, angular_sign: self.ring.angular_sign }
    }
}

impl<T: Real> Flow<T> for RingFlow<T> {
    fn bubbles(&self) -> &[Bubble<T>] {
        &self.bubbles
    }

    fn step(&mut self, dt: T) -> Result<()> {
        let m = self.motion();
        advance_in_place(&mut self.bubbles, &m, dt)
    }

    fn support(&self, grid: &Grid2D<T>) -> Option<Mask<T>> {
        let r = self.ring;
        Some(Mask::from_fn(*grid, |x, z| {
            let d = ((x - r.center[0]).powi(2) + (z - r.center[1]).powi(2)).sqrt();
            (d - r.orbit_radius).fabs() <= r.radius_r
        }))
    }

    fn velocity_map(&self, grid: &Grid2D<T>) -> Option<VelocityMap<T>> {
        let r = self.ring;
        let mut map = VelocityMap::zeros(*grid);
        let sign = if r.angular_sign < T::zero() { -T::one() } else { T::one() };
        for iz in 0..grid.nz {
            for ix in 0..grid.nx {
                let (ox, oz) = (grid.x(ix) - r.center[0], grid.z(iz) - r.center[1]);
                let d = (ox * ox + oz * oz).sqrt();
                let u = d - r.orbit_radius;
                if u.fabs() > r.radius_r || d == T::zero() {
                    continue;
                }
                let speed = r.v0 * (T::one() - (u / r.radius_r).powi(2));
                map.offer(ix, iz, [-sign * speed * oz / d, sign * speed * ox / d]);
            }
        }
        Some(map)
    }
}

/// True in-plane state of one bubble in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint<T = f64> {
    pub id: u64,
    pub x: T,
    pub z: T,
    pub vx: T,
    pub vz: T,
}

/// Everything known about the synthesized scene.
#[derive(Clone, Debug)]
pub struct GroundTruth<T = f64> {
    /// Per frame, bubbles whose projected centre lies inside the grid.
    pub point_frames: Vec<Vec<TruthPoint<T>>>,
    pub support_mask: Option<Mask<T>>,
    pub velocity_map: Option<VelocityMap<T>>,
}

impl<T: Real> GroundTruth<T> {
    /// Number of in-field bubbles in frame `t`.
    pub fn n_bubbles(&self, t: usize) -> usize {
        self.point_frames.get(t).map_or(0, Vec::len)
    }
}

/// Additive white Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig<T = f64> {
    pub sigma: T,
    pub seed: u64,
}

/// Renders `nt` frames of `flow`, frame `n` at time `n·dt`.
pub fn synthesize_frames<T: Real, F: Flow<T> + ?Sized>(
    flow: &mut F,
    psf: &PsfParams<T>,
    mode: &PsfMode<T>,
    grid: &Grid2D<T>,
    nt: usize,
    dt: T,
    noise: Option<NoiseConfig<T>>,
) -> Result<(FrameStack<T>, GroundTruth<T>)> {
    psf.validate()?;
    let mut frames = FrameStack::zeros(*grid, nt, dt)?;
    let sep = SeparablePsf::new(psf, mode);
    let mut scratch = Vec::new();
    let mut point_frames = Vec::with_capacity(nt);
    for t in 0..nt {
        if t > 0 {
            flow.step(dt)?;
        }
        let out = frames.frame_mut(t);
        let mut points = Vec::new();
        for b in flow.bubbles() {
            let (x, z) = (b.pos3[0], b.pos3[2]);
            sep.splat(grid, x, z, T::one(), out, &mut scratch);
            if grid.contains(x, z) {
                points.push(TruthPoint { id: b.id, x, z, vx: b.vel3[0], vz: b.vel3[2] });
            }
        }
        point_frames.push(points);
    }
    if let Some(nc) = noise {
        if !(nc.sigma >= T::zero()) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(nc.seed);
        let normal = Normal::new(0.0, nc.sigma.as_f64()).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut frames.data {
            *v += T::lit(normal.sample(&mut rng));
        }
    }
    let truth = GroundTruth { point_frames, support_mask: flow.support(grid), velocity_map: flow.velocity_map(grid) };
    Ok((frames, truth))
}

/// Centre-plane velocity field of a single vessel.
pub fn ground_truth_velocity_map<T: Real>(v: &VesselSpec<T>, grid: &Grid2D<T>) -> VelocityMap<T> {
    vessels_velocity_map(std::slice::from_ref(v), grid)
}

/// Projected support of a set of vessels.
pub fn vessel_support<T: Real>(vessels: &[VesselSpec<T>], grid: &Grid2D<T>) -> Mask<T> {
    vessels_support(vessels, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::psf::render_psf;

    const P: PsfParams<f64> = PsfParams { sigma_r: 0.3, lambda: 0.3 };

    #[test]
    fn flow_speed_profile() {
        let v = VesselSpec { radius_r: 1.0, v0: 10.0, ..VesselSpec::<f64>::default() };
        assert_eq!(flow_speed(&v, 0.0), 10.0);
        assert_eq!(flow_speed(&v, 1.0), 0.0);
        assert_eq!(flow_speed(&v, 1.5), 0.0);
        assert!((flow_speed(&v, 0.5) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn empty_vessel() {
        let v = VesselSpec { c_mb: 0.0, ..VesselSpec::<f64>::default() };
        assert!(sample_bubbles(&v, 1).is_empty());
    }

    #[test]
    fn poisson_count_and_speed_bound() {
        let v = VesselSpec { radius_r: 1.0, v0: 10.0, c_mb: 100.0, length: 10.0, ..VesselSpec::<f64>::default() };
        let b = sample_bubbles(&v, 42);
        let mean = 100.0 * std::f64::consts::PI * 10.0;
        assert!((b.len() as f64 - mean).abs() < 4.0 * mean.sqrt());
        let mut fastest = (0.0, 0.0);
        for bb in &b {
            let rho = (bb.pos3[1].powi(2) + bb.pos3[2].powi(2)).sqrt();
            assert!(rho <= 1.0);
            let s = bb.in_plane_speed();
            assert!(s <= 10.0);
            assert!((s - flow_speed(&v, rho)).abs() < 1e-12);
            if s > fastest.0 {
                fastest = (s, rho);
            }
        }
        assert!(fastest.1 < 0.1);
    }

    #[test]
    fn sampling_is_reproducible() {
        let v = VesselSpec { c_mb: 10.0, ..VesselSpec::<f64>::default() };
        assert_eq!(sample_bubbles(&v, 3), sample_bubbles(&v, 3));
    }

    #[test]
    fn linear_step() {
        let b = [Bubble::<f64> { pos3: [0.0, 0.0, 0.0], vel3: [1.0, 0.0, 0.0], id: 0 }];
        let out = advance(&b, &MotionSpec::Linear, 0.01).unwrap();
        assert!((out[0].pos3[0] - 0.01).abs() < 1e-15);
        assert!(advance(&b, &MotionSpec::Linear, 0.0).is_err());
    }

    #[test]
    fn circular_motion() {
        let radius = 6.7;
        let motion = MotionSpec::Circular { center: [0.0, 0.0], angular_sign: 1.0 };
        let start = Bubble { pos3: [radius, 0.0, 0.0], vel3: [0.0, 0.0, 1.0], id: 0 };
        assert!(((1.0f64 / radius) - 0.149).abs() < 1e-3);
        let ring = RingSpec { center: [0.0, 0.0], orbit_radius: radius, radius_r: 0.5, v0: 1.0, c_mb: 0.0, angular_sign: 1.0, center_y: 0.0 };
        assert!((ring.centripetal_acceleration() - 0.149).abs() < 1e-3);

        let mut b = vec![start];
        let steps = 10_000;
        let period = std::f64::consts::TAU * radius;
        let dt = period / steps as f64;
        for _ in 0..steps {
            advance_in_place(&mut b, &motion, dt).unwrap();
            let r = (b[0].pos3[0].powi(2) + b[0].pos3[2].powi(2)).sqrt();
            assert!((r - radius).abs() < 1e-9);
            assert!((b[0].in_plane_speed() - 1.0).abs() < 1e-9);
        }
        assert!((b[0].pos3[0] - radius).abs() < 1e-9 && b[0].pos3[2].abs() < 1e-9);

        let centred = [Bubble { pos3: [0.0; 3], vel3: [1.0, 0.0, 0.0], id: 0 }];
        assert!(matches!(advance(&centred, &motion, 0.1), Err(Error::InvalidState(_))));
    }

    #[test]
    fn static_bubble_frames_equal_psf() {
        let g = make_grid(31, 31, 0.03, 0.03, true).unwrap();
        let mut flow = FreeFlow { bubbles: vec![Bubble { pos3: [0.0; 3], vel3: [0.0; 3], id: 0 }], motion: MotionSpec::Linear };
        let (frames, truth) = synthesize_frames(&mut flow, &P, &PsfMode::Post, &g, 3, 0.01, None).unwrap();
        let img = render_psf(&P, &g, &PsfMode::Post);
        for t in 0..3 {
            let err = frames.frame(t).iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
        assert_eq!(truth.n_bubbles(0), 1);
    }

    #[test]
    fn moving_peak_advances_one_pixel_per_three_frames() {
        let g = make_grid(64, 16, 0.03, 0.03, true).unwrap();
        let mut flow = FreeFlow { bubbles: vec![Bubble { pos3: [-0.61, 0.0, 0.0], vel3: [1.0, 0.0, 0.0], id: 0 }], motion: MotionSpec::Linear };
        let (frames, _) = synthesize_frames(&mut flow, &P, &PsfMode::Post, &g, 31, 0.01, None).unwrap();
        let ix0 = frames.frame_image(0).argmax().1;
        for t in (0..31).step_by(3) {
            assert_eq!(frames.frame_image(t).argmax().1, ix0 + t / 3);
        }
    }

    #[test]
    fn synthesis_is_linear() {
        let g = make_grid(24, 24, 0.03, 0.03, true).unwrap();
        let a = vec![Bubble { pos3: [0.1, 0.0, 0.05], vel3: [0.5, 0.0, 0.2], id: 0 }];
        let b = vec![Bubble { pos3: [-0.2, 0.3, 0.0], vel3: [0.0, 0.0, -1.0], id: 1 }];
        let mut both = a.clone();
        both.extend(b.clone());
        let run = |bs: Vec<Bubble<f64>>| {
            let mut f = FreeFlow { bubbles: bs, motion: MotionSpec::Linear };
            synthesize_frames(&mut f, &P, &PsfMode::Pre, &g, 4, 0.01, None).unwrap().0
        };
        let sum = run(a).add(&run(b)).unwrap();
        assert_eq!(sum, run(both));
    }

    #[test]
    fn noise_is_seeded() {
        let g = make_grid(8, 8, 0.03, 0.03, true).unwrap();
        let mut f = FreeFlow { bubbles: vec![], motion: MotionSpec::Linear };
        let n = Some(NoiseConfig { sigma: 0.5, seed: 9 });
        let a = synthesize_frames(&mut f, &P, &PsfMode::Pre, &g, 2, 0.01, n).unwrap().0;
        let b = synthesize_frames(&mut f, &P, &PsfMode::Pre, &g, 2, 0.01, n).unwrap().0;
        assert_eq!(a, b);
        assert!(a.max_abs() > 0.0);
    }

    #[test]
    fn vessel_respawns_at_inlet() {
        let v = VesselSpec { radius_r: 0.2, v0: 5.0, c_mb: 50.0, length: 2.0, ..VesselSpec::<f64>::default() };
        let mut flow = VesselFlow::new(vec![v], 5).unwrap();
        let before: Vec<(f64, f64, f64)> = flow.bubbles().iter().map(|b| (b.pos3[1], b.pos3[2], b.in_plane_speed())).collect();
        for _ in 0..200 {
            flow.step(0.01).unwrap();
        }
        for (b, &(y, z, s)) in flow.bubbles().iter().zip(&before) {
            assert!(b.pos3[0].abs() <= 1.0 + 1e-9);
            assert_eq!((b.pos3[1], b.pos3[2], b.in_plane_speed()), (y, z, s));
        }
    }

    #[test]
    fn velocity_map_is_parabolic() {
        let g = make_grid(41, 41, 0.05, 0.05, true).unwrap();
        let v = VesselSpec { radius_r: 0.5, v0: 4.0, length: 5.0, ..VesselSpec::<f64>::default() };
        let map = ground_truth_velocity_map(&v, &g);
        assert!((map.speed(20, 20) - 4.0).abs() < 1e-12);
        assert_eq!(map.speed(20, 30), 0.0);
        for iz in 10..=30 {
            let z = g.z(iz);
            assert!((map.speed(5, iz) - flow_speed(&v, z)).abs() < 1e-12);
        }
    }

    fn large_sample() -> (VesselSpec<f64>, BubbleSet<f64>) {
        let v = VesselSpec { radius_r: 1.0, v0: 10.0, c_mb: 1e5 / (std::f64::consts::PI * 10.0), length: 10.0, ..VesselSpec::<f64>::default() };
        let b = sample_bubbles(&v, 2024);
        (v, b)
    }

    #[test]
    fn projected_positions_follow_chord_length() {
        let (_, b) = large_sample();
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for bb in &b {
            let rho = bb.pos3[2];
            let k = (((rho + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            counts[k] += 1;
        }
        // Antiderivative of √(1−ρ²), normalized by its total π/2.
        let cdf = |r: f64| (r * (1.0 - r * r).sqrt() + r.asin()) / std::f64::consts::PI + 0.5;
        let n = b.len() as f64;
        let chi2: f64 = (0..bins)
            .map(|k| {
                let lo = -1.0 + 2.0 * k as f64 / bins as f64;
                let e = n * (cdf(lo + 2.0 / bins as f64) - cdf(lo));
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9% quantile of χ² with 19 degrees of freedom.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn speed_given_position_follows_joint_density() {
        let (v, b) = large_sample();
        let bins = 5;
        let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
        for bb in &b {
            let rho = bb.pos3[2];
            let vmax = flow_speed(&v, rho);
            if vmax <= 0.0 {
                continue;
            }
            let k = (((rho + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            per_bin[k].push(bb.in_plane_speed() / vmax);
        }
        for xs in &mut per_bin {
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            // CDF of v/v_max implied by the joint density: 1 − √(1 − x).
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = 1.0 - (1.0 - x.min(1.0)).sqrt();
                    (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.02, "KS {ks} over {n} samples");
        }
    }
}
