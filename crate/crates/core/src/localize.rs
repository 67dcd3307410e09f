//! Matched-filter localization, super-resolved accumulation and velocity maps.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image, Mask};
use crate::psf::{eval_psf, PsfMode, PsfParams, ToParams};
use crate::scalar::Real;
use crate::spectrum::Fft3Plan;
use crate::stack::FrameStack;
use crate::vfilter::{FilterBankSpec, FilterEngine, ToRule, VelocityFilterSpec};

/// A detected bubble centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization<T = f64> {
    pub t_index: usize,
    /// `(x, z)` in mm.
    pub pos: [T; 2],
    pub score: T,
    /// Velocity selected by the filter that produced the detection.
    pub v_tag: Option<[T; 2]>,
}

pub type LocalizationSet<T = f64> = Vec<Localization<T>>;

/// Peak detection settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig<T = f64> {
    /// Fraction of the autocorrelation peak a maximum must exceed.
    pub threshold_fraction: T,
    /// Non-maximum suppression radius, mm.
    pub min_separation: T,
    pub subpixel: bool,
}

impl<T: Real> DetectorConfig<T> {
    /// Half-peak threshold, sub-pixel refinement, and a suppression radius of
    /// `1.2λ` that covers the carrier side lobes of the correlation map.
    pub fn for_psf(p: &PsfParams<T>) -> Self {
        Self { threshold_fraction: T::lit(0.5), min_separation: p.lambda * T::lit(SIDELOBE_FACTOR), subpixel: true }
    }

    /// Widens the suppression radius to clear the side lobes of `mode`'s template.
    pub fn for_template(&self, p: &PsfParams<T>, mode: &PsfMode<T>) -> Self {
        let period = match mode {
            PsfMode::Post => T::zero(),
            PsfMode::Pre => p.lambda,
            PsfMode::To(t) => p.lambda.max(t.lambda_x_tilde(p)),
        };
        Self { min_separation: self.min_separation.max(period * T::lit(SIDELOBE_FACTOR)), ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > T::zero() && self.threshold_fraction < T::one()) {
            return Err(Error::invalid("threshold_fraction must lie in (0, 1)"));
        }
        if !(self.min_separation > T::zero()) {
            return Err(Error::invalid("min_separation must be positive"));
        }
        Ok(())
    }
}

const SIDELOBE_FACTOR: f64 = 1.2;

/// Template half-width in envelope standard deviations.
pub const TEMPLATE_REACH: f64 = 3.0;

/// Smallest `n' ≥ n` whose prime factors are all 2, 3 or 5.
fn good_fft_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Cross-correlation of frames with a PSF template, via zero-padded FFTs.
pub struct MatchedFilter<T: Real> {
    grid: Grid2D<T>,
    half: (usize, usize),
    padded: (usize, usize),
    plan: Fft3Plan<T>,
    template_spectrum: Vec<Complex<T>>,
    /// `Σ t²`: correlation of a noiseless, on-grid bubble at its centre.
    pub autocorr_peak: T,
}

impl<T: Real> MatchedFilter<T> {
    /// Template of `mode` sampled on `grid`'s spacing out to [`TEMPLATE_REACH`] envelope widths.
    pub fn new(p: &PsfParams<T>, mode: &PsfMode<T>, grid: &Grid2D<T>) -> Result<Self> {
        p.validate()?;
        let sx = match mode {
            PsfMode::To(t) => p.sigma_r * t.lateral_stretch(p),
            _ => p.sigma_r,
        };
        let reach = T::lit(TEMPLATE_REACH);
        let hx = (reach * sx / grid.dx).ceil().to_usize().unwrap_or(usize::MAX);
        let hz = (reach * p.sigma_r / grid.dz).ceil().to_usize().unwrap_or(usize::MAX);
        if 2 * hx + 1 > grid.nx || 2 * hz + 1 > grid.nz {
            return Err(Error::invalid(format!(
                "template {}x{} larger than frame {}x{}",
                2 * hx + 1,
                2 * hz + 1,
                grid.nx,
                grid.nz
            )));
        }
        let (px, pz) = (good_fft_size(grid.nx + 2 * hx), good_fft_size(grid.nz + 2 * hz));
        let plan = Fft3Plan::new(px, pz, 1)?;
        let mut ts = vec![Complex::new(T::zero(), T::zero()); px * pz];
        let mut peak = T::zero();
        for jz in -(hz as isize)..=hz as isize {
            for jx in -(hx as isize)..=hx as isize {
                let v = eval_psf(p, mode, T::lit(jx as f64) * grid.dx, T::lit(jz as f64) * grid.dz);
                peak += v * v;
                let ix = jx.rem_euclid(px as isize) as usize;
                let iz = jz.rem_euclid(pz as isize) as usize;
                ts[iz * px + ix] = Complex::new(v, T::zero());
            }
        }
        plan.forward_spatial(&mut ts);
        ts.iter_mut().for_each(|c| *c = c.conj());
        Ok(Self { grid: *grid, half: (hx, hz), padded: (px, pz), plan, template_spectrum: ts, autocorr_peak: peak })
    }

    /// Template half-size in pixels along x and z.
    pub fn half_width(&self) -> (usize, usize) {
        self.half
    }

    /// `c(r) = Σ_s f(r + s)·t(s)` over the frame's pixels, zero outside the frame.
    pub fn correlate(&self, frame: &[T]) -> Result<Image<T>> {
        let g = self.grid;
        if frame.len() != g.len() {
            return Err(Error::invalid("frame does not match the matched filter grid"));
        }
        let (px, pz) = self.padded;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); px * pz];
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                buf[iz * px + ix].re = frame[iz * g.nx + ix];
            }
        }
        self.plan.forward_spatial(&mut buf);
        for (b, t) in buf.iter_mut().zip(&self.template_spectrum) {
            *b *= *t;
        }
        self.plan.inverse_spatial(&mut buf);
        let mut out = Vec::with_capacity(g.len());
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                out.push(buf[iz * px + ix].re);
            }
        }
        Ok(Image { grid: g, data: out })
    }
}

/// Matched-filter map of one frame with the PSF template of `mode`.
pub fn matched_filter_map<T: Real>(frame: &Image<T>, p: &PsfParams<T>, mode: &PsfMode<T>) -> Result<Image<T>> {
    MatchedFilter::new(p, mode, &frame.grid)?.correlate(&frame.data)
}

/// Vertex offset of a 2D quadratic least-squares fit to a 3×3 patch, in pixels.
fn quadratic_peak<T: Real>(f: &[[T; 3]; 3]) -> [T; 2] {
    // f[j][i] holds the sample at offset (i − 1, j − 1) in (x, z).
    let six = T::lit(6.0);
    let mut sx = [T::zero(); 3];
    let mut sz = [T::zero(); 3];
    let (mut bx, mut bz, mut exz) = (T::zero(), T::zero(), T::zero());
    for j in 0..3 {
        for i in 0..3 {
            let v = f[j][i];
            let (x, z) = (T::lit(i as f64 - 1.0), T::lit(j as f64 - 1.0));
            sx[i] += v;
            sz[j] += v;
            bx += x * v;
            bz += z * v;
            exz += x * z * v;
        }
    }
    let two = T::lit(2.0);
    let b = bx / six;
    let c = bz / six;
    let e = exz / T::lit(4.0);
    let d = (sx[0] - two * sx[1] + sx[2]) / six;
    let g = (sz[0] - two * sz[1] + sz[2]) / six;
    let det = T::lit(4.0) * d * g - e * e;
    if d < T::zero() && det > T::zero() {
        let ox = (-two * g * b + e * c) / det;
        let oz = (-two * d * c + e * b) / det;
        if ox.fabs() <= T::one() && oz.fabs() <= T::one() {
            return [ox, oz];
        }
    }
    // Separable fallback through the centre row and column.
    let half = T::lit(0.5);
    let para = |m: T, c0: T, p: T| {
        let den = m - two * c0 + p;
        if den < T::zero() {
            (half * (m - p) / den).max(-half).min(half)
        } else {
            T::zero()
        }
    };
    [para(f[1][0], f[1][1], f[1][2]), para(f[0][1], f[1][1], f[2][1])]
}

/// Local maxima above `threshold_fraction·autocorr_peak`, thinned by
/// non-maximum suppression and refined to sub-pixel precision.
pub fn detect<T: Real>(corr: &Image<T>, cfg: &DetectorConfig<T>, autocorr_peak: T) -> Result<Vec<Localization<T>>> {
    if !(autocorr_peak > T::zero()) {
        return Err(Error::invalid("autocorrelation peak must be positive"));
    }
    cfg.validate()?;
    let g = corr.grid;
    let thr = cfg.threshold_fraction * autocorr_peak;
    let mut cands: Vec<(T, usize, usize)> = Vec::new();
    for iz in 0..g.nz {
        for ix in 0..g.nx {
            let v = corr.get(ix, iz);
            if !(v > thr) {
                continue;
            }
            let mut is_max = true;
            'nb: for dz in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dz == 0 {
                        continue;
                    }
                    let (jx, jz) = (ix as isize + dx, iz as isize + dz);
                    if jx < 0 || jz < 0 || jx >= g.nx as isize || jz >= g.nz as isize {
                        continue;
                    }
                    let u = corr.get(jx as usize, jz as usize);
                    // Ties go to the first sample in scan order.
                    let earlier = dz < 0 || (dz == 0 && dx < 0);
                    if u > v || (earlier && u == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((v, ix, iz));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_order(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let sep2 = cfg.min_separation * cfg.min_separation;
    let mut out: Vec<Localization<T>> = Vec::new();
    for (v, ix, iz) in cands {
        let (mut x, mut z) = (g.x(ix), g.z(iz));
        if cfg.subpixel && ix > 0 && iz > 0 && ix + 1 < g.nx && iz + 1 < g.nz {
            let mut f = [[T::zero(); 3]; 3];
            for (j, row) in f.iter_mut().enumerate() {
                for (i, cell) in row.iter_mut().enumerate() {
                    *cell = corr.get(ix + i - 1, iz + j - 1);
                }
            }
            let [ox, oz] = quadratic_peak(&f);
            x = (x + ox * g.dx).max(g.x0).min(g.x_max());
            z = (z + oz * g.dz).max(g.z0).min(g.z_max());
        }
        if out.iter().any(|l| (l.pos[0] - x).powi(2) + (l.pos[1] - z).powi(2) < sep2) {
            continue;
        }
        out.push(Localization { t_index: 0, pos: [x, z], score: v, v_tag: None });
    }
    Ok(out)
}

/// Detection counts on a (usually oversampled) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedMap<T = f64> {
    pub grid: Grid2D<T>,
    pub counts: Vec<u32>,
    pub total: u64,
}

impl<T: Real> AccumulatedMap<T> {
    pub fn new(grid: Grid2D<T>) -> Self {
        Self { grid, counts: vec![0; grid.len()], total: 0 }
    }

    /// Adds one detection at `pos`; returns `false` if it falls outside the grid.
    pub fn add(&mut self, pos: [T; 2]) -> bool {
        match self.grid.nearest(pos[0], pos[1]) {
            Some((ix, iz)) => {
                self.counts[self.grid.index(ix, iz)] += 1;
                self.total += 1;
                true
            }
            None => false,
        }
    }

    pub fn to_image(&self) -> Image<T> {
        Image { grid: self.grid, data: self.counts.iter().map(|&c| T::from_count(c as usize)).collect() }
    }
}

/// Bins all detections into `grid` pixels.
pub fn accumulate<'a, T: Real + 'a>(sets: impl IntoIterator<Item = &'a [Localization<T>]>, grid: &Grid2D<T>) -> AccumulatedMap<T> {
    let mut map = AccumulatedMap::new(*grid);
    for set in sets {
        for l in set {
            map.add(l.pos);
        }
    }
    map
}

/// Per-pixel velocity; pixels keep the fastest velocity offered to them.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMap<T = f64> {
    pub grid: Grid2D<T>,
    pub vx: Vec<T>,
    pub vz: Vec<T>,
}

impl<T: Real> VelocityMap<T> {
    pub fn zeros(grid: Grid2D<T>) -> Self {
        Self { grid, vx: vec![T::zero(); grid.len()], vz: vec![T::zero(); grid.len()] }
    }

    pub fn speed_at(&self, i: usize) -> T {
        (self.vx[i] * self.vx[i] + self.vz[i] * self.vz[i]).sqrt()
    }

    pub fn speed(&self, ix: usize, iz: usize) -> T {
        self.speed_at(self.grid.index(ix, iz))
    }

    /// Keeps `v` at `(ix, iz)` if it is faster than what is stored.
    pub fn offer(&mut self, ix: usize, iz: usize, v: [T; 2]) {
        let i = self.grid.index(ix, iz);
        if v[0] * v[0] + v[1] * v[1] > self.vx[i] * self.vx[i] + self.vz[i] * self.vz[i] {
            self.vx[i] = v[0];
            self.vz[i] = v[1];
        }
    }

    pub fn speed_image(&self) -> Image<T> {
        Image { grid: self.grid, data: (0..self.grid.len()).map(|i| self.speed_at(i)).collect() }
    }
}

/// Velocity map from tagged detections by the max-speed rule.
pub fn velocity_map<'a, T: Real + 'a>(sets: impl IntoIterator<Item = &'a [Localization<T>]>, grid: &Grid2D<T>) -> VelocityMap<T> {
    let mut map = VelocityMap::zeros(*grid);
    for set in sets {
        for l in set {
            if let (Some(v), Some((ix, iz))) = (l.v_tag, grid.nearest(l.pos[0], l.pos[1])) {
                map.offer(ix, iz, v);
            }
        }
    }
    map
}

/// Segmentation of an accumulated map into a support mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRule {
    /// Pixels with at least this many detections seed the mask.
    pub min_count: u32,
    /// Disk radius of the morphological closing, in map pixels.
    pub closing_radius: usize,
}

impl Default for SegmentRule {
    fn default() -> Self {
        Self { min_count: 1, closing_radius: 2 }
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dz in -r..=r {
        for dx in -r..=r {
            if dx * dx + dz * dz <= r * r {
                v.push((dx, dz));
            }
        }
    }
    v
}

fn morph<T: Real>(m: &Mask<T>, offsets: &[(isize, isize)], dilate: bool) -> Mask<T> {
    let g = m.grid;
    let mut out = Mask::empty(g);
    for iz in 0..g.nz {
        for ix in 0..g.nx {
            let mut hit = !dilate;
            for &(dx, dz) in offsets {
                let (jx, jz) = (ix as isize + dx, iz as isize + dz);
                let inside = jx >= 0 && jz >= 0 && jx < g.nx as isize && jz < g.nz as isize;
                // Outside the image counts as background for dilation and
                // foreground for erosion, so closing never shrinks the input.
                let v = if inside { m.get(jx as usize, jz as usize) } else { !dilate };
                if dilate && v {
                    hit = true;
                    break;
                }
                if !dilate && !v {
                    hit = false;
                    break;
                }
            }
            out.data[g.index(ix, iz)] = hit;
        }
    }
    out
}

/// Morphological closing with a disk of `radius` pixels.
pub fn closing<T: Real>(m: &Mask<T>, radius: usize) -> Mask<T> {
    let off = disk_offsets(radius);
    morph(&morph(m, &off, true), &off, false)
}

/// Support mask `P̂_c` of an accumulated map.
pub fn segment_support<T: Real>(map: &AccumulatedMap<T>, rule: &SegmentRule) -> Mask<T> {
    let seed = Mask { grid: map.grid, data: map.counts.iter().map(|&c| c >= rule.min_count.max(1)).collect() };
    if rule.closing_radius == 0 {
        return seed;
    }
    closing(&seed, rule.closing_radius)
}

/// Settings of the filter → detect → accumulate pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig<T = f64> {
    pub detector: DetectorConfig<T>,
    /// PSF model of the input data.
    pub mode: PsfMode<T>,
    pub to: Option<ToRule<T>>,
    /// Accumulation grid oversampling factor.
    pub oversample: usize,
    /// Detections of different filters closer than this in one frame are merged.
    pub merge_radius: T,
}

impl<T: Real> PipelineConfig<T> {
    pub fn for_psf(p: &PsfParams<T>) -> Self {
        Self { detector: DetectorConfig::for_psf(p), mode: PsfMode::Pre, to: None, oversample: 4, merge_radius: p.lambda * T::lit(0.25) }
    }
}

/// Results of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineOutput<T = f64> {
    /// Merged detections per frame.
    pub per_frame: Vec<LocalizationSet<T>>,
    pub map: AccumulatedMap<T>,
    pub velocity: VelocityMap<T>,
    /// Detections contributed by each bank member before merging.
    pub member_counts: Vec<usize>,
}

/// Detections of one filtered stack, tagged with the member's `v_f`.
pub fn localize_stack<T: Real>(filtered: &FrameStack<T>, mf: &MatchedFilter<T>, cfg: &DetectorConfig<T>, v_tag: Option<[T; 2]>) -> Result<Vec<LocalizationSet<T>>> {
    (0..filtered.nt)
        .map(|t| {
            let corr = mf.correlate(filtered.frame(t))?;
            let mut d = detect(&corr, cfg, mf.autocorr_peak)?;
            for l in &mut d {
                l.t_index = t;
                l.v_tag = v_tag;
            }
            Ok(d)
        })
        .collect()
}

/// Keeps the strongest detection among those within `radius` of each other.
pub fn merge_detections<T: Real>(mut all: Vec<Localization<T>>, radius: T) -> LocalizationSet<T> {
    all.sort_by(|a, b| {
        b.score
            .total_order(&a.score)
            .then(a.pos[1].total_order(&b.pos[1]))
            .then(a.pos[0].total_order(&b.pos[0]))
    });
    let r2 = radius * radius;
    let mut kept: Vec<Localization<T>> = Vec::new();
    for l in all {
        if !kept.iter().any(|k| (k.pos[0] - l.pos[0]).powi(2) + (k.pos[1] - l.pos[1]).powi(2) < r2) {
            kept.push(l);
        }
    }
    kept
}

/// Velocity filtering with every bank member, matched-filter detection,
/// cross-member merging, accumulation and velocity-map assembly.
pub fn run_pipeline<T: Real>(frames: &FrameStack<T>, bank: &FilterBankSpec<T>, p: &PsfParams<T>, cfg: &PipelineConfig<T>) -> Result<PipelineOutput<T>> {
    bank.validate().map_err(|e| e.in_stage("filter bank"))?;
    cfg.detector.validate().map_err(|e| e.in_stage("detector"))?;
    let engine = FilterEngine::new(frames, bank.max_sigma_t()).map_err(|e| e.in_stage("filter"))?;
    let base_mf = MatchedFilter::new(p, &cfg.mode, &frames.grid).map_err(|e| e.in_stage("matched filter"))?;
    let to_mf = match &cfg.to {
        Some(rule) => Some(MatchedFilter::new(p, &PsfMode::To(rule.params), &frames.grid).map_err(|e| e.in_stage("matched filter"))?),
        None => None,
    };
    let mut per_frame: Vec<Vec<Localization<T>>> = vec![Vec::new(); frames.nt];
    let mut member_counts = Vec::with_capacity(bank.members.len());
    for (i, spec) in bank.members.iter().enumerate() {
        let (to, mf) = member_filters(spec, cfg, &base_mf, to_mf.as_ref());
        let (_, det) = member_detector(p, cfg, to);
        let filtered = engine.apply(spec, to).map_err(|e| Error::BankMember { index: i, source: Box::new(e) }.in_stage("filter"))?;
        let dets = localize_stack(&filtered, mf, &det, Some(spec.v_f)).map_err(|e| e.in_stage("localize"))?;
        member_counts.push(dets.iter().map(Vec::len).sum());
        for (t, d) in dets.into_iter().enumerate() {
            per_frame[t].extend(d);
        }
    }
    assemble(per_frame, &frames.grid, cfg, member_counts)
}

/// Template mode and detector settings for a member whose output was
/// (or was not) TO-filtered.
pub fn member_detector<T: Real>(p: &PsfParams<T>, cfg: &PipelineConfig<T>, to: Option<&ToParams<T>>) -> (PsfMode<T>, DetectorConfig<T>) {
    let mode = match to {
        Some(t) => PsfMode::To(*t),
        None => cfg.mode,
    };
    (mode, cfg.detector.for_template(p, &mode))
}

/// Merges the detections of all members frame by frame, then accumulates on
/// the refined grid and builds the velocity map on `grid`.
pub fn assemble<T: Real>(per_frame: Vec<Vec<Localization<T>>>, grid: &Grid2D<T>, cfg: &PipelineConfig<T>, member_counts: Vec<usize>) -> Result<PipelineOutput<T>> {
    let per_frame: Vec<LocalizationSet<T>> = per_frame.into_iter().map(|d| merge_detections(d, cfg.merge_radius)).collect();
    let fine = grid.refine(cfg.oversample.max(1)).map_err(|e| e.in_stage("accumulate"))?;
    let map = accumulate(per_frame.iter().map(Vec::as_slice), &fine);
    let velocity = velocity_map(per_frame.iter().map(Vec::as_slice), grid);
    Ok(PipelineOutput { per_frame, map, velocity, member_counts })
}

fn member_filters<'a, T: Real>(
    spec: &VelocityFilterSpec<T>,
    cfg: &'a PipelineConfig<T>,
    base: &'a MatchedFilter<T>,
    to_mf: Option<&'a MatchedFilter<T>>,
) -> (Option<&'a ToParams<T>>, &'a MatchedFilter<T>) {
    match (&cfg.to, to_mf) {
        (Some(rule), Some(mf)) if rule.applies_to(spec) => (Some(&rule.params), mf),
        _ => (None, base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::psf::render_psf;
    use crate::theory::attenuation::mf_peak;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const P: PsfParams<f64> = PsfParams { sigma_r: 0.3, lambda: 0.3 };

    fn frame_with(g: &Grid2D<f64>, centers: &[[f64; 2]]) -> Image<f64> {
        Image::from_fn(*g, |x, z| centers.iter().map(|c| eval_psf(&P, &PsfMode::Pre, x - c[0], z - c[1])).sum())
    }

    #[test]
    fn centered_psf_correlates_to_autocorrelation_peak() {
        let g = make_grid(101, 101, 0.03, 0.03, true).unwrap();
        let frame = render_psf(&P, &g, &PsfMode::Pre);
        let mf = MatchedFilter::new(&P, &PsfMode::Pre, &g).unwrap();
        let corr = mf.correlate(&frame.data).unwrap();
        let (v, ix, iz) = corr.argmax();
        assert_eq!((ix, iz), (50, 50));
        assert!((v - mf.autocorr_peak).abs() < 1e-9 * v);
    }

    #[test]
    fn template_must_fit() {
        let g = make_grid(20, 20, 0.03, 0.03, true).unwrap();
        assert!(MatchedFilter::new(&P, &PsfMode::Pre, &g).is_err());
    }

    #[test]
    fn two_separated_bubbles_give_equal_peaks() {
        let g = make_grid(161, 101, 0.03, 0.03, true).unwrap();
        let frame = frame_with(&g, &[[-0.75, 0.0], [0.75, 0.0]]);
        let corr = matched_filter_map(&frame, &P, &PsfMode::Pre).unwrap();
        let mf = MatchedFilter::new(&P, &PsfMode::Pre, &g).unwrap();
        let d = detect(&corr, &DetectorConfig::for_psf(&P), mf.autocorr_peak).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].score - d[1].score).abs() < 0.01 * d[0].score);
    }

    #[test]
    fn on_grid_bubble_is_exact() {
        let g = make_grid(101, 101, 0.03, 0.03, true).unwrap();
        let c = [g.x(53), g.z(47)];
        let frame = frame_with(&g, &[c]);
        let mf = MatchedFilter::new(&P, &PsfMode::Pre, &g).unwrap();
        let d = detect(&mf.correlate(&frame.data).unwrap(), &DetectorConfig::for_psf(&P), mf.autocorr_peak).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].pos[0] - c[0]).abs() < 1e-6 && (d[0].pos[1] - c[1]).abs() < 1e-6);
    }

    #[test]
    fn subpixel_refinement_is_unbiased() {
        let g = make_grid(101, 101, 0.03, 0.03, true).unwrap();
        let mf = MatchedFilter::new(&P, &PsfMode::Pre, &g).unwrap();
        let cfg = DetectorConfig::for_psf(&P);
        for k in 0..10 {
            let off = -0.45 + 0.1 * k as f64;
            for c in [[off * 0.03, 0.0], [0.0, off * 0.03], [0.3 * 0.03, off * 0.03]] {
                let d = detect(&mf.correlate(&frame_with(&g, &[c]).data).unwrap(), &cfg, mf.autocorr_peak).unwrap();
                assert_eq!(d.len(), 1);
                assert!((d[0].pos[0] - c[0]).abs() < 0.05 * 0.03, "{c:?} -> {:?}", d[0].pos);
                assert!((d[0].pos[1] - c[1]).abs() < 0.05 * 0.03, "{c:?} -> {:?}", d[0].pos);
            }
        }
    }

    #[test]
    fn noise_only_frames_rarely_trigger() {
        let g = make_grid(64, 64, 0.03, 0.03, true).unwrap();
        let mf = MatchedFilter::new(&P, &PsfMode::Pre, &g).unwrap();
        let cfg = DetectorConfig::for_psf(&P);
        // 20 dB below the PSF peak.
        let sigma = 0.1 * P.g_e_peak();
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100;
        let mut hits = 0;
        for _ in 0..trials {
            let frame: Vec<f64> = (0..g.len()).map(|_| normal.sample(&mut rng)).collect();
            if !detect(&mf.correlate(&frame).unwrap(), &cfg, mf.autocorr_peak).unwrap().is_empty() {
                hits += 1;
            }
        }
        assert!(hits as f64 <= 0.01 * trials as f64);
    }

    #[test]
    fn threshold_follows_matched_filter_theory() {
        // Sample the smeared bubble analytically so only the detector is under test.
        let p = PsfParams { sigma_r: 0.15, lambda: 0.3 };
        let g = make_grid(101, 101, 0.0125, 0.0125, true).unwrap();
        let mf = MatchedFilter::new(&p, &PsfMode::Pre, &g).unwrap();
        let cfg = DetectorConfig::for_psf(&p);
        let st = 0.5;
        let base = mf_peak([0.0, 0.0], &p, st);
        for dvx in [0.1, 0.3, 0.5, 0.8, 1.2, 2.0] {
            let dv = [dvx, 0.0];
            let frame = Image::from_fn(g, |x, z| crate::theory::q_pre([x, z], dv, &p, st));
            let ratio = mf_peak(dv, &p, st) / base;
            let n = detect(&mf.correlate(&frame.data).unwrap(), &cfg, mf.autocorr_peak).unwrap().len();
            if ratio < 0.5 {
                assert_eq!(n, 0, "ratio {ratio}");
            } else if ratio > 0.6 {
                assert_eq!(n, 1, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn quadratic_fit_recovers_paraboloid_vertex() {
        let (x0, z0) = (0.23, -0.31);
        let mut f = [[0.0; 3]; 3];
        for (j, row) in f.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                let (x, z) = (i as f64 - 1.0, j as f64 - 1.0);
                *v = 5.0 - (x - x0).powi(2) - 2.0 * (z - z0).powi(2) + 0.3 * (x - x0) * (z - z0);
            }
        }
        let [ox, oz] = quadratic_peak(&f);
        assert!((ox - x0).abs() < 1e-12 && (oz - z0).abs() < 1e-12);
    }

    #[test]
    fn accumulation_and_segmentation() {
        let g = make_grid(10, 10, 0.1, 0.1, false).unwrap();
        let l = |x: f64, z: f64| Localization { t_index: 0, pos: [x, z], score: 1.0, v_tag: None };
        let a = vec![l(0.2, 0.3)];
        let map = accumulate([a.as_slice()], &g);
        assert_eq!(map.total, 1);
        assert_eq!(map.counts.iter().filter(|&&c| c > 0).count(), 1);
        let b = vec![l(0.5, 0.5), l(0.2, 0.3)];
        let c = vec![l(0.2, 0.3), l(0.5, 0.5)];
        assert_eq!(accumulate([b.as_slice()], &g), accumulate([c.as_slice()], &g));
        assert_eq!(segment_support(&AccumulatedMap::new(g), &SegmentRule::default()).count(), 0);

        // A filled square with a one-pixel hole is filled by closing.
        let mut m = Mask::from_fn(g, |x, z| (0.2..=0.7).contains(&x) && (0.2..=0.7).contains(&z));
        let hole = g.index(4, 4);
        m.data[hole] = false;
        let closed = closing(&m, 1);
        assert!(closed.data[hole]);
        assert!(m.data.iter().zip(&closed.data).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn merge_keeps_strongest() {
        let l = |x: f64, s: f64, v: f64| Localization { t_index: 0, pos: [x, 0.0], score: s, v_tag: Some([v, 0.0]) };
        let m = merge_detections(vec![l(0.0, 1.0, 1.0), l(0.01, 2.0, 2.0), l(1.0, 0.5, 3.0)], 0.075);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].v_tag, Some([2.0, 0.0]));
    }

    #[test]
    fn velocity_map_takes_max_speed() {
        let g = make_grid(4, 4, 1.0, 1.0, false).unwrap();
        let l = |v: f64| Localization { t_index: 0, pos: [1.0, 1.0], score: 1.0, v_tag: Some([v, 0.0]) };
        let set = vec![l(1.0), l(3.0), l(2.0)];
        let vm = velocity_map([set.as_slice()], &g);
        assert_eq!(vm.speed(1, 1), 3.0);
        assert_eq!(vm.speed(0, 0), 0.0);
    }

    #[test]
    fn pipeline_on_empty_frames() {
        let g = make_grid(64, 64, 0.03, 0.03, true).unwrap();
        let frames = FrameStack::zeros(g, 16, 0.01).unwrap();
        let bank = FilterBankSpec::new(vec![VelocityFilterSpec::new([1.0, 0.0], 0.05).unwrap()]).unwrap();
        let out = run_pipeline(&frames, &bank, &P, &PipelineConfig::for_psf(&P)).unwrap();
        assert_eq!(out.map.total, 0);
        assert!(out.per_frame.iter().all(Vec::is_empty));
        assert!(out.velocity.vx.iter().all(|&v| v == 0.0));
    }
}
