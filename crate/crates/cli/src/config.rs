//! Experiment configuration. Every physical quantity carries its unit in the key name.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use velofilt_core::phantom::{Bubble, Flow, FreeFlow, MotionSpec, RingFlow, RingSpec, VesselFlow, VesselSpec};
use velofilt_core::theory::EnvelopeMode;
use velofilt_core::vfilter::ToRule;
use velofilt_core::{
    make_grid, DetectorConfig, FilterBankSpec, Grid2D, LeParams, PipelineConfig, PsfMode, PsfParams, SegmentRule, ToParams, VelocityFilterSpec,
};

use crate::error::{CliError, CliResult};
use crate::manifest::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub psf: PsfSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<ToSection>,
    #[serde(default)]
    pub grid: GridSection,
    pub phantom: PhantomSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub filter_bank: BankSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub outputs: OutputsSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    #[default]
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfSection {
    pub sigma_r_mm: f64,
    pub lambda_mm: f64,
    pub envelope: Envelope,
}

impl Default for PsfSection {
    fn default() -> Self {
        Self { sigma_r_mm: 0.3, lambda_mm: 0.3, envelope: Envelope::Pre }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToSection {
    pub lambda_x_mm: f64,
    pub sigma_x_mm: f64,
    #[serde(default = "default_to_angle")]
    pub max_angle_deg: f64,
}

fn default_to_angle() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub nz: usize,
    pub dx_mm: f64,
    pub dz_mm: f64,
    pub frames: usize,
    pub frame_rate_hz: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nx: 64, nz: 64, dx_mm: 0.03, dz_mm: 0.03, frames: 300, frame_rate_hz: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSection {
    GridBubbles {
        rows: usize,
        cols: usize,
        spacing_mm: f64,
        #[serde(default)]
        center_mm: [f64; 2],
        velocity_mm_s: [f64; 2],
    },
    CrossingVessels {
        angles_deg: Vec<f64>,
        radius_mm: f64,
        v0_mm_s: f64,
        c_mb_per_mm3: f64,
        #[serde(default)]
        center_mm: [f64; 2],
    },
    ParallelVessels {
        angle_deg: f64,
        radius_mm: f64,
        gap_mm: f64,
        v0_mm_s: f64,
        c_mb_per_mm3: f64,
        #[serde(default = "yes")]
        opposite: bool,
        #[serde(default)]
        center_mm: [f64; 2],
    },
    SingleVessel {
        angle_deg: f64,
        radius_mm: f64,
        v0_mm_s: f64,
        c_mb_per_mm3: f64,
        #[serde(default)]
        center_mm: [f64; 2],
    },
    Circular {
        #[serde(default)]
        center_mm: [f64; 2],
        orbit_radius_mm: f64,
        v0_mm_s: f64,
        #[serde(default = "one")]
        angular_sign: f64,
        /// Band half-width; with `c_mb_per_mm3` this makes a curved vessel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius_mm: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c_mb_per_mm3: Option<f64>,
        /// Isolated bubbles evenly spaced on the orbit instead of a vessel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        points: Option<usize>,
    },
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionSection {
    Linear,
    Circular {
        center_mm: [f64; 2],
        #[serde(default = "one")]
        angular_sign: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    pub vx_mm_s: f64,
    pub vz_mm_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_t_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub sigma_t_s: f64,
    pub directions_deg: Vec<f64>,
    pub v_min_mm_s: f64,
    pub v_max_mm_s: f64,
    pub spacing_factor: f64,
    /// Explicit members; replaces the tiling when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<MemberSection>>,
}

impl Default for BankSection {
    fn default() -> Self {
        Self { sigma_t_s: 0.5, directions_deg: vec![0.0], v_min_mm_s: 0.0, v_max_mm_s: 5.0, spacing_factor: 1.0, members: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub threshold_fraction: f64,
    /// Defaults to `1.2λ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_separation_mm: Option<f64>,
    pub subpixel: bool,
    /// Defaults to `λ/4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_radius_mm: Option<f64>,
    pub oversample: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { threshold_fraction: 0.5, min_separation_mm: None, subpixel: true, merge_radius_mm: None, oversample: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeSection {
    /// Defaults to `0.3λ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_par_mm: Option<f64>,
    /// Defaults to `0.15λ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_perp_mm: Option<f64>,
    #[serde(default)]
    pub theta_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub le: Option<LeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fve_fastest_fraction: Option<f64>,
    /// Truth pixels closer than this to the field edge are left out of FVE.
    pub fve_border_mm: f64,
    pub segment_min_count: u32,
    pub closing_radius_px: usize,
    /// Spacing of the IoU-versus-time table.
    pub iou_every_s: f64,
    /// Also localize the unfiltered frames for comparison.
    pub compare_without_vf: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            le: None,
            fve_fastest_fraction: None,
            fve_border_mm: 0.0,
            segment_min_count: 1,
            closing_radius_px: 2,
            iou_every_s: 0.5,
            compare_without_vf: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputsSection {
    /// Keep every bank member's output in `pipeline` runs.
    pub write_filtered: bool,
    pub previews: bool,
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self { write_filtered: false, previews: true }
    }
}

fn check(ok: bool, path: &str, what: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(format!("{path}: {what}")))
    }
}

fn positive(v: f64, path: &str) -> CliResult<()> {
    check(v > 0.0 && v.is_finite(), path, &format!("must be positive, got {v}"))
}

fn non_negative(v: f64, path: &str) -> CliResult<()> {
    check(v >= 0.0 && v.is_finite(), path, &format!("must be non-negative, got {v}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("{}: {}", if path == "." { "config".to_string() } else { path }, e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> CliResult<()> {
        positive(self.psf.sigma_r_mm, "psf.sigma_r_mm")?;
        positive(self.psf.lambda_mm, "psf.lambda_mm")?;
        if let Some(t) = &self.to {
            positive(t.lambda_x_mm, "to.lambda_x_mm")?;
            positive(t.sigma_x_mm, "to.sigma_x_mm")?;
            check((0.0..=90.0).contains(&t.max_angle_deg), "to.max_angle_deg", "must lie in [0, 90]")?;
            check(self.psf.envelope == Envelope::Pre, "to", "needs psf.envelope = \"pre\"")?;
        }
        let g = &self.grid;
        check(g.nx >= 8 && g.nz >= 8, "grid", "nx and nz must be at least 8")?;
        check(g.frames >= 1, "grid.frames", "must be at least 1")?;
        positive(g.dx_mm, "grid.dx_mm")?;
        positive(g.dz_mm, "grid.dz_mm")?;
        positive(g.frame_rate_hz, "grid.frame_rate_hz")?;
        match &self.phantom {
            PhantomSection::GridBubbles { spacing_mm, .. } => non_negative(*spacing_mm, "phantom.spacing_mm")?,
            PhantomSection::CrossingVessels { angles_deg, radius_mm, v0_mm_s, c_mb_per_mm3, .. } => {
                check(!angles_deg.is_empty(), "phantom.angles_deg", "needs at least one vessel")?;
                positive(*radius_mm, "phantom.radius_mm")?;
                non_negative(*v0_mm_s, "phantom.v0_mm_s")?;
                non_negative(*c_mb_per_mm3, "phantom.c_mb_per_mm3")?;
            }
            PhantomSection::ParallelVessels { radius_mm, gap_mm, v0_mm_s, c_mb_per_mm3, .. } => {
                positive(*radius_mm, "phantom.radius_mm")?;
                non_negative(*gap_mm, "phantom.gap_mm")?;
                non_negative(*v0_mm_s, "phantom.v0_mm_s")?;
                non_negative(*c_mb_per_mm3, "phantom.c_mb_per_mm3")?;
            }
            PhantomSection::SingleVessel { radius_mm, v0_mm_s, c_mb_per_mm3, .. } => {
                positive(*radius_mm, "phantom.radius_mm")?;
                non_negative(*v0_mm_s, "phantom.v0_mm_s")?;
                non_negative(*c_mb_per_mm3, "phantom.c_mb_per_mm3")?;
            }
            PhantomSection::Circular { orbit_radius_mm, v0_mm_s, radius_mm, c_mb_per_mm3, points, .. } => {
                positive(*orbit_radius_mm, "phantom.orbit_radius_mm")?;
                non_negative(*v0_mm_s, "phantom.v0_mm_s")?;
                match (points, radius_mm, c_mb_per_mm3) {
                    (Some(_), None, None) => {}
                    (None, Some(r), Some(c)) => {
                        positive(*r, "phantom.radius_mm")?;
                        non_negative(*c, "phantom.c_mb_per_mm3")?;
                        check(*r < *orbit_radius_mm, "phantom.radius_mm", "must be smaller than orbit_radius_mm")?;
                    }
                    _ => return Err(CliError::config("phantom: give either points, or radius_mm with c_mb_per_mm3")),
                }
            }
        }
        match (&self.motion, &self.phantom) {
            (None | Some(MotionSection::Linear), _) if !matches!(self.phantom, PhantomSection::Circular { .. }) => {}
            (None, PhantomSection::Circular { .. }) => {}
            (Some(MotionSection::Circular { .. }), PhantomSection::GridBubbles { .. }) => {}
            _ => return Err(CliError::config("motion: conflicts with the phantom's own motion")),
        }
        if let Some(n) = &self.noise {
            non_negative(n.sigma, "noise.sigma")?;
        }
        let b = &self.filter_bank;
        positive(b.sigma_t_s, "filter_bank.sigma_t_s")?;
        match &b.members {
            Some(ms) => {
                check(!ms.is_empty(), "filter_bank.members", "must not be empty")?;
                for (i, m) in ms.iter().enumerate() {
                    check(m.vx_mm_s.is_finite() && m.vz_mm_s.is_finite(), &format!("filter_bank.members[{i}]"), "velocity must be finite")?;
                    if let Some(s) = m.sigma_t_s {
                        positive(s, &format!("filter_bank.members[{i}].sigma_t_s"))?;
                    }
                }
            }
            None => {
                check(!b.directions_deg.is_empty(), "filter_bank.directions_deg", "needs at least one direction")?;
                non_negative(b.v_min_mm_s, "filter_bank.v_min_mm_s")?;
                check(b.v_max_mm_s >= b.v_min_mm_s, "filter_bank.v_max_mm_s", "must not be below v_min_mm_s")?;
                positive(b.spacing_factor, "filter_bank.spacing_factor")?;
            }
        }
        let d = &self.detector;
        check(d.threshold_fraction > 0.0 && d.threshold_fraction <= 1.0, "detector.threshold_fraction", "must lie in (0, 1]")?;
        if let Some(v) = d.min_separation_mm {
            non_negative(v, "detector.min_separation_mm")?;
        }
        if let Some(v) = d.merge_radius_mm {
            non_negative(v, "detector.merge_radius_mm")?;
        }
        check((1..=16).contains(&d.oversample), "detector.oversample", "must lie in 1..=16")?;
        let m = &self.metrics;
        if let Some(q) = m.fve_fastest_fraction {
            check(q > 0.0 && q <= 1.0, "metrics.fve_fastest_fraction", "must lie in (0, 1]")?;
        }
        non_negative(m.fve_border_mm, "metrics.fve_border_mm")?;
        positive(m.iou_every_s, "metrics.iou_every_s")?;
        if let Some(le) = &m.le {
            if let Some(v) = le.sigma_par_mm {
                positive(v, "metrics.le.sigma_par_mm")?;
            }
            if let Some(v) = le.sigma_perp_mm {
                positive(v, "metrics.le.sigma_perp_mm")?;
            }
        }
        Ok(())
    }

    pub fn psf(&self) -> PsfParams<f64> {
        PsfParams { sigma_r: self.psf.sigma_r_mm, lambda: self.psf.lambda_mm }
    }

    pub fn mode(&self) -> PsfMode<f64> {
        match self.psf.envelope {
            Envelope::Pre => PsfMode::Pre,
            Envelope::Post => PsfMode::Post,
        }
    }

    pub fn grid(&self) -> CliResult<Grid2D<f64>> {
        let g = &self.grid;
        make_grid(g.nx, g.nz, g.dx_mm, g.dz_mm, true).map_err(|e| CliError::config(format!("grid: {e}")))
    }

    pub fn dt(&self) -> f64 {
        self.grid.frame_rate_hz.recip()
    }

    pub fn to_rule(&self) -> Option<ToRule<f64>> {
        self.to.as_ref().map(|t| ToRule { params: ToParams { lambda_x: t.lambda_x_mm, sigma_x: t.sigma_x_mm }, max_angle: t.max_angle_deg.to_radians() })
    }

    pub fn bank(&self) -> CliResult<FilterBankSpec<f64>> {
        let b = &self.filter_bank;
        let bank = match &b.members {
            Some(ms) => FilterBankSpec::new(
                ms.iter()
                    .map(|m| VelocityFilterSpec::new([m.vx_mm_s, m.vz_mm_s], m.sigma_t_s.unwrap_or(b.sigma_t_s)))
                    .collect::<Result<_, _>>()?,
            ),
            None => {
                let dirs: Vec<f64> = b.directions_deg.iter().map(|d| d.to_radians()).collect();
                let mode = match self.psf.envelope {
                    Envelope::Pre => EnvelopeMode::Pre,
                    Envelope::Post => EnvelopeMode::Post,
                };
                FilterBankSpec::tiled(&self.psf(), b.sigma_t_s, &dirs, b.v_min_mm_s, b.v_max_mm_s, b.spacing_factor, mode)
            }
        };
        bank.map_err(|e| CliError::config(format!("filter_bank: {e}")))
    }

    pub fn pipeline(&self) -> PipelineConfig<f64> {
        let p = self.psf();
        let mut cfg = PipelineConfig::for_psf(&p);
        let d = &self.detector;
        cfg.detector = DetectorConfig {
            threshold_fraction: d.threshold_fraction,
            min_separation: d.min_separation_mm.unwrap_or(cfg.detector.min_separation),
            subpixel: d.subpixel,
        };
        cfg.mode = self.mode();
        cfg.to = self.to_rule();
        cfg.oversample = d.oversample;
        cfg.merge_radius = d.merge_radius_mm.unwrap_or(cfg.merge_radius);
        cfg
    }

    pub fn segment_rule(&self) -> SegmentRule {
        SegmentRule { min_count: self.metrics.segment_min_count, closing_radius: self.metrics.closing_radius_px }
    }

    pub fn le_params(&self, n_bubbles_t: usize) -> Option<LeParams<f64>> {
        let s = self.metrics.le.as_ref()?;
        let base = LeParams::for_psf(&self.psf(), s.theta_deg.to_radians(), n_bubbles_t);
        Some(LeParams { sigma_par: s.sigma_par_mm.unwrap_or(base.sigma_par), sigma_perp: s.sigma_perp_mm.unwrap_or(base.sigma_perp), ..base })
    }

    /// Builds the bubble population described by the phantom and motion sections.
    pub fn flow(&self, grid: &Grid2D<f64>) -> CliResult<Box<dyn Flow<f64>>> {
        let p = self.psf();
        let length = VesselSpec::default_length(grid, &p);
        let vessel = |angle_deg: f64, radius: f64, v0: f64, c: f64, center: [f64; 2]| VesselSpec {
            radius_r: radius,
            v0,
            c_mb: c,
            axis_angle_theta: angle_deg.to_radians(),
            center,
            center_y: 0.0,
            length,
        };
        let seed = self.seed;
        let flow: Box<dyn Flow<f64>> = match &self.phantom {
            PhantomSection::GridBubbles { rows, cols, spacing_mm, center_mm, velocity_mm_s } => {
                let mut bubbles = Vec::with_capacity(rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        let x = center_mm[0] + (c as f64 - (*cols as f64 - 1.0) / 2.0) * spacing_mm;
                        let z = center_mm[1] + (r as f64 - (*rows as f64 - 1.0) / 2.0) * spacing_mm;
                        let id = bubbles.len() as u64;
                        bubbles.push(Bubble { pos3: [x, 0.0, z], vel3: [velocity_mm_s[0], 0.0, velocity_mm_s[1]], id });
                    }
                }
                let motion = match &self.motion {
                    Some(MotionSection::Circular { center_mm, angular_sign }) => MotionSpec::Circular { center: *center_mm, angular_sign: *angular_sign },
                    _ => MotionSpec::Linear,
                };
                Box::new(FreeFlow { bubbles, motion })
            }
            PhantomSection::CrossingVessels { angles_deg, radius_mm, v0_mm_s, c_mb_per_mm3, center_mm } => Box::new(VesselFlow::new(
                angles_deg.iter().map(|&a| vessel(a, *radius_mm, *v0_mm_s, *c_mb_per_mm3, *center_mm)).collect(),
                seed,
            )?),
            PhantomSection::ParallelVessels { angle_deg, radius_mm, gap_mm, v0_mm_s, c_mb_per_mm3, opposite, center_mm } => {
                let a = angle_deg.to_radians();
                let normal = [-a.sin(), a.cos()];
                let off = radius_mm + gap_mm / 2.0;
                let at = |s: f64| [center_mm[0] + s * off * normal[0], center_mm[1] + s * off * normal[1]];
                let second = if *opposite { angle_deg + 180.0 } else { *angle_deg };
                Box::new(VesselFlow::new(
                    vec![
                        vessel(*angle_deg, *radius_mm, *v0_mm_s, *c_mb_per_mm3, at(-1.0)),
                        vessel(second, *radius_mm, *v0_mm_s, *c_mb_per_mm3, at(1.0)),
                    ],
                    seed,
                )?)
            }
            PhantomSection::SingleVessel { angle_deg, radius_mm, v0_mm_s, c_mb_per_mm3, center_mm } => {
                Box::new(VesselFlow::new(vec![vessel(*angle_deg, *radius_mm, *v0_mm_s, *c_mb_per_mm3, *center_mm)], seed)?)
            }
            PhantomSection::Circular { center_mm, orbit_radius_mm, v0_mm_s, angular_sign, radius_mm, c_mb_per_mm3, points } => match points {
                Some(n) => {
                    let sign = if *angular_sign < 0.0 { -1.0 } else { 1.0 };
                    let bubbles = (0..*n)
                        .map(|i| {
                            let phi = TAU * i as f64 / *n as f64;
                            let (s, c) = phi.sin_cos();
                            Bubble {
                                pos3: [center_mm[0] + orbit_radius_mm * c, 0.0, center_mm[1] + orbit_radius_mm * s],
                                vel3: [-sign * v0_mm_s * s, 0.0, sign * v0_mm_s * c],
                                id: i as u64,
                            }
                        })
                        .collect();
                    Box::new(FreeFlow { bubbles, motion: MotionSpec::Circular { center: *center_mm, angular_sign: sign } })
                }
                None => Box::new(RingFlow::new(
                    RingSpec {
                        center: *center_mm,
                        orbit_radius: *orbit_radius_mm,
                        radius_r: radius_mm.unwrap_or_default(),
                        v0: *v0_mm_s,
                        c_mb: c_mb_per_mm3.unwrap_or_default(),
                        angular_sign: *angular_sign,
                        center_y: 0.0,
                    },
                    seed,
                )?),
            },
        };
        Ok(flow)
    }
}
