//! Pipeline stages: synth → filter → localize → accumulate → metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use velofilt_core::io::{
    read_localizations_csv, read_mask, read_stack, read_truth_csv, read_velocity_map, write_atomic, write_image, write_localizations_csv, write_mask, write_pgm,
    write_stack, write_truth_csv, write_velocity_map, StackHeader,
};
use velofilt_core::localize::{localize_stack, LocalizationSet};
use velofilt_core::phantom::{NoiseConfig, TruthPoint};
use velofilt_core::vfilter::run_filter_bank;
use velofilt_core::{
    accumulate, assemble, fve, iou, localization_error, member_detector, run_pipeline, segment_support, synthesize_frames, FrameStack, FveNorm, Image,
    Localization, Mask, MatchedFilter, MetricReport, PsfMode, ToParams, VelocityFilterSpec, VelocityMap,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const FRAMES: &str = "frames";
pub const PREVIEW_PGM: &str = "frames_max.pgm";
pub const TRUTH_CSV: &str = "truth.csv";
pub const TRUTH_SUPPORT: &str = "truth_support";
pub const TRUTH_VELOCITY: &str = "truth_velocity";
pub const FILTERED_DIR: &str = "filtered";
pub const BANK_FILE: &str = "bank.json";
pub const LOCALIZATIONS_CSV: &str = "localizations.csv";
pub const ACCUMULATED: &str = "accumulated";
pub const SUPPORT: &str = "support";
pub const VELOCITY: &str = "velocity";
pub const METRICS_JSON: &str = "metrics.json";
pub const IOU_CSV: &str = "iou_vs_time.csv";

/// Output of one bank member as recorded in `filtered/bank.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub index: usize,
    pub vx_mm_s: f64,
    pub vz_mm_s: f64,
    pub sigma_t_s: f64,
    pub to_applied: bool,
    /// Stack base name relative to the bank file.
    pub stack: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankManifest {
    pub source: String,
    #[serde(default)]
    pub to: Option<ToParams<f64>>,
    pub members: Vec<BankEntry>,
}

/// One run directory and its manifest.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub manifest: RunManifest,
}

fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::data(e.to_string()))
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("missing input {}", path.display())))
    }
}

fn with_json(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Run {
    pub fn new(dir: &Path, cfg: ExperimentConfig, threads: usize) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("creating {}: {e}", dir.display())))?;
        let manifest = RunManifest::open(dir, &cfg.digest(), cfg.seed, threads);
        Ok(Self { dir: dir.to_path_buf(), cfg, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `f` as stage `name`, recording its artifacts and wall-clock time.
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&Self) -> CliResult<(T, Vec<PathBuf>)>) -> CliResult<T> {
        let t0 = Instant::now();
        let (out, paths) = f(self).map_err(|e| e.context(name))?;
        self.manifest.record(&self.dir, &paths)?;
        self.manifest.timing(name, t0.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)?;
        Ok(out)
    }

    fn frames_header(&self) -> CliResult<StackHeader> {
        let p = with_json(&self.path(FRAMES));
        require(&p)?;
        let text = fs::read_to_string(&p).map_err(|e| CliError::data(format!("reading {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    }

    fn read_frames(&self) -> CliResult<FrameStack<f64>> {
        require(&with_json(&self.path(FRAMES)))?;
        Ok(read_stack(&self.path(FRAMES))?)
    }

    pub fn synth(&mut self) -> CliResult<Synthesized> {
        self.stage("synth", |run| {
            let cfg = &run.cfg;
            let grid = cfg.grid()?;
            let fine = grid.refine(cfg.detector.oversample)?;
            let mut flow = cfg.flow(&grid)?;
            let noise = cfg.noise.as_ref().map(|n| NoiseConfig { sigma: n.sigma, seed: cfg.seed.wrapping_add(1) });
            let (frames, truth) = synthesize_frames(flow.as_mut(), &cfg.psf(), &cfg.mode(), &grid, cfg.grid.frames, cfg.dt(), noise)?;
            let support = flow.support(&fine);
            let mut paths = write_stack(&run.path(FRAMES), &frames)?.to_vec();
            if cfg.outputs.previews {
                let mut mip = Image::zeros(grid);
                for t in 0..frames.nt {
                    for (m, v) in mip.data.iter_mut().zip(frames.frame(t)) {
                        *m = m.max(v.abs());
                    }
                }
                write_pgm(&run.path(PREVIEW_PGM), &mip)?;
                paths.push(run.path(PREVIEW_PGM));
            }
            write_truth_csv(&run.path(TRUTH_CSV), &truth.point_frames)?;
            paths.push(run.path(TRUTH_CSV));
            if let Some(m) = &support {
                paths.extend(write_mask(&run.path(TRUTH_SUPPORT), m)?);
            }
            if let Some(v) = &truth.velocity_map {
                paths.extend(write_velocity_map(&run.path(TRUTH_VELOCITY), v)?);
            }
            Ok((Synthesized { frames, points: truth.point_frames, support, velocity: truth.velocity_map }, paths))
        })
    }

    pub fn filter(&mut self, input: Option<&Path>) -> CliResult<()> {
        self.stage("filter", |run| {
            let frames = match input {
                Some(p) => {
                    require(&with_json(p))?;
                    read_stack(p)?
                }
                None => run.read_frames()?,
            };
            let bank = run.cfg.bank()?;
            let rule = run.cfg.to_rule();
            let dir = run.path(FILTERED_DIR);
            let mut paths = Vec::new();
            let mut members = Vec::new();
            run_filter_bank(&frames, &bank, rule.as_ref(), |i, spec, out| {
                let stack = format!("member_{i:03}");
                paths.extend(write_stack(&dir.join(&stack), &out)?);
                members.push(BankEntry {
                    index: i,
                    vx_mm_s: spec.v_f[0],
                    vz_mm_s: spec.v_f[1],
                    sigma_t_s: spec.sigma_t,
                    to_applied: rule.as_ref().is_some_and(|r| r.applies_to(spec)),
                    stack,
                });
                Ok(())
            })?;
            let source = input.map_or_else(|| FRAMES.to_string(), |p| p.display().to_string());
            let manifest = BankManifest { source, to: rule.map(|r| r.params), members };
            let bank_path = dir.join(BANK_FILE);
            write_atomic(&bank_path, &json_bytes(&manifest)?)?;
            paths.push(bank_path);
            Ok(((), paths))
        })
    }

    /// Detects bubbles in every filtered stack listed in the bank file, or in the raw frames.
    pub fn localize(&mut self, without_vf: bool) -> CliResult<Vec<LocalizationSet<f64>>> {
        self.stage("localize", |run| {
            let cfg = run.cfg.pipeline();
            let p = run.cfg.psf();
            let per_frame = if without_vf {
                let frames = run.read_frames()?;
                localize_raw(&frames, &run.cfg)?
            } else {
                let bank_path = run.path(FILTERED_DIR).join(BANK_FILE);
                require(&bank_path)?;
                let text = fs::read_to_string(&bank_path).map_err(|e| CliError::data(format!("reading {}: {e}", bank_path.display())))?;
                let bank: BankManifest = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", bank_path.display())))?;
                if bank.members.is_empty() {
                    return Err(CliError::data(format!("{} lists no members", bank_path.display())));
                }
                let mut per_frame: Vec<Vec<Localization<f64>>> = Vec::new();
                let mut cache: Vec<(PsfMode<f64>, MatchedFilter<f64>)> = Vec::new();
                let mut counts = Vec::new();
                let mut grid = None;
                for m in &bank.members {
                    let stack = read_stack::<f64>(&run.path(FILTERED_DIR).join(&m.stack))?;
                    let to = if m.to_applied {
                        Some(bank.to.ok_or_else(|| CliError::data("bank member marked TO-filtered but no TO parameters recorded"))?)
                    } else {
                        None
                    };
                    let (mode, det) = member_detector(&p, &cfg, to.as_ref());
                    if !cache.iter().any(|(m, _)| *m == mode) {
                        cache.push((mode, MatchedFilter::new(&p, &mode, &stack.grid)?));
                    }
                    let mf = &cache.iter().find(|(m, _)| *m == mode).expect("cached template").1;
                    let spec = VelocityFilterSpec::new([m.vx_mm_s, m.vz_mm_s], m.sigma_t_s)?;
                    let dets = localize_stack(&stack, mf, &det, Some(spec.v_f))?;
                    counts.push(dets.iter().map(Vec::len).sum());
                    per_frame.resize(stack.nt.max(per_frame.len()), Vec::new());
                    for (t, d) in dets.into_iter().enumerate() {
                        per_frame[t].extend(d);
                    }
                    grid = Some(stack.grid);
                }
                assemble(per_frame, &grid.expect("at least one member"), &cfg, counts)?.per_frame
            };
            write_localizations_csv(&run.path(LOCALIZATIONS_CSV), &per_frame)?;
            Ok((per_frame, vec![run.path(LOCALIZATIONS_CSV)]))
        })
    }

    fn read_localizations(&self) -> CliResult<Vec<LocalizationSet<f64>>> {
        let nt = self.frames_header()?.nt;
        let p = self.path(LOCALIZATIONS_CSV);
        require(&p)?;
        Ok(read_localizations_csv(&p, nt)?)
    }

    pub fn accumulate(&mut self, per_frame: Option<&[LocalizationSet<f64>]>) -> CliResult<Estimate> {
        let loaded;
        let per_frame = match per_frame {
            Some(p) => p,
            None => {
                loaded = self.read_localizations()?;
                &loaded
            }
        };
        self.stage("accumulate", |run| {
            let h = run.frames_header()?;
            let grid = velofilt_core::Grid2D::new(h.nx, h.nz, h.dx_mm, h.dz_mm, h.x0_mm, h.z0_mm)?;
            let fine = grid.refine(run.cfg.detector.oversample)?;
            let map = accumulate(per_frame.iter().map(Vec::as_slice), &fine);
            let support = segment_support(&map, &run.cfg.segment_rule());
            let velocity = velofilt_core::localize::velocity_map(per_frame.iter().map(Vec::as_slice), &grid);
            let mut paths = write_image(&run.path(ACCUMULATED), &map.to_image())?;
            paths.extend(write_mask(&run.path(SUPPORT), &support)?);
            paths.extend(write_velocity_map(&run.path(VELOCITY), &velocity)?);
            Ok((Estimate { support, velocity }, paths))
        })
    }

    /// Scores the run against its ground truth.
    pub fn metrics(&mut self, inputs: Option<MetricInputs<'_>>) -> CliResult<MetricReport> {
        let owned;
        let inputs = match inputs {
            Some(i) => i,
            None => {
                owned = self.load_metric_inputs()?;
                MetricInputs {
                    frames: owned.0.as_ref(),
                    points: &owned.1,
                    truth_support: owned.2.as_ref(),
                    truth_velocity: owned.3.as_ref(),
                    per_frame: &owned.4,
                    estimate: &owned.5,
                }
            }
        };
        self.stage("metrics", |run| {
            let n_loc: usize = inputs.per_frame.iter().map(Vec::len).sum();
            if n_loc == 0 {
                return Err(CliError::data("no localizations to score"));
            }
            let cfg = &run.cfg;
            let mut report = MetricReport::default();
            let mut paths = Vec::new();
            if let Some(truth) = inputs.truth_support {
                report.iou = Some(iou(truth, &inputs.estimate.support)?);
                let table = iou_table(cfg, truth, inputs.per_frame, inputs.frames)?;
                write_atomic(&run.path(IOU_CSV), table.as_bytes())?;
                paths.push(run.path(IOU_CSV));
            }
            if let Some(tv) = inputs.truth_velocity {
                let mut tv = tv.clone();
                let g = tv.grid;
                let b = cfg.metrics.fve_border_mm;
                for iz in 0..g.nz {
                    for ix in 0..g.nx {
                        if g.x(ix) < g.x0 + b || g.x(ix) > g.x_max() - b || g.z(iz) < g.z0 + b || g.z(iz) > g.z_max() - b {
                            let i = g.index(ix, iz);
                            tv.vx[i] = 0.0;
                            tv.vz[i] = 0.0;
                        }
                    }
                }
                report.fve = Some(fve(&tv, &inputs.estimate.velocity, FveNorm::VectorL1, cfg.metrics.fve_fastest_fraction)?);
            }
            if cfg.metrics.le.is_some() {
                report.le = Some(pooled_le(cfg, inputs.points, inputs.per_frame, &inputs.estimate.velocity.grid)?);
            }
            write_atomic(&run.path(METRICS_JSON), &json_bytes(&report)?)?;
            paths.push(run.path(METRICS_JSON));
            Ok((report, paths))
        })
    }

    #[allow(clippy::type_complexity)]
    fn load_metric_inputs(
        &self,
    ) -> CliResult<(Option<FrameStack<f64>>, Vec<Vec<TruthPoint<f64>>>, Option<Mask<f64>>, Option<VelocityMap<f64>>, Vec<LocalizationSet<f64>>, Estimate)> {
        let nt = self.frames_header()?.nt;
        let frames = if self.cfg.metrics.compare_without_vf { Some(self.read_frames()?) } else { None };
        require(&self.path(TRUTH_CSV))?;
        let points = read_truth_csv(&self.path(TRUTH_CSV), nt)?;
        let optional_mask = |name: &str| -> CliResult<Option<Mask<f64>>> {
            let base = self.path(name);
            Ok(if with_json(&base).exists() { Some(read_mask(&base)?) } else { None })
        };
        let truth_support = optional_mask(TRUTH_SUPPORT)?;
        let truth_velocity = if with_json(&self.path(&format!("{TRUTH_VELOCITY}_vx"))).exists() {
            Some(read_velocity_map(&self.path(TRUTH_VELOCITY))?)
        } else {
            None
        };
        let per_frame = self.read_localizations()?;
        require(&with_json(&self.path(SUPPORT)))?;
        let estimate = Estimate { support: read_mask(&self.path(SUPPORT))?, velocity: read_velocity_map(&self.path(VELOCITY))? };
        Ok((frames, points, truth_support, truth_velocity, per_frame, estimate))
    }

    /// All stages in one pass, without writing the filtered stacks unless asked to.
    pub fn pipeline(&mut self) -> CliResult<MetricReport> {
        let syn = self.synth()?;
        let per_frame = if self.cfg.outputs.write_filtered {
            self.filter(None)?;
            self.localize(false)?
        } else {
            self.stage("filter+localize", |run| {
                let out = run_pipeline(&syn.frames, &run.cfg.bank()?, &run.cfg.psf(), &run.cfg.pipeline())?;
                write_localizations_csv(&run.path(LOCALIZATIONS_CSV), &out.per_frame)?;
                Ok((out.per_frame, vec![run.path(LOCALIZATIONS_CSV)]))
            })?
        };
        let estimate = self.accumulate(Some(&per_frame))?;
        let frames = self.cfg.metrics.compare_without_vf.then_some(&syn.frames);
        self.metrics(Some(MetricInputs {
            frames,
            points: &syn.points,
            truth_support: syn.support.as_ref(),
            truth_velocity: syn.velocity.as_ref(),
            per_frame: &per_frame,
            estimate: &estimate,
        }))
    }
}

pub struct Synthesized {
    pub frames: FrameStack<f64>,
    pub points: Vec<Vec<TruthPoint<f64>>>,
    pub support: Option<Mask<f64>>,
    pub velocity: Option<VelocityMap<f64>>,
}

pub struct Estimate {
    pub support: Mask<f64>,
    pub velocity: VelocityMap<f64>,
}

pub struct MetricInputs<'a> {
    /// Raw frames, needed only for the unfiltered comparison.
    pub frames: Option<&'a FrameStack<f64>>,
    pub points: &'a [Vec<TruthPoint<f64>>],
    pub truth_support: Option<&'a Mask<f64>>,
    pub truth_velocity: Option<&'a VelocityMap<f64>>,
    pub per_frame: &'a [LocalizationSet<f64>],
    pub estimate: &'a Estimate,
}

fn localize_raw(frames: &FrameStack<f64>, cfg: &ExperimentConfig) -> CliResult<Vec<LocalizationSet<f64>>> {
    let p = cfg.psf();
    let pc = cfg.pipeline();
    let mf = MatchedFilter::new(&p, &pc.mode, &frames.grid)?;
    Ok(localize_stack(frames, &mf, &pc.detector.for_template(&p, &pc.mode), None)?)
}

/// `time_s,iou[,iou_without_vf]` at every `iou_every_s` and at the last frame.
fn iou_table(cfg: &ExperimentConfig, truth: &Mask<f64>, per_frame: &[LocalizationSet<f64>], frames: Option<&FrameStack<f64>>) -> CliResult<String> {
    let rule = cfg.segment_rule();
    let dt = cfg.dt();
    let nt = per_frame.len();
    let step = ((cfg.metrics.iou_every_s / dt).round() as usize).max(1);
    let mut ends: Vec<usize> = (1..=nt / step).map(|k| k * step).collect();
    if ends.last() != Some(&nt) && nt > 0 {
        ends.push(nt);
    }
    let raw = match frames {
        Some(f) if cfg.metrics.compare_without_vf => Some(localize_raw(f, cfg)?),
        _ => None,
    };
    let mut s = String::from(if raw.is_some() { "time_s,iou,iou_without_vf\n" } else { "time_s,iou\n" });
    for end in ends {
        let score = |sets: &[LocalizationSet<f64>]| -> CliResult<f64> {
            let map = accumulate(sets[..end].iter().map(Vec::as_slice), &truth.grid);
            Ok(iou(truth, &segment_support(&map, &rule))?)
        };
        s.push_str(&format!("{},{}", end as f64 * dt, score(per_frame)?));
        if let Some(r) = &raw {
            s.push_str(&format!(",{}", score(r)?));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Frame-by-frame LE pooled over the whole acquisition, on a grid fine enough for the blur.
fn pooled_le(cfg: &ExperimentConfig, truth: &[Vec<TruthPoint<f64>>], est: &[LocalizationSet<f64>], grid: &velofilt_core::Grid2D<f64>) -> CliResult<f64> {
    let total: usize = truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(CliError::data("LE needs at least one true bubble"));
    }
    let le = cfg.le_params(1).expect("LE section present");
    let factor = (grid.dx.max(grid.dz) / (le.sigma_perp / 4.0)).ceil().max(1.0) as usize;
    let fine = grid.refine(factor)?;
    let mut sum = 0.0;
    for (t, pts) in truth.iter().enumerate() {
        let tp: Vec<[f64; 2]> = pts.iter().map(|p| [p.x, p.z]).collect();
        let ep: Vec<[f64; 2]> = est.get(t).map(|s| s.iter().map(|l| l.pos).collect()).unwrap_or_default();
        if tp.is_empty() && ep.is_empty() {
            continue;
        }
        sum += localization_error(&tp, &ep, &le, &fine)?;
    }
    Ok(sum / total as f64)
}
