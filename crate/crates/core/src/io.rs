//! On-disk formats: FrameStack file pairs, PGM previews and CSV tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image, Mask};
use crate::localize::{Localization, VelocityMap};
use crate::phantom::TruthPoint;
use crate::scalar::Real;
use crate::stack::FrameStack;

pub const LAYOUT: &str = "t-major,z-row-major,x-fastest";

/// JSON header of a FrameStack file pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub version: u32,
    pub nx: usize,
    pub nz: usize,
    pub nt: usize,
    pub dx_mm: f64,
    pub dz_mm: f64,
    pub dt_s: f64,
    pub x0_mm: f64,
    pub z0_mm: f64,
    pub layout: String,
    pub dtype: String,
    pub endian: String,
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<base>.json` and `<base>.f32`; returns both paths.
pub fn write_stack<T: Real>(base: &Path, stack: &FrameStack<T>) -> Result<[PathBuf; 2]> {
    let g = stack.grid;
    let header = StackHeader {
        version: 1,
        nx: g.nx,
        nz: g.nz,
        nt: stack.nt,
        dx_mm: g.dx.as_f64(),
        dz_mm: g.dz.as_f64(),
        dt_s: stack.dt.as_f64(),
        x0_mm: g.x0.as_f64(),
        z0_mm: g.z0.as_f64(),
        layout: LAYOUT.into(),
        dtype: "f32".into(),
        endian: "little".into(),
    };
    let mut bytes = Vec::with_capacity(stack.data.len() * 4);
    for v in &stack.data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let (hp, dp) = (with_ext(base, "json"), with_ext(base, "f32"));
    write_atomic(&dp, &bytes)?;
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&hp, &json)?;
    Ok([hp, dp])
}

/// Reads a file pair written by [`write_stack`]; `base` may carry either extension.
pub fn read_stack<T: Real>(base: &Path) -> Result<FrameStack<T>> {
    let base = match base.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let hp = with_ext(&base, "json");
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(format!("reading {}", hp.display()), e))?;
    let h: StackHeader = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", hp.display())))?;
    if h.version != 1 || h.layout != LAYOUT || h.dtype != "f32" || h.endian != "little" {
        return Err(Error::Data(format!("{}: unsupported version, layout, dtype or endianness", hp.display())));
    }
    let grid = Grid2D::new(h.nx, h.nz, T::lit(h.dx_mm), T::lit(h.dz_mm), T::lit(h.x0_mm), T::lit(h.z0_mm))
        .map_err(|e| Error::Data(format!("{}: {e}", hp.display())))?;
    let dp = with_ext(&base, "f32");
    let bytes = fs::read(&dp).map_err(|e| Error::io(format!("reading {}", dp.display()), e))?;
    let n = h.nx.checked_mul(h.nz).and_then(|v| v.checked_mul(h.nt)).ok_or_else(|| Error::Data("stack size overflows".into()))?;
    if bytes.len() != n * 4 {
        return Err(Error::Data(format!("{}: expected {} values, found {} bytes", dp.display(), n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    FrameStack::from_vec(grid, h.nt, T::lit(h.dt_s), data).map_err(|e| Error::Data(format!("{}: {e}", dp.display())))
}

/// Binary PGM with `max → 255` linear scaling of `|v|`.
pub fn pgm_bytes<T: Real>(img: &Image<T>) -> Vec<u8> {
    let g = img.grid;
    let m = img.max_abs();
    let mut out = format!("P5\n{} {}\n255\n", g.nx, g.nz).into_bytes();
    out.extend(img.data.iter().map(|v| {
        if m > T::zero() {
            (v.fabs() / m * T::lit(255.0)).round().as_f64().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    write_atomic(path, &pgm_bytes(img))
}

/// Writes an image as a one-frame stack plus `<base>.pgm`.
pub fn write_image<T: Real>(base: &Path, img: &Image<T>) -> Result<Vec<PathBuf>> {
    let stack = FrameStack::from_image(img.clone(), T::one())?;
    let mut paths = write_stack(base, &stack)?.to_vec();
    let pgm = with_ext(base, "pgm");
    write_pgm(&pgm, img)?;
    paths.push(pgm);
    Ok(paths)
}

pub fn read_image<T: Real>(base: &Path) -> Result<Image<T>> {
    let s = read_stack::<T>(base)?;
    if s.nt != 1 {
        return Err(Error::Data(format!("{}: expected a single frame, found {}", base.display(), s.nt)));
    }
    Ok(Image { grid: s.grid, data: s.data })
}

pub fn write_mask<T: Real>(base: &Path, m: &Mask<T>) -> Result<Vec<PathBuf>> {
    write_image(base, &m.to_image())
}

pub fn read_mask<T: Real>(base: &Path) -> Result<Mask<T>> {
    let img = read_image::<T>(base)?;
    Ok(Mask { grid: img.grid, data: img.data.iter().map(|v| *v != T::zero()).collect() })
}

/// Writes `<base>_vx` and `<base>_vz` images.
pub fn write_velocity_map<T: Real>(base: &Path, m: &VelocityMap<T>) -> Result<Vec<PathBuf>> {
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut paths = write_image(&base.with_file_name(format!("{name}_vx")), &Image { grid: m.grid, data: m.vx.clone() })?;
    paths.extend(write_image(&base.with_file_name(format!("{name}_vz")), &Image { grid: m.grid, data: m.vz.clone() })?);
    Ok(paths)
}

pub fn read_velocity_map<T: Real>(base: &Path) -> Result<VelocityMap<T>> {
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let vx = read_image::<T>(&base.with_file_name(format!("{name}_vx")))?;
    let vz = read_image::<T>(&base.with_file_name(format!("{name}_vz")))?;
    if !vx.grid.same_shape(&vz.grid) {
        return Err(Error::Data("velocity components have different shapes".into()));
    }
    Ok(VelocityMap { grid: vx.grid, vx: vx.data, vz: vz.data })
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    t_index: usize,
    id: u64,
    x_mm: f64,
    z_mm: f64,
    vx_mm_s: f64,
    vz_mm_s: f64,
}

#[derive(Serialize, Deserialize)]
struct LocRow {
    t_index: usize,
    x_mm: f64,
    z_mm: f64,
    score: f64,
    vf_x_mm_s: Option<f64>,
    vf_z_mm_s: Option<f64>,
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>, header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

fn csv_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))).collect()
}

/// `t_index,id,x_mm,z_mm,vx_mm_s,vz_mm_s`.
pub fn write_truth_csv<T: Real>(path: &Path, frames: &[Vec<TruthPoint<T>>]) -> Result<()> {
    let rows = frames.iter().enumerate().flat_map(|(t, pts)| {
        pts.iter().map(move |p| TruthRow { t_index: t, id: p.id, x_mm: p.x.as_f64(), z_mm: p.z.as_f64(), vx_mm_s: p.vx.as_f64(), vz_mm_s: p.vz.as_f64() })
    });
    write_atomic(path, &csv_bytes(rows, &["t_index", "id", "x_mm", "z_mm", "vx_mm_s", "vz_mm_s"])?)
}

/// Reads a truth CSV into `nt` frames (at least as many as the largest index).
pub fn read_truth_csv<T: Real>(path: &Path, nt: usize) -> Result<Vec<Vec<TruthPoint<T>>>> {
    let rows: Vec<TruthRow> = csv_rows(path)?;
    let n = rows.iter().map(|r| r.t_index + 1).max().unwrap_or(0).max(nt);
    let mut out = vec![Vec::new(); n];
    for r in rows {
        out[r.t_index].push(TruthPoint { id: r.id, x: T::lit(r.x_mm), z: T::lit(r.z_mm), vx: T::lit(r.vx_mm_s), vz: T::lit(r.vz_mm_s) });
    }
    Ok(out)
}

/// `t_index,x_mm,z_mm,score,vf_x_mm_s,vf_z_mm_s`; untagged detections leave the last two empty.
pub fn write_localizations_csv<T: Real>(path: &Path, frames: &[Vec<Localization<T>>]) -> Result<()> {
    let rows = frames.iter().flatten().map(|l| LocRow {
        t_index: l.t_index,
        x_mm: l.pos[0].as_f64(),
        z_mm: l.pos[1].as_f64(),
        score: l.score.as_f64(),
        vf_x_mm_s: l.v_tag.map(|v| v[0].as_f64()),
        vf_z_mm_s: l.v_tag.map(|v| v[1].as_f64()),
    });
    write_atomic(path, &csv_bytes(rows, &["t_index", "x_mm", "z_mm", "score", "vf_x_mm_s", "vf_z_mm_s"])?)
}

pub fn read_localizations_csv<T: Real>(path: &Path, nt: usize) -> Result<Vec<Vec<Localization<T>>>> {
    let rows: Vec<LocRow> = csv_rows(path)?;
    let n = rows.iter().map(|r| r.t_index + 1).max().unwrap_or(0).max(nt);
    let mut out = vec![Vec::new(); n];
    for r in rows {
        let v_tag = match (r.vf_x_mm_s, r.vf_z_mm_s) {
            (Some(x), Some(z)) => Some([T::lit(x), T::lit(z)]),
            (None, None) => None,
            _ => return Err(Error::Data(format!("{}: half-empty velocity tag", path.display()))),
        };
        out[r.t_index].push(Localization { t_index: r.t_index, pos: [T::lit(r.x_mm), T::lit(r.z_mm)], score: T::lit(r.score), v_tag });
    }
    Ok(out)
}
