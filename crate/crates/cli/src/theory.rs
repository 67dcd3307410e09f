//! Closed-form tables for the `theory` subcommand.

use std::f64::consts::{FRAC_PI_2, TAU};

use velofilt_core::phantom::VesselSpec;
use velofilt_core::theory::{apparent_density, attenuation_pre, filtered_density, nrf_bound, to_attenuation, velocity_bandwidth, EnvelopeMode, NoiseSpec};
use velofilt_core::{PsfParams, ToParams};

use crate::error::{CliError, CliResult};

/// A table with fixed column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|r| self.columns.iter().zip(r).map(|(c, v)| (c.to_string(), serde_json::json!(v))).collect())
            .collect();
        serde_json::to_string_pretty(&rows).expect("table serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TheoryParams {
    pub lambda_mm: f64,
    pub sigma_r_mm: f64,
    /// `σr/σt`, mm/s.
    pub ratio_mm_s: f64,
    pub sigma_t_s: f64,
    pub v0_max_mm_s: f64,
    pub frame_rate_hz: f64,
    pub points: usize,
    pub dv_max_mm_s: Option<f64>,
    pub lambda_x_mm: f64,
    pub sigma_x_mm: f64,
    pub radius_mm: f64,
    pub v0_mm_s: f64,
    pub c_mb_per_mm3: f64,
    pub vf_mm_s: f64,
    pub delta_v_mm_s: Option<f64>,
}

impl TheoryParams {
    fn validate(&self) -> CliResult<()> {
        for (name, v) in [
            ("--lambda-mm", self.lambda_mm),
            ("--sigma-r-mm", self.sigma_r_mm),
            ("--ratio", self.ratio_mm_s),
            ("--sigma-t-s", self.sigma_t_s),
            ("--v0-max-mm-s", self.v0_max_mm_s),
            ("--frame-rate-hz", self.frame_rate_hz),
            ("--lambda-x-mm", self.lambda_x_mm),
            ("--sigma-x-mm", self.sigma_x_mm),
            ("--radius-mm", self.radius_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.points < 2 {
            return Err(CliError::config("--points must be at least 2"));
        }
        if let Some(d) = self.dv_max_mm_s {
            if d.is_nan() || d <= 0.0 {
                return Err(CliError::config("--dv-max-mm-s must be positive"));
            }
        }
        if self.v0_mm_s < 0.0 || self.c_mb_per_mm3 < 0.0 {
            return Err(CliError::config("--v0-mm-s and --c-mb must be non-negative"));
        }
        Ok(())
    }

    fn psf(&self) -> PsfParams<f64> {
        PsfParams { sigma_r: self.sigma_r_mm, lambda: self.lambda_mm }
    }

    /// `σt` implied by `--ratio`.
    fn ratio_sigma_t(&self) -> f64 {
        self.sigma_r_mm / self.ratio_mm_s
    }

    fn dv_axis(&self) -> Vec<f64> {
        let m = self.dv_max_mm_s.unwrap_or(3.0 * self.ratio_mm_s);
        let n = self.points;
        (0..n).map(|i| -m + 2.0 * m * i as f64 / (n - 1) as f64).collect()
    }

    fn to(&self) -> ToParams<f64> {
        ToParams { lambda_x: self.lambda_x_mm, sigma_x: self.sigma_x_mm }
    }
}

/// Columns `dvx_mm_s,dvz_mm_s,gamma,gamma_post`.
pub fn gamma_table(p: &TheoryParams) -> CliResult<Table> {
    p.validate()?;
    let (psf, st) = (p.psf(), p.ratio_sigma_t());
    let axis = p.dv_axis();
    let mut rows = Vec::with_capacity(axis.len() * axis.len());
    for &vz in &axis {
        for &vx in &axis {
            let r = attenuation_pre(&psf, st, [vx, vz]);
            rows.push(vec![vx, vz, r.gamma, r.gamma_post()]);
        }
    }
    Ok(Table { name: "gamma", columns: vec!["dvx_mm_s", "dvz_mm_s", "gamma", "gamma_post"], rows })
}

/// Columns `theta_deg,delta_v_mm_s,delta_v_over_ratio`, θ from 0° to 90° in 1° steps.
pub fn deltav_table(p: &TheoryParams) -> CliResult<Table> {
    p.validate()?;
    let (psf, st) = (p.psf(), p.ratio_sigma_t());
    let rows = (0..=90)
        .map(|deg| {
            let th = (deg as f64 * FRAC_PI_2 / 90.0).min(FRAC_PI_2);
            let b = velocity_bandwidth(&psf, st, th, EnvelopeMode::Pre)?;
            Ok(vec![deg as f64, b.delta_v, b.delta_v / p.ratio_mm_s])
        })
        .collect::<Result<_, velofilt_core::Error>>()?;
    Ok(Table { name: "deltav", columns: vec!["theta_deg", "delta_v_mm_s", "delta_v_over_ratio"], rows })
}

/// Columns `rho_mm,d2_per_mm2,d_vf_per_mm2` across the vessel.
pub fn density_table(p: &TheoryParams) -> CliResult<Table> {
    p.validate()?;
    let v = VesselSpec { radius_r: p.radius_mm, v0: p.v0_mm_s, c_mb: p.c_mb_per_mm3, ..VesselSpec::default() };
    let dv = match p.delta_v_mm_s {
        Some(d) => d,
        None => velocity_bandwidth(&p.psf(), p.sigma_t_s, 0.0, EnvelopeMode::Pre)?.delta_v,
    };
    let n = p.points;
    let rows = (0..n)
        .map(|i| {
            let rho = -p.radius_mm + 2.0 * p.radius_mm * i as f64 / (n - 1) as f64;
            Ok(vec![rho, apparent_density(rho, &v), filtered_density(rho, p.vf_mm_s, dv, &v)?])
        })
        .collect::<Result<_, velofilt_core::Error>>()?;
    Ok(Table { name: "density", columns: vec!["rho_mm", "d2_per_mm2", "d_vf_per_mm2"], rows })
}

/// Columns `dvx_mm_s,dvz_mm_s,gamma,gamma_bar` at `σt = --sigma-t-s`.
pub fn to_table(p: &TheoryParams) -> CliResult<Table> {
    p.validate()?;
    let (psf, to, st) = (p.psf(), p.to(), p.sigma_t_s);
    let axis = p.dv_axis();
    let mut rows = Vec::with_capacity(axis.len() * axis.len());
    for &vz in &axis {
        for &vx in &axis {
            rows.push(vec![vx, vz, attenuation_pre(&psf, st, [vx, vz]).gamma, to_attenuation([vx, vz], &psf, &to, st).gamma_bar]);
        }
    }
    Ok(Table { name: "to", columns: vec!["dvx_mm_s", "dvz_mm_s", "gamma", "gamma_bar"], rows })
}

/// Columns `sigma_t_s,v0_max_mm_s,lambda_mm,k_g_rad_mm,nrf,nrf_rounded,nrf_db`.
pub fn nrf_table(p: &TheoryParams) -> CliResult<Table> {
    p.validate()?;
    let n = NoiseSpec { n0: 1.0, k_g: TAU / p.lambda_mm, v0_max: p.v0_max_mm_s, frame_rate_f: p.frame_rate_hz };
    let b = nrf_bound(&n, p.sigma_t_s)?;
    Ok(Table {
        name: "nrf",
        columns: vec!["sigma_t_s", "v0_max_mm_s", "lambda_mm", "k_g_rad_mm", "nrf", "nrf_rounded", "nrf_db"],
        rows: vec![vec![p.sigma_t_s, p.v0_max_mm_s, p.lambda_mm, n.k_g, b.nrf, b.nrf.round(), b.nrf_db]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn params() -> TheoryParams {
        TheoryParams {
            lambda_mm: 0.3,
            sigma_r_mm: 0.3,
            ratio_mm_s: 1.0,
            sigma_t_s: 0.5,
            v0_max_mm_s: 10.0,
            frame_rate_hz: 100.0,
            points: 41,
            dv_max_mm_s: None,
            lambda_x_mm: 0.6,
            sigma_x_mm: 0.3,
            radius_mm: 1.0,
            v0_mm_s: 10.0,
            c_mb_per_mm3: 1000.0,
            vf_mm_s: 5.0,
            delta_v_mm_s: Some(1.0),
        }
    }

    #[test]
    fn nrf_row() {
        let t = nrf_table(&params()).unwrap();
        assert_eq!(t.rows[0][5], 118.0);
        assert_eq!(t.rows[0][6].round(), 21.0);
    }

    #[test]
    fn deltav_endpoints() {
        let t = deltav_table(&params()).unwrap();
        assert_eq!(t.rows.len(), 91);
        assert!((t.rows[0][1] - 6f64.sqrt()).abs() < 1e-9);
        assert!((t.rows[90][1] - 0.19).abs() < 0.01);
    }

    #[test]
    fn gamma_is_one_at_zero_mismatch() {
        let t = gamma_table(&TheoryParams { ratio_mm_s: 3.0, ..params() }).unwrap();
        let zero = t.rows.iter().find(|r| r[0] == 0.0 && r[1] == 0.0).unwrap();
        assert_eq!(zero[2], 1.0);
        assert!(t.rows.iter().all(|r| r[2] <= 1.0));
    }

    #[test]
    fn density_centre_value() {
        let t = density_table(&TheoryParams { points: 3, ..params() }).unwrap();
        assert!((t.rows[1][1] - 2000.0).abs() < 1e-9);
        assert_eq!(t.rows[0][1], 0.0);
    }

    #[test]
    fn csv_and_json_agree_on_columns() {
        let t = nrf_table(&params()).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("sigma_t_s,v0_max_mm_s"));
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v[0]["nrf_rounded"], 118.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert_eq!(gamma_table(&TheoryParams { ratio_mm_s: -1.0, ..params() }).unwrap_err().exit_code(), 2);
    }
}
