//! `velofilt`: synthesize, filter, localize and score ULM phantoms.

mod config;
mod error;
mod manifest;
mod stages;
mod theory;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use error::{CliError, CliResult};
use stages::Run;
use theory::{Table, TheoryParams};

#[derive(Parser, Debug)]
#[command(name = "velofilt", version, about = "Velocity-filtered ultrasound localization microscopy")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (recorded in the manifest).
    #[arg(long, global = true, env = "VELOFILT_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    /// Format of tables printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the phantom into a frame stack with ground truth.
    Synth,
    /// Apply every filter-bank member to the frame stack.
    Filter {
        /// Frame stack base path (defaults to `<out>/frames`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Detect bubbles in the filtered stacks.
    Localize {
        /// Detect in the unfiltered frames instead.
        #[arg(long)]
        no_vf: bool,
    },
    /// Build the density map, support mask and velocity map.
    Accumulate,
    /// Score the run against its ground truth.
    Metrics,
    /// Run all stages in sequence.
    Pipeline,
    /// Print closed-form prediction tables.
    Theory(TheoryArgs),
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
#[command(group(ArgGroup::new("table").required(true).args(["nrf", "deltav", "gamma", "density", "to"])))]
struct TheoryArgs {
    /// Noise reduction factor bound.
    #[arg(long)]
    nrf: bool,
    /// Velocity bandwidth versus direction.
    #[arg(long)]
    deltav: bool,
    /// Attenuation over a grid of velocity mismatches.
    #[arg(long)]
    gamma: bool,
    /// Apparent and filtered bubble density across a vessel.
    #[arg(long)]
    density: bool,
    /// Attenuation with and without transverse oscillation.
    #[arg(long)]
    to: bool,
    #[arg(long, default_value_t = 0.3)]
    lambda_mm: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma_r_mm: f64,
    /// `σr/σt` in mm/s; sets σt for --gamma and --deltav.
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_t_s: f64,
    #[arg(long, default_value_t = 10.0)]
    v0_max_mm_s: f64,
    #[arg(long, default_value_t = 100.0)]
    frame_rate_hz: f64,
    #[arg(long, default_value_t = 41)]
    points: usize,
    /// Half-range of the mismatch axes (default 3·ratio).
    #[arg(long)]
    dv_max_mm_s: Option<f64>,
    #[arg(long, default_value_t = 0.6)]
    lambda_x_mm: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma_x_mm: f64,
    #[arg(long, default_value_t = 1.0)]
    radius_mm: f64,
    #[arg(long, default_value_t = 10.0)]
    v0_mm_s: f64,
    #[arg(long, default_value_t = 1000.0)]
    c_mb: f64,
    #[arg(long, default_value_t = 5.0)]
    vf_mm_s: f64,
    /// Bandwidth for --density (default: computed from σt at θ = 0).
    #[arg(long)]
    delta_v_mm_s: Option<f64>,
    /// Also write the table to this file.
    #[arg(long = "table-out")]
    table_out: Option<PathBuf>,
}

impl TheoryArgs {
    fn params(&self) -> TheoryParams {
        TheoryParams {
            lambda_mm: self.lambda_mm,
            sigma_r_mm: self.sigma_r_mm,
            ratio_mm_s: self.ratio,
            sigma_t_s: self.sigma_t_s,
            v0_max_mm_s: self.v0_max_mm_s,
            frame_rate_hz: self.frame_rate_hz,
            points: self.points,
            dv_max_mm_s: self.dv_max_mm_s,
            lambda_x_mm: self.lambda_x_mm,
            sigma_x_mm: self.sigma_x_mm,
            radius_mm: self.radius_mm,
            v0_mm_s: self.v0_mm_s,
            c_mb_per_mm3: self.c_mb,
            vf_mm_s: self.vf_mm_s,
            delta_v_mm_s: self.delta_v_mm_s,
        }
    }

    fn table(&self) -> CliResult<Table> {
        let p = self.params();
        if self.nrf {
            theory::nrf_table(&p)
        } else if self.deltav {
            theory::deltav_table(&p)
        } else if self.gamma {
            theory::gamma_table(&p)
        } else if self.density {
            theory::density_table(&p)
        } else {
            theory::to_table(&p)
        }
    }
}

fn render(table: &Table, format: Format) -> String {
    match format {
        Format::Csv => table.to_csv(),
        Format::Json => table.to_json() + "\n",
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::config("--config is required for this command"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    writeln!(std::io::stdout(), "{s}").map_err(|e| CliError::data(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::Theory(args) = &cli.command {
        let text = render(&args.table()?, cli.format);
        if let Some(p) = &args.table_out {
            velofilt_core::io::write_atomic(p, text.as_bytes())?;
        }
        return write!(std::io::stdout(), "{text}").map_err(|e| CliError::data(e.to_string()));
    }
    let cfg = load_config(&cli)?;
    let mut run = Run::new(&cli.out, cfg, cli.threads as usize)?;
    match &cli.command {
        Command::Synth => {
            run.synth()?;
        }
        Command::Filter { input } => run.filter(input.as_deref().map(Path::new))?,
        Command::Localize { no_vf } => {
            run.localize(*no_vf)?;
        }
        Command::Accumulate => {
            run.accumulate(None)?;
        }
        Command::Metrics => print_json(&run.metrics(None)?)?,
        Command::Pipeline => print_json(&run.pipeline()?)?,
        Command::Theory(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("velofilt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
