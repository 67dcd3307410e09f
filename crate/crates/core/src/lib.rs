//! Velocity-selective spatiotemporal filtering for ultrasound localization
//! microscopy.
//!
//! The crate synthesizes moving-microbubble image sequences, filters them
//! with the plane-supported velocity filter `H(k,Ω) = W(Ω + k·v_f)` (optionally
//! combined with transverse oscillation), localizes bubbles by matched
//! filtering, and provides closed-form predictions for the filtered bubble
//! response together with numerical oracles for each of them.
//!
//! All numerical types are generic over [`Real`] (`f32` or `f64`); the
//! `…F32`/`…F64` aliases below name the common instantiations.
//!
//! Units: lengths in mm, times in s, speeds in mm/s, wavenumbers in rad/mm.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod localize;
pub mod metrics;
pub mod phantom;
pub mod psf;
pub mod scalar;
pub mod spectrum;
pub mod stack;
pub mod theory;
pub mod vfilter;
pub mod window;

pub use error::{Error, Result};
pub use grid::{make_grid, Grid2D, Image, Mask};
pub use psf::{
    autocorr_theory, eval_post_envelope, eval_pre_envelope, eval_psf, eval_to_envelope, eval_to_psf, render_psf,
    MatchedFilterTheory, PsfMode, PsfParams, ToParams,
};
pub use localize::{
    accumulate, assemble, detect, matched_filter_map, member_detector, run_pipeline, segment_support, AccumulatedMap, DetectorConfig, Localization,
    MatchedFilter, PipelineConfig, PipelineOutput, SegmentRule, VelocityMap,
};
pub use metrics::{fve, iou, localization_error, measure_attenuation, FveNorm, LeParams, MetricReport};
pub use phantom::{
    sample_bubbles, synthesize_frames, Bubble, Flow, FreeFlow, GroundTruth, MotionSpec, NoiseConfig, RingFlow, RingSpec,
    TruthPoint, VesselFlow, VesselSpec,
};
pub use scalar::Real;
pub use spectrum::{fft3, ifft3, Fft3Plan, Spectrum3D};
pub use stack::FrameStack;
pub use vfilter::{
    apply_filter_direct, apply_filter_fft, apply_to_filter, build_filter, run_filter_bank, FilterBankSpec, FilterEngine,
    ToRule, TransferFunction3D, VelocityFilterSpec,
};
pub use window::{gaussian_window, SampledWindow, WindowKind};

pub type Grid2DF32 = Grid2D<f32>;
pub type Grid2DF64 = Grid2D<f64>;
pub type FrameStackF32 = FrameStack<f32>;
pub type FrameStackF64 = FrameStack<f64>;
pub type PsfParamsF32 = PsfParams<f32>;
pub type PsfParamsF64 = PsfParams<f64>;
pub type VelocityFilterSpecF32 = VelocityFilterSpec<f32>;
pub type VelocityFilterSpecF64 = VelocityFilterSpec<f64>;
pub type FilterBankSpecF32 = FilterBankSpec<f32>;
pub type FilterBankSpecF64 = FilterBankSpec<f64>;
pub type VesselSpecF32 = VesselSpec<f32>;
pub type VesselSpecF64 = VesselSpec<f64>;
pub type LocalizationF32 = Localization<f32>;
pub type LocalizationF64 = Localization<f64>;
