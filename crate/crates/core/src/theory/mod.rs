//! Closed-form predictions for the velocity-filtered bubble response,
//! passbands, apparent densities and noise reduction, plus the numerical
//! oracles they are validated against.

pub mod attenuation;
pub mod bandwidth;
pub mod density;
pub mod noise;
pub mod oracle;
pub mod to;

pub use attenuation::{attenuation_pre, gamma_hat, mf_peak, mf_peak_post, q_post, q_pre, AttenuationReport};
pub use bandwidth::{velocity_bandwidth, EnvelopeMode, VelocityBandwidth, VelocityPassband};
pub use density::{apparent_density, filtered_density, joint_density, JointDensity};
pub use noise::{acquisition_time_bound, nrf_bound, AcqBoundInput, NoiseSpec, NrfBound};
pub use to::{to_attenuation, to_q, ToAttenuationReport};
