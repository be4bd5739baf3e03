//! Mask-conditioned adversarial precipitation nowcasting.
//!
//! The crate covers the whole chain from raw radar archives to verified,
//! explained forecasts:
//!
//! * [`data`]: ingestion, clutter filtering, cropping, normalization,
//!   sequence selection and the HDF5 dataset container.
//! * [`synth`]: seeded synthetic storm archives for desk-scale runs.
//! * [`masks`]: the 25-level precipitation mask stack.
//! * [`nn`], [`models`]: depthwise-separable/CBAM blocks, the single and
//!   dual encoder generators, the attention-augmented patch discriminator.
//! * [`train`]: losses, Adam, plateau scheduling, supervised and adversarial loops.
//! * [`verify`], [`uncertainty`], [`explain`]: skill scores, test-time
//!   dropout and aleatoric variance, Grad-CAM heatmaps.

pub mod data;
pub mod error;
pub mod explain;
pub mod masks;
pub mod models;
pub mod nn;
pub mod plot;
pub mod synth;
pub mod train;
pub mod uncertainty;
pub mod verify;

pub use error::{Error, Result};

/// Frames per input hour and per target hour (5-minute steps).
pub const FRAMES_PER_HOUR: usize = 12;
/// Side length of the cropped model grid.
pub const GRID: usize = 64;
/// Side length of a raw radar frame.
pub const RAW_GRID: usize = 256;
/// Number of mask thresholds (1..=25 mm/h).
pub const MASK_LEVELS: usize = 25;

/// Version string recorded in every artifact.
pub fn code_version() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("GNET_GIT_HASH").unwrap_or("unknown")
    )
}
