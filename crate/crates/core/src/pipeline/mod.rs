//! End-to-end orchestration: registration, then consistent inpainting.

mod crop;
mod registration;
mod tryon;

pub use crop::compute_crop;
pub use registration::{
    fringe_dilation_radius, register_with_control_points, run_registration, MatchSummary,
    RegistrationResult,
};
pub use tryon::{run_try_on, TryOnOutput};

use crate::correspondence::{DEFAULT_MAX_CONTROL_POINTS, DEFAULT_OUTLIER_K};
use crate::error::{Result, TryOnError};
use crate::inpaint::GuidanceConfig;
use crate::rng::SplitMix64;
use crate::tensor::{BinaryMask, ImageGrid};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_T_FEAT_FRACTION: f64 = 0.26;
pub const DEFAULT_MLS_ALPHA: f64 = 1.0;

/// Independent noise streams derived from the job seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NoiseStream {
    Features = 1,
    Fringe = 2,
    Stroke = 3,
    Reference = 4,
}

pub(crate) fn stream_seed(seed: u64, stream: NoiseStream) -> u64 {
    let mut rng = SplitMix64::new(seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.next_u64()
}

/// Everything one try-on run needs besides the backend.
#[derive(Debug, Clone)]
pub struct TryOnJob {
    pub person: ImageGrid,
    /// Region of the garment currently worn.
    pub person_mask: BinaryMask,
    pub garment: ImageGrid,
    pub garment_mask: BinaryMask,
    pub prompt: String,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub steps: usize,
    /// Feature-extraction timestep as a fraction of the schedule.
    pub t_feat_fraction: f64,
    pub mls_alpha: f64,
    pub outlier_k: f64,
    pub max_control_points: usize,
}

impl TryOnJob {
    pub fn new(
        person: ImageGrid,
        person_mask: BinaryMask,
        garment: ImageGrid,
        garment_mask: BinaryMask,
        prompt: impl Into<String>,
    ) -> Self {
        TryOnJob {
            person,
            person_mask,
            garment,
            garment_mask,
            prompt: prompt.into(),
            guidance: GuidanceConfig::default(),
            seed: 0,
            steps: DEFAULT_STEPS,
            t_feat_fraction: DEFAULT_T_FEAT_FRACTION,
            mls_alpha: DEFAULT_MLS_ALPHA,
            outlier_k: DEFAULT_OUTLIER_K,
            max_control_points: DEFAULT_MAX_CONTROL_POINTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.person_mask.height(), self.person_mask.width()) != (self.person.height(), self.person.width()) {
            return Err(TryOnError::argument("person mask size differs from the person image"));
        }
        if (self.garment_mask.height(), self.garment_mask.width()) != (self.garment.height(), self.garment.width()) {
            return Err(TryOnError::argument("garment mask size differs from the garment image"));
        }
        if self.person.channels() != 3 || self.garment.channels() != 3 {
            return Err(TryOnError::argument("person and garment must be RGB images"));
        }
        if self.person_mask.is_empty() {
            return Err(TryOnError::argument("person mask is empty"));
        }
        if self.garment_mask.is_empty() {
            return Err(TryOnError::argument("garment mask is empty"));
        }
        if self.steps == 0 {
            return Err(TryOnError::argument("steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.t_feat_fraction) {
            return Err(TryOnError::argument(format!(
                "t-feat fraction must lie in [0, 1], got {}",
                self.t_feat_fraction
            )));
        }
        if !(self.mls_alpha > 0.0 && self.mls_alpha.is_finite()) {
            return Err(TryOnError::argument("MLS alpha must be positive"));
        }
        if !(self.outlier_k > 0.0) {
            return Err(TryOnError::argument("outlier k must be positive"));
        }
        self.guidance.validate()
    }

    /// Inference step used for feature extraction.
    pub fn t_feat_step(&self) -> usize {
        ((self.t_feat_fraction * self.steps as f64 + 0.5).floor() as usize).min(self.steps)
    }
}
