//! DDIM stepping, guidance combination and the inpainting loops.

mod guidance;
mod loops;
mod schedule;

pub use guidance::{cfg_combine, stroke_start_step, GuidanceConfig};
pub use loops::{
    composite, consistent_inpaint_loop, double_mask_inpaint, plain_stroke_denoise, stroke_init,
    BackgroundTrajectory, ConsistentInpaint, ConsistentOutput, LayerReport, StepObserver,
    StepTrace, StrokeInit,
};
pub use schedule::{ddim_step, forward_noise, LatentState, NoiseSchedule};
