use crate::backend::DenoiserBackend;
use crate::correspondence::{extract_features, match_nn, reject_outliers, to_control_points};
use crate::error::{Result, StageExt};
use crate::geometry_warp::{apply_backward_warp, build_deformation_field, ControlPointSet};
use crate::inpaint::{composite, double_mask_inpaint, BackgroundTrajectory, NoiseSchedule, StepObserver};
use crate::tensor::{BinaryMask, ImageGrid};

use super::{stream_seed, NoiseStream, TryOnJob};

/// How many matches survived each correspondence stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchSummary {
    pub mutual: usize,
    pub inliers: usize,
    pub control_points: usize,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub warped_garment: ImageGrid,
    /// Person pixels the warped garment actually covers.
    pub coverage: BinaryMask,
    /// `M_p ∧ ¬coverage`.
    pub fringe: BinaryMask,
    pub dilated_fringe: BinaryMask,
    /// Person image with the warped garment pasted in and fringes filled.
    pub registered: ImageGrid,
    pub control_points: ControlPointSet,
    pub matches: MatchSummary,
}

/// Fringe dilation radius: 8 px at 512 px, scaled with the image side.
pub fn fringe_dilation_radius(height: usize, width: usize) -> usize {
    let side = height.max(width) as f64;
    ((8.0 * side / 512.0).round() as usize).max(1)
}

/// Registers the garment onto the person using deep-feature
/// correspondences.
pub fn run_registration(job: &TryOnJob, backend: &dyn DenoiserBackend) -> Result<RegistrationResult> {
    job.validate()?;
    let desc = backend.describe().stage("describe")?;
    let schedule = NoiseSchedule::new(&desc.schedule, job.steps).stage("schedule")?;
    let t_feat = job.t_feat_step();
    let seed = stream_seed(job.seed, NoiseStream::Features);

    let garment_feats = extract_features(&job.garment, t_feat, &schedule, backend, seed, "garment")
        .stage("feature extraction")?;
    let person_feats = extract_features(&job.person, t_feat, &schedule, backend, seed, "person")
        .stage("feature extraction")?;

    let mutual = match_nn(&garment_feats, &job.garment_mask, &person_feats, &job.person_mask)
        .stage("correspondence")?;
    let inliers = reject_outliers(&mutual, job.outlier_k);
    let cps = to_control_points(&inliers, job.max_control_points).stage("correspondence")?;
    let summary = MatchSummary {
        mutual: mutual.len(),
        inliers: inliers.len(),
        control_points: cps.len(),
    };
    let mut result = register_with_control_points(job, &cps, backend, &schedule, None)?;
    result.matches = summary;
    Ok(result)
}

/// Everything after matching: warp, paste, and fringe inpainting.
pub fn register_with_control_points(
    job: &TryOnJob,
    cps: &ControlPointSet,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<RegistrationResult> {
    let (h, w) = (job.person.height(), job.person.width());
    let field = build_deformation_field(cps, w, h, job.mls_alpha).stage("warp")?;
    let (warped, warped_mask) = apply_backward_warp(&job.garment, &job.garment_mask, &field).stage("warp")?;

    let coverage = warped_mask.and(&job.person_mask);
    let pasted = composite(&coverage, &warped, &job.person).stage("warp")?;
    let fringe = job.person_mask.and_not(&coverage);
    let dilated = fringe.dilate(fringe_dilation_radius(h, w));

    let registered = if fringe.is_empty() {
        pasted
    } else {
        let background = BackgroundTrajectory::new(backend, &pasted, stream_seed(job.seed, NoiseStream::Fringe))
            .stage("fringe inpainting")?;
        double_mask_inpaint(backend, &background, &fringe, &dilated, &job.prompt, schedule, observer)
            .stage("fringe inpainting")?
    };

    Ok(RegistrationResult {
        warped_garment: warped,
        coverage,
        fringe,
        dilated_fringe: dilated,
        registered,
        control_points: cps.clone(),
        matches: MatchSummary {
            control_points: cps.len(),
            ..MatchSummary::default()
        },
    })
}
