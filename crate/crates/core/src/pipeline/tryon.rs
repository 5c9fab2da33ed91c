use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backend::DenoiserBackend;
use crate::error::{Result, StageExt};
use crate::imageio::{save_mask, save_rgb};
use crate::inpaint::{consistent_inpaint_loop, stroke_init, ConsistentInpaint, LayerReport, NoiseSchedule};
use crate::tensor::{BinaryMask, ImageGrid, Rect};

use super::{compute_crop, run_registration, stream_seed, NoiseStream, RegistrationResult, TryOnJob};

#[derive(Debug, Clone)]
pub struct TryOnOutput {
    /// Full-resolution result; equal to the person image outside `M_p`.
    pub image: ImageGrid,
    pub person_crop: Rect,
    pub garment_crop: Rect,
    /// Registration stage, in the working (cropped, native-size) frame.
    pub registration: RegistrationResult,
    /// Consistent-inpainting result in the working frame.
    pub working_output: ImageGrid,
    pub layers: Vec<LayerReport>,
}

impl TryOnOutput {
    /// Writes intermediate images and a `key=value` metrics file.
    pub fn save_intermediates(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let reg = &self.registration;
        save_rgb(dir.join("warped_garment.png"), &reg.warped_garment)?;
        save_mask(dir.join("coverage.png"), &reg.coverage)?;
        save_mask(dir.join("fringe.png"), &reg.fringe)?;
        save_mask(dir.join("fringe_dilated.png"), &reg.dilated_fringe)?;
        save_rgb(dir.join("registered.png"), &reg.registered)?;
        save_rgb(dir.join("inpainted_crop.png"), &self.working_output)?;
        fs::write(dir.join("metrics.txt"), self.metrics())?;
        Ok(())
    }

    pub fn metrics(&self) -> String {
        let reg = &self.registration;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        let rect = |r: Rect| format!("{},{},{},{}", r.x, r.y, r.width, r.height);
        kv("person_crop", rect(self.person_crop));
        kv("garment_crop", rect(self.garment_crop));
        kv("matches.mutual", reg.matches.mutual.to_string());
        kv("matches.inliers", reg.matches.inliers.to_string());
        kv("matches.control_points", reg.matches.control_points.to_string());
        kv("coverage.pixels", reg.coverage.count().to_string());
        kv("fringe.pixels", reg.fringe.count().to_string());
        kv("fringe_dilated.pixels", reg.dilated_fringe.count().to_string());
        for l in &self.layers {
            let p = format!("attention.{}", l.layer);
            kv(&format!("{p}.steps"), l.steps.to_string());
            kv(
                &format!("{p}.mean_foreground_reference_mass"),
                format!("{:.6}", l.mean_foreground_reference_mass),
            );
            kv(&format!("{p}.max_leaked_mass"), format!("{:e}", l.max_leaked_mass));
            kv(
                &format!("{p}.max_background_reference_mass"),
                format!("{:e}", l.max_background_reference_mass),
            );
        }
        out
    }
}

fn to_working(image: &ImageGrid, mask: &BinaryMask, crop: Rect, side: usize) -> Result<(ImageGrid, BinaryMask)> {
    Ok((
        image.crop(crop)?.resize_bilinear(side, side),
        mask.crop(crop)?.resize_nearest(side, side),
    ))
}

/// Full try-on: registration, then consistent inpainting against the
/// un-deformed reference, pasted back inside `M_p` only.
///
/// Both inputs are cropped around their masks and resampled to the
/// backend's native resolution for processing.
pub fn run_try_on(job: &TryOnJob, backend: &dyn DenoiserBackend) -> Result<TryOnOutput> {
    job.validate().stage("job")?;
    let desc = backend.describe().stage("describe")?;
    desc.validate().stage("describe")?;
    let side = desc.native_resolution;

    let person_crop = compute_crop(&job.person_mask, desc.latent_scale).stage("crop")?;
    let garment_crop = compute_crop(&job.garment_mask, desc.latent_scale).stage("crop")?;
    let (person, person_mask) = to_working(&job.person, &job.person_mask, person_crop, side).stage("crop")?;
    let (garment, garment_mask) = to_working(&job.garment, &job.garment_mask, garment_crop, side).stage("crop")?;

    let working = TryOnJob {
        person,
        person_mask,
        garment,
        garment_mask,
        ..job.clone()
    };
    let registration = run_registration(&working, backend)?;

    let schedule = NoiseSchedule::new(&desc.schedule, job.steps).stage("schedule")?;
    let init = stroke_init(
        backend,
        &registration.registered,
        &job.guidance,
        &schedule,
        stream_seed(job.seed, NoiseStream::Stroke),
    )
    .stage("stroke init")?;
    let reference_latent = backend.encode(&working.garment).stage("consistent inpainting")?;
    let consistent = consistent_inpaint_loop(
        backend,
        &ConsistentInpaint {
            init: &init,
            reference_latent: &reference_latent,
            m_p: &working.person_mask,
            m_g: &working.garment_mask,
            prompt: &job.prompt,
            guidance: &job.guidance,
            schedule: &schedule,
            reference_noise_seed: stream_seed(job.seed, NoiseStream::Reference),
        },
        None,
    )
    .stage("consistent inpainting")?;

    let patch = consistent
        .image
        .resize_bilinear(person_crop.height, person_crop.width);
    let mut image = job.person.clone();
    for y in 0..person_crop.height {
        for x in 0..person_crop.width {
            let (py, px) = (person_crop.y + y, person_crop.x + x);
            if job.person_mask.get(py, px) {
                image.pixel_mut(py, px).copy_from_slice(patch.pixel(y, x));
            }
        }
    }

    Ok(TryOnOutput {
        image,
        person_crop,
        garment_crop,
        registration,
        working_output: consistent.image,
        layers: consistent.layers,
    })
}
