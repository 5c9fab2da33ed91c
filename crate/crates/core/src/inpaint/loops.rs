//! The two inpainting loops: double-mask fringe filling and the
//! stroke-initialized consistent inpainting with masked extended attention.

use crate::attention::{downsample_mask, MeaStats, PoolRule, TokenMask, TokenOrigin};
use crate::backend::{
    AttentionOverride, Conditioning, DenoiserBackend, InpaintContext, LayerHook, MeaInjection,
    PredictRequest,
};
use crate::error::{Result, TryOnError};
use crate::inpaint::guidance::{cfg_combine, stroke_start_step, GuidanceConfig};
use crate::inpaint::schedule::{ddim_step, forward_noise, LatentState, NoiseSchedule};
use crate::rng::gaussian_field;
use crate::tensor::{BinaryMask, ImageGrid, Latent, Tensor3};

/// A known image together with the fixed noise that diffuses it, so that
/// `at(t)` gives the forward-noised background for any step.
#[derive(Debug, Clone)]
pub struct BackgroundTrajectory {
    image: ImageGrid,
    z0: Latent,
    noise: Latent,
}

impl BackgroundTrajectory {
    pub fn new(backend: &dyn DenoiserBackend, image: &ImageGrid, noise_seed: u64) -> Result<Self> {
        let z0 = backend.encode(image)?;
        let (h, w, c) = z0.shape();
        Ok(BackgroundTrajectory {
            image: image.clone(),
            noise: gaussian_field(noise_seed, h, w, c),
            z0,
        })
    }

    pub fn image(&self) -> &ImageGrid {
        &self.image
    }

    pub fn clean_latent(&self) -> &Latent {
        &self.z0
    }

    pub fn noise(&self) -> &Latent {
        &self.noise
    }

    pub fn at(&self, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
        Ok(forward_noise(&self.z0, t, &self.noise, schedule)?.z)
    }
}

/// What a loop hands to an observer after each step.
#[derive(Debug)]
pub struct StepTrace<'a> {
    /// Step index after the update.
    pub t: usize,
    pub latent: &'a Latent,
    pub background: &'a Latent,
    /// Latent cells taken from the model prediction.
    pub generated: &'a [bool],
}

pub type StepObserver<'o> = dyn FnMut(&StepTrace<'_>) + 'o;

fn latent_mask(mask: &BinaryMask, latent: &Latent) -> Result<TokenMask> {
    downsample_mask(mask, (latent.height(), latent.width()), PoolRule::Any)
}

fn mask_tensor(mask: &TokenMask) -> Tensor3 {
    let (h, w) = mask.grid();
    Tensor3::from_fn(h, w, 1, |y, x, _| if mask.flags()[y * w + x] { 1.0 } else { 0.0 })
}

fn inpaint_context(region: &TokenMask, known: &Latent) -> InpaintContext {
    let c = known.channels();
    let w = known.width();
    let masked = Tensor3::from_fn(known.height(), w, c, |y, x, ch| {
        if region.flags()[y * w + x] {
            0.0
        } else {
            known.get(y, x, ch)
        }
    });
    InpaintContext {
        mask: mask_tensor(region),
        masked_latent: masked,
    }
}

/// Per-cell selection: generated cells from `pred`, the rest from `background`.
fn blend(generated: &TokenMask, pred: &Latent, background: &Latent) -> Latent {
    let c = pred.channels();
    let w = pred.width();
    Tensor3::from_fn(pred.height(), w, c, |y, x, ch| {
        if generated.flags()[y * w + x] {
            pred.get(y, x, ch)
        } else {
            background.get(y, x, ch)
        }
    })
}

/// Pixelwise selection of `inside` within `mask`, `outside` elsewhere.
pub fn composite(mask: &BinaryMask, inside: &ImageGrid, outside: &ImageGrid) -> Result<ImageGrid> {
    inside.ensure_same_shape(outside, "composite")?;
    if mask.height() != inside.height() || mask.width() != inside.width() {
        return Err(TryOnError::argument("composite mask does not match images"));
    }
    Ok(Tensor3::from_fn(inside.height(), inside.width(), inside.channels(), |y, x, c| {
        if mask.get(y, x) {
            inside.get(y, x, c)
        } else {
            outside.get(y, x, c)
        }
    }))
}

/// Fills the thin fringe mask. The denoiser sees the dilated mask as its
/// inpainting region, but only cells under the thin mask keep the
/// prediction; every other cell is reset to the forward-noised background.
pub fn double_mask_inpaint(
    backend: &dyn DenoiserBackend,
    background: &BackgroundTrajectory,
    thin: &BinaryMask,
    dilated: &BinaryMask,
    prompt: &str,
    schedule: &NoiseSchedule,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<ImageGrid> {
    if !thin.is_subset_of(dilated) {
        return Err(TryOnError::argument("thin fringe mask is not contained in the dilated mask"));
    }
    let image = background.image();
    if thin.height() != image.height() || thin.width() != image.width() {
        return Err(TryOnError::argument("fringe masks do not match the background image"));
    }
    if thin.is_empty() {
        return Ok(image.clone());
    }

    let z0 = background.clean_latent();
    let thin_l = latent_mask(thin, z0)?;
    let dilated_l = latent_mask(dilated, z0)?;
    let ctx = inpaint_context(&dilated_l, z0);
    let cond = Conditioning::Prompt(prompt.to_string());

    let steps = schedule.steps();
    let mut state = LatentState {
        z: background.at(steps, schedule)?,
        t: steps,
    };
    while state.t > 0 {
        let req = PredictRequest::new(&state.z, schedule.model_timestep(state.t), &cond).inpaint(Some(&ctx));
        let pred = backend.predict_noise(&req)?;
        let stepped = ddim_step(&state, &pred.eps, schedule)?;
        let bg = background.at(stepped.t, schedule)?;
        state = LatentState {
            z: blend(&thin_l, &stepped.z, &bg),
            t: stepped.t,
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepTrace {
                t: state.t,
                latent: &state.z,
                background: &bg,
                generated: thin_l.flags(),
            });
        }
    }
    let decoded = backend.decode(&state.z)?;
    composite(thin, &decoded, image)
}

/// Starting point of a stroke-based run.
#[derive(Debug, Clone)]
pub struct StrokeInit {
    pub state: LatentState,
    pub background: BackgroundTrajectory,
}

/// Encodes `registered` and noises it to `round_half_up(stroke_fraction·T)`.
pub fn stroke_init(
    backend: &dyn DenoiserBackend,
    registered: &ImageGrid,
    g: &GuidanceConfig,
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<StrokeInit> {
    g.validate()?;
    let background = BackgroundTrajectory::new(backend, registered, noise_seed)?;
    let t = stroke_start_step(g.stroke_fraction, schedule.steps());
    let state = LatentState {
        z: background.at(t, schedule)?,
        t,
    };
    Ok(StrokeInit { state, background })
}

/// Inputs of the consistent-inpainting loop.
#[derive(Debug, Clone)]
pub struct ConsistentInpaint<'a> {
    pub init: &'a StrokeInit,
    /// Clean latent of the un-deformed reference garment.
    pub reference_latent: &'a Latent,
    /// Region to regenerate, in the registered image's frame.
    pub m_p: &'a BinaryMask,
    /// Garment region in the reference image's frame.
    pub m_g: &'a BinaryMask,
    pub prompt: &'a str,
    pub guidance: &'a GuidanceConfig,
    pub schedule: &'a NoiseSchedule,
    pub reference_noise_seed: u64,
}

/// Attention statistics of one hooked layer over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub steps: usize,
    pub mean_foreground_reference_mass: f64,
    pub max_leaked_mass: f64,
    pub max_background_reference_mass: f64,
}

#[derive(Debug, Clone)]
pub struct ConsistentOutput {
    pub image: ImageGrid,
    pub layers: Vec<LayerReport>,
}

/// Stroke-based denoising with three predictions per step (unconditional
/// stock attention, prompt-conditioned stock attention, and unconditional
/// with MEA on every hookable layer), combined by [`cfg_combine`].
pub fn consistent_inpaint_loop(
    backend: &dyn DenoiserBackend,
    job: &ConsistentInpaint<'_>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<ConsistentOutput> {
    job.guidance.validate()?;
    let desc = backend.describe()?;
    let registered = job.init.background.image();
    if job.m_p.height() != registered.height() || job.m_p.width() != registered.width() {
        return Err(TryOnError::argument("person mask does not match the registered image"));
    }
    let z0 = job.init.background.clean_latent();
    let (lh, lw, _) = z0.shape();
    let (rh, rw, rc) = job.reference_latent.shape();
    let ref_noise = gaussian_field(job.reference_noise_seed, rh, rw, rc);

    // Token masks per hooked layer.
    let mut layers = Vec::with_capacity(desc.hookable_layers.len());
    for layer in &desc.hookable_layers {
        let target_grid = desc.grid_for_latent(layer, lh, lw)?;
        let ref_grid = desc.grid_for_latent(layer, rh, rw)?;
        let m_p = downsample_mask(job.m_p, target_grid, PoolRule::Majority)?.with_origin(TokenOrigin::Target);
        let m_g = downsample_mask(job.m_g, ref_grid, PoolRule::Any)?.with_origin(TokenOrigin::Reference);
        layers.push((layer.id.clone(), m_p, m_g));
    }
    let layer_ids: Vec<String> = layers.iter().map(|(id, _, _)| id.clone()).collect();
    let mut reports: Vec<LayerReport> = layer_ids
        .iter()
        .map(|id| LayerReport {
            layer: id.clone(),
            steps: 0,
            mean_foreground_reference_mass: 0.0,
            max_leaked_mass: 0.0,
            max_background_reference_mass: 0.0,
        })
        .collect();

    let region = latent_mask(job.m_p, z0)?;
    let ctx = inpaint_context(&region, z0);
    let uncond = Conditioning::Unconditional;
    let text = Conditioning::Prompt(job.prompt.to_string());

    let mut state = job.init.state.clone();
    while state.t > 0 {
        let ts = job.schedule.model_timestep(state.t);

        let z_ref = forward_noise(job.reference_latent, state.t, &ref_noise, job.schedule)?;
        let captured = backend.predict_noise(&PredictRequest::new(&z_ref.z, ts, &uncond).capture_attention(&layer_ids))?;
        let mut hooks = Vec::with_capacity(layers.len());
        for (id, m_p, m_g) in &layers {
            let reference = captured.attention_for(id).cloned().ok_or_else(|| {
                TryOnError::capability(format!("backend did not return attention for layer {id}"))
            })?;
            hooks.push(LayerHook {
                layer: id.clone(),
                hook: AttentionOverride::Mea(MeaInjection {
                    reference,
                    m_p: m_p.clone(),
                    m_g: m_g.clone(),
                    beta: job.guidance.beta,
                }),
            });
        }

        let eps_base = backend
            .predict_noise(&PredictRequest::new(&state.z, ts, &uncond).inpaint(Some(&ctx)))?
            .eps;
        let eps_text = backend
            .predict_noise(&PredictRequest::new(&state.z, ts, &text).inpaint(Some(&ctx)))?
            .eps;
        let mea = backend.predict_noise(&PredictRequest::new(&state.z, ts, &uncond).inpaint(Some(&ctx)).hooks(&hooks))?;
        for (layer, stats) in &mea.mea_stats {
            if let Some(r) = reports.iter_mut().find(|r| &r.layer == layer) {
                accumulate(r, stats);
            }
        }

        let eps = cfg_combine(&eps_base, &mea.eps, &eps_text, job.guidance)?;
        let stepped = ddim_step(&state, &eps, job.schedule)?;
        let bg = job.init.background.at(stepped.t, job.schedule)?;
        state = LatentState {
            z: blend(&region, &stepped.z, &bg),
            t: stepped.t,
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepTrace {
                t: state.t,
                latent: &state.z,
                background: &bg,
                generated: region.flags(),
            });
        }
    }

    for r in &mut reports {
        if r.steps > 0 {
            r.mean_foreground_reference_mass /= r.steps as f64;
        }
    }
    let decoded = backend.decode(&state.z)?;
    Ok(ConsistentOutput {
        image: composite(job.m_p, &decoded, registered)?,
        layers: reports,
    })
}

fn accumulate(r: &mut LayerReport, s: &MeaStats) {
    r.steps += 1;
    r.mean_foreground_reference_mass += s.foreground_reference_mass;
    r.max_leaked_mass = r.max_leaked_mass.max(s.leaked_mass);
    r.max_background_reference_mass = r.max_background_reference_mass.max(s.background_reference_mass);
}

/// Stroke denoising of `init` with stock attention and no guidance: the
/// collapse of the consistent loop when both guidance scales are zero.
pub fn plain_stroke_denoise(
    backend: &dyn DenoiserBackend,
    init: &StrokeInit,
    m_p: &BinaryMask,
    schedule: &NoiseSchedule,
) -> Result<ImageGrid> {
    let z0 = init.background.clean_latent();
    let region = latent_mask(m_p, z0)?;
    let ctx = inpaint_context(&region, z0);
    let uncond = Conditioning::Unconditional;
    let mut state = init.state.clone();
    while state.t > 0 {
        let ts = schedule.model_timestep(state.t);
        let eps = backend
            .predict_noise(&PredictRequest::new(&state.z, ts, &uncond).inpaint(Some(&ctx)))?
            .eps;
        let stepped = ddim_step(&state, &eps, schedule)?;
        let bg = init.background.at(stepped.t, schedule)?;
        state = LatentState {
            z: blend(&region, &stepped.z, &bg),
            t: stepped.t,
        };
    }
    let decoded = backend.decode(&state.z)?;
    composite(m_p, &decoded, init.background.image())
}
