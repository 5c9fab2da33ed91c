//! The denoiser interface the pipeline runs against.
//!
//! It covers exactly what the try-on stages need: a latent codec, noise
//! prediction with optional inpainting context, activation and attention
//! capture, attention overrides, and the noise schedule. [`toy::ToyBackend`]
//! is a small deterministic network implementing it in-process;
//! [`ipc::IpcBackend`] forwards it to an out-of-process runtime.

pub mod ipc;
pub mod toy;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBundle, AttentionOutput, MeaStats, TokenMask};
use crate::error::{Result, TryOnError};
use crate::tensor::{ImageGrid, Latent, Tensor3};

pub use ipc::IpcBackend;
pub use toy::ToyBackend;

/// A layer whose activations can be captured as a feature map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureLayer {
    pub id: String,
    /// Image pixels per feature cell.
    pub stride: usize,
}

/// A self-attention layer that accepts an override.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookableLayer {
    pub id: String,
    /// Token grid `(h, w)` at the backend's native resolution.
    pub grid: (usize, usize),
}

/// How the backend's cumulative signal coefficients are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `ᾱ` falls linearly from 1 to `alpha_bar_min` over the inference steps.
    LinearAlphaBar {
        alpha_bar_min: f64,
        train_timesteps: usize,
    },
    /// Latent-diffusion "scaled linear" betas.
    ScaledLinear {
        beta_start: f64,
        beta_end: f64,
        train_timesteps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Image pixels per latent cell.
    pub latent_scale: usize,
    pub latent_channels: usize,
    /// Square image side the backend is meant to run at.
    pub native_resolution: usize,
    pub capture_layers: Vec<CaptureLayer>,
    pub hookable_layers: Vec<HookableLayer>,
    pub schedule: ScheduleSpec,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.latent_scale < 1 || self.latent_channels < 1 {
            return Err(TryOnError::capability("backend declares an empty latent space"));
        }
        if self.capture_layers.is_empty() || self.hookable_layers.is_empty() {
            return Err(TryOnError::capability(
                "backend must declare at least one capture layer and one hookable layer",
            ));
        }
        if !self.native_resolution.is_multiple_of(self.latent_scale) {
            return Err(TryOnError::capability("native resolution not divisible by latent scale"));
        }
        Ok(())
    }

    pub fn native_latent(&self) -> usize {
        self.native_resolution / self.latent_scale
    }

    /// Designated feature layer: the first declared capture layer.
    pub fn feature_layer(&self) -> &CaptureLayer {
        &self.capture_layers[0]
    }

    /// Token grid of a hookable layer for a latent of the given size.
    pub fn grid_for_latent(&self, layer: &HookableLayer, latent_h: usize, latent_w: usize) -> Result<(usize, usize)> {
        let native = self.native_latent();
        let (gh, gw) = layer.grid;
        if !(latent_h * gh).is_multiple_of(native) || !(latent_w * gw).is_multiple_of(native) {
            return Err(TryOnError::capability(format!(
                "layer {} has no integral token grid for a {}x{} latent",
                layer.id, latent_h, latent_w
            )));
        }
        Ok((latent_h * gh / native, latent_w * gw / native))
    }
}

/// Text conditioning, opaque to the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    Unconditional,
    Prompt(String),
}

/// Extra inputs of an inpainting denoiser: which latent cells are to be
/// generated and the known content elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintContext {
    /// `h×w×1`, 1 inside the region to generate.
    pub mask: Tensor3,
    /// Latent of the known image with the region zeroed.
    pub masked_latent: Latent,
}

/// Reference tokens and masks for a masked-extended-attention override.
#[derive(Debug, Clone, PartialEq)]
pub struct MeaInjection {
    pub reference: AttentionBundle,
    pub m_p: TokenMask,
    pub m_g: TokenMask,
    pub beta: f64,
}

pub type AttentionFn = dyn Fn(&AttentionBundle) -> Result<AttentionOutput> + Send + Sync;

/// Replacement for a layer's stock self-attention.
#[derive(Clone)]
pub enum AttentionOverride {
    Mea(MeaInjection),
    /// Arbitrary in-process override. Not transportable over IPC.
    Custom(Arc<AttentionFn>),
}

impl fmt::Debug for AttentionOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionOverride::Mea(m) => f.debug_tuple("Mea").field(m).finish(),
            AttentionOverride::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerHook {
    pub layer: String,
    pub hook: AttentionOverride,
}

#[derive(Debug, Clone)]
pub struct PredictRequest<'a> {
    pub latent: &'a Latent,
    /// Model (training-schedule) timestep.
    pub timestep: usize,
    pub conditioning: &'a Conditioning,
    pub inpaint: Option<&'a InpaintContext>,
    pub hooks: &'a [LayerHook],
    pub capture_features: &'a [String],
    pub capture_attention: &'a [String],
}

impl<'a> PredictRequest<'a> {
    pub fn new(latent: &'a Latent, timestep: usize, conditioning: &'a Conditioning) -> Self {
        PredictRequest {
            latent,
            timestep,
            conditioning,
            inpaint: None,
            hooks: &[],
            capture_features: &[],
            capture_attention: &[],
        }
    }

    pub fn inpaint(mut self, ctx: Option<&'a InpaintContext>) -> Self {
        self.inpaint = ctx;
        self
    }

    pub fn hooks(mut self, hooks: &'a [LayerHook]) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn capture_features(mut self, layers: &'a [String]) -> Self {
        self.capture_features = layers;
        self
    }

    pub fn capture_attention(mut self, layers: &'a [String]) -> Self {
        self.capture_attention = layers;
        self
    }
}

/// Activations captured at a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedFeatures {
    pub layer: String,
    pub stride: usize,
    /// `h_f×w_f×D`.
    pub values: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: Latent,
    pub features: Vec<CapturedFeatures>,
    pub attention: Vec<(String, AttentionBundle)>,
    pub mea_stats: Vec<(String, MeaStats)>,
}

impl Prediction {
    pub fn features_for(&self, layer: &str) -> Option<&CapturedFeatures> {
        self.features.iter().find(|f| f.layer == layer)
    }

    pub fn attention_for(&self, layer: &str) -> Option<&AttentionBundle> {
        self.attention.iter().find(|(l, _)| l == layer).map(|(_, b)| b)
    }
}

/// A denoising network plus its latent codec.
///
/// One job uses a handle at a time; implementations serialize their own
/// calls if they hold connection state.
pub trait DenoiserBackend: Send + Sync {
    fn describe(&self) -> Result<BackendDescriptor>;
    fn encode(&self, image: &ImageGrid) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<ImageGrid>;
    fn predict_noise(&self, request: &PredictRequest<'_>) -> Result<Prediction>;
}

/// Builds a backend from a CLI selector: `toy` or `ipc:<endpoint>`.
pub fn backend_from_selector(selector: &str) -> Result<Box<dyn DenoiserBackend>> {
    if selector == "toy" {
        return Ok(Box::new(ToyBackend::default()));
    }
    if let Some(endpoint) = selector.strip_prefix("ipc:") {
        return Ok(Box::new(IpcBackend::connect(endpoint)?));
    }
    Err(TryOnError::argument(format!(
        "unknown backend {selector:?}; expected `toy` or `ipc:<endpoint>`"
    )))
}
