//! Deterministic toy denoiser.
//!
//! Architecture, per latent cell:
//!
//! 1. 3×3 box average over `[latent, inpaint mask, masked latent]`
//!    (9 channels, border replicated);
//! 2. `h0 = tanh(g_in·(W_in·x + b_in) + time_emb(t) + cond_emb)`, 8 features;
//! 3. one two-head self-attention block over the whole latent grid, whose
//!    attention can be replaced by a hook; `h1 = h0 + W_o·attn`;
//! 4. `ε̂ = g_eps·(W_eps·h1 + b_eps)`.
//!
//! `h1` is the capturable feature layer. All weights are drawn from
//! splitmix64 and mapped into `[-0.05, 0.05)`; the fixed gains are part of
//! the architecture.
//!
//! The codec is exact 4×4 area pooling onto the three colour channels plus
//! a zero fourth channel; decoding replicates each cell and drops the
//! fourth channel (the pseudo-inverse of that lift).

use crate::attention::{
    masked_extended_attention, self_attention, AttentionBundle, AttentionOutput, MeaStats,
};
use crate::backend::{
    AttentionOverride, BackendDescriptor, CaptureLayer, CapturedFeatures, Conditioning,
    DenoiserBackend, HookableLayer, Prediction, PredictRequest, ScheduleSpec,
};
use crate::error::{Result, TryOnError};
use crate::rng::{fnv1a64, SplitMix64};
use crate::tensor::{ImageGrid, Latent, Tensor3};

pub const DEFAULT_WEIGHT_SEED: u64 = 0x7E57_C0DE;
pub const SCALE: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
pub const FEATURE_DIM: usize = 8;
pub const HEADS: usize = 2;
pub const HEAD_DIM: usize = FEATURE_DIM / HEADS;
pub const NATIVE_RESOLUTION: usize = 64;
pub const TRAIN_TIMESTEPS: usize = 1000;
pub const ALPHA_BAR_MIN: f64 = 0.005;
pub const FEATURE_LAYER: &str = "decoder.1.features";
pub const ATTENTION_LAYER: &str = "decoder.1.attn";

const IN_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
const IN_GAIN: f64 = 10.0;
const QK_GAIN: f64 = 20.0;
const OUT_GAIN: f64 = 10.0;
const EPS_GAIN: f64 = 10.0;

/// Every parameter of the toy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub w_eps: Vec<f64>,
    pub b_eps: Vec<f64>,
}

impl ToyWeights {
    /// Draws the parameters in declaration order from one splitmix64 stream.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        ToyWeights {
            w_in: rng.weights(FEATURE_DIM * IN_CHANNELS),
            b_in: rng.weights(FEATURE_DIM),
            w_q: rng.weights(FEATURE_DIM * FEATURE_DIM),
            w_k: rng.weights(FEATURE_DIM * FEATURE_DIM),
            w_v: rng.weights(FEATURE_DIM * FEATURE_DIM),
            w_o: rng.weights(FEATURE_DIM * FEATURE_DIM),
            w_eps: rng.weights(LATENT_CHANNELS * FEATURE_DIM),
            b_eps: rng.weights(LATENT_CHANNELS),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    weights: ToyWeights,
}

impl Default for ToyBackend {
    fn default() -> Self {
        ToyBackend::new(DEFAULT_WEIGHT_SEED)
    }
}

/// `out = W·x` for a row-major `rows×x.len()` matrix.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Sum of a power-of-two-length slice by pairwise halving; exact when all
/// entries are equal.
fn pairwise_sum(v: &mut [f64]) -> f64 {
    let mut n = v.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        n = half;
    }
    v[0]
}

fn time_embedding(t: usize) -> [f64; FEATURE_DIM] {
    let mut e = [0.0; FEATURE_DIM];
    for (k, v) in e.iter_mut().enumerate() {
        let freq = (TRAIN_TIMESTEPS as f64).powf(-((k / 2) as f64) / (FEATURE_DIM / 2) as f64);
        let arg = t as f64 * freq;
        *v = 0.05 * if k % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    e
}

impl ToyBackend {
    pub fn new(weight_seed: u64) -> Self {
        ToyBackend {
            weights: ToyWeights::from_seed(weight_seed),
        }
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn descriptor() -> BackendDescriptor {
        let grid = NATIVE_RESOLUTION / SCALE;
        BackendDescriptor {
            name: "toy".into(),
            latent_scale: SCALE,
            latent_channels: LATENT_CHANNELS,
            native_resolution: NATIVE_RESOLUTION,
            capture_layers: vec![CaptureLayer {
                id: FEATURE_LAYER.into(),
                stride: SCALE,
            }],
            hookable_layers: vec![HookableLayer {
                id: ATTENTION_LAYER.into(),
                grid: (grid, grid),
            }],
            schedule: ScheduleSpec::LinearAlphaBar {
                alpha_bar_min: ALPHA_BAR_MIN,
                train_timesteps: TRAIN_TIMESTEPS,
            },
        }
    }

    /// Prompt embedding: FNV-1a of the text seeds a splitmix64 stream.
    pub fn conditioning_embedding(cond: &Conditioning) -> [f64; FEATURE_DIM] {
        let mut e = [0.0; FEATURE_DIM];
        if let Conditioning::Prompt(text) = cond {
            let mut rng = SplitMix64::new(fnv1a64(text.as_bytes()));
            for v in &mut e {
                *v = rng.next_weight();
            }
        }
        e
    }

    fn box3(t: &Tensor3) -> Tensor3 {
        let (h, w, c) = t.shape();
        Tensor3::from_fn(h, w, c, |y, x, ch| {
            let mut s = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += t.get(yy, xx, ch);
                }
            }
            s / 9.0
        })
    }

    fn validate_request(&self, req: &PredictRequest<'_>) -> Result<()> {
        let (h, w, c) = req.latent.shape();
        if c != LATENT_CHANNELS || h == 0 || w == 0 {
            return Err(TryOnError::argument(format!(
                "toy backend expects a latent with {LATENT_CHANNELS} channels, got {:?}",
                req.latent.shape()
            )));
        }
        if !req.latent.is_finite() {
            return Err(TryOnError::argument("latent is not finite"));
        }
        if let Some(ctx) = req.inpaint {
            if ctx.mask.shape() != (h, w, 1) || ctx.masked_latent.shape() != (h, w, c) {
                return Err(TryOnError::argument("inpaint context does not match latent shape"));
            }
        }
        for hook in req.hooks {
            if hook.layer != ATTENTION_LAYER {
                return Err(TryOnError::capability(format!(
                    "toy backend has no hookable layer {:?}",
                    hook.layer
                )));
            }
        }
        for id in req.capture_features {
            if id != FEATURE_LAYER {
                return Err(TryOnError::capability(format!(
                    "toy backend has no capture layer {id:?}"
                )));
            }
        }
        for id in req.capture_attention {
            if id != ATTENTION_LAYER {
                return Err(TryOnError::capability(format!(
                    "toy backend has no attention layer {id:?}"
                )));
            }
        }
        Ok(())
    }
}

impl DenoiserBackend for ToyBackend {
    fn describe(&self) -> Result<BackendDescriptor> {
        Ok(Self::descriptor())
    }

    fn encode(&self, image: &ImageGrid) -> Result<Latent> {
        let (h, w, c) = image.shape();
        if c != 3 {
            return Err(TryOnError::argument(format!("expected an RGB image, got {c} channels")));
        }
        if h == 0 || w == 0 || h % SCALE != 0 || w % SCALE != 0 {
            return Err(TryOnError::argument(format!(
                "image {w}x{h} is not divisible by the latent scale {SCALE}"
            )));
        }
        let mut block = [0.0; SCALE * SCALE];
        let mut out = Tensor3::zeros(h / SCALE, w / SCALE, LATENT_CHANNELS);
        for ly in 0..h / SCALE {
            for lx in 0..w / SCALE {
                for ch in 0..3 {
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            block[dy * SCALE + dx] = image.get(ly * SCALE + dy, lx * SCALE + dx, ch);
                        }
                    }
                    out.set(ly, lx, ch, pairwise_sum(&mut block) / (SCALE * SCALE) as f64);
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latent: &Latent) -> Result<ImageGrid> {
        let (h, w, c) = latent.shape();
        if c != LATENT_CHANNELS {
            return Err(TryOnError::argument(format!(
                "toy decoder expects {LATENT_CHANNELS} latent channels, got {c}"
            )));
        }
        Ok(Tensor3::from_fn(h * SCALE, w * SCALE, 3, |y, x, ch| {
            latent.get(y / SCALE, x / SCALE, ch).clamp(0.0, 1.0)
        }))
    }

    fn predict_noise(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        self.validate_request(req)?;
        let wts = &self.weights;
        let (h, w, _) = req.latent.shape();
        let n = h * w;

        // Stacked input channels.
        let zeros_mask = Tensor3::zeros(h, w, 1);
        let zeros_lat = Tensor3::zeros(h, w, LATENT_CHANNELS);
        let (mask, masked) = match req.inpaint {
            Some(ctx) => (&ctx.mask, &ctx.masked_latent),
            None => (&zeros_mask, &zeros_lat),
        };
        let stacked = Tensor3::from_fn(h, w, IN_CHANNELS, |y, x, c| {
            if c < LATENT_CHANNELS {
                req.latent.get(y, x, c)
            } else if c == LATENT_CHANNELS {
                mask.get(y, x, 0)
            } else {
                masked.get(y, x, c - LATENT_CHANNELS - 1)
            }
        });
        let smoothed = Self::box3(&stacked);

        let temb = time_embedding(req.timestep);
        let cemb = Self::conditioning_embedding(req.conditioning);
        let mut h0 = vec![0.0; n * FEATURE_DIM];
        let mut pre = [0.0; FEATURE_DIM];
        for tok in 0..n {
            let x = smoothed.pixel(tok / w, tok % w);
            matvec(&wts.w_in, x, &mut pre);
            for k in 0..FEATURE_DIM {
                h0[tok * FEATURE_DIM + k] = (IN_GAIN * (pre[k] + wts.b_in[k]) + temb[k] + cemb[k]).tanh();
            }
        }

        // Projections, laid out [head][token][dim].
        let mut q = vec![0.0; n * FEATURE_DIM];
        let mut k = vec![0.0; n * FEATURE_DIM];
        let mut v = vec![0.0; n * FEATURE_DIM];
        let mut buf = [0.0; FEATURE_DIM];
        for tok in 0..n {
            let x = &h0[tok * FEATURE_DIM..(tok + 1) * FEATURE_DIM];
            for (proj, wmat, gain) in [
                (&mut q, &wts.w_q, QK_GAIN),
                (&mut k, &wts.w_k, QK_GAIN),
                (&mut v, &wts.w_v, 1.0),
            ] {
                matvec(wmat, x, &mut buf);
                for (j, &val) in buf.iter().enumerate() {
                    let (head, dim) = (j / HEAD_DIM, j % HEAD_DIM);
                    proj[(head * n + tok) * HEAD_DIM + dim] = gain * val;
                }
            }
        }
        let bundle = AttentionBundle::new(HEADS, HEAD_DIM, (h, w), q, k, v)?;

        let mut mea_stats = Vec::new();
        let attn: AttentionOutput = match req.hooks.iter().find(|hk| hk.layer == ATTENTION_LAYER) {
            None => self_attention(&bundle).0,
            Some(hook) => match &hook.hook {
                AttentionOverride::Mea(inj) => {
                    let (out, maps) =
                        masked_extended_attention(&bundle, &inj.reference, &inj.m_p, &inj.m_g, inj.beta)?;
                    mea_stats.push((hook.layer.clone(), MeaStats::from_maps(&maps, &inj.m_p, &inj.m_g)));
                    out
                }
                AttentionOverride::Custom(f) => f(&bundle)?,
            },
        };
        if attn.heads != HEADS || attn.tokens != n || attn.head_dim != HEAD_DIM || attn.data.len() != n * FEATURE_DIM {
            return Err(TryOnError::capability("attention override returned a mis-shaped output"));
        }

        let mut h1 = h0;
        let mut joined = [0.0; FEATURE_DIM];
        for tok in 0..n {
            for head in 0..HEADS {
                let src = &attn.head(head)[tok * HEAD_DIM..(tok + 1) * HEAD_DIM];
                joined[head * HEAD_DIM..(head + 1) * HEAD_DIM].copy_from_slice(src);
            }
            matvec(&wts.w_o, &joined, &mut buf);
            for j in 0..FEATURE_DIM {
                h1[tok * FEATURE_DIM + j] += OUT_GAIN * buf[j];
            }
        }

        let mut eps = Tensor3::zeros(h, w, LATENT_CHANNELS);
        let mut e = [0.0; LATENT_CHANNELS];
        for tok in 0..n {
            matvec(&wts.w_eps, &h1[tok * FEATURE_DIM..(tok + 1) * FEATURE_DIM], &mut e);
            let px = eps.pixel_mut(tok / w, tok % w);
            for c in 0..LATENT_CHANNELS {
                px[c] = EPS_GAIN * (e[c] + wts.b_eps[c]);
            }
        }

        let features = if req.capture_features.is_empty() {
            Vec::new()
        } else {
            vec![CapturedFeatures {
                layer: FEATURE_LAYER.into(),
                stride: SCALE,
                values: Tensor3::from_vec(h, w, FEATURE_DIM, h1)?,
            }]
        };
        let attention = if req.capture_attention.is_empty() {
            Vec::new()
        } else {
            vec![(ATTENTION_LAYER.to_string(), bundle)]
        };
        Ok(Prediction {
            eps,
            features,
            attention,
            mea_stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::LayerHook;

    fn textured(h: usize, w: usize) -> ImageGrid {
        Tensor3::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f64 / 10.0)
    }

    #[test]
    fn descriptor_declares_expected_capabilities() {
        let d = ToyBackend::default().describe().unwrap();
        d.validate().unwrap();
        assert_eq!(d.latent_scale, 4);
        assert_eq!(d.capture_layers, vec![CaptureLayer { id: FEATURE_LAYER.into(), stride: 4 }]);
        assert_eq!(d.hookable_layers.len(), 1);
        assert_eq!(d.hookable_layers[0].grid, (16, 16));
    }

    #[test]
    fn codec_shapes_and_exact_round_trips() {
        let b = ToyBackend::default();
        let z = b.encode(&textured(64, 64)).unwrap();
        assert_eq!(z.shape(), (16, 16, 4));

        let constant = Tensor3::filled(8, 12, 3, 0.3);
        assert_eq!(b.decode(&b.encode(&constant).unwrap()).unwrap(), constant);

        // Arbitrary (non-dyadic) values, constant on 4×4 blocks.
        let blocky = Tensor3::from_fn(16, 16, 3, |y, x, c| {
            ((y / 4) * 13 + (x / 4) * 7 + c) as f64 / 37.0 % 1.0
        });
        assert_eq!(b.decode(&b.encode(&blocky).unwrap()).unwrap(), blocky);
    }

    #[test]
    fn codec_rejects_indivisible_images() {
        let b = ToyBackend::default();
        assert!(matches!(
            b.encode(&Tensor3::zeros(10, 8, 3)),
            Err(TryOnError::Argument(_))
        ));
        assert!(b.encode(&Tensor3::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let b = ToyBackend::default();
        let z = b.encode(&textured(32, 32)).unwrap();
        let cond = Conditioning::Prompt("a striped shirt".into());
        let layers = [FEATURE_LAYER.to_string()];
        let req = PredictRequest::new(&z, 500, &cond).capture_features(&layers);
        let a = b.predict_noise(&req).unwrap();
        let c = ToyBackend::default().predict_noise(&req).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.features[0].values.shape(), (8, 8, FEATURE_DIM));
    }

    #[test]
    fn stock_delegating_hook_is_transparent() {
        let b = ToyBackend::default();
        let z = b.encode(&textured(32, 32)).unwrap();
        let cond = Conditioning::Prompt("x".into());
        let plain = b.predict_noise(&PredictRequest::new(&z, 300, &cond)).unwrap();
        let hooks = [LayerHook {
            layer: ATTENTION_LAYER.into(),
            hook: AttentionOverride::Custom(Arc::new(|bundle| Ok(self_attention(bundle).0))),
        }];
        let hooked = b
            .predict_noise(&PredictRequest::new(&z, 300, &cond).hooks(&hooks))
            .unwrap();
        assert_eq!(plain.eps, hooked.eps);
    }

    #[test]
    fn unknown_layers_are_capability_errors() {
        let b = ToyBackend::default();
        let z = Tensor3::zeros(4, 4, 4);
        let cond = Conditioning::Unconditional;
        let bad = ["encoder.0".to_string()];
        for req in [
            PredictRequest::new(&z, 0, &cond).capture_features(&bad),
            PredictRequest::new(&z, 0, &cond).capture_attention(&bad),
        ] {
            assert!(matches!(b.predict_noise(&req), Err(TryOnError::Capability(_))));
        }
        let hooks = [LayerHook {
            layer: "encoder.0".into(),
            hook: AttentionOverride::Custom(Arc::new(|bundle| Ok(self_attention(bundle).0))),
        }];
        assert!(matches!(
            b.predict_noise(&PredictRequest::new(&z, 0, &cond).hooks(&hooks)),
            Err(TryOnError::Capability(_))
        ));
    }

    #[test]
    fn weights_depend_only_on_seed() {
        assert_eq!(ToyWeights::from_seed(9), ToyWeights::from_seed(9));
        assert_ne!(ToyWeights::from_seed(9), ToyWeights::from_seed(10));
        let w = ToyWeights::from_seed(DEFAULT_WEIGHT_SEED);
        assert!(w.w_in.iter().all(|x| (-0.05..0.05).contains(x)));
    }

    #[test]
    fn empty_prompt_embedding_is_not_unconditional() {
        let u = ToyBackend::conditioning_embedding(&Conditioning::Unconditional);
        assert_eq!(u, [0.0; FEATURE_DIM]);
        let p = ToyBackend::conditioning_embedding(&Conditioning::Prompt("shirt".into()));
        assert_ne!(p, u);
    }
}
