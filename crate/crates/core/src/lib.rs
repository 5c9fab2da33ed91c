//! Zero-shot virtual try-on.
//!
//! Two stages run against any [`backend::DenoiserBackend`]:
//!
//! * **registration**: diffusion features of the person and garment images
//!   are matched, the matches drive an affine moving-least-squares warp of
//!   the garment onto the person, and the uncovered fringe of the old
//!   garment is filled by double-mask inpainting;
//! * **consistent inpainting**: the registered image is partially noised and
//!   denoised with classifier-free guidance over three predictions, one of
//!   which swaps self-attention for masked extended attention over the
//!   un-deformed garment.

pub mod attention;
pub mod backend;
pub mod correspondence;
pub mod error;
pub mod geometry_warp;
pub mod imageio;
pub mod inpaint;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Result, TryOnError};
pub use tensor::{BinaryMask, ImageGrid, Latent, Rect, Tensor3};
