//! Quality metrics and the deterministic toy corpora every run consumes.
//!
//! Metric arithmetic is always 64-bit. SSIM uses uniform 8×8 tiles with
//! stride 8 rather than a Gaussian window.

pub mod classify;
pub mod corpus;
pub mod image_io;
mod metrics;

pub use classify::{classify_shape, shape_probabilities, ShapeGuess};
pub use corpus::{generate, render_shape_sample, shape_caption, write_corpus, Corpus, CorpusItem, CorpusKind, ToyCorpusSpec, SHAPE_NAMES};
pub use image_io::{from_u8, load_image, png_bytes, quantize, save_png, to_u8};
pub use metrics::{psnr, sliced_wasserstein, ssim, ssim_signed, wasserstein_1d};
