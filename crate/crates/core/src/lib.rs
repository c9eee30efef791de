//! A desk-scale vector-quantized visual tokenizer lab.
//!
//! The crate trains VQ image tokenizers (2D ViT-style and 1D query-transformer
//! variants) with semantic regularization and an entropy codebook penalty, and
//! measures how learnable each tokenizer's latent space is for a downstream
//! next-token-prediction model via a small AR probe.
//!
//! Modules map onto the pipeline stages:
//! - [`vq`]: codebook, nearest-neighbor quantization, entropy penalty, usage accounting
//! - [`tokenizer`]: hybrid CNN–Transformer encoder/decoder in 1D and 2D variants
//! - [`losses`]: the composite training objective and LR schedules
//! - [`teacher`]: frozen semantic teachers, the projector, and the alignment loss
//! - [`probe`]: the AR probing protocol (train, sample with CFG, linear probe)
//! - [`metrics`]: PSNR/SSIM, Fréchet-distance FID proxy, PCA latent maps
//! - [`harness`]: corpora, config files, checkpoints, training loops, sweeps, CLI plumbing

pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod teacher;
pub mod tokenizer;
pub mod vq;

pub use error::{Error, Result};

/// Build identifier recorded in run manifests.
pub fn build_id() -> String {
    format!(
        "vistok-{}-{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("VISTOK_GIT_HASH").unwrap_or("unknown")
    )
}
