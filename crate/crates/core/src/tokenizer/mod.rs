//! The hybrid CNN–Transformer tokenizer in 2D (ViT) and 1D (query
//! transformer) variants, with asymmetric encoder/decoder size tiers.

mod stem;
mod transformer;

pub use stem::{grid_channels, DecoderStem, EncoderStem};
pub use transformer::{
    grid_to_channels_last, init_1d_queries, tokens_to_grid, FeatureGrid, QFormerStack, VitStack,
};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::layers::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamSet};
use crate::rng::derived_rng;
use crate::vq::{self, Codebook, LatentBatch, QuantizerGradMode};
use crate::{Error, Result};

/// Whether latent tokens keep the spatial grid (2d) or form a free-length
/// query sequence (1d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    OneD,
    TwoD,
}

/// Transformer size tiers, strictly ordered by parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeTier {
    S,
    B,
    L,
    XL,
    XXL,
}

impl SizeTier {
    pub const ALL: [SizeTier; 5] = [
        SizeTier::S,
        SizeTier::B,
        SizeTier::L,
        SizeTier::XL,
        SizeTier::XXL,
    ];

    pub fn blocks(self) -> usize {
        match self {
            SizeTier::S => 2,
            SizeTier::B => 4,
            SizeTier::L => 6,
            SizeTier::XL => 8,
            SizeTier::XXL => 10,
        }
    }

    pub fn width(self) -> usize {
        match self {
            SizeTier::S => 64,
            SizeTier::B => 128,
            SizeTier::L => 256,
            SizeTier::XL => 384,
            SizeTier::XXL => 512,
        }
    }

    /// Constant head dimension of 16 across tiers.
    pub fn heads(self) -> usize {
        self.width() / 16
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeTier::S => "S",
            SizeTier::B => "B",
            SizeTier::L => "L",
            SizeTier::XL => "XL",
            SizeTier::XXL => "XXL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(SizeTier::S),
            "B" | "b" => Ok(SizeTier::B),
            "L" | "l" => Ok(SizeTier::L),
            "XL" | "xl" => Ok(SizeTier::XL),
            "XXL" | "xxl" => Ok(SizeTier::XXL),
            other => Err(Error::InvalidConfig(format!("unknown size tier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub latent_kind: LatentKind,
    pub image_size: usize,
    /// Downsample ratio p; the CNN stems reduce each spatial side by p.
    pub downsample: usize,
    /// Latent sequence length T. For 2d this must equal (image_size/p)^2;
    /// for 1d any power of two compatible with the pooling scheme.
    pub token_count: usize,
    pub encoder_tier: SizeTier,
    pub decoder_tier: SizeTier,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub grad_mode: QuantizerGradMode,
    pub posterior_temperature: f64,
    /// Escape hatch for encoder/decoder comparison experiments; the
    /// asymmetric-scaling rule rejects decoder < encoder otherwise.
    #[serde(default)]
    pub allow_decoder_smaller: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            latent_kind: LatentKind::OneD,
            image_size: 256,
            downsample: 16,
            token_count: 256,
            encoder_tier: SizeTier::S,
            decoder_tier: SizeTier::S,
            codebook_size: 16_384,
            codebook_dim: 8,
            grad_mode: QuantizerGradMode::RotationTrick,
            posterior_temperature: 1.0,
            allow_decoder_smaller: false,
        }
    }
}

impl TokenizerConfig {
    /// Desk-scale profile used by the shipped experiment configs.
    pub fn desk(latent_kind: LatentKind, enc: SizeTier, dec: SizeTier) -> Self {
        TokenizerConfig {
            latent_kind,
            image_size: 32,
            downsample: 8,
            token_count: 16,
            encoder_tier: enc,
            decoder_tier: dec,
            codebook_size: 512,
            codebook_dim: 8,
            grad_mode: QuantizerGradMode::RotationTrick,
            posterior_temperature: 1.0,
            allow_decoder_smaller: false,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn grid_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| Err(Error::InvalidConfig(rule.to_string()));
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return fail("downsample ratio p must be a power of two >= 2");
        }
        if self.image_size == 0 || self.image_size % self.downsample != 0 {
            return fail("image_size must be divisible by the downsample ratio p");
        }
        if self.grid_size() < 2 {
            return fail("image_size / p must be at least 2");
        }
        match self.latent_kind {
            LatentKind::TwoD => {
                if self.token_count != self.grid_tokens() {
                    return fail("2d latents require token_count = (image_size/p)^2");
                }
            }
            LatentKind::OneD => {
                if self.token_count < 2 || !self.token_count.is_power_of_two() {
                    return fail("1d latents require token_count to be a power of two >= 2");
                }
                let levels = self.token_count.trailing_zeros() as usize;
                let g = self.grid_size();
                for k in 0..levels {
                    let ws = 1usize << k.div_ceil(2);
                    let hs = 1usize << (k / 2);
                    if g % ws != 0 || g % hs != 0 {
                        return fail(
                            "1d token_count incompatible with the grid: a pooling level does not divide the feature grid",
                        );
                    }
                }
            }
        }
        if self.codebook_size == 0 || self.codebook_dim == 0 {
            return fail("codebook requires size >= 1 and dimension >= 1");
        }
        if self.posterior_temperature <= 0.0 {
            return fail("posterior temperature must be positive");
        }
        if !self.allow_decoder_smaller && self.decoder_tier < self.encoder_tier {
            return fail(
                "asymmetric scaling rule: decoder tier must be at least the encoder tier",
            );
        }
        Ok(())
    }

    /// Short human id used in reports, e.g. `1d-S-B`.
    pub fn tier_label(&self) -> String {
        let kind = match self.latent_kind {
            LatentKind::OneD => "1d",
            LatentKind::TwoD => "2d",
        };
        format!(
            "{kind}-{}-{}",
            self.encoder_tier.name(),
            self.decoder_tier.name()
        )
    }
}

/// Per-layer decoder transformer outputs, 1-indexed by layer.
pub struct DecoderFeatures {
    layers: Vec<Tensor>,
}

impl DecoderFeatures {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Output of transformer decoder layer `l` (1-indexed).
    pub fn layer(&self, l: usize) -> Result<&Tensor> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "decoder layer index {l} out of range 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }
}

enum EncHalf {
    Vit(VitStack),
    QFormer(QFormerStack),
}

enum DecHalf {
    Vit(VitStack),
    QFormer(QFormerStack),
}

/// The full tokenizer: stems, transformer halves, projections, codebook.
pub struct Tokenizer {
    pub config: TokenizerConfig,
    enc_stem: EncoderStem,
    enc_in: Linear,
    enc: EncHalf,
    to_code: Linear,
    codebook: Codebook,
    from_code: Linear,
    latent_ln: LayerNorm,
    dec: DecHalf,
    dec_out: Linear,
    dec_stem: DecoderStem,
    params: ParamSet,
}

impl Tokenizer {
    pub fn new(config: &TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::new(
            derived_rng(seed, "tokenizer-init", 0),
            candle_core::Device::Cpu,
        );
        Self::build(config, &pb)
    }

    fn build(config: &TokenizerConfig, pb: &ParamBuilder) -> Result<Self> {
        let gt = config.grid_tokens();
        let t = config.token_count;
        let cg = grid_channels(config.downsample);
        let we = config.encoder_tier.width();
        let wd = config.decoder_tier.width();

        let enc_stem = EncoderStem::new(&pb.pp("enc_stem"), config.downsample)?;
        let enc_in = Linear::new(&pb.pp("enc_in"), cg, we, true)?;
        let enc = match config.latent_kind {
            LatentKind::TwoD => EncHalf::Vit(VitStack::new(
                &pb.pp("enc"),
                gt,
                we,
                config.encoder_tier.blocks(),
                config.encoder_tier.heads(),
            )?),
            LatentKind::OneD => EncHalf::QFormer(QFormerStack::new(
                &pb.pp("enc"),
                t,
                gt,
                we,
                config.encoder_tier.blocks(),
                config.encoder_tier.heads(),
            )?),
        };
        let to_code = Linear::new(&pb.pp("to_code"), we, config.codebook_dim, true)?;
        let codebook = Codebook::new(
            &pb.pp("codebook"),
            config.codebook_size,
            config.codebook_dim,
        )?;
        let from_code = Linear::new(&pb.pp("from_code"), config.codebook_dim, wd, true)?;
        let latent_ln = LayerNorm::new(&pb.pp("latent_ln"), wd)?;
        let dec = match config.latent_kind {
            LatentKind::TwoD => DecHalf::Vit(VitStack::new(
                &pb.pp("dec"),
                gt,
                wd,
                config.decoder_tier.blocks(),
                config.decoder_tier.heads(),
            )?),
            LatentKind::OneD => DecHalf::QFormer(QFormerStack::new(
                &pb.pp("dec"),
                gt,
                t,
                wd,
                config.decoder_tier.blocks(),
                config.decoder_tier.heads(),
            )?),
        };
        let dec_out = Linear::new(&pb.pp("dec_out"), wd, cg, true)?;
        let dec_stem = DecoderStem::new(&pb.pp("dec_stem"), config.downsample)?;

        Ok(Tokenizer {
            config: config.clone(),
            enc_stem,
            enc_in,
            enc,
            to_code,
            codebook,
            from_code,
            latent_ln,
            dec,
            dec_out,
            dec_stem,
            params: pb.clone().finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    /// Images (b, 3, s, s) in [-1, 1] to pre-quantization latents (b, T, D).
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4().map_err(|_| {
            Error::InvalidInput("encode expects images of shape (b, 3, h, w)".into())
        })?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::InvalidInput(format!(
                "encode: expected (b, 3, {s}, {s}) images, got (_, {c}, {h}, {w})"
            )));
        }
        let grid = self.enc_stem.forward(images)?;
        let grid_cl = grid_to_channels_last(&grid)?;
        let tokens = FeatureGrid::new(grid_cl)?.tokens()?;
        let tokens = self.enc_in.forward(&tokens)?;
        let out = match &self.enc {
            EncHalf::Vit(vit) => vit.forward(&tokens)?.0,
            EncHalf::QFormer(qf) => {
                let g = self.config.grid_size();
                let (b, _, we) = tokens.dims3()?;
                let proj_grid = FeatureGrid::new(tokens.reshape((b, g, g, we))?)?;
                let queries = init_1d_queries(&proj_grid, self.config.token_count)?;
                qf.forward(&queries, &tokens)?.0
            }
        };
        self.to_code.forward(&out)
    }

    /// Quantize pre-quantization latents against the codebook.
    pub fn quantize(&mut self, z: &Tensor) -> Result<LatentBatch> {
        let mode = self.config.grad_mode;
        let temp = self.config.posterior_temperature;
        vq::quantize(z, &mut self.codebook, mode, temp)
    }

    /// Quantized latents (b, T, D) back to images plus per-layer decoder features.
    pub fn decode(&self, quantized: &Tensor) -> Result<(Tensor, DecoderFeatures)> {
        let (b, t, d) = quantized.dims3().map_err(|_| {
            Error::InvalidInput("decode expects latents of shape (b, T, D)".into())
        })?;
        if t != self.config.token_count {
            return Err(Error::InvalidInput(format!(
                "decode: expected {} latent tokens, got {t}",
                self.config.token_count
            )));
        }
        if d != self.config.codebook_dim {
            return Err(Error::ShapeMismatch(format!(
                "decode: expected code dimension {}, got {d}",
                self.config.codebook_dim
            )));
        }
        let lat = self.latent_ln.forward(&self.from_code.forward(quantized)?)?;
        let g = self.config.grid_size();
        let (out, per_layer) = match &self.dec {
            DecHalf::Vit(vit) => vit.forward(&lat)?,
            DecHalf::QFormer(qf) => {
                // Every 2D query starts from the first 1D latent feature.
                let first = lat.narrow(1, 0, 1)?;
                let queries = first.broadcast_as((b, g * g, lat.dim(2)?))?.contiguous()?;
                qf.forward(&queries, &lat)?
            }
        };
        let grid_tokens = self.dec_out.forward(&out)?;
        let grid = tokens_to_grid(&grid_tokens, g)?;
        let images = self.dec_stem.forward(&grid)?;
        Ok((images, DecoderFeatures { layers: per_layer }))
    }

    /// encode -> quantize -> token indices, for frozen-tokenizer consumers.
    pub fn tokenize(&mut self, images: &Tensor) -> Result<Vec<u32>> {
        let z = self.encode(images)?;
        let lb = self.quantize(&z)?;
        lb.indices_vec()
    }

    /// Token indices back to images (codebook lookup then decode).
    pub fn detokenize(&self, indices: &[u32], batch: usize) -> Result<Tensor> {
        let t = self.config.token_count;
        if batch == 0 || indices.len() != batch * t {
            return Err(Error::InvalidInput(format!(
                "detokenize: expected {} indices, got {}",
                batch * t,
                indices.len()
            )));
        }
        if let Some(&bad) = indices
            .iter()
            .find(|&&i| i as usize >= self.config.codebook_size)
        {
            return Err(Error::InvalidInput(format!(
                "detokenize: index {bad} out of range for codebook size {}",
                self.config.codebook_size
            )));
        }
        let idx = Tensor::from_vec(indices.to_vec(), batch * t, &candle_core::Device::Cpu)?;
        let codes = self
            .codebook
            .codes()
            .detach()
            .index_select(&idx, 0)?
            .reshape((batch, t, self.config.codebook_dim))?;
        Ok(self.decode(&codes)?.0)
    }
}

/// Exact learnable-parameter count for a config, computed analytically so
/// paper-scale configs need no instantiation. Verified against live builds
/// in the tests.
pub fn parameter_count(config: &TokenizerConfig) -> Result<usize> {
    config.validate()?;
    Ok(stem::count::encoder_stem(config.downsample)
        + stem::count::decoder_stem(config.downsample)
        + encoder_transformer_count(config)
        + decoder_transformer_count(config)
        + config.codebook_size * config.codebook_dim)
}

/// Transformer-side parameter count of the encoder half (incl. projections).
pub fn encoder_transformer_count(config: &TokenizerConfig) -> usize {
    use transformer::count as tc;
    let we = config.encoder_tier.width();
    let gt = config.grid_tokens();
    let cg = grid_channels(config.downsample);
    let stack = match config.latent_kind {
        LatentKind::TwoD => tc::vit_stack(gt, we, config.encoder_tier.blocks()),
        LatentKind::OneD => {
            tc::qformer_stack(config.token_count, gt, we, config.encoder_tier.blocks())
        }
    };
    tc::linear(cg, we, true) + stack + tc::linear(we, config.codebook_dim, true)
}

/// Transformer-side parameter count of the decoder half (incl. projections).
pub fn decoder_transformer_count(config: &TokenizerConfig) -> usize {
    use transformer::count as tc;
    let wd = config.decoder_tier.width();
    let gt = config.grid_tokens();
    let cg = grid_channels(config.downsample);
    let stack = match config.latent_kind {
        LatentKind::TwoD => tc::vit_stack(gt, wd, config.decoder_tier.blocks()),
        LatentKind::OneD => {
            tc::qformer_stack(gt, config.token_count, wd, config.decoder_tier.blocks())
        }
    };
    tc::linear(config.codebook_dim, wd, true)
        + tc::layer_norm(wd)
        + stack
        + tc::linear(wd, cg, true)
}
