//! Transformer halves of the tokenizer: ViT-style blocks for 2D latents and
//! query-transformer blocks for 1D latents, plus the multi-level pooling
//! initialization of 1D queries.

use candle_core::Tensor;

use crate::layers::{CrossAttnBlock, LayerNorm, SelfAttnBlock};
use crate::params::{Init, ParamBuilder};
use crate::{Error, Result};

/// CNN feature grid in channels-last layout, (b, h, w, c).
pub struct FeatureGrid {
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.dims().len() != 4 {
            return Err(Error::ShapeMismatch(
                "feature grid must be (b, h, w, c)".into(),
            ));
        }
        Ok(FeatureGrid { values })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }

    /// Flatten to a row-major token sequence (b, h*w, c).
    pub fn tokens(&self) -> Result<Tensor> {
        let (b, h, w, c) = self.dims()?;
        Ok(self.values.reshape((b, h * w, c))?)
    }
}

/// Initialize `t` 1D queries from a feature grid by multi-level average
/// pooling. Level k partitions the grid into 2^k rectangles by alternately
/// halving width then height; region means are concatenated from level 0
/// upward, and the level-0 global mean is duplicated as the final query so
/// the sequence length is exactly `t`.
pub fn init_1d_queries(grid: &FeatureGrid, t: usize) -> Result<Tensor> {
    if t < 2 || !t.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "init_1d_queries: token count must be a power of two >= 2, got {t}"
        )));
    }
    let (_, h, w, _) = grid.dims()?;
    let levels = t.trailing_zeros() as usize;
    let mut pooled = Vec::new();
    let mut global = None;
    for k in 0..levels {
        let w_splits = 1usize << k.div_ceil(2);
        let h_splits = 1usize << (k / 2);
        if w % w_splits != 0 || h % h_splits != 0 {
            return Err(Error::InvalidInput(format!(
                "init_1d_queries: level {k} needs the {h}x{w} grid divisible into {h_splits}x{w_splits} regions"
            )));
        }
        let rh = h / h_splits;
        let rw = w / w_splits;
        for row in 0..h_splits {
            for col in 0..w_splits {
                let region = grid
                    .values
                    .narrow(1, row * rh, rh)?
                    .narrow(2, col * rw, rw)?;
                let mean = region.mean(2)?.mean(1)?; // (b, c)
                if k == 0 {
                    global = Some(mean.clone());
                }
                pooled.push(mean.unsqueeze(1)?);
            }
        }
    }
    pooled.push(global.expect("level 0 always present").unsqueeze(1)?);
    Ok(Tensor::cat(&pooled, 1)?)
}

/// Shared 2D-variant transformer: learned grid position embeddings plus
/// self-attention blocks, exposing every block output.
pub struct VitStack {
    pos: Tensor,
    blocks: Vec<SelfAttnBlock>,
    ln_f: LayerNorm,
}

impl VitStack {
    pub fn new(pb: &ParamBuilder, tokens: usize, width: usize, blocks: usize, heads: usize) -> Result<Self> {
        let pos = pb.take("pos", &[1, tokens, width], Init::Normal { std: 0.02 })?;
        let blocks = (0..blocks)
            .map(|i| SelfAttnBlock::new(&pb.pp(format!("blocks.{i}")), width, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(VitStack {
            pos,
            blocks,
            ln_f: LayerNorm::new(&pb.pp("ln_f"), width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = x.broadcast_add(&self.pos)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
            per_layer.push(x.clone());
        }
        Ok((self.ln_f.forward(&x)?, per_layer))
    }
}

/// Shared 1D-variant transformer: a learned-position query stream
/// cross-attending into a context sequence, exposing every block output.
pub struct QFormerStack {
    query_pos: Tensor,
    ctx_pos: Tensor,
    blocks: Vec<CrossAttnBlock>,
    ln_f: LayerNorm,
}

impl QFormerStack {
    pub fn new(
        pb: &ParamBuilder,
        queries: usize,
        ctx_tokens: usize,
        width: usize,
        blocks: usize,
        heads: usize,
    ) -> Result<Self> {
        let query_pos = pb.take("query_pos", &[1, queries, width], Init::Normal { std: 0.02 })?;
        let ctx_pos = pb.take("ctx_pos", &[1, ctx_tokens, width], Init::Normal { std: 0.02 })?;
        let blocks = (0..blocks)
            .map(|i| CrossAttnBlock::new(&pb.pp(format!("blocks.{i}")), width, width, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(QFormerStack {
            query_pos,
            ctx_pos,
            blocks,
            ln_f: LayerNorm::new(&pb.pp("ln_f"), width)?,
        })
    }

    pub fn forward(&self, queries: &Tensor, ctx: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = queries.broadcast_add(&self.query_pos)?;
        let ctx = ctx.broadcast_add(&self.ctx_pos)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&x, &ctx)?;
            per_layer.push(x.clone());
        }
        Ok((self.ln_f.forward(&x)?, per_layer))
    }
}

/// (b, t, c) row-major tokens back to a channels-first grid (b, c, g, g).
pub fn tokens_to_grid(x: &Tensor, g: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if t != g * g {
        return Err(Error::ShapeMismatch(format!(
            "cannot reshape {t} tokens to a {g}x{g} grid"
        )));
    }
    Ok(x.reshape((b, g, g, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// (b, c, h, w) channels-first grid to channels-last (b, h, w, c).
pub fn grid_to_channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

/// Parameter-count formulas mirroring the constructors above.
pub mod count {
    pub fn linear(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn layer_norm(w: usize) -> usize {
        2 * w
    }

    pub fn self_attn_block(w: usize) -> usize {
        2 * layer_norm(w)
            + 4 * linear(w, w, true)
            + linear(w, 4 * w, true)
            + linear(4 * w, w, true)
    }

    pub fn cross_attn_block(w: usize, ctx: usize) -> usize {
        // ln1 + self-attn + ln_q + ln_kv + cross-attn + ln2 + mlp
        3 * layer_norm(w)
            + layer_norm(ctx)
            + 4 * linear(w, w, true)
            + (linear(w, w, true) + 2 * linear(ctx, w, true) + linear(w, w, true))
            + linear(w, 4 * w, true)
            + linear(4 * w, w, true)
    }

    pub fn vit_stack(tokens: usize, w: usize, blocks: usize) -> usize {
        tokens * w + blocks * self_attn_block(w) + layer_norm(w)
    }

    pub fn qformer_stack(queries: usize, ctx_tokens: usize, w: usize, blocks: usize) -> usize {
        queries * w + ctx_tokens * w + blocks * cross_attn_block(w, w) + layer_norm(w)
    }
}
