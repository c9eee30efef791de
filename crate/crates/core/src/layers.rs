//! Small neural building blocks shared by the tokenizer and the AR probe.

use candle_core::{Tensor, D};

use crate::params::{Init, ParamBuilder};
use crate::Result;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor, // (out, in)
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / d_in as f32).sqrt();
        let w = pb.take("weight", &[d_out, d_in], Init::Normal { std })?;
        let b = if bias {
            Some(pb.take("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// Zero-initialized variant, used where a layer must start as the zero map.
    pub fn zeros(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = pb.take("weight", &[d_out, d_in], Init::Zeros)?;
        let b = if bias {
            Some(pb.take("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: Tensor,
    b: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            g: pb.take("weight", &[dim], Init::Ones)?,
            b: pb.take("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Group normalization over (B, C, H, W) activations.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    g: Tensor,
    b: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        assert!(channels % groups == 0, "channels must divide into groups");
        Ok(GroupNorm {
            g: pb.take("weight", &[1, channels, 1, 1], Init::Ones)?,
            b: pb.take("bias", &[1, channels, 1, 1], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let xg = x.reshape((bsz, self.groups, c / self.groups * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        let xn = xn.reshape((bsz, c, h, w))?;
        Ok(xn.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor, // (out, in, k, k)
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f32;
        let std = (2.0 / fan_in).sqrt();
        Ok(Conv2d {
            w: pb.take("weight", &[c_out, c_in, kernel, kernel], Init::Normal { std })?,
            b: pb.take("bias", &[1, c_out, 1, 1], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b)?)
    }
}

/// Two-layer GELU MLP with the usual 4x expansion.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&pb.pp("fc1"), dim, dim * 4, true)?,
            fc2: Linear::new(&pb.pp("fc2"), dim * 4, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head attention; self-attention when `kv` is the query stream.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "width must be divisible by heads");
        Ok(MultiHeadAttention {
            q: Linear::new(&pb.pp("q"), dim, dim, true)?,
            k: Linear::new(&pb.pp("k"), kv_dim, dim, true)?,
            v: Linear::new(&pb.pp("v"), kv_dim, dim, true)?,
            o: Linear::new(&pb.pp("o"), dim, dim, true)?,
            heads,
            head_dim: dim / heads,
        })
    }

    /// `q_in`: (B, T, dim), `kv`: (B, S, kv_dim), optional additive mask (T, S).
    pub fn forward(&self, q_in: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bsz, t, _) = q_in.dims3()?;
        let s = kv.dim(1)?;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((bsz, len, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(q_in)?, t)?;
        let k = split(self.k.forward(kv)?, s)?;
        let v = split(self.v.forward(kv)?, s)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let att = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let att = match mask {
            Some(m) => att.broadcast_add(m)?,
            None => att,
        };
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((bsz, t, ()))?;
        self.o.forward(&y)
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Debug, Clone)]
pub struct SelfAttnBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl SelfAttnBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(SelfAttnBlock {
            ln1: LayerNorm::new(&pb.pp("ln1"), dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(&pb.pp("ln2"), dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-norm query-transformer block: self-attention over the query stream,
/// cross-attention into a context sequence, then the MLP.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttnBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossAttnBlock {
            ln1: LayerNorm::new(&pb.pp("ln1"), dim)?,
            self_attn: MultiHeadAttention::new(&pb.pp("self_attn"), dim, dim, heads)?,
            ln_q: LayerNorm::new(&pb.pp("ln_q"), dim)?,
            ln_kv: LayerNorm::new(&pb.pp("ln_kv"), ctx_dim)?,
            cross_attn: MultiHeadAttention::new(&pb.pp("cross_attn"), dim, ctx_dim, heads)?,
            ln2: LayerNorm::new(&pb.pp("ln2"), dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, None)?)?;
        let x = (&x
            + self
                .cross_attn
                .forward(&self.ln_q.forward(&x)?, &self.ln_kv.forward(ctx)?, None)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Additive causal mask with `-inf` above the diagonal, shape (t, t).
pub fn causal_mask(t: usize, dev: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f32; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = f32::NEG_INFINITY;
        }
    }
    Ok(Tensor::from_vec(data, (t, t), dev)?)
}
