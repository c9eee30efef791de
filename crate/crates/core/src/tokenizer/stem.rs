//! Fixed-size CNN stems: the encoder stem downsamples images by the
//! configured ratio `p`, the decoder stem upsamples features back to pixels.
//! Stems do not scale with the transformer tiers.

use candle_core::Tensor;

use crate::layers::{Conv2d, GroupNorm};
use crate::params::ParamBuilder;
use crate::Result;

const BASE_CHANNELS: usize = 32;
const MAX_CHANNELS: usize = 128;
const GN_GROUPS: usize = 8;

/// Channel schedule after the patchify conv and each downsample stage.
pub fn stem_channels(p: usize) -> Vec<usize> {
    let stages = (p.trailing_zeros() as usize).saturating_sub(1);
    let mut chans = vec![BASE_CHANNELS];
    for _ in 0..stages {
        let c = (chans.last().unwrap() * 2).min(MAX_CHANNELS);
        chans.push(c);
    }
    chans
}

/// Channel width of the feature grid handed to the transformer.
pub fn grid_channels(p: usize) -> usize {
    *stem_channels(p).last().unwrap()
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(ResBlock {
            gn1: GroupNorm::new(&pb.pp("gn1"), c, GN_GROUPS.min(c))?,
            conv1: Conv2d::new(&pb.pp("conv1"), c, c, 3, 1, 1)?,
            gn2: GroupNorm::new(&pb.pp("gn2"), c, GN_GROUPS.min(c))?,
            conv2: Conv2d::new(&pb.pp("conv2"), c, c, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.gn1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.gn2.forward(&h)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Patchify conv (stride 2) followed by residual downsample stages.
#[derive(Debug, Clone)]
pub struct EncoderStem {
    patchify: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
}

impl EncoderStem {
    pub fn new(pb: &ParamBuilder, p: usize) -> Result<Self> {
        let chans = stem_channels(p);
        let patchify = Conv2d::new(&pb.pp("patchify"), 3, chans[0], 3, 2, 1)?;
        let mut stages = Vec::new();
        for i in 0..chans.len() - 1 {
            let spb = pb.pp(format!("stage{i}"));
            let res = ResBlock::new(&spb.pp("res"), chans[i])?;
            let down = Conv2d::new(&spb.pp("down"), chans[i], chans[i + 1], 3, 2, 1)?;
            stages.push((res, down));
        }
        Ok(EncoderStem { patchify, stages })
    }

    /// (b, 3, h, w) -> (b, c, h/p, w/p)
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.patchify.forward(images)?;
        for (res, down) in &self.stages {
            x = down.forward(&res.forward(&x)?)?;
        }
        Ok(x)
    }
}

/// Mirror of the encoder stem: upsample stages then a conv head to RGB.
#[derive(Debug, Clone)]
pub struct DecoderStem {
    stages: Vec<(Conv2d, ResBlock)>,
    head_conv: Conv2d,
    head_gn: GroupNorm,
    to_rgb: Conv2d,
}

impl DecoderStem {
    pub fn new(pb: &ParamBuilder, p: usize) -> Result<Self> {
        let chans = stem_channels(p);
        let mut stages = Vec::new();
        for i in (1..chans.len()).rev() {
            let spb = pb.pp(format!("stage{}", chans.len() - 1 - i));
            let conv = Conv2d::new(&spb.pp("conv"), chans[i], chans[i - 1], 3, 1, 1)?;
            let res = ResBlock::new(&spb.pp("res"), chans[i - 1])?;
            stages.push((conv, res));
        }
        let c0 = chans[0];
        Ok(DecoderStem {
            stages,
            head_conv: Conv2d::new(&pb.pp("head_conv"), c0, c0, 3, 1, 1)?,
            head_gn: GroupNorm::new(&pb.pp("head_gn"), c0, GN_GROUPS.min(c0))?,
            to_rgb: Conv2d::new(&pb.pp("to_rgb"), c0, 3, 3, 1, 1)?,
        })
    }

    /// (b, c, h/p, w/p) -> (b, 3, h, w); output squashed into [-1, 1].
    pub fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let mut x = grid.clone();
        for (conv, res) in &self.stages {
            let (_, _, h, w) = x.dims4()?;
            x = x.upsample_nearest2d(h * 2, w * 2)?;
            x = res.forward(&conv.forward(&x)?)?;
        }
        let (_, _, h, w) = x.dims4()?;
        let x = x.upsample_nearest2d(h * 2, w * 2)?;
        let x = self.head_conv.forward(&x)?;
        let x = self.head_gn.forward(&x)?.silu()?;
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

/// Parameter-count formulas mirroring the constructors above.
pub mod count {
    use super::*;

    pub fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k + c_out
    }

    pub fn group_norm(c: usize) -> usize {
        2 * c
    }

    pub fn res_block(c: usize) -> usize {
        2 * group_norm(c) + 2 * conv(c, c, 3)
    }

    pub fn encoder_stem(p: usize) -> usize {
        let chans = stem_channels(p);
        let mut total = conv(3, chans[0], 3);
        for i in 0..chans.len() - 1 {
            total += res_block(chans[i]) + conv(chans[i], chans[i + 1], 3);
        }
        total
    }

    pub fn decoder_stem(p: usize) -> usize {
        let chans = stem_channels(p);
        let mut total = 0;
        for i in (1..chans.len()).rev() {
            total += conv(chans[i], chans[i - 1], 3) + res_block(chans[i - 1]);
        }
        total + conv(chans[0], chans[0], 3) + group_norm(chans[0]) + conv(chans[0], 3, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use candle_core::Device;

    #[test]
    fn stem_roundtrip_shapes() {
        for p in [4usize, 8] {
            let pb = ParamBuilder::new(rng_from(1), Device::Cpu);
            let enc = EncoderStem::new(&pb.pp("e"), p).unwrap();
            let dec = DecoderStem::new(&pb.pp("d"), p).unwrap();
            let img = Tensor::zeros((2, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
            let grid = enc.forward(&img).unwrap();
            assert_eq!(grid.dims(), &[2, grid_channels(p), 32 / p, 32 / p]);
            let out = dec.forward(&grid).unwrap();
            assert_eq!(out.dims(), &[2, 3, 32, 32]);
        }
    }

    #[test]
    fn stem_output_is_bounded() {
        let pb = ParamBuilder::new(rng_from(2), Device::Cpu);
        let dec = DecoderStem::new(&pb.pp("d"), 8).unwrap();
        let grid = Tensor::from_vec(
            crate::rng::normal_vec(&mut rng_from(3), 2 * 128 * 4 * 4, 0.0, 3.0),
            (2, 128, 4, 4),
            &Device::Cpu,
        )
        .unwrap();
        let out = dec.forward(&grid).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x >= -1.0 && *x <= 1.0));
    }

    #[test]
    fn count_formulas_match_instantiation() {
        for p in [4usize, 8, 16] {
            let pb = ParamBuilder::new(rng_from(4), Device::Cpu);
            EncoderStem::new(&pb.pp("enc_stem"), p).unwrap();
            DecoderStem::new(&pb.pp("dec_stem"), p).unwrap();
            let params = pb.finish();
            assert_eq!(
                params.element_count_under("enc_stem"),
                count::encoder_stem(p),
                "encoder stem p={p}"
            );
            assert_eq!(
                params.element_count_under("dec_stem"),
                count::decoder_stem(p),
                "decoder stem p={p}"
            );
        }
    }
}
