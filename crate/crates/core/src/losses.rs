//! The composite tokenizer objective: reconstruction, perceptual,
//! adversarial, VQ, entropy, and semantic-regularization terms, plus the
//! cosine and warmup-stable-decay learning-rate schedules.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::layers::Conv2d;
use crate::params::{ParamBuilder, ParamSet};
use crate::rng::derived_rng;
use crate::{Error, Result};

pub fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}

/// Mean squared error over pixels.
pub fn recon_loss(x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    if x.dims() != xhat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "recon_loss: {:?} vs {:?}",
            x.dims(),
            xhat.dims()
        )));
    }
    Ok((x - xhat)?.sqr()?.mean_all()?)
}

/// A frozen map from images to feature maps for the perceptual term.
pub trait PerceptualExtractor {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
    fn id(&self) -> &str;
}

/// Raw pixels as the single feature map; collapses the perceptual loss to
/// the reconstruction loss.
pub struct IdentityExtractor;

impl PerceptualExtractor for IdentityExtractor {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }

    fn id(&self) -> &str {
        "identity"
    }
}

/// Desk-scale default: a small conv net with frozen seed-pinned weights.
/// Weights are plain tensors, so no gradient can ever reach them.
pub struct FrozenConvExtractor {
    weights: Vec<(Tensor, usize)>, // (kernel, stride)
    id: String,
}

impl FrozenConvExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "perceptual-extractor", 0);
        let dev = candle_core::Device::Cpu;
        let plan = [(3usize, 16usize, 2usize), (16, 32, 2), (32, 64, 2)];
        let mut weights = Vec::new();
        for (c_in, c_out, stride) in plan {
            let std = (2.0 / (c_in * 9) as f32).sqrt();
            let w = crate::rng::randn_tensor(&mut rng, &[c_out, c_in, 3, 3], 0.0, std, &dev)?;
            weights.push((w, stride));
        }
        Ok(FrozenConvExtractor {
            weights,
            id: format!("frozen-conv-{seed}"),
        })
    }
}

impl PerceptualExtractor for FrozenConvExtractor {
    fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.weights.len());
        let mut x = images.clone();
        for (w, stride) in &self.weights {
            x = x.conv2d(w, 1, *stride, 1, 1)?.silu()?;
            maps.push(x.clone());
        }
        Ok(maps)
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Sum over feature maps of the mean squared feature distance.
pub fn perceptual_loss(
    x: &Tensor,
    xhat: &Tensor,
    extractor: &dyn PerceptualExtractor,
) -> Result<Tensor> {
    if x.dims() != xhat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "perceptual_loss: {:?} vs {:?}",
            x.dims(),
            xhat.dims()
        )));
    }
    let fx = extractor.feature_maps(x)?;
    let fy = extractor.feature_maps(xhat)?;
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::InvalidInput(
            "perceptual extractor returned inconsistent feature maps".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(fy.iter()) {
        let term = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Patch discriminator: a small conv stack producing per-patch logits,
/// inactive before `start_step`.
pub struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
    pub start_step: u64,
    params: ParamSet,
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

impl Discriminator {
    pub fn new(seed: u64, start_step: u64) -> Result<Self> {
        let pb = ParamBuilder::new(
            derived_rng(seed, "discriminator-init", 0),
            candle_core::Device::Cpu,
        );
        let conv1 = Conv2d::new(&pb.pp("conv1"), 3, 32, 4, 2, 1)?;
        let conv2 = Conv2d::new(&pb.pp("conv2"), 32, 64, 4, 2, 1)?;
        let head = Conv2d::new(&pb.pp("head"), 64, 1, 3, 1, 1)?;
        Ok(Discriminator {
            conv1,
            conv2,
            head,
            start_step,
            params: pb.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Per-patch logits, shape (b, 1, h/4, w/4).
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let x = leaky_relu(&self.conv1.forward(images)?)?;
        let x = leaky_relu(&self.conv2.forward(&x)?)?;
        self.head.forward(&x)
    }
}

/// Hinge discriminator loss over per-patch logits:
/// `(E[relu(1 - D(x))] + E[relu(1 + D(xhat))]) / 2`.
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (1.0 - real_logits)?.relu()?.mean_all()?;
    let fake = (1.0 + fake_logits)?.relu()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Hinge generator loss: `-E[D(xhat)]`.
pub fn hinge_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// Adversarial terms (gan_g, gan_d); both exactly zero before `start_step`.
/// The discriminator loss sees detached reconstructions.
pub fn gan_losses(
    x: &Tensor,
    xhat: &Tensor,
    disc: &Discriminator,
    step: u64,
) -> Result<(Tensor, Tensor)> {
    if step < disc.start_step {
        let zero = Tensor::zeros((), DType::F32, x.device())?;
        return Ok((zero.clone(), zero));
    }
    let real_logits = disc.logits(&x.detach())?;
    let fake_for_d = disc.logits(&xhat.detach())?;
    let fake_for_g = disc.logits(xhat)?;
    let gan_d = hinge_d_loss(&real_logits, &fake_for_d)?;
    let gan_g = hinge_g_loss(&fake_for_g)?;
    Ok((gan_g, gan_d))
}

/// Weights applied by [`total_loss`]. `vq` enters with weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub gan_generator: f64,
    pub entropy: f64,
    /// The semantic-regularization strength (lambda).
    pub sem_reg: f64,
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 1.0,
            gan_generator: 0.1,
            entropy: 0.0,
            sem_reg: 0.5,
            commitment: 0.25,
        }
    }
}

/// Named scalar losses plus the weighted total (a live graph tensor).
pub struct LossBundle {
    pub recon: Tensor,
    pub perceptual: Tensor,
    pub gan_g: Tensor,
    pub gan_d: Tensor,
    pub vq: Tensor,
    pub entropy: Tensor,
    pub sem_reg: Tensor,
    pub total: Tensor,
    pub weights: LossWeights,
}

/// Plain-number mirror of a [`LossBundle`] for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub recon: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub vq: f64,
    pub entropy: f64,
    pub sem_reg: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            recon: scalar_value(&self.recon)?,
            perceptual: scalar_value(&self.perceptual)?,
            gan_g: scalar_value(&self.gan_g)?,
            gan_d: scalar_value(&self.gan_d)?,
            vq: scalar_value(&self.vq)?,
            entropy: scalar_value(&self.entropy)?,
            sem_reg: scalar_value(&self.sem_reg)?,
            total: scalar_value(&self.total)?,
        })
    }
}

/// Component tensors for the total; absent terms contribute zero.
#[derive(Default)]
pub struct LossTerms {
    pub recon: Option<Tensor>,
    pub perceptual: Option<Tensor>,
    pub gan_g: Option<Tensor>,
    pub gan_d: Option<Tensor>,
    pub vq: Option<Tensor>,
    pub entropy: Option<Tensor>,
    pub sem_reg: Option<Tensor>,
}

/// Compose the generator objective:
/// `total = recon + w_p*perceptual + w_g*gan_g + vq + w_e*entropy + lambda*sem_reg`.
///
/// `gan_d` is carried for logging and the discriminator update but does not
/// enter the generator total. A non-finite term aborts with its name.
pub fn total_loss(terms: LossTerms, weights: &LossWeights, step: u64) -> Result<LossBundle> {
    let zero = || Tensor::zeros((), DType::F32, &candle_core::Device::Cpu);
    let recon = terms.recon.map_or_else(zero, Ok)?;
    let perceptual = terms.perceptual.map_or_else(zero, Ok)?;
    let gan_g = terms.gan_g.map_or_else(zero, Ok)?;
    let gan_d = terms.gan_d.map_or_else(zero, Ok)?;
    let vq = terms.vq.map_or_else(zero, Ok)?;
    let entropy = terms.entropy.map_or_else(zero, Ok)?;
    let sem_reg = terms.sem_reg.map_or_else(zero, Ok)?;

    for (name, t) in [
        ("recon", &recon),
        ("perceptual", &perceptual),
        ("gan_g", &gan_g),
        ("gan_d", &gan_d),
        ("vq", &vq),
        ("entropy", &entropy),
        ("sem_reg", &sem_reg),
    ] {
        if !scalar_value(t)?.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: name.to_string(),
                step,
            });
        }
    }

    let total = ((((((&recon + (&perceptual * weights.perceptual)?)?
        + (&gan_g * weights.gan_generator)?)?
        + &vq)?
        + (&entropy * weights.entropy)?)?
        + (&sem_reg * weights.sem_reg)?)?)
        .clone();
    if !scalar_value(&total)?.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total".to_string(),
            step,
        });
    }
    Ok(LossBundle {
        recon,
        perceptual,
        gan_g,
        gan_d,
        vq,
        entropy,
        sem_reg,
        total,
        weights: *weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Wsd,
}

/// Learning-rate schedule. `warmup_steps` is derived from warmup epochs by
/// the config layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    /// Fraction of total steps spent in the final linear decay (wsd only).
    pub decay_ratio: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn cosine(total_steps: u64, warmup_steps: u64) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps,
            decay_ratio: 0.2,
            total_steps,
        }
    }

    pub fn wsd(total_steps: u64, warmup_steps: u64) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Wsd,
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps,
            decay_ratio: 0.2,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::InvalidConfig(
                "schedule requires 0 < min_lr <= base_lr".into(),
            ));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio < 1.0) {
            return Err(Error::InvalidConfig(
                "schedule requires 0 < decay_ratio < 1".into(),
            ));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(
                "schedule requires warmup_steps < total_steps".into(),
            ));
        }
        Ok(())
    }

    /// First step of the wsd linear decay phase.
    pub fn decay_start(&self) -> u64 {
        let decay = (self.decay_ratio * self.total_steps as f64).round() as u64;
        self.total_steps - decay.min(self.total_steps)
    }
}

/// Learning rate at `step` (0-based; valid through `total_steps`).
pub fn lr_at(step: u64, schedule: &ScheduleConfig) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::InvalidInput(format!(
            "lr_at: step {step} out of range 0..={}",
            schedule.total_steps
        )));
    }
    if step < schedule.warmup_steps {
        return Ok(schedule.base_lr * step as f64 / schedule.warmup_steps as f64);
    }
    match schedule.kind {
        ScheduleKind::Cosine => {
            let span = (schedule.total_steps - schedule.warmup_steps) as f64;
            let s = (step - schedule.warmup_steps) as f64;
            let cos = (std::f64::consts::PI * s / span).cos();
            Ok(schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + cos))
        }
        ScheduleKind::Wsd => {
            let ds = schedule.decay_start();
            if step <= ds {
                Ok(schedule.base_lr)
            } else {
                let frac = (step - ds) as f64 / (schedule.total_steps - ds) as f64;
                Ok(schedule.base_lr + (schedule.min_lr - schedule.base_lr) * frac)
            }
        }
    }
}
