//! The AR probe: a small next-token-prediction transformer trained on a
//! frozen tokenizer's tokens, its CFG sampler, the linear-probing protocol,
//! and the token shard format.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::layers::{causal_mask, LayerNorm, Linear, SelfAttnBlock};
use crate::losses::{lr_at, scalar_value, ScheduleConfig};
use crate::metrics::{fid_proxy, FeatureExtractor, FidOptions};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::rng::{derived_rng, sample_categorical};
use crate::tokenizer::Tokenizer;
use crate::vq::{codebook_usage, DEFAULT_USAGE_WINDOW};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ARConfig {
    pub blocks: usize,
    pub heads: usize,
    pub width: usize,
    /// Vocabulary size; must equal the probed tokenizer's codebook size.
    pub vocab: usize,
    /// Image tokens per sequence; the class token prepends, so the model
    /// consumes T+1 positions.
    pub token_count: usize,
    pub num_classes: usize,
    /// Probability of replacing the class with the learned null class
    /// during training (enables classifier-free guidance).
    pub label_dropout: f64,
}

impl ARConfig {
    pub fn desk(vocab: usize, token_count: usize, num_classes: usize) -> Self {
        ARConfig {
            blocks: 4,
            heads: 4,
            width: 128,
            vocab,
            token_count,
            num_classes,
            label_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(
                "AR width must be divisible by heads".into(),
            ));
        }
        if self.vocab == 0 || self.token_count == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "AR config requires vocab, token_count, num_classes >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::InvalidConfig(
                "label_dropout must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn seq_len(&self) -> usize {
        self.token_count + 1
    }

    /// Index of the learned null-class embedding.
    pub fn null_class(&self) -> u32 {
        self.num_classes as u32
    }
}

/// Classifier-free guidance schedule: the first `unguided_fraction` of token
/// positions sample from the conditional logits alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CFGSchedule {
    pub guidance_scale: f64,
    pub unguided_fraction: f64,
}

impl Default for CFGSchedule {
    fn default() -> Self {
        CFGSchedule {
            guidance_scale: 1.5,
            unguided_fraction: 0.18,
        }
    }
}

impl CFGSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_scale < 1.0 {
            return Err(Error::InvalidConfig(
                "guidance_scale must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.unguided_fraction) {
            return Err(Error::InvalidConfig(
                "unguided_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Number of leading positions sampled without guidance.
    pub fn unguided_steps(&self, token_count: usize) -> usize {
        (self.unguided_fraction * token_count as f64).ceil() as usize
    }
}

/// `l_uncond + s * (l_cond - l_uncond)`; `s = 1` short-circuits to the
/// conditional logits so the collapse is exact.
pub fn guided_logits(cond: &[f32], uncond: &[f32], scale: f64) -> Vec<f32> {
    if scale == 1.0 {
        return cond.to_vec();
    }
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| u + scale as f32 * (c - u))
        .collect()
}

/// Decoder-only transformer with a class token and 1D absolute positions.
pub struct ARModel {
    pub config: ARConfig,
    tok_emb: Tensor,
    cls_emb: Tensor,
    pos: Tensor,
    blocks: Vec<SelfAttnBlock>,
    ln_f: LayerNorm,
    head: Linear,
    params: ParamSet,
}

impl ARModel {
    pub fn new(config: &ARConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::new(derived_rng(seed, "ar-init", 0), candle_core::Device::Cpu);
        let w = config.width;
        let tok_emb = pb.take("tok_emb", &[config.vocab, w], Init::Normal { std: 0.02 })?;
        let cls_emb = pb.take(
            "cls_emb",
            &[config.num_classes + 1, w],
            Init::Normal { std: 0.02 },
        )?;
        let pos = pb.take("pos", &[1, config.seq_len(), w], Init::Normal { std: 0.02 })?;
        let blocks = (0..config.blocks)
            .map(|i| SelfAttnBlock::new(&pb.pp(format!("blocks.{i}")), w, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&pb.pp("ln_f"), w)?;
        // Zero-initialized head: a fresh model emits uniform logits, so the
        // initial loss sits at ln(vocab).
        let head = Linear::zeros(&pb.pp("head"), w, config.vocab, false)?;
        Ok(ARModel {
            config: config.clone(),
            tok_emb,
            cls_emb,
            pos,
            blocks,
            ln_f,
            head,
            params: pb.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn embed(&self, tokens: &Tensor, classes: &Tensor, prefix_len: usize) -> Result<Tensor> {
        let (b, _) = tokens.dims2().or_else(|_| {
            if prefix_len == 0 {
                Ok((classes.dim(0)?, 0))
            } else {
                Err(candle_core::Error::Msg("bad token shape".into()))
            }
        })?;
        let cls = self.cls_emb.index_select(classes, 0)?.unsqueeze(1)?;
        let x = if prefix_len > 0 {
            let flat = tokens.flatten_all()?;
            let emb = self
                .tok_emb
                .index_select(&flat, 0)?
                .reshape((b, prefix_len, self.config.width))?;
            Tensor::cat(&[cls, emb], 1)?
        } else {
            cls
        };
        let pos = self.pos.narrow(1, 0, prefix_len + 1)?;
        Ok(x.broadcast_add(&pos)?)
    }

    /// Hidden states after every block for a (class + tokens) sequence.
    fn hidden_states(
        &self,
        tokens: &Tensor,
        classes: &Tensor,
        prefix_len: usize,
    ) -> Result<Vec<Tensor>> {
        let mut x = self.embed(tokens, classes, prefix_len)?;
        let mask = causal_mask(prefix_len + 1, x.device())?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&mask))?;
            per_layer.push(x.clone());
        }
        Ok(per_layer)
    }

    /// Next-token logits at every position for teacher forcing:
    /// input `(class, t_0..t_{T-1})`, output logits `(b, T, vocab)` where
    /// position i predicts token i.
    pub fn logits(&self, tokens: &Tensor, classes: &Tensor) -> Result<Tensor> {
        let (_, t) = tokens.dims2()?;
        if t != self.config.token_count {
            return Err(Error::InvalidInput(format!(
                "logits: expected {} tokens per sequence, got {t}",
                self.config.token_count
            )));
        }
        let prefix = tokens.narrow(1, 0, t - 1)?;
        let hidden = self.hidden_states(&prefix.contiguous()?, classes, t - 1)?;
        let h = self.ln_f.forward(hidden.last().unwrap())?;
        self.head.forward(&h)
    }

    /// Logits for the next token given a partial prefix (sampling path).
    pub fn next_logits(&self, prefix: &[u32], class: u32) -> Result<Vec<f32>> {
        let dev = candle_core::Device::Cpu;
        let classes = Tensor::from_vec(vec![class], 1, &dev)?;
        let tokens = if prefix.is_empty() {
            Tensor::zeros((1, 0), candle_core::DType::U32, &dev)?
        } else {
            Tensor::from_vec(prefix.to_vec(), (1, prefix.len()), &dev)?
        };
        let hidden = self.hidden_states(&tokens, &classes, prefix.len())?;
        let h = self.ln_f.forward(hidden.last().unwrap())?;
        let last = h.narrow(1, prefix.len(), 1)?;
        Ok(self
            .head
            .forward(&last)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    /// Token-averaged features from the middle block (class slot excluded),
    /// extracted under the null class so labels cannot leak into the probe.
    pub fn probe_features(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        let classes = Tensor::from_vec(vec![self.config.null_class(); b], b, tokens.device())?;
        let hidden = self.hidden_states(tokens, &classes, t)?;
        let middle = &hidden[self.config.blocks / 2 - 1 + self.config.blocks % 2];
        let img_positions = middle.narrow(1, 1, t)?;
        Ok(img_positions.mean(1)?)
    }
}

/// Mean next-token cross-entropy in nats.
fn cross_entropy_nats(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let flat = logp.reshape((b * t, v))?;
    let idx = targets.reshape(b * t)?.unsqueeze(1)?;
    let picked = flat.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// One labeled token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub class: u32,
    pub tokens: Vec<u32>,
}

/// In-memory token dataset plus the on-disk shard format.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenShard {
    pub tokenizer_id: String,
    pub vocab: u32,
    pub token_count: u32,
    pub records: Vec<TokenRecord>,
}

impl TokenShard {
    pub fn new(tokenizer_id: &str, vocab: u32, token_count: u32) -> Self {
        TokenShard {
            tokenizer_id: tokenizer_id.to_string(),
            vocab,
            token_count,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, class: u32, tokens: Vec<u32>) -> Result<()> {
        if tokens.len() != self.token_count as usize {
            return Err(Error::Shard(format!(
                "record has {} tokens, shard expects {}",
                tokens.len(),
                self.token_count
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Shard(format!(
                "token id {bad} out of range for vocab {}",
                self.vocab
            )));
        }
        self.records.push(TokenRecord { class, tokens });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_u32::<LittleEndian>(self.tokenizer_id.len() as u32)?;
        buf.extend_from_slice(self.tokenizer_id.as_bytes());
        buf.write_u32::<LittleEndian>(self.vocab)?;
        buf.write_u32::<LittleEndian>(self.token_count)?;
        buf.write_u64::<LittleEndian>(self.records.len() as u64)?;
        for rec in &self.records {
            buf.write_u32::<LittleEndian>(rec.class)?;
            for t in &rec.tokens {
                buf.write_u32::<LittleEndian>(*t)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let id_len = f.read_u32::<LittleEndian>()? as usize;
        let mut idb = vec![0u8; id_len];
        f.read_exact(&mut idb)?;
        let tokenizer_id =
            String::from_utf8(idb).map_err(|_| Error::Shard("tokenizer id not utf-8".into()))?;
        let vocab = f.read_u32::<LittleEndian>()?;
        let token_count = f.read_u32::<LittleEndian>()?;
        let count = f.read_u64::<LittleEndian>()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let class = f.read_u32::<LittleEndian>()?;
            let mut tokens = Vec::with_capacity(token_count as usize);
            for _ in 0..token_count {
                tokens.push(f.read_u32::<LittleEndian>()?);
            }
            records.push(TokenRecord { class, tokens });
        }
        Ok(TokenShard {
            tokenizer_id,
            vocab,
            token_count,
            records,
        })
    }
}

/// Probe-training budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    pub epochs: usize,
    pub batch_size: usize,
    /// Images sampled per class for the FID proxy.
    pub samples_per_class: usize,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        ProbeBudget {
            epochs: 20,
            batch_size: 64,
            samples_per_class: 16,
        }
    }
}

/// Train the AR probe with teacher forcing and label dropout.
pub fn ar_train(
    data: &TokenShard,
    config: &ARConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    epochs: usize,
) -> Result<(ARModel, Vec<f64>)> {
    config.validate()?;
    if data.vocab as usize != config.vocab {
        return Err(Error::InvalidConfig(format!(
            "vocab mismatch: tokenizer produced {} codes, AR config expects {}",
            data.vocab, config.vocab
        )));
    }
    if data.records.is_empty() {
        return Err(Error::InvalidInput("ar_train: empty dataset".into()));
    }
    let mut model = ARModel::new(config, seed)?;
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        },
    )?;
    let n = data.records.len();
    let batch = ProbeBudget::default().batch_size.min(n);
    let steps_per_epoch = n / batch;
    let total = (steps_per_epoch * epochs) as u64;
    let mut sched = *schedule;
    sched.total_steps = total.max(2);
    if sched.warmup_steps >= sched.total_steps {
        sched.warmup_steps = sched.total_steps / 10;
    }

    let dev = candle_core::Device::Cpu;
    let mut curve = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = derived_rng(seed, "ar-epoch-order", epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for bi in 0..steps_per_epoch {
            let idxs = &order[bi * batch..(bi + 1) * batch];
            let mut toks = Vec::with_capacity(batch * config.token_count);
            let mut classes = Vec::with_capacity(batch);
            let mut drop_rng = derived_rng(seed, "ar-label-dropout", step);
            for &i in idxs {
                let rec = &data.records[i];
                toks.extend_from_slice(&rec.tokens);
                let dropped = rand::Rng::gen_range(&mut drop_rng, 0.0..1.0) < config.label_dropout;
                classes.push(if dropped { config.null_class() } else { rec.class });
            }
            let tokens = Tensor::from_vec(toks, (batch, config.token_count), &dev)?;
            let cls = Tensor::from_vec(classes, batch, &dev)?;
            let logits = model.logits(&tokens, &cls)?;
            let loss = cross_entropy_nats(&logits, &tokens)?;
            let value = scalar_value(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "ar_cross_entropy".into(),
                    step,
                });
            }
            let grads = loss.backward()?;
            let lr = lr_at(step.min(sched.total_steps), &sched)?;
            opt.step(lr, &grads)?;
            curve.push(value);
            step += 1;
        }
    }
    Ok((model, curve))
}

/// Mean per-token cross-entropy in nats over a held-out set; the latent
/// learnability metric.
pub fn ar_validation_loss(model: &ARModel, data: &TokenShard) -> Result<f64> {
    if data.records.is_empty() {
        return Err(Error::InvalidInput(
            "ar_validation_loss: empty evaluation set".into(),
        ));
    }
    let dev = candle_core::Device::Cpu;
    let t = model.config.token_count;
    let batch = 64usize;
    let mut total = 0f64;
    let mut count = 0usize;
    for chunk in data.records.chunks(batch) {
        let b = chunk.len();
        let mut toks = Vec::with_capacity(b * t);
        let mut classes = Vec::with_capacity(b);
        for rec in chunk {
            toks.extend_from_slice(&rec.tokens);
            classes.push(rec.class);
        }
        let tokens = Tensor::from_vec(toks, (b, t), &dev)?;
        let cls = Tensor::from_vec(classes, b, &dev)?;
        let logits = model.logits(&tokens, &cls)?.detach();
        let loss = cross_entropy_nats(&logits, &tokens)?;
        total += scalar_value(&loss)? * b as f64;
        count += b;
    }
    Ok(total / count as f64)
}

/// Autoregressive sampling with step-scheduled classifier-free guidance.
pub fn ar_sample(model: &ARModel, class: u32, cfg: &CFGSchedule, seed: u64) -> Result<Vec<u32>> {
    Ok(ar_sample_traced(model, class, cfg, seed)?.0)
}

/// Sampling variant also returning the logits stream fed to the sampler.
pub fn ar_sample_traced(
    model: &ARModel,
    class: u32,
    cfg: &CFGSchedule,
    seed: u64,
) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
    cfg.validate()?;
    let t = model.config.token_count;
    let unguided = cfg.unguided_steps(t);
    let mut rng = derived_rng(seed, "ar-sample", 0);
    let mut tokens: Vec<u32> = Vec::with_capacity(t);
    let mut trace = Vec::with_capacity(t);
    for pos in 0..t {
        let cond = model.next_logits(&tokens, class)?;
        let logits = if pos < unguided || cfg.guidance_scale == 1.0 {
            cond
        } else {
            let uncond = model.next_logits(&tokens, model.config.null_class())?;
            guided_logits(&cond, &uncond, cfg.guidance_scale)
        };
        let probs = softmax_f32(&logits);
        let next = sample_categorical(&mut rng, &probs) as u32;
        trace.push(logits);
        tokens.push(next);
    }
    Ok((tokens, trace))
}

pub fn softmax_f32(logits: &[f32]) -> Vec<f32> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f32 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Multinomial logistic regression on frozen features: fit on the train
/// split, report accuracy on the eval split. Deterministic full-batch
/// gradient descent to convergence.
pub fn fit_logistic_regression(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    eval_x: &[Vec<f64>],
    eval_y: &[u32],
    num_classes: usize,
) -> Result<f64> {
    if train_x.is_empty() || eval_x.is_empty() {
        return Err(Error::InvalidInput("linear probe: empty split".into()));
    }
    let distinct: std::collections::BTreeSet<u32> = train_y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput(
            "linear probe requires at least 2 classes in the train split".into(),
        ));
    }
    let f = train_x[0].len();
    let n = train_x.len();
    // Standardize with train-split statistics.
    let mut mean = vec![0f64; f];
    let mut var = vec![0f64; f];
    for row in train_x {
        for j in 0..f {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in train_x {
        for j in 0..f {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-8)).collect();
    let norm = |row: &[f64]| -> Vec<f64> {
        (0..f).map(|j| (row[j] - mean[j]) / std[j]).collect()
    };
    let tx: Vec<Vec<f64>> = train_x.iter().map(|r| norm(r)).collect();
    let ex: Vec<Vec<f64>> = eval_x.iter().map(|r| norm(r)).collect();

    let c = num_classes;
    let mut w = vec![0f64; c * (f + 1)]; // per class: weights + bias
    let l2 = 1e-4;
    let lr = 0.5;
    let mut probs = vec![0f64; c];
    for _ in 0..500 {
        let mut grad = vec![0f64; c * (f + 1)];
        for (row, &label) in tx.iter().zip(train_y) {
            for k in 0..c {
                let base = k * (f + 1);
                let mut z = w[base + f];
                for j in 0..f {
                    z += w[base + j] * row[j];
                }
                probs[k] = z;
            }
            let mx = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0f64;
            for p in probs.iter_mut() {
                *p = (*p - mx).exp();
                sum += *p;
            }
            for (k, p) in probs.iter().enumerate() {
                let diff = p / sum - if k as u32 == label { 1.0 } else { 0.0 };
                let base = k * (f + 1);
                for j in 0..f {
                    grad[base + j] += diff * row[j];
                }
                grad[base + f] += diff;
            }
        }
        let mut gnorm = 0f64;
        for (k, g) in grad.iterER().enumerate() {
            let _ = (k, g);
        }
        for k in 0..c * (f + 1) {
            grad[k] = grad[k] / n as f64 + l2 * w[k];
            gnorm += grad[k] * grad[k];
            w[k] -= lr * grad[k];
        }
        if gnorm.sqrt() < 1e-7 {
            break;
        }
    }

    let mut correct = 0usize;
    for (row, &label) in ex.iter().zip(eval_y) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0u32;
        for k in 0..c {
            let base = k * (f + 1);
            let mut z = w[base + f];
            for j in 0..f {
                z += w[base + j] * row[j];
            }
            if z > best {
                best = z;
                arg = k as u32;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_y.len() as f64)
}

/// Linear probing accuracy from the AR model's middle-layer features.
pub fn linear_probe(
    model: &ARModel,
    train: &TokenShard,
    eval: &TokenShard,
) -> Result<f64> {
    let feats = |shard: &TokenShard| -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
        let dev = candle_core::Device::Cpu;
        let t = model.config.token_count;
        let mut xs = Vec::with_capacity(shard.records.len());
        let mut ys = Vec::with_capacity(shard.records.len());
        for chunk in shard.records.chunks(64) {
            let b = chunk.len();
            let mut toks = Vec::with_capacity(b * t);
            for rec in chunk {
                toks.extend_from_slice(&rec.tokens);
                ys.push(rec.class);
            }
            let tokens = Tensor::from_vec(toks, (b, t), &dev)?;
            let f = model.probe_features(&tokens)?.detach();
            let flat = f.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let w = model.config.width;
            for i in 0..b {
                xs.push(flat[i * w..(i + 1) * w].to_vec());
            }
        }
        Ok((xs, ys))
    };
    let (tx, ty) = feats(train)?;
    let (ex, ey) = feats(eval)?;
    fit_logistic_regression(&tx, &ty, &ex, &ey, model.config.num_classes)
}

/// One tokenizer's probe verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub val_loss: f64,
    pub fid_proxy: f64,
    pub linear_probe_acc: f64,
    pub codebook_usage: f64,
    pub tokenizer_id: String,
    pub ar_steps: u64,
}

/// Images plus labels for one corpus split.
pub struct ProbeData<'a> {
    pub images: &'a Tensor,
    pub classes: &'a [u32],
    pub ids: &'a [String],
}

fn tokenize_split(
    tokenizer: &mut Tokenizer,
    data: &ProbeData<'_>,
    shard_id: &str,
) -> Result<TokenShard> {
    let (n, _, _, _) = data.images.dims4()?;
    if n != data.classes.len() {
        return Err(Error::InvalidInput(
            "tokenize: images and classes disagree on the sample count".into(),
        ));
    }
    let t = tokenizer.config.token_count as u32;
    let vocab = tokenizer.config.codebook_size as u32;
    let mut shard = TokenShard::new(shard_id, vocab, t);
    for start in (0..n).step_by(64) {
        let b = 64.min(n - start);
        let batch = data.images.narrow(0, start, b)?;
        let ids = tokenizer.tokenize(&batch)?;
        for i in 0..b {
            shard.push(
                data.classes[start + i],
                ids[i * t as usize..(i + 1) * t as usize].to_vec(),
            )?;
        }
    }
    Ok(shard)
}

/// The full AR-probing protocol for one frozen tokenizer: tokenize the
/// corpus, train the probe, and measure validation loss, the FID proxy,
/// linear-probe accuracy, and codebook usage. Deterministic under `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_probe(
    tokenizer: &mut Tokenizer,
    tokenizer_id: &str,
    train: ProbeData<'_>,
    val: ProbeData<'_>,
    eval: ProbeData<'_>,
    budget: &ProbeBudget,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    shard_dir: Option<&Path>,
) -> Result<ProbeReport> {
    let train_shard = tokenize_split(tokenizer, &train, tokenizer_id)?;
    let val_shard = tokenize_split(tokenizer, &val, tokenizer_id)?;
    let eval_shard = tokenize_split(tokenizer, &eval, tokenizer_id)?;
    let usage = codebook_usage(tokenizer.codebook(), DEFAULT_USAGE_WINDOW)?;

    if let Some(dir) = shard_dir {
        std::fs::create_dir_all(dir)?;
        train_shard.write(&dir.join("train.tokens"))?;
        val_shard.write(&dir.join("val.tokens"))?;
        eval_shard.write(&dir.join("eval.tokens"))?;
    }

    let num_classes = train
        .classes
        .iter()
        .chain(val.classes)
        .chain(eval.classes)
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(1);
    let config = ARConfig::desk(
        tokenizer.config.codebook_size,
        tokenizer.config.token_count,
        num_classes,
    );
    let schedule = ScheduleConfig::wsd(1, 0);
    let (model, curve) = ar_train(&train_shard, &config, &schedule, seed, budget.epochs)?;
    let val_loss = ar_validation_loss(&model, &val_shard)?;

    // Class-conditional samples for the generation-quality proxy.
    let cfg = CFGSchedule::default();
    let mut all_tokens: Vec<u32> = Vec::new();
    let mut n_samples = 0usize;
    for class in 0..num_classes as u32 {
        for rep in 0..budget.samples_per_class {
            let s = crate::rng::derive_seed(seed, "probe-sample", (class as u64) << 32 | rep as u64);
            let toks = ar_sample(&model, class, &cfg, s)?;
            all_tokens.extend_from_slice(&toks);
            n_samples += 1;
        }
    }
    let generated = tokenizer.detokenize(&all_tokens, n_samples)?;
    let gen01 = ((generated + 1.0)? * 0.5)?;
    let real01 = ((eval.images.detach() + 1.0)? * 0.5)?;
    let fid = fid_proxy(&real01, &gen01, extractor, FidOptions::default())?;

    let acc = linear_probe(&model, &train_shard, &eval_shard)?;

    Ok(ProbeReport {
        val_loss,
        fid_proxy: fid,
        linear_probe_acc: acc,
        codebook_usage: usage,
        tokenizer_id: tokenizer_id.to_string(),
        ar_steps: curve.len() as u64,
    })
}
