//! Vector quantization: codebook storage, nearest-neighbor assignment,
//! gradient pass-through rules, the entropy penalty, and usage accounting.

use candle_core::{DType, Tensor, D};

use crate::params::{Init, ParamBuilder};
use crate::{Error, Result};

/// Sliding-window length (in assigned tokens) for usage statistics.
pub const DEFAULT_USAGE_WINDOW: usize = 65_536;

/// Gradient rule for the quantization pass-through.
///
/// Both modes produce bitwise-identical forward values; only the gradient
/// reaching the encoder differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerGradMode {
    StraightThrough,
    RotationTrick,
}

/// Ring buffer of recently assigned code indices plus per-code hit counts.
#[derive(Debug, Clone)]
pub struct UsageWindow {
    ring: Vec<u32>,
    head: usize,
    filled: usize,
    counts: Vec<u64>,
    capacity: usize,
}

impl UsageWindow {
    pub fn new(codebook_size: usize, capacity: usize) -> Self {
        UsageWindow {
            ring: Vec::new(),
            head: 0,
            filled: 0,
            counts: vec![0; codebook_size],
            capacity,
        }
    }

    pub fn record(&mut self, indices: &[u32]) {
        for &idx in indices {
            if self.filled < self.capacity {
                self.ring.push(idx);
                self.filled += 1;
            } else {
                let old = self.ring[self.head];
                self.counts[old as usize] -= 1;
                self.ring[self.head] = idx;
            }
            self.counts[idx as usize] += 1;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn observed(&self) -> usize {
        self.filled
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Oldest-to-newest contents, for checkpointing.
    pub fn contents(&self) -> Vec<u32> {
        if self.filled < self.capacity {
            self.ring.clone()
        } else {
            let mut out = Vec::with_capacity(self.capacity);
            out.extend_from_slice(&self.ring[self.head..]);
            out.extend_from_slice(&self.ring[..self.head]);
            out
        }
    }

    pub fn restore(codebook_size: usize, capacity: usize, contents: &[u32]) -> Self {
        let mut w = UsageWindow::new(codebook_size, capacity);
        w.record(contents);
        w
    }

    /// Distinct codes among the `window` most recent tokens.
    fn distinct_in_last(&self, window: usize) -> usize {
        let items = self.contents();
        let take = window.min(items.len());
        let mut seen = vec![false; self.counts.len()];
        let mut distinct = 0;
        for &idx in &items[items.len() - take..] {
            if !seen[idx as usize] {
                seen[idx as usize] = true;
                distinct += 1;
            }
        }
        distinct
    }
}

/// The learnable code matrix with usage statistics.
pub struct Codebook {
    codes: Tensor, // (n, d)
    usage: UsageWindow,
    n: usize,
    d: usize,
}

impl Codebook {
    /// Register a trainable codebook under the builder, initialized uniformly
    /// on [-1/n, 1/n] per element.
    pub fn new(pb: &ParamBuilder, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidConfig(
                "codebook requires n >= 1 and d >= 1".into(),
            ));
        }
        let lim = 1.0 / n as f32;
        let codes = pb.take("codes", &[n, d], Init::Uniform { lo: -lim, hi: lim })?;
        Ok(Codebook {
            codes,
            usage: UsageWindow::new(n, DEFAULT_USAGE_WINDOW),
            n,
            d,
        })
    }

    /// Wrap an existing (possibly non-trainable) code matrix.
    pub fn from_tensor(codes: Tensor) -> Result<Self> {
        let (n, d) = codes.dims2()?;
        if n == 0 || d == 0 {
            return Err(Error::InvalidConfig(
                "codebook requires n >= 1 and d >= 1".into(),
            ));
        }
        Ok(Codebook {
            codes,
            usage: UsageWindow::new(n, DEFAULT_USAGE_WINDOW),
            n,
            d,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn usage(&self) -> &UsageWindow {
        &self.usage
    }

    pub fn usage_mut(&mut self) -> &mut UsageWindow {
        &mut self.usage
    }
}

/// One quantized batch: pre-quantization latents, the pass-through tensor fed
/// to the decoder, assigned indices, and the soft code posterior.
pub struct LatentBatch {
    /// Encoder outputs z, shape (b, t, d).
    pub pre_quant: Tensor,
    /// Selected codes with the grad-mode backward rule, shape (b, t, d).
    pub quantized: Tensor,
    /// Selected codes on the codebook's gradient path (used by the VQ loss).
    pub codebook_values: Tensor,
    /// Assigned code indices, shape (b, t), u32.
    pub indices: Tensor,
    /// Soft posterior over codes, shape (b, t, n); rows sum to 1.
    pub posterior: Tensor,
}

impl LatentBatch {
    pub fn indices_vec(&self) -> Result<Vec<u32>> {
        Ok(self.indices.flatten_all()?.to_vec1::<u32>()?)
    }
}

/// Nearest-neighbor assignment with the configured backward rule.
///
/// Indices are the argmin of Euclidean distance, ties broken toward the
/// lowest code index. The forward value of `quantized` equals the selected
/// codes exactly for either grad mode; the usage window is updated.
pub fn quantize(
    z: &Tensor,
    codebook: &mut Codebook,
    grad_mode: QuantizerGradMode,
    temperature: f64,
) -> Result<LatentBatch> {
    let (b, t, d) = z
        .dims3()
        .map_err(|_| Error::ShapeMismatch("quantize expects z of shape (b, t, d)".into()))?;
    if b == 0 || t == 0 {
        return Err(Error::InvalidInput("quantize: empty batch".into()));
    }
    if d != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "z has code dimension {d}, codebook has {}",
            codebook.dim()
        )));
    }
    let z_host = z.flatten_all()?.to_vec1::<f32>()?;
    if z_host.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "quantize: non-finite value in pre-quantization latents".into(),
        ));
    }

    let codes_host = codebook.codes().to_vec2::<f32>()?;
    let n = codebook.size();
    let mut idx_host = Vec::with_capacity(b * t);
    for tok in 0..b * t {
        let zv = &z_host[tok * d..(tok + 1) * d];
        let mut best = f32::INFINITY;
        let mut best_i = 0u32;
        for (i, code) in codes_host.iter().enumerate() {
            let mut dist = 0f32;
            for j in 0..d {
                let diff = zv[j] - code[j];
                dist += diff * diff;
            }
            if dist < best {
                best = dist;
                best_i = i as u32;
            }
        }
        idx_host.push(best_i);
    }

    let indices = Tensor::from_vec(idx_host.clone(), (b, t), z.device())?;
    let flat_idx = indices.flatten_all()?;
    let codebook_values = codebook
        .codes()
        .index_select(&flat_idx, 0)?
        .reshape((b, t, d))?;

    let surrogate = match grad_mode {
        QuantizerGradMode::StraightThrough => z.clone(),
        QuantizerGradMode::RotationTrick => rotation_surrogate(z, &codebook_values)?,
    };
    // Value: selected codes plus an exact zero; gradient: the surrogate's.
    let quantized = (codebook_values.detach() + (&surrogate - surrogate.detach())?)?;

    let posterior = code_posterior_for(z, codebook.codes(), temperature)?;
    codebook.usage_mut().record(&idx_host);

    Ok(LatentBatch {
        pre_quant: z.clone(),
        quantized,
        codebook_values,
        indices,
        posterior,
    })
}

/// Gradient surrogate for the rotation rule: `lambda * R * z` where the
/// rotation R maps the z direction onto the code direction and `lambda`
/// rescales norms. R and lambda are treated as constants, so the backward
/// pass applies `lambda * R^T`. Near-zero vectors fall back to the identity.
fn rotation_surrogate(z: &Tensor, q: &Tensor) -> Result<Tensor> {
    let qd = q.detach();
    let zd = z.detach();
    let nz = (zd.sqr()?.sum_keepdim(D::Minus1)? + 1e-20)?.sqrt()?;
    let nq = (qd.sqr()?.sum_keepdim(D::Minus1)? + 1e-20)?.sqrt()?;
    let xhat = zd.broadcast_div(&nz)?;
    let yhat = qd.broadcast_div(&nq)?;
    let lambda = nq.broadcast_div(&nz)?;
    let s = (&xhat + &yhat)?;
    let denom = ((xhat.broadcast_mul(&yhat))?.sum_keepdim(D::Minus1)? + 1.0)?.clamp(1e-6, f64::INFINITY)?;

    let xz = xhat.broadcast_mul(z)?.sum_keepdim(D::Minus1)?;
    let sz = s.broadcast_mul(z)?.sum_keepdim(D::Minus1)?;
    let rot = ((z + yhat.broadcast_mul(&(xz * 2.0)?)?)?
        - s.broadcast_mul(&sz.broadcast_div(&denom)?)?)?;
    let rot = rot.broadcast_mul(&lambda)?;

    // Degenerate tokens (z or q at the origin) use the straight-through path.
    let ok = nz.ge(1e-8)?.mul(&nq.ge(1e-8)?)?;
    let mask = ok.broadcast_as(z.shape())?;
    Ok(mask.where_cond(&rot, z)?)
}

/// Soft posterior over codes: `softmax(-||z - c_i||_2 / temperature)`.
pub fn code_posterior(z: &Tensor, codebook: &Codebook, temperature: f64) -> Result<Tensor> {
    code_posterior_for(z, codebook.codes(), temperature)
}

fn code_posterior_for(z: &Tensor, codes: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "code_posterior: temperature must be positive, got {temperature}"
        )));
    }
    let (b, t, d) = z.dims3()?;
    let (n, dc) = codes.dims2()?;
    if d != dc {
        return Err(Error::ShapeMismatch(format!(
            "z dimension {d} vs codebook dimension {dc}"
        )));
    }
    let flat = z.reshape((b * t, d))?;
    let z2 = flat.sqr()?.sum_keepdim(D::Minus1)?; // (bt, 1)
    let c2 = codes.sqr()?.sum_keepdim(D::Minus1)?.reshape((1, n))?; // (1, n)
    let dot = flat.matmul(&codes.t()?.contiguous()?)?; // (bt, n)
    let d2 = z2
        .broadcast_add(&c2)?
        .broadcast_sub(&(dot * 2.0)?)?
        .clamp(0.0, f64::INFINITY)?;
    // The epsilon keeps sqrt differentiable at zero distance.
    let dist = (d2 + 1e-20)?.sqrt()?;
    let logits = (dist.neg()? / temperature)?;
    let post = candle_nn::ops::softmax(&logits, D::Minus1)?;
    Ok(post.reshape((b, t, n))?)
}

/// Entropy penalty: `E_z[H(zhat|z)] - H(zhat)`, natural log.
///
/// The first term is the mean per-row Shannon entropy; the second is the
/// entropy of the batch-mean posterior. Differentiable w.r.t. the posterior.
pub fn entropy_loss(posterior: &Tensor) -> Result<Tensor> {
    let dims = posterior.dims();
    if dims.is_empty() {
        return Err(Error::ShapeMismatch("entropy_loss: scalar posterior".into()));
    }
    let n = dims[dims.len() - 1];
    let rows: usize = dims[..dims.len() - 1].iter().product();
    if rows == 0 || n == 0 {
        return Err(Error::InvalidInput("entropy_loss: empty posterior".into()));
    }
    let flat = posterior.reshape((rows, n))?;
    let host = flat.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    for r in 0..rows {
        let row = &host[r * n..(r + 1) * n];
        let sum: f64 = row.iter().sum();
        if !sum.is_finite() || row.iter().any(|&p| !p.is_finite() || p < -1e-6) {
            return Err(Error::InvalidInput(
                "entropy_loss: posterior rows must be finite and non-negative".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!(
                "entropy_loss: degenerate posterior row (sum {sum:.6})"
            )));
        }
    }
    let cond = xlogx_sum(&flat)?.neg()?.mean_all()?;
    let marginal = flat.mean(0)?.reshape((1, n))?;
    let marg = xlogx_sum(&marginal)?.neg()?.mean_all()?;
    Ok((cond - marg)?)
}

/// Row-wise `sum_i p_i ln p_i` with `0 ln 0 = 0`.
fn xlogx_sum(p: &Tensor) -> Result<Tensor> {
    let logp = (p + 1e-12)?.log()?;
    Ok(p.mul(&logp)?.sum(D::Minus1)?)
}

/// Two-term VQ objective: `||sg(z) - zhat||^2 + w * ||z - sg(zhat)||^2`,
/// squared norms over the code dimension, averaged over tokens.
pub fn vq_codebook_loss(z: &Tensor, quantized: &Tensor, commitment_weight: f64) -> Result<Tensor> {
    if z.dims() != quantized.dims() {
        return Err(Error::ShapeMismatch(format!(
            "vq_codebook_loss: z {:?} vs quantized {:?}",
            z.dims(),
            quantized.dims()
        )));
    }
    let codebook_term = (z.detach() - quantized)?
        .sqr()?
        .sum(D::Minus1)?
        .mean_all()?;
    let commit_term = (z - quantized.detach())?
        .sqr()?
        .sum(D::Minus1)?
        .mean_all()?;
    Ok((codebook_term + (commit_term * commitment_weight)?)?)
}

/// Fraction of codes hit at least once within the most recent `window` tokens.
pub fn codebook_usage(codebook: &Codebook, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidInput("codebook_usage: window must be > 0".into()));
    }
    if codebook.usage().observed() == 0 {
        return Err(Error::InvalidInput(
            "codebook_usage: no assignments observed".into(),
        ));
    }
    Ok(codebook.usage().distinct_in_last(window) as f64 / codebook.size() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use crate::rng::{normal_vec, rng_from};
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn cb_from(rows: &[&[f32]]) -> Codebook {
        let d = rows[0].len();
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_tensor(Tensor::from_vec(flat, (rows.len(), d), &dev()).unwrap()).unwrap()
    }

    fn z3(data: &[f32], b: usize, t: usize, d: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), (b, t, d), &dev()).unwrap()
    }

    /// Test-side nearest-neighbor oracle: exhaustive scan, lowest index wins ties.
    fn brute_force_indices(z: &[f32], codes: &[f32], d: usize) -> Vec<u32> {
        let n = codes.len() / d;
        z.chunks(d)
            .map(|zv| {
                let mut best = f32::INFINITY;
                let mut arg = 0u32;
                for i in 0..n {
                    let dist: f32 = (0..d).map(|j| (zv[j] - codes[i * d + j]).powi(2)).sum();
                    if dist < best {
                        best = dist;
                        arg = i as u32;
                    }
                }
                arg
            })
            .collect()
    }

    #[test]
    fn nearest_neighbor_by_inspection() {
        let mut cb = cb_from(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let z = z3(&[0.9, 0.1], 1, 1, 2);
        let lb = quantize(&z, &mut cb, QuantizerGradMode::StraightThrough, 1.0).unwrap();
        assert_eq!(lb.indices_vec().unwrap(), vec![1]);
        assert_eq!(
            lb.quantized.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn equidistant_ties_break_to_lowest_index() {
        let mut cb = cb_from(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let z = z3(&[0.5, 0.0], 1, 1, 2);
        let lb = quantize(&z, &mut cb, QuantizerGradMode::StraightThrough, 1.0).unwrap();
        assert_eq!(lb.indices_vec().unwrap(), vec![0]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rng_from(17);
        let n = 32;
        let d = 8;
        let codes = normal_vec(&mut rng, n * d, 0.0, 1.0);
        let z = normal_vec(&mut rng, 64 * d, 0.0, 1.0);
        let mut cb =
            Codebook::from_tensor(Tensor::from_vec(codes.clone(), (n, d), &dev()).unwrap())
                .unwrap();
        let zt = z3(&z, 4, 16, d);
        let lb = quantize(&zt, &mut cb, QuantizerGradMode::StraightThrough, 1.0).unwrap();
        assert_eq!(lb.indices_vec().unwrap(), brute_force_indices(&z, &codes, d));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut cb = cb_from(&[&[0.0, 0.0]]);
        let z = z3(&[f32::NAN, 0.0], 1, 1, 2);
        assert!(matches!(
            quantize(&z, &mut cb, QuantizerGradMode::StraightThrough, 1.0),
            Err(Error::InvalidInput(_))
        ));
        let empty = Tensor::zeros((0, 1, 2), candle_core::DType::F32, &dev()).unwrap();
        assert!(quantize(&empty, &mut cb, QuantizerGradMode::StraightThrough, 1.0).is_err());
    }

    #[test]
    fn quantized_value_is_exactly_the_selected_codes_under_both_modes() {
        let mut rng = rng_from(3);
        let codes = normal_vec(&mut rng, 16 * 4, 0.0, 1.0);
        let z = normal_vec(&mut rng, 2 * 8 * 4, 0.0, 1.0);
        let zt = z3(&z, 2, 8, 4);
        let mut run = |mode| {
            let mut cb = Codebook::from_tensor(
                Tensor::from_vec(codes.clone(), (16, 4), &dev()).unwrap(),
            )
            .unwrap();
            let lb = quantize(&zt, &mut cb, mode, 1.0).unwrap();
            (
                lb.quantized.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                lb.codebook_values
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f32>()
                    .unwrap(),
                lb.indices_vec().unwrap(),
            )
        };
        let (q_st, raw_st, idx_st) = run(QuantizerGradMode::StraightThrough);
        let (q_rot, raw_rot, idx_rot) = run(QuantizerGradMode::RotationTrick);
        assert_eq!(idx_st, idx_rot);
        assert_eq!(q_st, raw_st, "pass-through must not change the value");
        assert_eq!(q_st, q_rot, "grad modes must agree bitwise on the forward value");
        assert_eq!(raw_st, raw_rot);
    }

    #[test]
    fn straight_through_jacobian_is_identity() {
        // Analytic gradient of sum(w * quantized) w.r.t. z must equal w; the
        // finite-difference reference on the surrogate path is exact because
        // the surrogate is linear in z.
        let mut rng = rng_from(9);
        let d = 4;
        let codes = normal_vec(&mut rng, 8 * d, 0.0, 1.0);
        let zv = normal_vec(&mut rng, 2 * 3 * d, 0.0, 1.0);
        let w = crate::rng::uniform_vec(&mut rng, 2 * 3 * d, 0.5, 1.5);
        let z = Var::from_tensor(&z3(&zv, 2, 3, d)).unwrap();
        let wt = z3(&w, 2, 3, d);
        let mut cb =
            Codebook::from_tensor(Tensor::from_vec(codes, (8, d), &dev()).unwrap()).unwrap();
        let lb = quantize(
            z.as_tensor(),
            &mut cb,
            QuantizerGradMode::StraightThrough,
            1.0,
        )
        .unwrap();
        let loss = lb.quantized.mul(&wt).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads
            .get(&z)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (gi, wi) in g.iter().zip(w.iter()) {
            assert!(
                (gi - wi).abs() <= 1e-4 * wi.abs().max(1.0),
                "grad {gi} vs expected {wi}"
            );
        }
    }

    #[test]
    fn rotation_trick_gradient_is_rotated() {
        let mut rng = rng_from(21);
        let d = 4;
        let codes = normal_vec(&mut rng, 8 * d, 0.0, 1.0);
        let zv = normal_vec(&mut rng, d, 0.0, 1.0);
        let w = crate::rng::uniform_vec(&mut rng, d, 0.5, 1.5);
        let z = Var::from_tensor(&z3(&zv, 1, 1, d)).unwrap();
        let mut cb =
            Codebook::from_tensor(Tensor::from_vec(codes.clone(), (8, d), &dev()).unwrap())
                .unwrap();
        let lb = quantize(z.as_tensor(), &mut cb, QuantizerGradMode::RotationTrick, 1.0).unwrap();
        let wt = z3(&w, 1, 1, d);
        let loss = lb.quantized.mul(&wt).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads
            .get(&z)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();

        // Reference: lambda * R^T w computed from the definition.
        let idx = lb.indices_vec().unwrap()[0] as usize;
        let q: Vec<f32> = codes[idx * d..(idx + 1) * d].to_vec();
        let nz = zv.iter().map(|v| v * v).sum::<f32>().sqrt();
        let nq = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        let xh: Vec<f32> = zv.iter().map(|v| v / nz).collect();
        let yh: Vec<f32> = q.iter().map(|v| v / nq).collect();
        let lambda = nq / nz;
        let denom = 1.0 + xh.iter().zip(&yh).map(|(a, b)| a * b).sum::<f32>();
        let s: Vec<f32> = xh.iter().zip(&yh).map(|(a, b)| a + b).collect();
        // R^T w = w + 2 xh (yh . w) - s (s . w) / denom
        let yw: f32 = yh.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sw: f32 = s.iter().zip(&w).map(|(a, b)| a * b).sum();
        let expect: Vec<f32> = (0..d)
            .map(|j| lambda * (w[j] + 2.0 * xh[j] * yw - s[j] * sw / denom))
            .collect();
        for (gi, ei) in g.iter().zip(expect.iter()) {
            assert!((gi - ei).abs() < 1e-4, "grad {gi} vs expected {ei}");
        }
    }

    #[test]
    fn posterior_single_code_is_certain() {
        let cb = cb_from(&[&[0.3, -0.2]]);
        let z = z3(&[0.5, 0.5], 1, 1, 2);
        let p = code_posterior(&z, &cb, 1.0).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0]);
    }

    #[test]
    fn posterior_equidistant_is_half_half() {
        let cb = cb_from(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let z = z3(&[0.5, 0.0], 1, 1, 2);
        let p = code_posterior(&z, &cb, 1.0).unwrap();
        let v = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((v[0] - 0.5).abs() < 1e-7 && (v[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn posterior_matches_scalar_oracle() {
        let mut rng = rng_from(5);
        let n = 8;
        let d = 3;
        let codes = normal_vec(&mut rng, n * d, 0.0, 1.0);
        let zv = normal_vec(&mut rng, 2 * 4 * d, 0.0, 1.0);
        let cb =
            Codebook::from_tensor(Tensor::from_vec(codes.clone(), (n, d), &dev()).unwrap())
                .unwrap();
        let temp = 0.7;
        let p = code_posterior(&z3(&zv, 2, 4, d), &cb, temp).unwrap();
        let got = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (tok, zt) in zv.chunks(d).enumerate() {
            let dists: Vec<f64> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| (zt[j] as f64 - codes[i * d + j] as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mx = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let exps: Vec<f64> = dists.iter().map(|&di| (-(di - mx) / temp).exp()).collect();
            let s: f64 = exps.iter().sum();
            for i in 0..n {
                let want = exps[i] / s;
                let have = got[tok * n + i] as f64;
                assert!((want - have).abs() < 1e-6, "tok {tok} code {i}: {have} vs {want}");
            }
        }
    }

    #[test]
    fn posterior_rejects_bad_temperature() {
        let cb = cb_from(&[&[0.0]]);
        let z = z3(&[0.0], 1, 1, 1);
        assert!(code_posterior(&z, &cb, 0.0).is_err());
        assert!(code_posterior(&z, &cb, -1.0).is_err());
    }

    #[test]
    fn entropy_single_code_is_zero() {
        let p = Tensor::from_vec(vec![1.0f32], (1, 1, 1), &dev()).unwrap();
        let e = entropy_loss(&p).unwrap().to_vec0::<f32>().unwrap();
        assert!(e.abs() < 1e-6);
    }

    #[test]
    fn entropy_uniform_row_cancels() {
        let p = Tensor::from_vec(vec![0.5f32, 0.5], (1, 1, 2), &dev()).unwrap();
        let e = entropy_loss(&p).unwrap().to_vec0::<f32>().unwrap();
        assert!(e.abs() < 1e-6);
    }

    #[test]
    fn entropy_distinct_one_hot_rows_hit_lower_bound() {
        // Hand computation: conditional entropy 0, marginal uniform over 2 -> -ln 2.
        let p = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 1.0], (2, 1, 2), &dev()).unwrap();
        let e = entropy_loss(&p).unwrap().to_vec0::<f32>().unwrap();
        assert!((e - (-(2f32).ln())).abs() < 1e-5, "got {e}");
    }

    #[test]
    fn entropy_rejects_degenerate_rows() {
        let p = Tensor::from_vec(vec![0.0f32, 0.0], (1, 1, 2), &dev()).unwrap();
        assert!(entropy_loss(&p).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences_through_logits() {
        // f64 end to end; central differences, h = 1e-5, rel tol 1e-3.
        let mut rng = rng_from(33);
        let rows = 3;
        let n = 5;
        let logits_v: Vec<f64> = normal_vec(&mut rng, rows * n, 0.0, 1.0)
            .into_iter()
            .map(|v| v as f64)
            .collect();
        let eval = |lv: &[f64]| -> f64 {
            let t = Tensor::from_vec(lv.to_vec(), (1, rows, n), &dev()).unwrap();
            let p = candle_nn::ops::softmax(&t, D::Minus1).unwrap();
            entropy_loss(&p).unwrap().to_vec0::<f64>().unwrap()
        };
        let var = Var::from_tensor(
            &Tensor::from_vec(logits_v.clone(), (1, rows, n), &dev()).unwrap(),
        )
        .unwrap();
        let p = candle_nn::ops::softmax(var.as_tensor(), D::Minus1).unwrap();
        let loss = entropy_loss(&p).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads
            .get(&var)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let h = 1e-5;
        for i in 0..rows * n {
            let mut plus = logits_v.clone();
            plus[i] += h;
            let mut minus = logits_v.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-4);
            assert!(
                (fd - g[i]).abs() / scale < 1e-3,
                "logit {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn vq_loss_zero_residual() {
        let z = z3(&[0.1, -0.4, 0.2, 0.9], 1, 2, 2);
        let l = vq_codebook_loss(&z, &z, 0.25).unwrap().to_vec0::<f32>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn vq_loss_closed_form() {
        let z = z3(&[1.0, 0.0], 1, 1, 2);
        let q = z3(&[0.0, 0.0], 1, 1, 2);
        let l = vq_codebook_loss(&z, &q, 0.25).unwrap().to_vec0::<f32>().unwrap();
        assert!((l - 1.25).abs() < 1e-7);
    }

    #[test]
    fn vq_loss_matches_scalar_oracle() {
        let mut rng = rng_from(8);
        let zv = normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0);
        let qv = normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0);
        let w = 0.25;
        let l = vq_codebook_loss(&z3(&zv, 2, 3, 4), &z3(&qv, 2, 3, 4), w)
            .unwrap()
            .to_vec0::<f32>()
            .unwrap();
        let mut acc = 0f64;
        for tok in 0..6 {
            let mut sq = 0f64;
            for j in 0..4 {
                let dd = (zv[tok * 4 + j] - qv[tok * 4 + j]) as f64;
                sq += dd * dd;
            }
            acc += sq * (1.0 + w);
        }
        let want = acc / 6.0;
        assert!((l as f64 - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn vq_loss_rejects_shape_mismatch() {
        let z = z3(&[0.0; 4], 1, 2, 2);
        let q = z3(&[0.0; 2], 1, 1, 2);
        assert!(vq_codebook_loss(&z, &q, 0.25).is_err());
    }

    #[test]
    fn vq_loss_gradients_split_between_codebook_and_encoder() {
        let z = Var::from_tensor(&z3(&[1.0, 0.0], 1, 1, 2)).unwrap();
        let q = Var::from_tensor(&z3(&[0.0, 0.0], 1, 1, 2)).unwrap();
        let l = vq_codebook_loss(z.as_tensor(), q.as_tensor(), 0.25).unwrap();
        let g = l.backward().unwrap();
        let gz = g.get(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let gq = g.get(&q).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // d/dz w*(z-q)^2 = 2w(z-q) = (0.5, 0); d/dq (q-z)^2 = 2(q-z) = (-2, 0)
        assert!((gz[0] - 0.5).abs() < 1e-6 && gz[1].abs() < 1e-6);
        assert!((gq[0] + 2.0).abs() < 1e-6 && gq[1].abs() < 1e-6);
    }

    #[test]
    fn usage_single_active_code() {
        let mut cb = cb_from(&[&[0.0]; 16].map(|r| r as &[f32]));
        cb.usage_mut().record(&vec![0u32; 100]);
        let u = codebook_usage(&cb, 100).unwrap();
        assert!((u - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn usage_full() {
        let mut cb = cb_from(&[&[0.0]; 4].map(|r| r as &[f32]));
        cb.usage_mut().record(&[0, 1, 2, 3]);
        assert_eq!(codebook_usage(&cb, 16).unwrap(), 1.0);
    }

    #[test]
    fn usage_matches_set_cardinality_oracle() {
        let mut rng = rng_from(77);
        let n = 32;
        let mut cb = Codebook::from_tensor(
            Tensor::zeros((n, 2), candle_core::DType::F32, &dev()).unwrap(),
        )
        .unwrap();
        let stream: Vec<u32> = (0..500)
            .map(|_| (rand::Rng::gen_range(&mut rng, 0..n)) as u32)
            .collect();
        cb.usage_mut().record(&stream);
        for window in [10usize, 100, 500, 1000] {
            let take = window.min(stream.len());
            let distinct: std::collections::HashSet<u32> =
                stream[stream.len() - take..].iter().copied().collect();
            let want = distinct.len() as f64 / n as f64;
            assert_eq!(codebook_usage(&cb, window).unwrap(), want);
        }
    }

    #[test]
    fn usage_rejects_without_observations() {
        let cb = cb_from(&[&[0.0]]);
        assert!(codebook_usage(&cb, 10).is_err());
        assert!(matches!(
            codebook_usage(&cb, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn usage_window_slides_and_roundtrips() {
        let mut w = UsageWindow::new(8, 4);
        w.record(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(w.contents(), vec![2, 3, 4, 5]);
        assert_eq!(w.counts()[0], 0);
        assert_eq!(w.counts()[5], 1);
        let restored = UsageWindow::restore(8, 4, &w.contents());
        assert_eq!(restored.contents(), w.contents());
        assert_eq!(restored.counts(), w.counts());
    }

    #[test]
    fn codebook_builder_init_is_bounded_and_deterministic() {
        let mk = || {
            let pb = ParamBuilder::new(rng_from(2), dev());
            let cb = Codebook::new(&pb.pp("codebook"), 16, 4).unwrap();
            cb.codes().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let a = mk();
        let b = mk();
        assert_eq!(a, b);
        let lim = 1.0 / 16.0;
        assert!(a.iter().all(|v| *v >= -lim && *v <= lim));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_quantize_matches_brute_force(seed in 0u64..1_000, n in 1usize..64, bt in 1usize..24) {
            let d = 4usize;
            let mut rng = rng_from(seed);
            let codes = normal_vec(&mut rng, n * d, 0.0, 1.0);
            let z = normal_vec(&mut rng, bt * d, 0.0, 1.0);
            let mut cb = Codebook::from_tensor(
                Tensor::from_vec(codes.clone(), (n, d), &dev()).unwrap(),
            ).unwrap();
            let lb = quantize(&z3(&z, 1, bt, d), &mut cb, QuantizerGradMode::StraightThrough, 1.0).unwrap();
            prop_assert_eq!(lb.indices_vec().unwrap(), brute_force_indices(&z, &codes, d));
        }

        #[test]
        fn prop_posterior_rows_sum_to_one(seed in 0u64..1_000, n in 1usize..32) {
            let d = 3usize;
            let mut rng = rng_from(seed);
            let codes = normal_vec(&mut rng, n * d, 0.0, 1.0);
            let z = normal_vec(&mut rng, 6 * d, 0.0, 1.0);
            let cb = Codebook::from_tensor(Tensor::from_vec(codes, (n, d), &dev()).unwrap()).unwrap();
            let p = code_posterior(&z3(&z, 2, 3, d), &cb, 1.0).unwrap();
            let sums = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn prop_entropy_loss_bounded_below(seed in 0u64..1_000, n in 1usize..16, rows in 1usize..8) {
            let mut rng = rng_from(seed);
            let raw = crate::rng::uniform_vec(&mut rng, rows * n, 0.01, 1.0);
            let mut p = Vec::with_capacity(rows * n);
            for r in 0..rows {
                let s: f32 = raw[r * n..(r + 1) * n].iter().sum();
                p.extend(raw[r * n..(r + 1) * n].iter().map(|v| v / s));
            }
            let t = Tensor::from_vec(p, (1, rows, n), &dev()).unwrap();
            let e = entropy_loss(&t).unwrap().to_vec0::<f32>().unwrap();
            prop_assert!(e >= -((n as f32).ln()) - 1e-5);
        }

        #[test]
        fn prop_cold_posterior_concentrates_on_quantize_index(seed in 0u64..500) {
            let d = 4usize;
            let n = 12usize;
            let mut rng = rng_from(seed);
            let codes = normal_vec(&mut rng, n * d, 0.0, 1.0);
            let z = normal_vec(&mut rng, 5 * d, 0.0, 1.0);
            let mut cb = Codebook::from_tensor(
                Tensor::from_vec(codes, (n, d), &dev()).unwrap(),
            ).unwrap();
            let zt = z3(&z, 1, 5, d);
            let lb = quantize(&zt, &mut cb, QuantizerGradMode::StraightThrough, 1.0).unwrap();
            let cold = code_posterior(&zt, &cb, 1e-3).unwrap();
            let am = cold.argmax(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<u32>().unwrap();
            prop_assert_eq!(am, lb.indices_vec().unwrap());
        }
    }
}
