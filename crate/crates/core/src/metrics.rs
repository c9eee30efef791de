//! Desk-scale reconstruction and generation metrics: PSNR/SSIM, a Fréchet
//! distance over pluggable feature extractors standing in for FID, and the
//! joint-PCA latent visualization.

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector};

use crate::rng::derived_rng;
use crate::{Error, Result};

/// PSNR in dB for images in [0, 1]; identical inputs report the 100 dB cap.
pub fn psnr(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.dims() != xhat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            x.dims(),
            xhat.dims()
        )));
    }
    let a = to_f64(x)?;
    let b = to_f64(xhat)?;
    let mse: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Mean SSIM over valid 11x11 Gaussian windows, channels, and batch, for
/// images (b, c, h, w) in [0, 1].
pub fn ssim(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.dims() != xhat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            x.dims(),
            xhat.dims()
        )));
    }
    let (b, c, h, w) = x.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let xs = to_f64(x)?;
    let ys = to_f64(xhat)?;
    let k = gaussian_kernel();
    let mut total = 0f64;
    let mut count = 0usize;
    let plane = h * w;
    for img in 0..b * c {
        let xa = &xs[img * plane..(img + 1) * plane];
        let ya = &ys[img * plane..(img + 1) * plane];
        // Separable Gaussian filtering of the five moment maps.
        let filt = |vals: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let mut rows = vec![0f64; (h) * (w - SSIM_WINDOW + 1)];
            for r in 0..h {
                for cc in 0..w - SSIM_WINDOW + 1 {
                    let mut acc = 0f64;
                    for t in 0..SSIM_WINDOW {
                        acc += k[t] * vals(r * w + cc + t);
                    }
                    rows[r * (w - SSIM_WINDOW + 1) + cc] = acc;
                }
            }
            let ww = w - SSIM_WINDOW + 1;
            let mut out = vec![0f64; (h - SSIM_WINDOW + 1) * ww];
            for r in 0..h - SSIM_WINDOW + 1 {
                for cc in 0..ww {
                    let mut acc = 0f64;
                    for t in 0..SSIM_WINDOW {
                        acc += k[t] * rows[(r + t) * ww + cc];
                    }
                    out[r * ww + cc] = acc;
                }
            }
            out
        };
        let mu_x = filt(&|i| xa[i]);
        let mu_y = filt(&|i| ya[i]);
        let xx = filt(&|i| xa[i] * xa[i]);
        let yy = filt(&|i| ya[i] * ya[i]);
        let xy = filt(&|i| xa[i] * ya[i]);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            let v = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?)
}

/// Mean and (symmetrized) covariance of one feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Unbiased covariance from rows of `feats` (n x f); optional ridge
    /// shrinkage stabilizes rank-deficient sample sets.
    pub fn from_features(feats: &[Vec<f64>], shrinkage: Option<f64>) -> Result<Self> {
        let n = feats.len();
        if n < 2 {
            return Err(Error::InvalidInput(
                "gaussian stats require at least 2 samples".into(),
            ));
        }
        let f = feats[0].len();
        let mut mean = DVector::zeros(f);
        for row in feats {
            if row.len() != f {
                return Err(Error::ShapeMismatch("ragged feature rows".into()));
            }
            for (i, v) in row.iter().enumerate() {
                mean[i] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(f, f);
        for row in feats {
            let d = DVector::from_row_slice(row) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        if let Some(eps) = shrinkage {
            for i in 0..f {
                cov[(i, i)] += eps;
            }
        }
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frechet_distance: dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    // tr((cov_a cov_b)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}) for PSD inputs.
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Frozen map from images to feature vectors for the FID proxy.
pub trait FeatureExtractor {
    /// (b, 3, h, w) images to (b, f) features.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
    fn dim(&self) -> usize;
    fn id(&self) -> &str;
}

/// Default desk extractor: frozen seed-pinned convs with global mean pooling.
pub struct FrozenRandomExtractor {
    weights: Vec<Tensor>,
    id: String,
}

impl FrozenRandomExtractor {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "fid-extractor", 0);
        let dev = candle_core::Device::Cpu;
        let plan = [(3usize, 32usize), (32, 48), (48, Self::DIM)];
        let mut weights = Vec::new();
        for (c_in, c_out) in plan {
            let std = (2.0 / (c_in * 9) as f32).sqrt();
            weights.push(crate::rng::randn_tensor(
                &mut rng,
                &[c_out, c_in, 3, 3],
                0.0,
                std,
                &dev,
            )?);
        }
        Ok(FrozenRandomExtractor {
            weights,
            id: format!("frozen-fid-{seed}"),
        })
    }
}

impl FeatureExtractor for FrozenRandomExtractor {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.detach();
        for w in &self.weights {
            x = x.conv2d(w, 1, 2, 1, 1)?.silu()?;
        }
        let (b, c, h, w) = x.dims4()?;
        Ok(x.reshape((b, c, h * w))?.mean(2)?)
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FidOptions {
    /// Add 1e-6 to covariance diagonals when a side has too few samples for
    /// a full-rank covariance.
    pub shrinkage: bool,
}

impl Default for FidOptions {
    fn default() -> Self {
        FidOptions { shrinkage: true }
    }
}

fn feature_rows(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let f = extractor.features(images)?;
    let (n, d) = f.dims2()?;
    let flat = to_f64(&f)?;
    Ok((0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect())
}

/// Fréchet distance between extractor-feature Gaussians of two image sets.
pub fn fid_proxy(
    real: &Tensor,
    generated: &Tensor,
    extractor: &dyn FeatureExtractor,
    options: FidOptions,
) -> Result<f64> {
    let fr = feature_rows(real, extractor)?;
    let fg = feature_rows(generated, extractor)?;
    let f = extractor.dim();
    let stats = |rows: &[Vec<f64>]| -> Result<GaussianStats> {
        let needs = rows.len() < f + 1;
        if needs && !options.shrinkage {
            return Err(Error::InvalidInput(format!(
                "fid_proxy: {} samples cannot produce a full-rank {f}-dim covariance and shrinkage is disabled",
                rows.len()
            )));
        }
        GaussianStats::from_features(rows, needs.then_some(1e-6))
    };
    frechet_distance(&stats(&fr)?, &stats(&fg)?)
}

/// PCA latent maps for a group of images' decoder features.
pub struct PcaVisualization {
    /// One RGB map per image, components 1-3 on the R/G/B channels.
    pub maps: Vec<image::RgbImage>,
    /// Number of usable principal components (< 3 for rank-deficient sets).
    pub components_used: usize,
    /// The principal axes, one vector per used component.
    pub axes: Vec<Vec<f64>>,
}

/// Fit PCA jointly across all tokens of all images and render the first
/// three components as RGB. Components are min-max normalized over the whole
/// group; the largest-magnitude loading of each axis is made positive.
pub fn pca_visualize(features: &Tensor, upscale: usize) -> Result<PcaVisualization> {
    let (b, t, w) = features.dims3().map_err(|_| {
        Error::ShapeMismatch("pca_visualize expects features of shape (b, t, w)".into())
    })?;
    if b < 4 {
        return Err(Error::InvalidInput(format!(
            "pca_visualize requires at least 4 images, got {b}"
        )));
    }
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return Err(Error::InvalidInput(format!(
            "pca_visualize: {t} tokens form no square grid"
        )));
    }
    let rows = to_f64(features)?;
    let n = b * t;
    let mut mean = vec![0f64; w];
    for r in 0..n {
        for j in 0..w {
            mean[j] += rows[r * w + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(w, w);
    for r in 0..n {
        let d = DVector::from_iterator(w, (0..w).map(|j| rows[r * w + j] - mean[j]));
        cov += &d * d.transpose();
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = lmax * 1e-10;
    let components_used = order
        .iter()
        .take(3)
        .filter(|&&i| eig.eigenvalues[i] > rank_tol && eig.eigenvalues[i] > 0.0)
        .count();

    let mut axes = Vec::with_capacity(components_used);
    for &i in order.iter().take(components_used) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if axis[lead] < 0.0 {
            for v in &mut axis {
                *v = -*v;
            }
        }
        axes.push(axis);
    }

    // Project and min-max normalize jointly over the group.
    let mut proj = vec![0f64; n * 3];
    for (c, axis) in axes.iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..n {
            let mut acc = 0f64;
            for j in 0..w {
                acc += (rows[r * w + j] - mean[j]) * axis[j];
            }
            proj[r * 3 + c] = acc;
            lo = lo.min(acc);
            hi = hi.max(acc);
        }
        let span = (hi - lo).max(1e-12);
        for r in 0..n {
            proj[r * 3 + c] = (proj[r * 3 + c] - lo) / span;
        }
    }

    let scale = upscale.max(1);
    let side = (g * scale) as u32;
    let mut maps = Vec::with_capacity(b);
    for img in 0..b {
        let mut out = image::RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let token = (y as usize / scale) * g + (x as usize / scale);
                let base = (img * t + token) * 3;
                let px = |c: usize| {
                    if c < components_used {
                        (proj[base + c] * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                };
                out.put_pixel(x, y, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        maps.push(out);
    }
    Ok(PcaVisualization {
        maps,
        components_used,
        axes,
    })
}
