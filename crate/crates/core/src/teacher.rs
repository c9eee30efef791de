//! Frozen semantic teachers, the trainable projector, and the alignment
//! (semantic regularization) loss, plus the on-disk feature archive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{backprop::GradStore, Tensor, D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layers::Linear;
use crate::params::ParamBuilder;
use crate::rng::derived_rng;
use crate::{Error, Result};

const COSINE_EPS: f64 = 1e-8;

/// Where teacher features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    PrecomputedFile,
    FrozenRandom,
    ExternalEncoder,
}

/// Per-patch teacher features, (b, t_t, c_t), with the teacher's grid shape.
pub struct TeacherFeatures {
    pub values: Tensor,
    pub source: TeacherSource,
    /// Spatial layout of the t_t tokens; `None` means "infer a square grid".
    pub grid: Option<(usize, usize)>,
}

impl TeacherFeatures {
    pub fn new(values: Tensor, source: TeacherSource, grid: Option<(usize, usize)>) -> Result<Self> {
        let (_, tt, _) = values.dims3().map_err(|_| {
            Error::ShapeMismatch("teacher features must be (b, t_t, c_t)".into())
        })?;
        if let Some((h, w)) = grid {
            if h * w != tt {
                return Err(Error::ShapeMismatch(format!(
                    "teacher grid {h}x{w} does not hold {tt} tokens"
                )));
            }
        }
        Ok(TeacherFeatures {
            values,
            source,
            grid,
        })
    }

    fn grid_dims(&self) -> Result<(usize, usize)> {
        if let Some(g) = self.grid {
            return Ok(g);
        }
        let tt = self.values.dim(1)?;
        let side = (tt as f64).sqrt().round() as usize;
        if side * side != tt {
            return Err(Error::InvalidInput(format!(
                "teacher features with {tt} tokens form no square grid and carry no shape metadata"
            )));
        }
        Ok((side, side))
    }
}

/// Frozen seed-pinned conv teacher. Weights are plain tensors (never
/// variables), so the autodiff graph cannot assign them gradients; the first
/// conv carries no bias so a zero image has zero pre-activation.
pub struct FrozenRandomTeacher {
    weights: Vec<(Tensor, usize)>,
    channels: usize,
    id: String,
}

impl FrozenRandomTeacher {
    pub const CHANNELS: usize = 64;

    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "frozen-teacher", 0);
        let dev = candle_core::Device::Cpu;
        let plan = [(3usize, 32usize), (32, 64), (64, Self::CHANNELS)];
        let mut weights = Vec::new();
        for (c_in, c_out) in plan {
            let std = (2.0 / (c_in * 9) as f32).sqrt();
            let w = crate::rng::randn_tensor(&mut rng, &[c_out, c_in, 3, 3], 0.0, std, &dev)?;
            weights.push((w, 2usize));
        }
        Ok(FrozenRandomTeacher {
            weights,
            channels: Self::CHANNELS,
            id: format!("frozen-random-{seed}"),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid side produced for a given image size (three stride-2 convs).
    pub fn grid_side(&self, image_size: usize) -> usize {
        image_size / 8
    }

    /// First-layer pre-activation, exposed for the linearity contract.
    pub fn stem_preactivation(&self, images: &Tensor) -> Result<Tensor> {
        let (w, stride) = &self.weights[0];
        Ok(images.conv2d(w, 1, *stride, 1, 1)?)
    }

    /// (b, 3, s, s) images to (b, (s/8)^2, c_t) patch features.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.detach();
        for (i, (w, stride)) in self.weights.iter().enumerate() {
            x = x.conv2d(w, 1, *stride, 1, 1)?;
            if i + 1 < self.weights.len() {
                x = x.silu()?;
            }
        }
        let (b, c, h, w) = x.dims4()?;
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b, h * w, c))?)
    }

    /// Confirm the autodiff graph assigned no gradient to teacher weights.
    pub fn assert_frozen(&self, grads: &GradStore) -> Result<()> {
        for (w, _) in &self.weights {
            if grads.get_id(w.id()).is_some() {
                return Err(Error::msg(
                    "frozen teacher received a gradient; the teacher must stay frozen",
                ));
            }
        }
        Ok(())
    }
}

/// Two-layer feed-forward projector from decoder width to teacher channels.
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
    out_dim: usize,
}

impl Projector {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let hidden = in_dim * 2;
        Ok(Projector {
            fc1: Linear::new(&pb.pp("fc1"), in_dim, hidden, true)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, out_dim, true)?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Semantic-regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemRegConfig {
    /// Regularization strength lambda.
    pub weight: f64,
    /// Decoder transformer layer whose output is aligned (1-indexed).
    pub align_layer: usize,
    pub teacher: TeacherSource,
    pub teacher_seed: u64,
}

impl Default for SemRegConfig {
    fn default() -> Self {
        SemRegConfig {
            weight: 0.5,
            align_layer: 3,
            teacher: TeacherSource::FrozenRandom,
            teacher_seed: 0,
        }
    }
}

impl SemRegConfig {
    pub fn validate(&self, decoder_depth: usize) -> Result<()> {
        if self.align_layer == 0 || self.align_layer > decoder_depth {
            return Err(Error::InvalidConfig(format!(
                "align_layer must satisfy 1 <= l <= decoder depth ({decoder_depth}), got {}",
                self.align_layer
            )));
        }
        if self.weight < 0.0 {
            return Err(Error::InvalidConfig(
                "semantic regularization weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Resample teacher features onto the decoder token grid.
///
/// Both feature sets are laid out as square grids (teacher grids may be
/// rectangular when shape metadata says so); the teacher grid is bilinearly
/// sampled at the decoder grid's cell centers, tokens ordered row-major.
pub fn align_grids(dec_feat: &Tensor, teacher: &TeacherFeatures) -> Result<Tensor> {
    let (_, t, _) = dec_feat.dims3().map_err(|_| {
        Error::ShapeMismatch("align_grids: decoder features must be (b, t, w)".into())
    })?;
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return Err(Error::InvalidInput(format!(
            "decoder features with {t} tokens form no square grid"
        )));
    }
    let (th, tw) = teacher.grid_dims()?;
    let weights = bilinear_weights(g, g, th, tw);
    let m = Tensor::from_vec(weights, (g * g, th * tw), dec_feat.device())?
        .to_dtype(teacher.values.dtype())?
        .unsqueeze(0)?;
    Ok(m.broadcast_matmul(&teacher.values)?)
}

/// Row-stochastic matrix taking a (sh, sw) grid to (dh, dw) by bilinear
/// interpolation at destination cell centers, borders clamped.
fn bilinear_weights(dh: usize, dw: usize, sh: usize, sw: usize) -> Vec<f32> {
    let mut m = vec![0f32; dh * dw * sh * sw];
    for oy in 0..dh {
        for ox in 0..dw {
            let sy = ((oy as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
            let sx = ((ox as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fy = (sy - y0 as f64) as f32;
            let fx = (sx - x0 as f64) as f32;
            let row = (oy * dw + ox) * sh * sw;
            m[row + y0 * sw + x0] += (1.0 - fy) * (1.0 - fx);
            m[row + y0 * sw + x1] += (1.0 - fy) * fx;
            m[row + y1 * sw + x0] += fy * (1.0 - fx);
            m[row + y1 * sw + x1] += fy * fx;
        }
    }
    m
}

/// Mean negative cosine similarity between paired token features; the loss
/// decreases as alignment rises. Zero-norm vectors are epsilon-guarded.
pub fn cosine_alignment_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_alignment_loss: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dot = a.mul(b)?.sum(D::Minus1)?;
    let na = a
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .clamp(COSINE_EPS, f64::INFINITY)?;
    let nb = b
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .clamp(COSINE_EPS, f64::INFINITY)?;
    Ok(dot.div(&na.mul(&nb)?)?.mean_all()?.neg()?)
}

/// Eq.-style alignment: project decoder features to the teacher's channel
/// dimension, then take the mean negative cosine against (resampled,
/// gradient-stopped) teacher features.
pub fn semantic_reg_loss(
    dec_feat: &Tensor,
    teacher: &TeacherFeatures,
    projector: &Projector,
) -> Result<Tensor> {
    let aligned_teacher = align_grids(dec_feat, teacher)?.detach();
    let projected = projector.forward(dec_feat)?;
    if projected.dim(2)? != aligned_teacher.dim(2)? {
        return Err(Error::ShapeMismatch(format!(
            "projector output dim {} vs teacher channels {}",
            projected.dim(2)?,
            aligned_teacher.dim(2)?
        )));
    }
    cosine_alignment_loss(&projected, &aligned_teacher)
}

// ---------------------------------------------------------------------------
// Feature archive
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 4] = b"GTKF";
const ARCHIVE_VERSION: u32 = 1;

/// On-disk archive of per-image teacher features keyed by string id.
pub struct FeatureArchive {
    pub teacher_id: String,
    pub channels: usize,
    pub grid: (usize, usize),
    records: BTreeMap<String, Vec<f32>>,
}

impl FeatureArchive {
    pub fn new(teacher_id: &str, channels: usize, grid: (usize, usize)) -> Self {
        FeatureArchive {
            teacher_id: teacher_id.to_string(),
            channels,
            grid,
            records: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, id: &str, features: Vec<f32>) -> Result<()> {
        let want = self.grid.0 * self.grid.1 * self.channels;
        if features.len() != want {
            return Err(Error::Archive(format!(
                "record '{id}' has {} values, expected {want}",
                features.len()
            )));
        }
        self.records.insert(id.to_string(), features);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.records
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Archive(format!("missing id '{id}' in feature archive")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.write_u64::<LittleEndian>(self.records.len() as u64)
            .unwrap();
        for (id, vals) in &self.records {
            buf.write_u32::<LittleEndian>(id.len() as u32).unwrap();
            buf.extend_from_slice(id.as_bytes());
            for v in vals {
                buf.write_f32::<LittleEndian>(*v).unwrap();
            }
        }
        buf
    }

    /// Serialize with an atomic replace of the destination file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let payload = self.payload_bytes();
        let checksum = Sha256::digest(&payload);
        let mut buf = Vec::new();
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.write_u32::<LittleEndian>(ARCHIVE_VERSION).unwrap();
        buf.write_u32::<LittleEndian>(self.channels as u32).unwrap();
        buf.write_u32::<LittleEndian>(self.grid.0 as u32).unwrap();
        buf.write_u32::<LittleEndian>(self.grid.1 as u32).unwrap();
        buf.write_u32::<LittleEndian>(self.teacher_id.len() as u32)
            .unwrap();
        buf.extend_from_slice(self.teacher_id.as_bytes());
        buf.extend_from_slice(&checksum);
        buf.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Archive("bad magic; not a feature archive".into()));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let channels = f.read_u32::<LittleEndian>()? as usize;
        let gh = f.read_u32::<LittleEndian>()? as usize;
        let gw = f.read_u32::<LittleEndian>()? as usize;
        let id_len = f.read_u32::<LittleEndian>()? as usize;
        let mut id_bytes = vec![0u8; id_len];
        f.read_exact(&mut id_bytes)?;
        let teacher_id = String::from_utf8(id_bytes)
            .map_err(|_| Error::Archive("teacher id is not utf-8".into()))?;
        let mut checksum = [0u8; 32];
        f.read_exact(&mut checksum)?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        let got = Sha256::digest(&payload);
        if got.as_slice() != checksum {
            return Err(Error::Archive("checksum mismatch in archive header".into()));
        }
        let mut cur = std::io::Cursor::new(payload);
        let count = cur.read_u64::<LittleEndian>()?;
        let mut records = BTreeMap::new();
        let per = gh * gw * channels;
        for _ in 0..count {
            let n = cur.read_u32::<LittleEndian>()? as usize;
            let mut idb = vec![0u8; n];
            cur.read_exact(&mut idb)?;
            let id = String::from_utf8(idb)
                .map_err(|_| Error::Archive("record id is not utf-8".into()))?;
            let mut vals = Vec::with_capacity(per);
            for _ in 0..per {
                vals.push(cur.read_f32::<LittleEndian>()?);
            }
            records.insert(id, vals);
        }
        Ok(FeatureArchive {
            teacher_id,
            channels,
            grid: (gh, gw),
            records,
        })
    }
}

/// Resolves teacher features for batches of images, caching to disk.
pub struct TeacherProvider {
    teacher: Option<FrozenRandomTeacher>,
    archive: FeatureArchive,
    cache_path: Option<PathBuf>,
    dirty: bool,
    source: TeacherSource,
}

impl TeacherProvider {
    pub fn frozen_random(seed: u64, image_size: usize) -> Result<Self> {
        let teacher = FrozenRandomTeacher::new(seed)?;
        let side = teacher.grid_side(image_size);
        let archive = FeatureArchive::new(teacher.id(), teacher.channels(), (side, side));
        Ok(TeacherProvider {
            teacher: Some(teacher),
            archive,
            cache_path: None,
            dirty: false,
            source: TeacherSource::FrozenRandom,
        })
    }

    /// Attach a disk cache; loads an existing archive when compatible.
    pub fn with_cache(mut self, path: PathBuf) -> Result<Self> {
        if path.exists() {
            let loaded = FeatureArchive::read(&path)?;
            if loaded.teacher_id == self.archive.teacher_id
                && loaded.channels == self.archive.channels
                && loaded.grid == self.archive.grid
            {
                self.archive = loaded;
            }
        }
        self.cache_path = Some(path);
        Ok(self)
    }

    pub fn precomputed(path: &Path) -> Result<Self> {
        let archive = FeatureArchive::read(path)?;
        Ok(TeacherProvider {
            teacher: None,
            archive,
            cache_path: None,
            dirty: false,
            source: TeacherSource::PrecomputedFile,
        })
    }

    pub fn channels(&self) -> usize {
        self.archive.channels
    }

    pub fn teacher(&self) -> Option<&FrozenRandomTeacher> {
        self.teacher.as_ref()
    }

    /// Deterministic features for the given image ids; computes and caches
    /// misses when a frozen teacher is present, errors on misses otherwise.
    pub fn fetch(&mut self, ids: &[String], images: &Tensor) -> Result<TeacherFeatures> {
        let (b, _, _, _) = images.dims4()?;
        if b != ids.len() {
            return Err(Error::InvalidInput(format!(
                "fetch: {} ids for a batch of {b}",
                ids.len()
            )));
        }
        let missing: Vec<usize> = (0..b).filter(|i| !self.archive.contains(&ids[*i])).collect();
        if !missing.is_empty() {
            let teacher = self.teacher.as_ref().ok_or_else(|| {
                Error::Archive(format!("missing id '{}' in feature archive", ids[missing[0]]))
            })?;
            let feats = teacher.encode(images)?;
            for &i in &missing {
                let row = feats.narrow(0, i, 1)?.flatten_all()?.to_vec1::<f32>()?;
                self.archive.insert(&ids[i], row)?;
            }
            self.dirty = true;
        }
        let per = self.archive.grid.0 * self.archive.grid.1 * self.archive.channels;
        let mut data = Vec::with_capacity(b * per);
        for id in ids {
            data.extend_from_slice(self.archive.get(id)?);
        }
        let values = Tensor::from_vec(
            data,
            (b, self.archive.grid.0 * self.archive.grid.1, self.archive.channels),
            images.device(),
        )?;
        TeacherFeatures::new(values, self.source, Some(self.archive.grid))
    }

    /// Write newly computed features to the disk cache, atomically.
    pub fn flush(&mut self) -> Result<()> {
        if self.dirty {
            if let Some(path) = &self.cache_path {
                self.archive.write(path)?;
            }
            self.dirty = false;
        }
        Ok(())
    }

    pub fn assert_frozen(&self, grads: &GradStore) -> Result<()> {
        if let Some(t) = &self.teacher {
            t.assert_frozen(grads)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from, uniform_vec};
    use candle_core::{Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn timg(seed: u64, b: usize, s: usize) -> Tensor {
        Tensor::from_vec(
            uniform_vec(&mut rng_from(seed), b * 3 * s * s, -1.0, 1.0),
            (b, 3, s, s),
            &dev(),
        )
        .unwrap()
    }

    #[test]
    fn frozen_teacher_is_deterministic() {
        let t1 = FrozenRandomTeacher::new(3).unwrap();
        let t2 = FrozenRandomTeacher::new(3).unwrap();
        let img = timg(1, 2, 32);
        let a = t1.encode(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = t2.encode(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(t1.encode(&img).unwrap().dims(), &[2, 16, 64]);
    }

    #[test]
    fn zero_image_has_zero_stem_preactivation() {
        let t = FrozenRandomTeacher::new(4).unwrap();
        let img = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &dev()).unwrap();
        let pre = t.stem_preactivation(&img).unwrap();
        assert_eq!(
            pre.abs().unwrap().sum_all().unwrap().to_vec0::<f32>().unwrap(),
            0.0
        );
    }

    #[test]
    fn archive_roundtrip_is_bit_identical() {
        let dir = std::env::temp_dir().join(format!("vistok-arch-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.gtkf");
        let mut arch = FeatureArchive::new("teach-1", 2, (2, 2));
        arch.insert("img-b", normal_vec(&mut rng_from(5), 8, 0.0, 1.0)).unwrap();
        arch.insert("img-a", normal_vec(&mut rng_from(6), 8, 0.0, 1.0)).unwrap();
        arch.write(&path).unwrap();
        let back = FeatureArchive::read(&path).unwrap();
        assert_eq!(back.teacher_id, "teach-1");
        assert_eq!(back.grid, (2, 2));
        for id in ["img-a", "img-b"] {
            let a: Vec<u32> = arch.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        // Writing the re-read archive reproduces the same bytes.
        let path2 = dir.join("g.gtkf");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn archive_detects_corruption_and_missing_ids() {
        let dir = std::env::temp_dir().join(format!("vistok-arch2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.gtkf");
        let mut arch = FeatureArchive::new("t", 1, (1, 2));
        arch.insert("x", vec![1.0, 2.0]).unwrap();
        arch.write(&path).unwrap();
        assert!(arch.get("y").is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = FeatureArchive::read(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn align_equal_grids_is_identity() {
        let vals = normal_vec(&mut rng_from(7), 2 * 16 * 5, 0.0, 1.0);
        let tf = TeacherFeatures::new(
            Tensor::from_vec(vals.clone(), (2, 16, 5), &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let dec = Tensor::zeros((2, 16, 7), candle_core::DType::F32, &dev()).unwrap();
        let out = align_grids(&dec, &tf).unwrap();
        let got = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (g, w) in got.iter().zip(vals.iter()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn align_4x4_to_2x2_matches_bilinear_oracle() {
        let vals = normal_vec(&mut rng_from(8), 16, 0.0, 1.0);
        let tf = TeacherFeatures::new(
            Tensor::from_vec(vals.clone(), (1, 16, 1), &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let dec = Tensor::zeros((1, 4, 3), candle_core::DType::F32, &dev()).unwrap();
        let out = align_grids(&dec, &tf).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Destination cell centers land at source coordinate 0.5 / 2.5 on
        // each axis: the average of the corresponding 2x2 source block.
        let cell = |r: usize, c: usize| vals[r * 4 + c];
        let want = [
            (cell(0, 0) + cell(0, 1) + cell(1, 0) + cell(1, 1)) / 4.0,
            (cell(0, 2) + cell(0, 3) + cell(1, 2) + cell(1, 3)) / 4.0,
            (cell(2, 0) + cell(2, 1) + cell(3, 0) + cell(3, 1)) / 4.0,
            (cell(2, 2) + cell(2, 3) + cell(3, 2) + cell(3, 3)) / 4.0,
        ];
        for (g, w) in out.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn align_preserves_constants() {
        let tf = TeacherFeatures::new(
            Tensor::from_vec(vec![0.42f32; 64], (1, 64, 1), &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let dec = Tensor::zeros((1, 16, 2), candle_core::DType::F32, &dev()).unwrap();
        let out = align_grids(&dec, &tf).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|v| (v - 0.42).abs() < 1e-6));
    }

    #[test]
    fn align_rejects_non_square_teacher_without_metadata() {
        let tf = TeacherFeatures::new(
            Tensor::zeros((1, 12, 1), candle_core::DType::F32, &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let dec = Tensor::zeros((1, 16, 2), candle_core::DType::F32, &dev()).unwrap();
        assert!(align_grids(&dec, &tf).is_err());
        // Same token count with explicit metadata works.
        let tf = TeacherFeatures::new(
            Tensor::zeros((1, 12, 1), candle_core::DType::F32, &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            Some((3, 4)),
        )
        .unwrap();
        align_grids(&dec, &tf).unwrap();
    }

    fn proj(seed: u64, d_in: usize, d_out: usize) -> Projector {
        let pb = ParamBuilder::new(rng_from(seed), dev());
        Projector::new(&pb.pp("proj"), d_in, d_out).unwrap()
    }

    #[test]
    fn cosine_loss_parallel_orthogonal() {
        let a = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 2.0], (1, 2, 2), &dev()).unwrap();
        let b = (&a * 3.5).unwrap();
        let l = crate::losses::scalar_value(&cosine_alignment_loss(&a, &b).unwrap()).unwrap();
        assert!((l + 1.0).abs() < 1e-6);
        let c = Tensor::from_vec(vec![0.0f32, 1.0, -2.0, 0.0], (1, 2, 2), &dev()).unwrap();
        let l = crate::losses::scalar_value(&cosine_alignment_loss(&a, &c).unwrap()).unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn cosine_loss_matches_per_token_oracle() {
        let av = normal_vec(&mut rng_from(9), 2 * 4 * 3, 0.0, 1.0);
        let bv = normal_vec(&mut rng_from(10), 2 * 4 * 3, 0.0, 1.0);
        let a = Tensor::from_vec(av.clone(), (2, 4, 3), &dev()).unwrap();
        let b = Tensor::from_vec(bv.clone(), (2, 4, 3), &dev()).unwrap();
        let l = crate::losses::scalar_value(&cosine_alignment_loss(&a, &b).unwrap()).unwrap();
        let mut acc = 0f64;
        for t in 0..8 {
            let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
            for j in 0..3 {
                let x = av[t * 3 + j] as f64;
                let y = bv[t * 3 + j] as f64;
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            acc += dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8));
        }
        let want = -acc / 8.0;
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn cosine_loss_scale_invariance_and_zero_guard() {
        let av = normal_vec(&mut rng_from(11), 6, 0.0, 1.0);
        let bv = normal_vec(&mut rng_from(12), 6, 0.0, 1.0);
        let a = Tensor::from_vec(av, (1, 2, 3), &dev()).unwrap();
        let b = Tensor::from_vec(bv, (1, 2, 3), &dev()).unwrap();
        let base = crate::losses::scalar_value(&cosine_alignment_loss(&a, &b).unwrap()).unwrap();
        let scaled = crate::losses::scalar_value(
            &cosine_alignment_loss(&(&a * 3.0).unwrap(), &(&b * 0.2).unwrap()).unwrap(),
        )
        .unwrap();
        assert!((base - scaled).abs() < 1e-6);

        let z = Tensor::zeros((1, 2, 3), candle_core::DType::F32, &dev()).unwrap();
        let l = crate::losses::scalar_value(&cosine_alignment_loss(&z, &b).unwrap()).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn semantic_reg_loss_range_and_projector_direction() {
        let p = proj(13, 8, 64);
        let dec = Tensor::from_vec(normal_vec(&mut rng_from(14), 2 * 16 * 8, 0.0, 1.0), (2, 16, 8), &dev()).unwrap();
        let teacher = TeacherFeatures::new(
            Tensor::from_vec(normal_vec(&mut rng_from(15), 2 * 16 * 64, 0.0, 1.0), (2, 16, 64), &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let l = crate::losses::scalar_value(&semantic_reg_loss(&dec, &teacher, &p).unwrap()).unwrap();
        assert!((-1.0..=1.0).contains(&l));
        // Wrong projector output dimension is rejected.
        let bad = proj(16, 8, 32);
        assert!(semantic_reg_loss(&dec, &teacher, &bad).is_err());
    }

    #[test]
    fn semantic_reg_gradient_matches_finite_differences() {
        let p = proj(17, 4, 6);
        let teacher = TeacherFeatures::new(
            Tensor::from_vec(normal_vec(&mut rng_from(18), 4 * 6, 0.0, 1.0), (1, 4, 6), &dev()).unwrap(),
            TeacherSource::FrozenRandom,
            None,
        )
        .unwrap();
        let base = normal_vec(&mut rng_from(19), 4 * 4, 0.0, 1.0);
        let eval = |v: &[f32]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), (1, 4, 4), &dev()).unwrap();
            crate::losses::scalar_value(&semantic_reg_loss(&t, &teacher, &p).unwrap()).unwrap()
        };
        let var = Var::from_tensor(&Tensor::from_vec(base.clone(), (1, 4, 4), &dev()).unwrap()).unwrap();
        let loss = semantic_reg_loss(var.as_tensor(), &teacher, &p).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let h = 1e-3f32;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let scale = fd.abs().max(g[i].abs() as f64).max(1e-2);
            assert!(
                ((g[i] as f64) - fd).abs() / scale < 1e-3,
                "elem {i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn teacher_gets_no_gradient_from_the_loss() {
        let teacher = FrozenRandomTeacher::new(20).unwrap();
        let img = timg(21, 1, 32);
        let feats = TeacherFeatures::new(teacher.encode(&img).unwrap(), TeacherSource::FrozenRandom, None).unwrap();
        let p = proj(22, 8, 64);
        let dec = Var::from_tensor(
            &Tensor::from_vec(normal_vec(&mut rng_from(23), 16 * 8, 0.0, 1.0), (1, 16, 8), &dev()).unwrap(),
        )
        .unwrap();
        let loss = semantic_reg_loss(dec.as_tensor(), &feats, &p).unwrap();
        let grads = loss.backward().unwrap();
        teacher.assert_frozen(&grads).unwrap();
        assert!(grads.get(&dec).is_some());
    }

    #[test]
    fn provider_caches_and_errors_on_missing_precomputed() {
        let dir = std::env::temp_dir().join(format!("vistok-prov-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cache = dir.join("teach.gtkf");
        let img = timg(24, 2, 32);
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut prov = TeacherProvider::frozen_random(1, 32)
            .unwrap()
            .with_cache(cache.clone())
            .unwrap();
        let f1 = prov.fetch(&ids, &img).unwrap();
        prov.flush().unwrap();
        assert!(cache.exists());

        // Reload purely from the archive; bit-identical features.
        let mut pre = TeacherProvider::precomputed(&cache).unwrap();
        let f2 = pre.fetch(&ids, &img).unwrap();
        assert_eq!(
            f1.values.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            f2.values.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let missing = pre.fetch(&["zzz".to_string(), "a".to_string()], &img);
        assert!(missing.is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sem_reg_config_validates_layer_range() {
        let cfg = SemRegConfig::default();
        assert!(cfg.validate(4).is_ok());
        assert!(cfg.validate(2).is_err());
        let mut bad = cfg.clone();
        bad.align_layer = 0;
        assert!(bad.validate(4).is_err());
    }
}
