//! Intensity normalization, CLAHE, resizing and channel replication.
//!
//! The model-input pipeline is: raw 0-255 grid -> min-max normalization
//! -> CLAHE -> bilinear resize -> gray replicated across channels.

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageSample, Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::par;
use crate::plane::Plane;
use crate::tensor::Tensor;

const BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheConfig {
    pub enabled: bool,
    pub clip_limit: f32,
    /// Tiles along (x, y).
    pub tile_grid: [usize; 2],
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            clip_limit: 2.0,
            tile_grid: [8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channels: usize,
    pub normalize: bool,
    pub clahe: ClaheConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            channels: 3,
            normalize: true,
            clahe: ClaheConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn with_target_size(&self, target_size: usize) -> Self {
        Self {
            target_size,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 8 {
            return Err(Error::Config(format!(
                "preprocess.target_size must be at least 8, got {}",
                self.target_size
            )));
        }
        if ![224, 244, 299].contains(&self.target_size) {
            log::debug!("non-standard target size {}", self.target_size);
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "preprocess.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.clahe.clip_limit.is_finite() && self.clahe.clip_limit > 0.0) {
            return Err(Error::Config("clahe.clip_limit must be positive".into()));
        }
        if self.clahe.tile_grid.contains(&0) {
            return Err(Error::Config("clahe.tile_grid entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(x - min) / (max - min)` per pixel. A constant grid maps to zeros.
pub fn min_max_normalize(img: &Plane) -> Plane {
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return img.map(|_| 0.0);
    }
    img.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

#[inline]
fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round() as usize).min(BINS - 1)
}

/// Equalization table for one tile. A tile whose pixels all fall in one
/// bin carries no contrast and keeps its values.
enum TileMap {
    Identity,
    Table(Box<[f32; BINS]>),
}

impl TileMap {
    #[inline]
    fn apply(&self, v: f32, bin: usize) -> f32 {
        match self {
            TileMap::Identity => v,
            TileMap::Table(t) => t[bin],
        }
    }
}

fn clipped_equalization(hist: &mut [u32; BINS], area: u32, clip_limit: f32) -> TileMap {
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return TileMap::Identity;
    }
    let limit = ((clip_limit * area as f32 / BINS as f32) as u32).max(1);
    let mut excess = 0u32;
    for c in hist.iter_mut() {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let per_bin = excess / BINS as u32;
    let residual = (excess % BINS as u32) as usize;
    for c in hist.iter_mut() {
        *c += per_bin;
    }
    if residual > 0 {
        let step = (BINS / residual).max(1);
        for b in (0..BINS).step_by(step).take(residual) {
            hist[b] += 1;
        }
    }
    let mut table = Box::new([0f32; BINS]);
    let mut cdf = 0u64;
    for (b, &c) in hist.iter().enumerate() {
        cdf += c as u64;
        table[b] = (cdf as f64 / area as f64).min(1.0) as f32;
    }
    TileMap::Table(table)
}

/// Contrast-limited adaptive histogram equalization on a unit-interval
/// image with 256-bin tile histograms and bilinear blending between tile
/// centres. Images smaller than the grid are processed as one tile.
pub fn clahe(img: &Plane, clip_limit: f32, tile_grid: [usize; 2]) -> Plane {
    let (w, h) = (img.width(), img.height());
    let [mut tx, mut ty] = tile_grid;
    if w < tx || h < ty || tx == 0 || ty == 0 {
        tx = 1;
        ty = 1;
    }
    let bins: Vec<usize> = img.data().iter().map(|&v| bin_of(v)).collect();

    let maps = par::map_range(tx * ty, |t| {
        let (i, j) = (t % tx, t / tx);
        let (x0, x1) = (i * w / tx, (i + 1) * w / tx);
        let (y0, y1) = (j * h / ty, (j + 1) * h / ty);
        let mut hist = [0u32; BINS];
        for y in y0..y1 {
            for &b in &bins[y * w + x0..y * w + x1] {
                hist[b] += 1;
            }
        }
        let area = ((x1 - x0) * (y1 - y0)) as u32;
        clipped_equalization(&mut hist, area, clip_limit)
    });

    let tile_w = w as f32 / tx as f32;
    let tile_h = h as f32 / ty as f32;
    let neighbours = |pos: usize, size: f32, n: usize| -> (usize, usize, f32) {
        let f = (pos as f32 + 0.5) / size - 0.5;
        let lo = f.floor();
        let wgt = f - lo;
        let lo = lo as isize;
        let a = lo.clamp(0, n as isize - 1) as usize;
        let b = (lo + 1).clamp(0, n as isize - 1) as usize;
        (a, b, wgt)
    };

    let mut out = Plane::filled(w, h, 0.0);
    let data = img.data();
    par::for_each_chunk_mut(out.data_mut(), w, |y, row| {
        let (ta, tb, wy) = neighbours(y, tile_h, ty);
        for (x, o) in row.iter_mut().enumerate() {
            let (sa, sb, wx) = neighbours(x, tile_w, tx);
            let v = data[y * w + x];
            let b = bins[y * w + x];
            let quad = [
                &maps[ta * tx + sa],
                &maps[ta * tx + sb],
                &maps[tb * tx + sa],
                &maps[tb * tx + sb],
            ];
            if quad.iter().all(|m| matches!(m, TileMap::Identity)) {
                *o = v;
                continue;
            }
            let top = quad[0].apply(v, b) * (1.0 - wx) + quad[1].apply(v, b) * wx;
            let bottom = quad[2].apply(v, b) * (1.0 - wx) + quad[3].apply(v, b) * wx;
            *o = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
        }
    });
    out
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(img: &Plane, width: usize, height: usize) -> Plane {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let sx = img.width() as f32 / width as f32;
    let sy = img.height() as f32 / height as f32;
    let max_x = (img.width() - 1) as f32;
    let max_y = (img.height() - 1) as f32;
    let mut out = Plane::filled(width, height, 0.0);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = fx - x0 as f32;
            let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
            let bottom = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
            out.set(x, y, top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Normalize, equalize and resize one raw image to a square plane.
pub fn preprocess_plane(raw: &Plane, cfg: &PreprocessConfig) -> Plane {
    let mut p = if cfg.normalize {
        min_max_normalize(raw)
    } else {
        raw.clone()
    };
    if cfg.clahe.enabled {
        p = clahe(&p, cfg.clahe.clip_limit, cfg.clahe.tile_grid);
    }
    resize_bilinear(&p, cfg.target_size, cfg.target_size)
}

/// Model-ready `[1, size, size, channels]` tensor for one sample.
pub fn to_model_input(sample: &ImageSample, cfg: &PreprocessConfig) -> Result<Tensor> {
    cfg.validate()?;
    let plane = preprocess_plane(&sample.pixels()?, cfg);
    Ok(crate::augment::replicate_batch(&[plane], cfg.channels))
}

/// A dataset decoded and preprocessed once at a fixed size, ready for
/// batching.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    planes: Vec<Plane>,
    labels: Vec<Label>,
    channels: usize,
    input_scale: f32,
}

impl PreparedSet {
    pub fn build(ds: &LabeledDataset, cfg: &PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        let planes: Result<Vec<Plane>> = par::map_slice(ds.samples(), |s| {
            s.pixels().map(|raw| preprocess_plane(&raw, cfg))
        })
        .into_iter()
        .collect();
        Ok(Self {
            planes: planes?,
            labels: ds.labels(),
            channels: cfg.channels,
            input_scale: 1.0,
        })
    }

    /// Wraps already-preprocessed planes.
    pub fn from_planes(planes: Vec<Plane>, labels: Vec<Label>, channels: usize) -> Result<Self> {
        if planes.len() != labels.len() {
            return Err(Error::LengthMismatch {
                predicted: planes.len(),
                actual: labels.len(),
            });
        }
        if let Some(first) = planes.first() {
            if planes
                .iter()
                .any(|p| p.width() != first.width() || p.height() != first.height())
            {
                return Err(Error::InvalidImage("prepared planes must share one size".into()));
            }
        }
        Ok(Self {
            planes,
            labels,
            channels,
            input_scale: 1.0,
        })
    }

    /// Factor applied to pixel values by [`PreparedSet::batch`]; set it to
    /// the augmentation `rescale` so unaugmented batches match the training
    /// stream.
    pub fn with_input_scale(mut self, scale: f32) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn input_scale(&self) -> f32 {
        self.input_scale
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn plane(&self, i: usize) -> &Plane {
        &self.planes[i]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Unaugmented batch of the given indices.
    pub fn batch(&self, indices: &[usize]) -> crate::augment::Batch {
        let planes: Vec<Plane> = indices.iter().map(|&i| self.planes[i].clone()).collect();
        let mut inputs = crate::augment::replicate_batch(&planes, self.channels);
        if self.input_scale != 1.0 {
            inputs.data_mut().iter_mut().for_each(|v| *v *= self.input_scale);
        }
        crate::augment::Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i].target()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let p = Plane::new(3, 1, vec![0.0, 127.5, 255.0]).unwrap();
        assert_eq!(min_max_normalize(&p).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let p = Plane::filled(4, 4, 200.0);
        assert!(min_max_normalize(&p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clahe_constant_fixpoint() {
        for v in [0.0, 0.3, 0.77, 1.0] {
            let p = Plane::filled(32, 24, v);
            assert_eq!(clahe(&p, 2.0, [8, 8]), p);
        }
    }

    #[test]
    fn clahe_small_image_uses_single_tile() {
        let p = Plane::from_fn(5, 3, |x, y| (x + 5 * y) as f32 / 14.0);
        let a = clahe(&p, 100.0, [8, 8]);
        let b = clahe(&p, 100.0, [1, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn clahe_stretches_low_contrast_ramp() {
        let p = Plane::from_fn(64, 64, |x, _| 0.4 + 0.2 * x as f32 / 63.0);
        let out = clahe(&p, 2.0, [8, 8]);
        let (lo, hi) = out.min_max();
        assert!(hi - lo > 0.2 + 1e-3, "range {lo}..{hi}");
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let p = Plane::from_fn(6, 4, |x, y| (x * y) as f32);
        assert_eq!(resize_bilinear(&p, 6, 4), p);
        let c = Plane::filled(10, 7, 0.25);
        assert!(resize_bilinear(&c, 3, 5).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn model_input_shape_and_replication() {
        let raw = Plane::from_fn(100, 80, |x, y| ((x * 3 + y * 5) % 256) as f32);
        let s = ImageSample::in_memory("a.png", Label::Normal, raw);
        let cfg = PreprocessConfig {
            target_size: 32,
            ..Default::default()
        };
        let t = to_model_input(&s, &cfg).unwrap();
        assert_eq!(t.shape(), [1, 32, 32, 3]);
        for px in t.data().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        assert_eq!(t, to_model_input(&s, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PreprocessConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.channels = 2;
        assert!(cfg.validate().is_err());
        cfg.channels = 3;
        cfg.clahe.tile_grid = [0, 8];
        assert!(cfg.validate().is_err());
    }
}
