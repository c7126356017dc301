//! Stochastic geometric augmentation: rotation, shifts, shear, zoom and
//! horizontal flips with nearest-edge fill.
//!
//! A draw is turned into one sampling map from output to source
//! coordinates, composed as `rotate ∘ shear ∘ zoom ∘ shift` about the
//! image centre, followed by the optional flip.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::par;
use crate::plane::Plane;
use crate::preprocess::PreparedSet;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleUnit {
    #[default]
    Radians,
    Degrees,
}

/// Parameter ranges of the augmentation pipeline. Keys mirror the
/// familiar Keras `ImageDataGenerator` arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Multiplicative intensity factor. 1.0 when inputs are already
    /// min-max normalized, 1/255 for raw 8-bit inputs.
    pub rescale: f32,
    /// Maximum absolute rotation in degrees.
    pub rotation_range: f32,
    pub width_shift_range: f32,
    pub height_shift_range: f32,
    pub shear_range: f32,
    pub shear_unit: AngleUnit,
    pub zoom_range: f32,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rescale: 1.0,
            rotation_range: 90.0,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            shear_range: 0.2,
            shear_unit: AngleUnit::Radians,
            zoom_range: 0.2,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
        }
    }
}

impl AugmentationConfig {
    /// No geometric change at all.
    pub fn identity() -> Self {
        Self {
            rescale: 1.0,
            rotation_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            shear_unit: AngleUnit::Radians,
            zoom_range: 0.0,
            horizontal_flip: false,
            fill_mode: FillMode::Nearest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
            ("shear_range", self.shear_range),
            ("zoom_range", self.zoom_range),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("augmentation.{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
            ("zoom_range", self.zoom_range),
        ] {
            if v >= 1.0 {
                return Err(Error::Config(format!("augmentation.{name} must be < 1, got {v}")));
            }
        }
        if !(self.rescale.is_finite() && self.rescale > 0.0) {
            return Err(Error::Config(format!(
                "augmentation.rescale must be positive, got {}",
                self.rescale
            )));
        }
        Ok(())
    }

    fn shear_range_rad(&self) -> f32 {
        match self.shear_unit {
            AngleUnit::Radians => self.shear_range,
            AngleUnit::Degrees => self.shear_range.to_radians(),
        }
    }
}

/// One concrete set of transform parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformDraw {
    pub rotation_deg: f32,
    pub dx_frac: f32,
    pub dy_frac: f32,
    pub shear_rad: f32,
    pub zoom_factor: f32,
    pub flip: bool,
}

impl Default for TransformDraw {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformDraw {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            dx_frac: 0.0,
            dy_frac: 0.0,
            shear_rad: 0.0,
            zoom_factor: 1.0,
            flip: false,
        }
    }

    /// True when the affine part leaves every pixel in place.
    pub fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.dx_frac == 0.0
            && self.dy_frac == 0.0
            && self.shear_rad == 0.0
            && self.zoom_factor == 1.0
    }

    pub fn is_identity(&self) -> bool {
        self.is_affine_identity() && !self.flip
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, range: f32) -> f32 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

/// Draws every parameter uniformly from its symmetric range; the flip is
/// a fair coin when enabled. Draw order is fixed so a given generator
/// state always yields the same transform.
pub fn sample_transform<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> TransformDraw {
    let rotation_deg = symmetric(rng, cfg.rotation_range);
    let dx_frac = symmetric(rng, cfg.width_shift_range);
    let dy_frac = symmetric(rng, cfg.height_shift_range);
    let shear_rad = symmetric(rng, cfg.shear_range_rad());
    let zoom_factor = 1.0 + symmetric(rng, cfg.zoom_range);
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
    TransformDraw {
        rotation_deg,
        dx_frac,
        dy_frac,
        shear_rad,
        zoom_factor,
        flip,
    }
}

/// 2x2 linear part and translation of the output-to-source sampling map.
struct SamplingMap {
    m: [[f64; 2]; 2],
    shift: [f64; 2],
    center: [f64; 2],
}

impl SamplingMap {
    fn new(t: &TransformDraw, width: usize, height: usize) -> Self {
        let theta = (t.rotation_deg as f64).to_radians();
        let (s, c) = theta.sin_cos();
        let rot = [[c, -s], [s, c]];
        let sh = t.shear_rad as f64;
        let shear = [[1.0, -sh.sin()], [0.0, sh.cos()]];
        let z = t.zoom_factor as f64;
        let zoom = [[z, 0.0], [0.0, z]];
        let m = matmul2(matmul2(rot, shear), zoom);
        Self {
            m,
            shift: [t.dx_frac as f64 * width as f64, t.dy_frac as f64 * height as f64],
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
        }
    }

    #[inline]
    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let px = x as f64 - self.center[0] + self.shift[0];
        let py = y as f64 - self.center[1] + self.shift[1];
        (
            self.m[0][0] * px + self.m[0][1] * py + self.center[0],
            self.m[1][0] * px + self.m[1][1] * py + self.center[1],
        )
    }
}

fn matmul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Bilinear sample with coordinates clamped into the image, which is
/// exactly nearest-edge replication for out-of-bounds positions.
#[inline]
fn sample_nearest_fill(img: &Plane, x: f64, y: f64) -> f32 {
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
    let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Warps `img` by the draw. Output has the input's shape and never leaves
/// the input's intensity range.
pub fn apply_transform(img: &Plane, t: &TransformDraw, fill_mode: FillMode) -> Plane {
    let FillMode::Nearest = fill_mode;
    let (w, h) = (img.width(), img.height());
    let mut out = if t.is_affine_identity() {
        img.clone()
    } else {
        let map = SamplingMap::new(t, w, h);
        Plane::from_fn(w, h, |x, y| {
            let (sx, sy) = map.source(x, y);
            sample_nearest_fill(img, sx, sy)
        })
    };
    if t.flip {
        flip_horizontal(&mut out);
    }
    out
}

pub fn flip_horizontal(img: &mut Plane) {
    let w = img.width();
    for row in img.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

/// One training batch: NHWC inputs and 0/1 targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<f32>,
}

/// Endless stream of augmented, shuffled batches.
///
/// Every pass over the data uses a fresh permutation and batches are
/// always full, straddling pass boundaries when needed. Each sample's
/// transform comes from its own generator keyed by (seed, position in the
/// stream), so the sequence does not depend on worker count.
pub struct AugmentStream<'a> {
    set: &'a PreparedSet,
    cfg: AugmentationConfig,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
    produced: u64,
}

pub fn augment_stream<'a>(
    set: &'a PreparedSet,
    cfg: &AugmentationConfig,
    batch: usize,
    seed: u64,
) -> Result<AugmentStream<'a>> {
    if set.is_empty() {
        return Err(Error::Config("cannot stream batches from an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    cfg.validate()?;
    Ok(AugmentStream {
        set,
        cfg: cfg.clone(),
        batch,
        seed,
        order: Vec::new(),
        cursor: 0,
        pass: 0,
        produced: 0,
    })
}

impl AugmentStream<'_> {
    fn reshuffle(&mut self) {
        let mut rng: ChaCha8Rng = seed::rng(self.seed, &[0x5348_5546, self.pass]);
        self.order = (0..self.set.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
        self.pass += 1;
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut picked = Vec::with_capacity(self.batch);
        while picked.len() < self.batch {
            if self.cursor >= self.order.len() {
                self.reshuffle();
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        picked
    }
}

impl Iterator for AugmentStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.next_indices();
        let first = self.produced;
        self.produced += indices.len() as u64;
        let (seed, cfg, set) = (self.seed, &self.cfg, self.set);
        let planes = par::map_range(indices.len(), |i| {
            let mut rng = seed::rng(seed, &[0x4155_4720, first + i as u64]);
            let draw = sample_transform(cfg, &mut rng);
            let src = set.plane(indices[i]);
            let mut p = apply_transform(src, &draw, cfg.fill_mode);
            if cfg.rescale != 1.0 {
                p.data_mut().iter_mut().for_each(|v| *v *= cfg.rescale);
            }
            p
        });
        let labels = indices.iter().map(|&i| set.label(i).target()).collect();
        Some(Batch {
            inputs: replicate_batch(&planes, set.channels()),
            labels,
        })
    }
}

/// Stacks planes into an NHWC tensor, copying the gray value into every
/// channel.
pub fn replicate_batch(planes: &[Plane], channels: usize) -> Tensor {
    let (h, w) = (planes[0].height(), planes[0].width());
    let mut data = Vec::with_capacity(planes.len() * h * w * channels);
    for p in planes {
        assert_eq!((p.height(), p.width()), (h, w), "batch planes must share a size");
        for &v in p.data() {
            data.extend(std::iter::repeat(v).take(channels));
        }
    }
    Tensor::new([planes.len(), h, w, channels], data)
}

/// Labels in stream encoding.
pub fn encode_labels(labels: &[Label]) -> Vec<f32> {
    labels.iter().map(|l| l.target()).collect()
}
