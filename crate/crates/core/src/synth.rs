//! Procedural chest-radiograph-like images for smoke tests and demos.
//!
//! Normal images show two dark lung fields crossed by ribs beside a bright
//! spine; pneumonia images haze the lung fields and add one to three
//! denser opacities. Geometry, exposure and noise vary per image.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::Result;
use crate::par;
use crate::plane::Plane;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub normal: usize,
    pub pneumonia: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Same class sizes as the public pediatric chest X-ray collection.
    fn default() -> Self {
        Self {
            normal: 1583,
            pneumonia: 4273,
            size: 128,
            seed: 0,
        }
    }
}

fn normalish(rng: &mut ChaCha8Rng) -> f32 {
    let s: f32 = (0..4).map(|_| rng.gen::<f32>()).sum();
    (s - 2.0) * 3f32.sqrt()
}

struct Lung {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Lung {
    /// Soft inside-ness in [0, 1].
    fn weight(&self, x: f32, y: f32) -> f32 {
        let d = ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2);
        (1.0 - d).clamp(0.0, 0.25) * 4.0
    }
}

/// One image in 0..255 intensity units.
pub fn synth_image(label: Label, size: usize, seed: u64, index: u64) -> Plane {
    let mut rng = seed::rng(seed, &[0x5359_4e54, label.target() as u64, index]);
    let s = size as f32;
    let tilt = rng.gen_range(-0.04..0.04f32);
    let body_level = rng.gen_range(95.0..125.0f32);
    let lung_level = rng.gen_range(35.0..60.0f32);
    let lungs: Vec<Lung> = [-1.0f32, 1.0]
        .iter()
        .map(|&side| Lung {
            cx: s * (0.5 + side * rng.gen_range(0.17..0.23)),
            cy: s * rng.gen_range(0.45..0.52),
            rx: s * rng.gen_range(0.13..0.17),
            ry: s * rng.gen_range(0.27..0.33),
        })
        .collect();
    let rib_period = s * rng.gen_range(0.08..0.11);
    let rib_phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let opacities: Vec<(f32, f32, f32, f32)> = if label == Label::Pneumonia {
        (0..rng.gen_range(1..=3))
            .map(|_| {
                let lung = &lungs[rng.gen_range(0..2)];
                let angle = rng.gen_range(0.0..std::f32::consts::TAU);
                let r = rng.gen_range(0.0..0.6f32);
                (
                    lung.cx + angle.cos() * r * lung.rx,
                    lung.cy + angle.sin() * r * lung.ry,
                    s * rng.gen_range(0.08..0.15),
                    rng.gen_range(45.0..85.0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let haze = if label == Label::Pneumonia {
        rng.gen_range(12.0..30.0f32)
    } else {
        0.0
    };
    let gain = rng.gen_range(0.85..1.15f32);
    let noise_seed = rng.gen::<u64>();
    let mut img = Plane::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f32, y as f32 + tilt * (x as f32 - s / 2.0));
        let body_dx = (xf - s / 2.0) / (s * 0.46);
        let body = (1.0 - body_dx * body_dx).clamp(0.0, 0.2) * 5.0;
        let mut v = 20.0 + body * body_level;
        let spine = (-((xf - s / 2.0) / (s * 0.035)).powi(2)).exp();
        v += spine * 60.0;
        let lung: f32 = lungs.iter().map(|l| l.weight(xf, yf)).sum::<f32>().min(1.0);
        v -= lung * (body_level - lung_level - haze);
        let rib = ((yf + 0.15 * (xf - s / 2.0).abs()) / rib_period * std::f32::consts::TAU + rib_phase).sin();
        v += lung * rib.max(0.0).powi(4) * 28.0;
        for &(ox, oy, r, amp) in &opacities {
            let d2 = ((xf - ox).powi(2) + (yf - oy).powi(2)) / (r * r);
            v += lung * amp * (-d2).exp();
        }
        v * gain
    });
    let mut noise = seed::rng(noise_seed, &[]);
    for v in img.data_mut() {
        *v = (*v + 6.0 * normalish(&mut noise)).clamp(0.0, 255.0).round();
    }
    img
}

/// Writes `NORMAL/` and `PNEUMONIA/` folders of PNG files under `root` and
/// returns the written paths in order.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    let jobs: Vec<(Label, usize)> = [(Label::Normal, cfg.normal), (Label::Pneumonia, cfg.pneumonia)]
        .into_iter()
        .flat_map(|(label, n)| (0..n).map(move |i| (label, i)))
        .collect();
    for dir in ["NORMAL", "PNEUMONIA"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    par::map_slice(&jobs, |&(label, i)| {
        let dir = match label {
            Label::Normal => "NORMAL",
            Label::Pneumonia => "PNEUMONIA",
        };
        let path = root.join(dir).join(format!("{}-{i:05}.png", label.as_str().to_lowercase()));
        synth_image(label, cfg.size, cfg.seed, i as u64)
            .to_gray_image()
            .save(&path)
            .map_err(|source| crate::Error::Decode {
                path: path.clone(),
                source,
            })?;
        Ok(path)
    })
    .into_iter()
    .collect()
}
