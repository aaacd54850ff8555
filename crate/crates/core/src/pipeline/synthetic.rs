//! Procedural corpus of flat shapes on textured backgrounds, with ground-truth masks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_image, save_label_map, ImageTensor, LabelMap};
use crate::pipeline::stream_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_images: usize,
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shapes: Vec<ShapeKind>,
    /// Bounds on the visible area of every shape, as fractions of the canvas.
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub palette: Vec<[f64; 3]>,
    pub noise_amplitude: f64,
    /// Peak-to-peak brightness change of the background ramp.
    pub gradient_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 512,
            side: 64,
            min_shapes: 1,
            max_shapes: 3,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle],
            min_area_fraction: 0.01,
            max_area_fraction: 0.6,
            palette: vec![
                [0.85, 0.15, 0.15],
                [0.15, 0.7, 0.2],
                [0.15, 0.3, 0.85],
                [0.9, 0.8, 0.1],
                [0.75, 0.2, 0.8],
                [0.1, 0.75, 0.8],
                [0.95, 0.55, 0.1],
                [0.95, 0.95, 0.95],
                [0.1, 0.1, 0.1],
            ],
            noise_amplitude: 0.05,
            gradient_strength: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.side >= 8
            && self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && !self.shapes.is_empty()
            && self.palette.len() > self.max_shapes
            && 0.0 < self.min_area_fraction
            && self.min_area_fraction * (self.max_shapes as f64) < self.max_area_fraction
            && self.max_area_fraction <= 1.0
            && self.noise_amplitude >= 0.0
            && self.gradient_strength >= 0.0
            && self.palette.iter().flatten().all(|c| (0.0..=1.0).contains(c));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic corpus spec {self:?}")))
        }
    }
}

/// One generated image with its object labels (0 is background, shapes are 1..).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<T> {
    pub image: ImageTensor<T>,
    pub gt: LabelMap,
}

enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Tri { v: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Tri { v } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn sample_shape(kind: ShapeKind, area: f64, side: f64, rng: &mut ChaCha8Rng) -> Shape {
    match kind {
        ShapeKind::Disk => {
            let r = (area / std::f64::consts::PI).sqrt().min(side / 2.0 - 0.5);
            Shape::Disk {
                cy: rng.gen_range(r..=side - r),
                cx: rng.gen_range(r..=side - r),
                r,
            }
        }
        ShapeKind::Rectangle => {
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let h = (area * aspect).sqrt().min(side);
            let w = (area / h).min(side);
            let (y0, x0) = (rng.gen_range(0.0..=side - h), rng.gen_range(0.0..=side - w));
            Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
        }
        ShapeKind::Triangle => {
            let aspect: f64 = rng.gen_range(0.6..1.6);
            let h = (2.0 * area * aspect).sqrt().min(side);
            let w = (2.0 * area / h).min(side);
            let (y0, x0) = (rng.gen_range(0.0..=side - h), rng.gen_range(0.0..=side - w));
            let apex = x0 + rng.gen_range(0.0..=w);
            Shape::Tri {
                v: [(y0, apex), (y0 + h, x0), (y0 + h, x0 + w)],
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic sample `index` of the corpus. Pixel values sit on the 8-bit grid so the
/// in-memory corpus equals the one read back from PNG files.
pub fn synthesize<T: Scalar>(spec: &SyntheticCorpusSpec, index: usize) -> Result<SyntheticSample<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 0x5348_4150, index as u64, 0));
    let s = spec.side;
    let canvas = (s * s) as f64;
    for _attempt in 0..1000 {
        let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
        let mut colors: Vec<usize> = (0..spec.palette.len()).collect();
        for i in 0..colors.len() {
            let j = rng.gen_range(i..colors.len());
            colors.swap(i, j);
        }
        let shapes: Vec<(Shape, usize)> = (0..n)
            .map(|i| {
                let kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
                let frac = rng.gen_range(spec.min_area_fraction * 2.0..(spec.max_area_fraction / n as f64).max(spec.min_area_fraction * 2.5));
                (sample_shape(kind, frac * canvas, s as f64, &mut rng), colors[i + 1])
            })
            .collect();
        let mut labels = vec![0u32; s * s];
        for (y, row) in labels.chunks_mut(s).enumerate() {
            for (x, l) in row.iter_mut().enumerate() {
                for (k, (shape, _)) in shapes.iter().enumerate() {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        *l = k as u32 + 1;
                    }
                }
            }
        }
        let fits = (1..=n as u32).all(|k| {
            let a = labels.iter().filter(|&&l| l == k).count() as f64 / canvas;
            a >= spec.min_area_fraction && a <= spec.max_area_fraction
        });
        if !fits {
            continue;
        }
        let bg = spec.palette[colors[0]].map(|c| 0.35 + 0.3 * c);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (gy, gx) = (angle.sin(), angle.cos());
        let mut data = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                let l = labels[y * s + x] as usize;
                let base = if l == 0 {
                    let t = ((y as f64 / s as f64 - 0.5) * gy + (x as f64 / s as f64 - 0.5) * gx) * spec.gradient_strength;
                    bg.map(|c| c + t)
                } else {
                    spec.palette[shapes[l - 1].1]
                };
                for c in base {
                    let noise = if spec.noise_amplitude > 0.0 { rng.gen_range(-spec.noise_amplitude..=spec.noise_amplitude) } else { 0.0 };
                    data.push(T::cast(quantize(c + noise)));
                }
            }
        }
        return Ok(SyntheticSample {
            image: ImageTensor::new(s, s, data)?,
            gt: LabelMap::new(s, s, labels)?,
        });
    }
    Err(Error::Degenerate(format!("could not place shapes for synthetic image {index}")))
}

pub fn synthesize_corpus<T: Scalar>(spec: &SyntheticCorpusSpec) -> Result<Vec<SyntheticSample<T>>> {
    (0..spec.n_images).map(|i| synthesize(spec, i)).collect()
}

/// Writes `images/NNNNN.png` and `gt/NNNNN.r2ol` under `dir`.
pub fn gen_synthetic(spec: &SyntheticCorpusSpec, dir: &Path) -> Result<usize> {
    spec.validate()?;
    let (img_dir, gt_dir) = (dir.join("images"), dir.join("gt"));
    for d in [&img_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..spec.n_images {
        let sample = synthesize::<f64>(spec, i)?;
        save_image(&img_dir.join(format!("{i:05}.png")), &sample.image)?;
        save_label_map(&gt_dir.join(format!("{i:05}.r2ol")), &sample.gt)?;
    }
    Ok(spec.n_images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_within_area_bounds() {
        let spec = SyntheticCorpusSpec { n_images: 40, ..Default::default() };
        let a = synthesize_corpus::<f32>(&spec).unwrap();
        let b = synthesize_corpus::<f32>(&spec).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let n = s.gt.n_labels() - 1;
            assert!((1..=3).contains(&n));
            for k in 1..=n as u32 {
                let f = s.gt.labels().iter().filter(|&&l| l == k).count() as f64 / 4096.0;
                assert!((0.01..=0.6).contains(&f), "{f}");
            }
        }
    }

    #[test]
    fn empty_corpus_and_invalid_spec() {
        let spec = SyntheticCorpusSpec { n_images: 0, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(gen_synthetic(&spec, dir.path()).unwrap(), 0);
        assert!(dir.path().join("images").is_dir());
        let bad = SyntheticCorpusSpec { min_shapes: 4, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
