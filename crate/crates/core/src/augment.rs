//! Two-view augmentation policy with recorded crop/flip geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{clamp01, crop_resize, CropRect, ImageTensor};
use crate::scalar::Scalar;

/// Where a view came from: a normalized crop of the full image, optionally mirrored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    pub crop: CropRect,
    pub hflip: bool,
}

impl ViewGeometry {
    pub const IDENTITY: ViewGeometry = ViewGeometry {
        crop: CropRect::FULL,
        hflip: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Output side length of both views.
    pub side: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    /// Blur probability for view 1 and view 2.
    pub blur_prob: [f64; 2],
    /// Solarize probability for view 1 and view 2.
    pub solarize_prob: [f64; 2],
    pub solarize_threshold: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            side: 64,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_kernel: 23,
            blur_sigma: (0.1, 2.0),
            blur_prob: [1.0, 0.1],
            solarize_prob: [0.0, 0.2],
            solarize_threshold: 128.0 / 255.0,
        }
    }
}

impl AugmentationConfig {
    /// Crop always covers the full frame and no flip or photometric op fires.
    pub fn identity(side: usize) -> Self {
        Self {
            side,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: [0.0, 0.0],
            solarize_prob: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_prob,
            self.jitter_prob,
            self.grayscale_prob,
            self.blur_prob[0],
            self.blur_prob[1],
            self.solarize_prob[0],
            self.solarize_prob[1],
            self.solarize_threshold,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0,1]".into()));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config(format!("blur kernel must be odd, got {}", self.blur_kernel)));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0 && r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config("crop scale/ratio ranges are invalid".into()));
        }
        if self.side == 0 || [self.brightness, self.contrast, self.saturation].iter().any(|v| *v < 0.0) || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("jitter strengths or side are invalid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView<T> {
    pub image: ImageTensor<T>,
    pub geometry: ViewGeometry,
}

const CROP_ATTEMPTS: usize = 10;

/// Random-resized-crop parameters on the integer pixel grid, as a normalized rectangle.
fn sample_crop(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AugmentationConfig) -> CropRect {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return pixel_rect(h, w, top, left, ch, cw);
        }
    }
    // Center crop, aspect clamped into the ratio range.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < cfg.crop_ratio.0 {
        (w, ((w as f64 / cfg.crop_ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > cfg.crop_ratio.1 {
        (((h as f64 * cfg.crop_ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    pixel_rect(h, w, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn pixel_rect(h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize) -> CropRect {
    CropRect {
        y0: top as f64 / h as f64,
        x0: left as f64 / w as f64,
        y1: (top + ch) as f64 / h as f64,
        x1: (left + cw) as f64 / w as f64,
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn coin(rng: &mut ChaCha8Rng, p: f64) -> bool {
    // Always draw so the stream position does not depend on the probability.
    rng.gen::<f64>() < p
}

fn make_view<T: Scalar>(img: &ImageTensor<T>, cfg: &AugmentationConfig, index: usize, rng: &mut ChaCha8Rng) -> AugmentedView<T> {
    let crop = sample_crop(rng, img.height(), img.width(), cfg);
    let hflip = coin(rng, cfg.flip_prob);
    let geometry = ViewGeometry { crop, hflip };
    let mut out = crop_resize(img, crop, hflip, cfg.side, cfg.side);

    if coin(rng, cfg.jitter_prob) {
        let b = uniform(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness);
        let c = uniform(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast);
        let s = uniform(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation);
        let h = uniform(rng, -cfg.hue, cfg.hue);
        out = color_jitter(&out, b, c, s, h);
    }
    if coin(rng, cfg.grayscale_prob) {
        out = grayscale(&out);
    }
    let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
    if coin(rng, cfg.blur_prob[index]) {
        out = gaussian_blur(&out, sigma, cfg.blur_kernel);
    }
    if coin(rng, cfg.solarize_prob[index]) {
        out = solarize(&out, T::cast(cfg.solarize_threshold));
    }
    AugmentedView { image: out, geometry }
}

/// Draws the two views of one image. Fully determined by `seed`.
pub fn make_views<T: Scalar>(img: &ImageTensor<T>, cfg: &AugmentationConfig, seed: u64) -> Result<(AugmentedView<T>, AugmentedView<T>)> {
    if img.height() < 2 || img.width() < 2 {
        return Err(Error::Shape(format!("augmentation needs at least 2x2, got {}x{}", img.height(), img.width())));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = make_view(img, cfg, 0, &mut rng);
    let v2 = make_view(img, cfg, 1, &mut rng);
    Ok((v1, v2))
}

fn map_pixels<T: Scalar>(img: &ImageTensor<T>, mut f: impl FnMut([T; 3]) -> [T; 3]) -> ImageTensor<T> {
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        data.extend(f([px[0], px[1], px[2]]).map(clamp01));
    }
    ImageTensor::from_raw_unchecked(img.height(), img.width(), data)
}

/// ITU-R 601 luma, the weights used by common imaging libraries for grayscale conversion.
pub fn luminance<T: Scalar>(px: [T; 3]) -> T {
    T::cast(0.299) * px[0] + T::cast(0.587) * px[1] + T::cast(0.114) * px[2]
}

pub fn grayscale<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    map_pixels(img, |px| [luminance(px); 3])
}

/// `v >= threshold` becomes `1 - v`.
pub fn solarize<T: Scalar>(img: &ImageTensor<T>, threshold: T) -> ImageTensor<T> {
    map_pixels(img, |px| px.map(|v| if v >= threshold { T::one() - v } else { v }))
}

/// Brightness, contrast, saturation, hue, in that order; each clamped to `[0,1]`.
/// `hue` is a rotation in fractions of a full turn.
pub fn color_jitter<T: Scalar>(img: &ImageTensor<T>, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> ImageTensor<T> {
    let b = T::cast(brightness);
    let mut out = map_pixels(img, |px| px.map(|v| v * b));

    let n = T::cast(out.height() * out.width());
    let mean = out.data().chunks_exact(3).map(|p| luminance([p[0], p[1], p[2]])).sum::<T>() / n;
    let c = T::cast(contrast);
    out = map_pixels(&out, |px| px.map(|v| (v - mean) * c + mean));

    let s = T::cast(saturation);
    out = map_pixels(&out, |px| {
        let g = luminance(px);
        px.map(|v| (v - g) * s + g)
    });

    if hue != 0.0 {
        out = map_pixels(&out, |px| {
            let (h, s, v) = rgb_to_hsv(px.map(|c| c.f64()));
            hsv_to_rgb((h + hue).rem_euclid(1.0), s, v).map(T::cast)
        });
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Normalized 1-D Gaussian taps of odd length `kernel`.
pub fn gaussian_kernel<T: Scalar>(sigma: f64, kernel: usize) -> Vec<T> {
    let r = (kernel / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::cast(v / total)).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur<T: Scalar>(img: &ImageTensor<T>, sigma: f64, kernel: usize) -> ImageTensor<T> {
    assert!(sigma > 0.0 && kernel % 2 == 1, "blur needs sigma > 0 and an odd kernel");
    let taps = gaussian_kernel::<T>(sigma, kernel);
    let r = (kernel / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![T::zero(); src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [T::zero(); 3];
            for (k, wt) in taps.iter().enumerate() {
                let sx = clamp(x as isize + k as isize - r, w);
                let o = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += *wt * src[o + c];
                }
            }
            tmp[(y * w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [T::zero(); 3];
            for (k, wt) in taps.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - r, h);
                let o = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += *wt * tmp[o + c];
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = clamp01(acc[c]);
            }
        }
    }
    ImageTensor::from_raw_unchecked(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn is_constant(img: &ImageTensor<f64>, tol: f64) -> bool {
        let first = img.pixel(0, 0);
        img.data().chunks(3).all(|p| (0..3).all(|c| (p[c] - first[c]).abs() <= tol))
    }

    #[test]
    fn same_seed_same_views() {
        let img = noise(20, 24, 1);
        let cfg = AugmentationConfig {
            side: 16,
            ..Default::default()
        };
        assert_eq!(make_views(&img, &cfg, 9).unwrap(), make_views(&img, &cfg, 9).unwrap());
        assert_ne!(make_views(&img, &cfg, 9).unwrap(), make_views(&img, &cfg, 10).unwrap());
    }

    #[test]
    fn identity_policy_returns_resized_input() {
        let img = noise(32, 32, 2);
        let (v1, v2) = make_views(&img, &AugmentationConfig::identity(16), 3).unwrap();
        let want = crate::imaging::resize_bilinear(&img, 16, 16);
        for v in [v1, v2] {
            assert_eq!(v.geometry, ViewGeometry::IDENTITY);
            assert_eq!(v.image, want);
        }
    }

    #[test]
    fn constant_image_gives_constant_views() {
        let img = ImageTensor::<f64>::filled(30, 30, [0.7, 0.2, 0.4]);
        let cfg = AugmentationConfig {
            side: 12,
            jitter_prob: 1.0,
            grayscale_prob: 0.5,
            solarize_prob: [0.5, 1.0],
            ..Default::default()
        };
        for seed in 0..20 {
            let (v1, v2) = make_views(&img, &cfg, seed).unwrap();
            assert!(is_constant(&v1.image, 1e-12) && is_constant(&v2.image, 1e-12), "seed {seed}");
        }
    }

    #[test]
    fn solarize_cases() {
        let img = ImageTensor::<f64>::from_fn(1, 3, |_, x| [[200.0 / 255.0, 100.0 / 255.0, 0.0][x]; 3]);
        let out = solarize(&img, 128.0 / 255.0);
        assert!((out.pixel(0, 0)[0] - 55.0 / 255.0).abs() < 1e-15);
        assert_eq!(out.pixel(0, 1)[0], 100.0 / 255.0);
        assert_eq!(out.pixel(0, 2)[0], 0.0);
    }

    #[test]
    fn blur_constant_and_mass() {
        let flat = ImageTensor::<f64>::filled(10, 10, [0.3; 3]);
        assert!(is_constant(&gaussian_blur(&flat, 1.3, 23), 1e-14));

        // single bright pixel at the center of a 41x41 canvas: full 23-tap support fits
        let mut img = ImageTensor::<f64>::filled(41, 41, [0.0; 3]);
        img.data_mut()[(20 * 41 + 20) * 3] = 1.0;
        let out = gaussian_blur(&img, 0.8, 23);
        let mass: f64 = out.data().chunks(3).map(|p| p[0]).sum();
        assert!((mass - 1.0).abs() < 1e-12, "{mass}");
        // peak equals the squared central tap
        let k = gaussian_kernel::<f64>(0.8, 23);
        assert!((out.pixel(20, 20)[0] - k[11] * k[11]).abs() < 1e-15);
    }

    #[test]
    fn blur_reduces_noise_variance() {
        let img = noise(32, 32, 5);
        let var = |im: &ImageTensor<f64>| {
            let n = im.data().len() as f64;
            let m = im.data().iter().sum::<f64>() / n;
            im.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
        };
        assert!(var(&gaussian_blur(&img, 2.0, 23)) < var(&img));
    }

    #[test]
    fn jitter_stays_in_range_and_hue_roundtrip() {
        let img = noise(8, 8, 7);
        let out = color_jitter(&img, 1.4, 0.6, 1.2, 0.1);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let same = color_jitter(&img, 1.0, 1.0, 1.0, 0.0);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (h, s, v) = rgb_to_hsv([0.2, 0.5, 0.9]);
        let back = hsv_to_rgb(h, s, v);
        assert!((back[0] - 0.2).abs() < 1e-12 && (back[1] - 0.5).abs() < 1e-12 && (back[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn geometry_reproduces_view_before_photometrics() {
        let img = noise(40, 30, 11);
        let cfg = AugmentationConfig {
            side: 20,
            flip_prob: 0.5,
            ..AugmentationConfig::identity(20)
        };
        let cfg = AugmentationConfig {
            crop_scale: (0.08, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            ..cfg
        };
        for seed in 0..10 {
            let (v1, _) = make_views(&img, &cfg, seed).unwrap();
            let g = v1.geometry;
            assert!(g.crop.is_valid());
            // Independent oracle: per output pixel, locate the source point by hand.
            for i in 0..20 {
                for j in 0..20 {
                    let u = if g.hflip { 19 - j } else { j } as f64;
                    let sy = (g.crop.y0 + (i as f64 + 0.5) / 20.0 * (g.crop.y1 - g.crop.y0)) * 40.0 - 0.5;
                    let sx = (g.crop.x0 + (u + 0.5) / 20.0 * (g.crop.x1 - g.crop.x0)) * 30.0 - 0.5;
                    let (sy, sx) = (sy.clamp(0.0, 39.0), sx.clamp(0.0, 29.0));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(39), (x0 + 1).min(29));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    for c in 0..3 {
                        let want = (1.0 - fy) * ((1.0 - fx) * img.pixel(y0, x0)[c] + fx * img.pixel(y0, x1)[c])
                            + fy * ((1.0 - fx) * img.pixel(y1, x0)[c] + fx * img.pixel(y1, x1)[c]);
                        assert!((v1.image.pixel(i, j)[c] - want).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
