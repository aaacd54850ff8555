//! Image containers, color conversion, bilinear sampling and the label-map
//! file format.
//!
//! All bilinear sampling in the crate goes through [`sample_rect`], which uses
//! the half-pixel-center convention: output cell `i` of `n` covering the
//! normalized interval `[a, b]` of a source axis of length `L` reads source
//! coordinate `a*L + (i + 0.5) * (b - a) * L / n - 0.5`, clamped to the edge.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-last RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::OutOfRange(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    /// Builds an image from a per-pixel closure `(y, x) -> rgb`; values are clamped to `[0,1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| clamp01(*v)));
            }
        }
        Self { height, width, data }
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::cast(*v)).collect(),
        }
    }
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// CIELAB image (D65 white point).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage<T> {
    pub height: usize,
    pub width: usize,
    /// `[L, a, b]` per pixel, row-major.
    pub data: Vec<[T; 3]>,
}

impl<T: Scalar> LabImage<T> {
    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        self.data[y * self.width + x]
    }
}

// sRGB -> XYZ (D65) rows divided by the white point, so each row sums to one.
// Each row is written as g + c0*(r-g) + c2*(b-g), which is exact for neutral input.
const XYZ_ROWS: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

/// Per-pixel sRGB -> linear RGB -> XYZ (D65) -> CIELAB.
pub fn rgb_to_lab<T: Scalar>(img: &ImageTensor<T>) -> LabImage<T> {
    let mut norm = [[0.0f64; 2]; 3];
    for (row, n) in XYZ_ROWS.iter().zip(norm.iter_mut()) {
        let s: f64 = row.iter().sum();
        *n = [row[0] / s, row[2] / s];
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let r = srgb_to_linear(px[0].f64());
            let g = srgb_to_linear(px[1].f64());
            let b = srgb_to_linear(px[2].f64());
            let [x, y, z] = norm.map(|[cr, cb]| g + cr * (r - g) + cb * (b - g));
            let l = if y > LAB_EPSILON { 116.0 * y.cbrt() - 16.0 } else { LAB_KAPPA * y };
            let (fx, fy, fz) = (lab_f(x), lab_f(y), lab_f(z));
            [T::cast(l), T::cast(500.0 * (fx - fy)), T::cast(200.0 * (fy - fz))]
        })
        .collect();
    LabImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Normalized rectangle `(y0, x0, y1, x1)` in the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        y0: 0.0,
        x0: 0.0,
        y1: 1.0,
        x1: 1.0,
    };

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.y0) && in_unit(self.x0) && in_unit(self.y1) && in_unit(self.x1) && self.y0 < self.y1 && self.x0 < self.x1
    }
}

/// Source-axis lookup for output cell `i`: (lower index, upper index, upper weight).
pub(crate) fn axis_taps(len: usize, lo: f64, hi: f64, out: usize, i: usize) -> (usize, usize, f64) {
    let step = (hi - lo) * len as f64 / out as f64;
    let pos = lo * len as f64 + (i as f64 + 0.5) * step - 0.5;
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinearly samples the region `rect` of a channel-last `h x w x c` buffer onto
/// an `out_h x out_w` grid; with `hflip` the output is mirrored horizontally.
#[allow(clippy::too_many_arguments)]
pub fn sample_rect<T: Scalar>(
    data: &[T],
    h: usize,
    w: usize,
    c: usize,
    rect: CropRect,
    hflip: bool,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert_eq!(data.len(), h * w * c, "sample_rect buffer size");
    let cols: Vec<(usize, usize, T)> = (0..out_w)
        .map(|j| {
            let src_j = if hflip { out_w - 1 - j } else { j };
            let (a, b, f) = axis_taps(w, rect.x0, rect.x1, out_w, src_j);
            (a, b, T::cast(f))
        })
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1, fy) = axis_taps(h, rect.y0, rect.y1, out_h, i);
        let fy = T::cast(fy);
        let gy = T::one() - fy;
        for &(x0, x1, fx) in &cols {
            let gx = T::one() - fx;
            let p00 = &data[(y0 * w + x0) * c..][..c];
            let p01 = &data[(y0 * w + x1) * c..][..c];
            let p10 = &data[(y1 * w + x0) * c..][..c];
            let p11 = &data[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                let top = p00[ch] * gx + p01[ch] * fx;
                let bottom = p10[ch] * gx + p11[ch] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    out
}

/// Half-pixel-center bilinear resize.
pub fn resize_bilinear<T: Scalar>(img: &ImageTensor<T>, out_h: usize, out_w: usize) -> ImageTensor<T> {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be non-empty");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    crop_resize(img, CropRect::FULL, false, out_h, out_w)
}

/// Samples `rect` (optionally mirrored) of an image into an `out_h x out_w` image.
pub fn crop_resize<T: Scalar>(img: &ImageTensor<T>, rect: CropRect, hflip: bool, out_h: usize, out_w: usize) -> ImageTensor<T> {
    let data = sample_rect(&img.data, img.height, img.width, 3, rect, hflip, out_h, out_w)
        .into_iter()
        .map(clamp01)
        .collect();
    ImageTensor::from_raw_unchecked(out_h, out_w, data)
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let rgb = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| T::cast(v as f64 / 255.0)).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

pub fn save_image<T: Scalar>(path: &Path, img: &ImageTensor<T>) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-pixel non-negative region identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn uniform(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    /// `n x n` spatial grid prior: cell `(r, c)` gets label `r * n + c`.
    pub fn grid(height: usize, width: usize, n: usize) -> Self {
        let n = n.max(1);
        let labels = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                ((y * n / height) * n + x * n / width) as u32
            })
            .collect();
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// One past the largest label.
    pub fn n_labels(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| *m as usize + 1)
    }

    /// Renumbers labels to `0..n` in order of first raster occurrence.
    pub fn relabel_contiguous(&self) -> LabelMap {
        let mut map = std::collections::HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let max = self.labels.iter().copied().max().unwrap_or(0);
        let width: u8 = if max <= u8::MAX as u32 {
            1
        } else if max <= u16::MAX as u32 {
            2
        } else {
            4
        };
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + self.labels.len() * width as usize);
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&LABEL_VERSION.to_le_bytes());
        out.push(width);
        out.push(0);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &l in &self.labels {
            match width {
                1 => out.push(l as u8),
                2 => out.extend_from_slice(&(l as u16).to_le_bytes()),
                _ => out.extend_from_slice(&l.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "label map";
        if bytes.len() < LABEL_HEADER_LEN {
            return Err(Error::malformed(WHAT, bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != LABEL_MAGIC {
            return Err(Error::malformed(WHAT, 0, "bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != LABEL_VERSION {
            return Err(Error::malformed(WHAT, 4, format!("unsupported version {version}")));
        }
        let width = bytes[6] as usize;
        if !matches!(width, 1 | 2 | 4) {
            return Err(Error::malformed(WHAT, 6, format!("invalid label width {width}")));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if h == 0 || w == 0 {
            return Err(Error::malformed(WHAT, 8, "zero dimension"));
        }
        let body = &bytes[LABEL_HEADER_LEN..];
        let need = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::malformed(WHAT, 8, "dimensions overflow"))?;
        if body.len() != need {
            return Err(Error::malformed(
                WHAT,
                LABEL_HEADER_LEN + body.len().min(need),
                format!("expected {need} label bytes, found {}", body.len()),
            ));
        }
        let labels = body
            .chunks_exact(width)
            .map(|c| match width {
                1 => c[0] as u32,
                2 => u16::from_le_bytes([c[0], c[1]]) as u32,
                _ => u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }
}

const LABEL_MAGIC: &[u8; 4] = b"R2OL";
const LABEL_VERSION: u16 = 1;
const LABEL_HEADER_LEN: usize = 16;

pub fn save_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelMap::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_lab() {
        let img = ImageTensor::<f64>::from_fn(1, 2, |_, x| if x == 0 { [1.0; 3] } else { [0.0; 3] });
        let lab = rgb_to_lab(&img);
        let [l, a, b] = lab.pixel(0, 0);
        assert!((l - 100.0).abs() < 1e-9, "{l}");
        assert_eq!((a, b), (0.0, 0.0));
        assert_eq!(lab.pixel(0, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_lab_matches_closed_form() {
        // ((0.5 + 0.055) / 1.055)^2.4 = 0.2140411..., L = 116 * cbrt(.) - 16
        let img = ImageTensor::<f64>::filled(1, 1, [0.5; 3]);
        let [l, a, b] = rgb_to_lab(&img).pixel(0, 0);
        assert!((l - 53.388_964_741_114_32).abs() < 1e-9, "{l}");
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn saturated_red_is_positive_a() {
        let [l, a, b] = rgb_to_lab(&ImageTensor::<f64>::filled(1, 1, [1.0, 0.0, 0.0])).pixel(0, 0);
        // reference CIELAB of sRGB red: (53.24, 80.09, 67.20)
        assert!((l - 53.24).abs() < 0.01 && (a - 80.09).abs() < 0.02 && (b - 67.20).abs() < 0.02);
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = ImageTensor::<f32>::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.3]);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        assert_eq!(crop_resize(&img, CropRect::FULL, false, 5, 7), img);
    }

    #[test]
    fn resize_checker_to_single_pixel() {
        let img = ImageTensor::<f64>::from_fn(2, 2, |y, x| [((y + x) % 2) as f64; 3]);
        let out = resize_bilinear(&img, 1, 1);
        assert_eq!(out.pixel(0, 0), [0.5; 3]);
    }

    #[test]
    fn constant_resize_stays_constant() {
        let img = ImageTensor::<f64>::filled(9, 4, [0.2, 0.4, 0.6]);
        let out = resize_bilinear(&img, 13, 3);
        assert!(out.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ImageTensor::<f64>::from_fn(2, 3, |_, x| [x as f64 / 2.0; 3]);
        let out = crop_resize(&img, CropRect::FULL, true, 2, 3);
        for x in 0..3 {
            assert_eq!(out.pixel(1, x), img.pixel(1, 2 - x));
        }
    }

    #[test]
    fn label_map_minimal_and_truncated() {
        let m = LabelMap::uniform(1, 1, 0);
        assert_eq!(LabelMap::from_bytes(&m.to_bytes()).unwrap(), m);
        let bytes = LabelMap::grid(4, 4, 2).to_bytes();
        let err = LabelMap::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }), "{err}");
        assert!(matches!(LabelMap::from_bytes(&bytes[..10]), Err(Error::Malformed { offset: 10, .. })));
    }

    #[test]
    fn grid_prior_labels() {
        let g = LabelMap::grid(4, 4, 2);
        assert_eq!(g.labels(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::<f32>::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::<f32>::new(1, 2, vec![0.0; 3]).is_err());
    }
}
