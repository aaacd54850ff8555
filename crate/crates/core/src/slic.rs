//! SLIC superpixels in CIELAB space with a 4-connectivity post-pass.

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{LabImage, LabelMap};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicConfig {
    pub n_segments: usize,
    /// Compactness `m`: weight of the spatial term relative to color.
    pub compactness: f64,
    pub max_iters: usize,
    /// Fragments smaller than this fraction of the average segment size are merged.
    pub min_region_fraction: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            n_segments: 100,
            compactness: 10.0,
            max_iters: 10,
            min_region_fraction: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 || !(self.compactness > 0.0) || self.max_iters == 0 || self.min_region_fraction < 0.0 {
            return Err(Error::Config(format!("invalid SLIC config {self:?}")));
        }
        Ok(())
    }
}

/// Cluster state `(L, a, b, y, x)`.
pub type SlicCenter<T> = [T; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct SlicResult<T> {
    pub labels: LabelMap,
    /// Final cluster states before connectivity enforcement.
    pub centers: Vec<SlicCenter<T>>,
    pub n_regions: usize,
}

/// Grid layout with at most `n` cells whose column count tracks the aspect ratio.
fn grid_shape(h: usize, w: usize, n: usize) -> (usize, usize) {
    let cols = ((n as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w.min(n));
    let rows = (n / cols).clamp(1, h);
    (rows, cols)
}

fn gradient<T: Scalar>(img: &LabImage<T>, y: usize, x: usize) -> T {
    let (h, w) = (img.height, img.width);
    let at = |yy: usize, xx: usize| img.pixel(yy, xx);
    let (l, r) = (at(y, x.saturating_sub(1)), at(y, (x + 1).min(w - 1)));
    let (u, d) = (at(y.saturating_sub(1), x), at((y + 1).min(h - 1), x));
    (0..3).map(|c| (r[c] - l[c]).powi(2) + (d[c] - u[c]).powi(2)).sum()
}

/// Segments a CIELAB image into at most `cfg.n_segments` 4-connected regions.
pub fn slic_segment<T: Scalar>(img: &LabImage<T>, cfg: &SlicConfig) -> Result<SlicResult<T>> {
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    let n = cfg.n_segments.min(h * w);
    let (rows, cols) = grid_shape(h, w, n);
    let k = rows * cols;
    let step = ((h * w) as f64 / k as f64).sqrt();
    let (sy, sx) = (h as f64 / rows as f64, w as f64 / cols as f64);

    let mut centers: Vec<SlicCenter<T>> = Vec::with_capacity(k);
    for r in 0..rows {
        for c in 0..cols {
            let mut cy = (r as f64 + 0.5) * sy - 0.5;
            let mut cx = (c as f64 + 0.5) * sx - 0.5;
            // Move to the lowest-gradient pixel of the 3x3 neighborhood if strictly lower.
            let (py, px) = (cy.round().clamp(0.0, (h - 1) as f64) as usize, cx.round().clamp(0.0, (w - 1) as f64) as usize);
            let mut best = gradient(img, py, px);
            for yy in py.saturating_sub(1)..=(py + 1).min(h - 1) {
                for xx in px.saturating_sub(1)..=(px + 1).min(w - 1) {
                    let g = gradient(img, yy, xx);
                    if g < best {
                        best = g;
                        cy = yy as f64;
                        cx = xx as f64;
                    }
                }
            }
            let (py, px) = (cy.round() as usize, cx.round() as usize);
            let [l, a, b] = img.pixel(py, px);
            centers.push([l, a, b, T::cast(cy), T::cast(cx)]);
        }
    }

    // Every pixel starts on its grid cell so the map is total even outside all windows.
    let mut labels: Vec<u32> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let r = ((y as f64 / sy) as usize).min(rows - 1);
            let c = ((x as f64 / sx) as usize).min(cols - 1);
            (r * cols + c) as u32
        })
        .collect();
    let spatial = T::cast((cfg.compactness / step).powi(2));
    let mut dist = vec![T::infinity(); h * w];

    for _ in 0..cfg.max_iters {
        dist.iter_mut().for_each(|d| *d = T::infinity());
        for (ci, cen) in centers.iter().enumerate() {
            let (cy, cx) = (cen[3].f64(), cen[4].f64());
            let y_lo = (cy - step).ceil().max(0.0) as usize;
            let y_hi = ((cy + step).floor() as isize).min(h as isize - 1);
            let x_lo = (cx - step).ceil().max(0.0) as usize;
            let x_hi = ((cx + step).floor() as isize).min(w as isize - 1);
            if y_hi < 0 || x_hi < 0 {
                continue;
            }
            for y in y_lo..=y_hi as usize {
                for x in x_lo..=x_hi as usize {
                    let p = img.pixel(y, x);
                    let dc = (0..3).map(|c| (p[c] - cen[c]).powi(2)).sum::<T>();
                    let ds = (T::cast(y) - cen[3]).powi(2) + (T::cast(x) - cen[4]).powi(2);
                    let d = dc + ds * spatial;
                    let i = y * w + x;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[T::zero(); 5]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let p = img.data[i];
            let s = &mut sums[l as usize];
            for c in 0..3 {
                s[c] += p[c];
            }
            s[3] += T::cast(i / w);
            s[4] += T::cast(i % w);
            counts[l as usize] += 1;
        }
        for ((cen, s), &cnt) in centers.iter_mut().zip(&sums).zip(&counts) {
            if cnt > 0 {
                let inv = T::one() / T::cast(cnt);
                for c in 0..5 {
                    cen[c] = s[c] * inv;
                }
            }
        }
    }

    let min_size = ((h * w) as f64 / k as f64 * cfg.min_region_fraction).round() as usize;
    let labels = enforce_connectivity(h, w, &labels, min_size);
    let n_regions = labels.iter().max().map_or(0, |m| *m as usize + 1);
    Ok(SlicResult {
        labels: LabelMap::new(h, w, labels)?,
        centers,
        n_regions,
    })
}

fn neighbors4(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// 4-connected components of `labels`; returns per-pixel component ids and sizes.
pub(crate) fn connected_components(h: usize, w: usize, labels: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            for q in neighbors4(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Merges disconnected fragments and undersized components into the 4-adjacent
/// component sharing the longest boundary (ties: smaller label), then relabels
/// components to `0..n` in raster order of first occurrence.
fn enforce_connectivity(h: usize, w: usize, labels: &[u32], min_size: usize) -> Vec<u32> {
    let (mut comp, mut sizes) = connected_components(h, w, labels);
    let n_comp = sizes.len();
    let comp_label: Vec<u32> = {
        let mut v = vec![0; n_comp];
        for (i, &c) in comp.iter().enumerate() {
            v[c] = labels[i];
        }
        v
    };
    // The largest component of each label is its primary (ties: first in raster order).
    let mut primary = std::collections::HashMap::new();
    for c in 0..n_comp {
        let e = primary.entry(comp_label[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for (i, &c) in comp.iter().enumerate() {
        members[c].push(i);
    }
    let mut alive = vec![true; n_comp];
    let mut is_fragment: Vec<bool> = (0..n_comp).map(|c| primary[&comp_label[c]] != c).collect();
    let mut owner_label = comp_label.clone();

    let mut queue: BinaryHeap<Reverse<(usize, usize)>> = (0..n_comp).map(|c| Reverse((sizes[c], c))).collect();
    while let Some(Reverse((size, c))) = queue.pop() {
        if !alive[c] || size != sizes[c] {
            continue;
        }
        if !is_fragment[c] && sizes[c] >= min_size {
            continue;
        }
        let mut shared: std::collections::BTreeMap<usize, usize> = Default::default();
        for &p in &members[c] {
            for q in neighbors4(p, h, w) {
                if comp[q] != c {
                    *shared.entry(comp[q]).or_default() += 1;
                }
            }
        }
        let Some((&target, _)) = shared
            .iter()
            .max_by(|(a, la), (b, lb)| la.cmp(lb).then(owner_label[**b].cmp(&owner_label[**a])))
        else {
            continue;
        };
        let moved = std::mem::take(&mut members[c]);
        for &p in &moved {
            comp[p] = target;
        }
        members[target].extend(moved);
        sizes[target] += sizes[c];
        sizes[c] = 0;
        alive[c] = false;
        is_fragment[c] = false;
        if is_fragment[target] || sizes[target] < min_size {
            queue.push(Reverse((sizes[target], target)));
        }
        owner_label[c] = owner_label[target];
    }

    let mut remap = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            if remap[c] == u32::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{rgb_to_lab, ImageTensor};

    fn lab_of(img: &ImageTensor<f64>) -> LabImage<f64> {
        rgb_to_lab(img)
    }

    #[test]
    fn uniform_quadrants() {
        let lab = lab_of(&ImageTensor::filled(8, 8, [0.4, 0.5, 0.6]));
        for m in [0.1, 10.0, 40.0] {
            let res = slic_segment(&lab, &SlicConfig { n_segments: 4, compactness: m, ..Default::default() }).unwrap();
            // Voronoi oracle of the four grid centers at (1.5, 1.5), (1.5, 5.5), ...
            for y in 0..8 {
                for x in 0..8 {
                    let want = (y / 4) * 2 + x / 4;
                    assert_eq!(res.labels.get(y, x) as usize, want, "m={m} ({y},{x})");
                }
            }
            assert_eq!(res.n_regions, 4);
        }
    }

    #[test]
    fn single_segment_covers_everything() {
        let img = ImageTensor::from_fn(9, 11, |y, x| [(y * 7 % 5) as f64 / 5.0, x as f64 / 11.0, 0.5]);
        let res = slic_segment(&lab_of(&img), &SlicConfig { n_segments: 1, ..Default::default() }).unwrap();
        assert!(res.labels.labels().iter().all(|l| *l == 0));
        assert_eq!(res.n_regions, 1);
    }

    #[test]
    fn black_white_halves_split_exactly() {
        let img = ImageTensor::from_fn(16, 16, |_, x| if x < 8 { [0.0; 3] } else { [1.0; 3] });
        let res = slic_segment(&lab_of(&img), &SlicConfig { n_segments: 2, ..Default::default() }).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(res.labels.get(y, x), (x >= 8) as u32);
            }
        }
    }

    #[test]
    fn tiny_image_falls_back_to_pixel_count() {
        let img = ImageTensor::from_fn(2, 2, |y, x| [(y * 2 + x) as f64 / 3.0; 3]);
        let res = slic_segment(&lab_of(&img), &SlicConfig { n_segments: 100, min_region_fraction: 0.0, ..Default::default() }).unwrap();
        assert!(res.n_regions <= 4);
    }

    #[test]
    fn fragments_merge_into_longest_boundary() {
        // label 1 has a stray pixel at (0,0) inside label 0's area
        #[rustfmt::skip]
        let labels = vec![
            1, 0, 0, 2,
            0, 0, 0, 2,
            1, 1, 2, 2,
            1, 1, 2, 2,
        ];
        let out = enforce_connectivity(4, 4, &labels, 0);
        assert_eq!(out[0], out[1]);
        let (_, sizes) = connected_components(4, 4, &out);
        assert_eq!(sizes.len(), 3);
    }
}
