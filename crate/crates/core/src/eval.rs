//! Mask metrics: IoU, ABO, mIoU, Hungarian matching and the unsupervised
//! foreground-segmentation protocol.

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::imaging::LabelMap;
use crate::refine::{kmeans, KMeansOptions};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Cells of `map` equal to `label`.
    pub fn from_label(map: &LabelMap, label: u32) -> Self {
        Self {
            height: map.height(),
            width: map.width(),
            bits: map.labels().iter().map(|&l| l == label).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// One mask per distinct label of `map`, in ascending label order.
pub fn masks_per_label(map: &LabelMap) -> Vec<(u32, BinaryMask)> {
    let mut labels = map.labels().to_vec();
    labels.sort_unstable();
    labels.dedup();
    labels.into_iter().map(|l| (l, BinaryMask::from_label(map, l))).collect()
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!("{}x{} vs {}x{} masks", a.height, a.width, b.height, b.width)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AboReport {
    /// Best IoU of each ground-truth region.
    pub best: Vec<f64>,
    pub abo: f64,
}

/// Average over ground-truth regions of the best IoU any proposal reaches.
pub fn abo(gt: &[BinaryMask], proposals: &[BinaryMask]) -> Result<AboReport> {
    if gt.is_empty() {
        return Err(Error::Degenerate("ABO needs at least one ground-truth region".into()));
    }
    if proposals.is_empty() {
        return Err(Error::Degenerate("ABO needs at least one proposal".into()));
    }
    let best = gt
        .iter()
        .map(|g| proposals.iter().map(|p| iou(g, p)).try_fold(0.0f64, |m, v| v.map(|v| m.max(v))))
        .collect::<Result<Vec<f64>>>()?;
    let abo = best.iter().sum::<f64>() / best.len() as f64;
    Ok(AboReport { best, abo })
}

/// Dense `rows x cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} costs for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transposed(&self) -> Self {
        let data = (0..self.cols * self.rows).map(|i| self.get(i % self.rows, i / self.rows)).collect();
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs; entry `r` is row `r`'s column.
pub fn hungarian(cost: &CostMatrix) -> Vec<Option<usize>> {
    if cost.rows == 0 || cost.cols == 0 {
        return vec![None; cost.rows];
    }
    if cost.rows > cost.cols {
        let cols = hungarian(&cost.transposed());
        let mut rows = vec![None; cost.rows];
        for (c, r) in cols.into_iter().enumerate() {
            if let Some(r) = r {
                rows[r] = Some(c);
            }
        }
        return rows;
    }
    // Shortest augmenting paths with potentials; indices are 1-based, 0 is a sentinel.
    let (n, m) = (cost.rows, cost.cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if owner[j] > 0 {
            rows[owner[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &CostMatrix, assignment: &[Option<usize>]) -> f64 {
    assignment.iter().enumerate().filter_map(|(r, c)| c.map(|c| cost.get(r, c))).sum()
}

/// `counts[gt][pred]` over two label maps with labels below `classes`.
pub fn confusion(gt: &LabelMap, pred: &LabelMap, classes: usize) -> Result<Vec<Vec<u64>>> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(Error::Shape("confusion needs maps of equal size".into()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        let (g, p) = (g as usize, p as usize);
        if g >= classes || p >= classes {
            return Err(Error::OutOfRange(format!("label {} outside {classes} classes", g.max(p))));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Mean over classes of `TP / (TP + FP + FN)`, skipping classes absent from both sides.
pub fn miou(confusion: &[Vec<u64>]) -> f64 {
    let n = confusion.len();
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..n {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|r| confusion[r][c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom > 0 {
            sum += tp as f64 / denom as f64;
            used += 1;
        }
    }
    if used == 0 {
        0.0
    } else {
        sum / used as f64
    }
}

/// Nearest-neighbour resampling of a label grid with half-pixel centres.
pub fn upsample_nearest(map: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let (h, w) = (map.height(), map.width());
    let src = |i: usize, n: usize, len: usize| (((i as f64 + 0.5) * len as f64 / n as f64) as usize).min(len - 1);
    let labels = (0..out_h * out_w).map(|i| map.get(src(i / out_w, out_h, h), src(i % out_w, out_w, w))).collect();
    LabelMap::new(out_h, out_w, labels).expect("sizes agree")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub clusters: LabelMap,
    pub foreground: BinaryMask,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Mean of the foreground and background IoU.
    pub miou: f64,
    pub k_used: usize,
}

/// Clusters the feature grid, upsamples to the ground-truth size, and picks the
/// foreground segment by Hungarian matching on `1 - IoU` against {foreground, background}.
pub fn unsup_fg_segment<T: Scalar>(features: &FeatureMap<T>, gt: &BinaryMask, k: usize, seed: u64) -> Result<SegmentationResult> {
    if features.h == 0 || features.w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let model = kmeans(&features.data, features.d, k, seed, &KMeansOptions::default())?;
    let grid = LabelMap::new(features.h, features.w, model.assignment.iter().map(|&a| a as u32).collect())?;
    let clusters = upsample_nearest(&grid, gt.height, gt.width);
    let bg = gt.complement();
    let segments: Vec<BinaryMask> = (0..model.k as u32).map(|c| BinaryMask::from_label(&clusters, c)).collect();
    let mut costs = Vec::with_capacity(2 * model.k);
    for target in [gt, &bg] {
        for s in &segments {
            costs.push(1.0 - iou(target, s)?);
        }
    }
    let matrix = CostMatrix::new(2, model.k, costs)?;
    let chosen = hungarian(&matrix)[0].unwrap_or(0);
    let foreground = segments[chosen].clone();
    let fg_iou = iou(gt, &foreground)?;
    let bg_iou = iou(&bg, &foreground.complement())?;
    Ok(SegmentationResult {
        clusters,
        foreground,
        fg_iou,
        bg_iou,
        miou: (fg_iou + bg_iou) / 2.0,
        k_used: model.k,
    })
}
