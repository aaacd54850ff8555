//! Region refinement: pool features over a region prior, cluster the region embeddings
//! with K-means, and project the clusters back onto the feature grid and into each view.

mod curriculum;
mod kmeans;

pub use curriculum::{k_at, CurriculumConfig, Rounding, ScheduleKind};
pub use kmeans::{kmeans, normalized_objective, ClusterModel, KMeansObjective, KMeansOptions};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::ViewGeometry;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::imaging::{axis_taps, sample_rect, LabelMap};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbedding<T> {
    pub id: u32,
    pub embedding: Vec<T>,
    pub cells: usize,
}

/// Region embeddings of one image, ordered by region id.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbeddings<T> {
    pub dim: usize,
    pub regions: Vec<RegionEmbedding<T>>,
}

/// Per-image cluster-id map on the feature grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedMask {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    /// Sorted distinct ids occurring in `ids`.
    pub present: Vec<u32>,
}

impl RefinedMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width || ids.is_empty() {
            return Err(Error::Shape(format!("{} ids for a {height}x{width} mask", ids.len())));
        }
        let mut present = ids.clone();
        present.sort_unstable();
        present.dedup();
        Ok(Self {
            height,
            width,
            ids,
            present,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.present.binary_search(&id).is_ok()
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap::new(self.height, self.width, self.ids.clone()).expect("mask shape is consistent")
    }

    pub fn relabel(&self, map: impl Fn(u32) -> u32) -> RefinedMask {
        RefinedMask::new(self.height, self.width, self.ids.iter().map(|&i| map(i)).collect()).expect("shape preserved")
    }
}

/// How region embeddings are grouped for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    /// One K-means over all regions of the mini-batch; ids are shared across images.
    Batch,
    /// Independent K-means per image.
    PerImage,
}

/// Mean feature of every region occupying at least one cell.
pub fn pool_regions<T: Scalar>(features: &FeatureMap<T>, labels: &LabelMap) -> Result<RegionEmbeddings<T>> {
    if labels.height() != features.h || labels.width() != features.w {
        return Err(Error::Shape(format!(
            "label map {}x{} does not match feature grid {}x{}",
            labels.height(),
            labels.width(),
            features.h,
            features.w
        )));
    }
    let d = features.d;
    let mut acc: BTreeMap<u32, (Vec<T>, usize)> = BTreeMap::new();
    for y in 0..features.h {
        for x in 0..features.w {
            let entry = acc.entry(labels.get(y, x)).or_insert_with(|| (vec![T::zero(); d], 0));
            for (a, &v) in entry.0.iter_mut().zip(features.cell(y, x)) {
                *a += v;
            }
            entry.1 += 1;
        }
    }
    let regions = acc
        .into_iter()
        .map(|(id, (mut sum, cells))| {
            let inv = T::one() / T::cast(cells);
            sum.iter_mut().for_each(|v| *v *= inv);
            RegionEmbedding { id, embedding: sum, cells }
        })
        .collect();
    Ok(RegionEmbeddings { dim: d, regions })
}

/// Majority label of each covering pixel block; ties go to the smaller label.
pub fn downsample_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} to {out_h}x{out_w}")));
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for i in 0..out_h {
        let (y0, y1) = (i * h / out_h, (i + 1) * h / out_h);
        for j in 0..out_w {
            let (x0, x1) = (j * w / out_w, (j + 1) * w / out_w);
            counts.clear();
            for y in y0..y1 {
                for x in x0..x1 {
                    *counts.entry(labels.get(y, x)).or_default() += 1;
                }
            }
            let mut best = (0u32, 0usize);
            for (&l, &c) in &counts {
                if c > best.1 {
                    best = (l, c);
                }
            }
            out.push(best.0);
        }
    }
    LabelMap::new(out_h, out_w, out)
}

/// Paints each cell with the cluster of its region. `regions` and `priors` are per image;
/// `cluster.assignment` indexes the concatenation of all images' regions in order.
pub fn refine_masks<T: Scalar>(regions: &[RegionEmbeddings<T>], cluster: &ClusterModel<T>, priors: &[LabelMap]) -> Result<Vec<RefinedMask>> {
    if regions.len() != priors.len() {
        return Err(Error::Shape(format!("{} embedding sets for {} label maps", regions.len(), priors.len())));
    }
    let total: usize = regions.iter().map(|r| r.regions.len()).sum();
    if total != cluster.n_points() {
        return Err(Error::Shape(format!("clustering covers {} regions, batch has {total}", cluster.n_points())));
    }
    let mut offset = 0;
    let mut masks = Vec::with_capacity(regions.len());
    for (emb, prior) in regions.iter().zip(priors) {
        let lookup: BTreeMap<u32, u32> = emb
            .regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, cluster.assignment[offset + i] as u32))
            .collect();
        offset += emb.regions.len();
        let ids = prior
            .labels()
            .iter()
            .map(|l| lookup.get(l).copied().ok_or_else(|| Error::Shape(format!("region {l} has no embedding"))))
            .collect::<Result<Vec<u32>>>()?;
        masks.push(RefinedMask::new(prior.height(), prior.width(), ids)?);
    }
    Ok(masks)
}

/// Row-major matrix of all region embeddings in batch order.
pub fn stack_embeddings<T: Scalar>(regions: &[RegionEmbeddings<T>]) -> Result<(Vec<T>, usize)> {
    let dim = regions.first().map_or(0, |r| r.dim);
    if regions.iter().any(|r| r.dim != dim) {
        return Err(Error::Shape("region embeddings of different widths".into()));
    }
    let data: Vec<T> = regions.iter().flat_map(|r| r.regions.iter().flat_map(|e| e.embedding.iter().copied())).collect();
    if data.is_empty() {
        return Err(Error::Degenerate("no region embeddings to cluster".into()));
    }
    Ok((data, dim))
}

/// Pools, clusters and paints masks for a batch of mid-level feature maps.
pub fn refine_batch<T: Scalar>(
    features: &[FeatureMap<T>],
    priors: &[LabelMap],
    k: usize,
    scope: ClusterScope,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<(Vec<RefinedMask>, Vec<ClusterModel<T>>)> {
    if features.len() != priors.len() {
        return Err(Error::Shape(format!("{} feature maps for {} priors", features.len(), priors.len())));
    }
    let regions = features.iter().zip(priors).map(|(f, p)| pool_regions(f, p)).collect::<Result<Vec<_>>>()?;
    match scope {
        ClusterScope::Batch => {
            let (data, dim) = stack_embeddings(&regions)?;
            let model = kmeans(&data, dim, k, seed, opts)?;
            Ok((refine_masks(&regions, &model, priors)?, vec![model]))
        }
        ClusterScope::PerImage => {
            let mut masks = Vec::with_capacity(regions.len());
            let mut models = Vec::with_capacity(regions.len());
            for (i, (r, p)) in regions.iter().zip(priors).enumerate() {
                let one = std::slice::from_ref(r);
                let (data, dim) = stack_embeddings(one)?;
                let model = kmeans(&data, dim, k, seed.wrapping_add(i as u64), opts)?;
                masks.extend(refine_masks(one, &model, std::slice::from_ref(p))?);
                models.push(model);
            }
            Ok((masks, models))
        }
    }
}

/// Resamples a mask into a view: bilinear weights per present id, argmax per output cell.
pub fn align_mask(mask: &RefinedMask, geom: &ViewGeometry, out_h: usize, out_w: usize) -> Result<RefinedMask> {
    if !geom.crop.is_valid() {
        return Err(Error::OutOfRange(format!("invalid crop {:?}", geom.crop)));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("empty output grid".into()));
    }
    let c = mask.present.len();
    let mut onehot = vec![0.0f64; mask.ids.len() * c];
    for (cell, id) in mask.ids.iter().enumerate() {
        let ch = mask.present.binary_search(id).expect("present covers ids");
        onehot[cell * c + ch] = 1.0;
    }
    let sampled = sample_rect(&onehot, mask.height, mask.width, c, geom.crop, geom.hflip, out_h, out_w);
    let mut ids = Vec::with_capacity(out_h * out_w);
    for (cell, w) in sampled.chunks(c).enumerate() {
        let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..c).filter(|&i| w[i] == top).collect();
        if tied.len() == 1 {
            ids.push(mask.present[tied[0]]);
            continue;
        }
        // Ties go to the id under the heaviest bilinear tap (positional, so relabel-invariant).
        let (i, j) = (cell / out_w, cell % out_w);
        let src_j = if geom.hflip { out_w - 1 - j } else { j };
        let (y0, y1, fy) = axis_taps(mask.height, geom.crop.y0, geom.crop.y1, out_h, i);
        let (x0, x1, fx) = axis_taps(mask.width, geom.crop.x0, geom.crop.x1, out_w, src_j);
        let mut taps = [
            ((1.0 - fy) * (1.0 - fx), y0, x0),
            ((1.0 - fy) * fx, y0, x1),
            (fy * (1.0 - fx), y1, x0),
            (fy * fx, y1, x1),
        ];
        taps.sort_by(|a, b| b.0.total_cmp(&a.0));
        let id = taps
            .iter()
            .map(|&(_, y, x)| mask.get(y, x))
            .find(|id| tied.iter().any(|&t| mask.present[t] == *id))
            .unwrap_or(mask.present[tied[0]]);
        ids.push(id);
    }
    RefinedMask::new(out_h, out_w, ids)
}
