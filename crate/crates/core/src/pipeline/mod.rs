//! Orchestration: configuration, data, training loop, checkpoints and evaluation drivers.

pub mod checkpoint;
pub mod config;
mod evaluate;
pub mod synthetic;
mod train;

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_VERSION};
pub use config::{DataConfig, OutputConfig, PriorConfig, PriorKind, RunConfig, TrainConfig};
pub use evaluate::{eval_abo_over_checkpoints, eval_seg, load_network, prior_abo, refined_abo, write_abo_csv, AboRow, SegRow};
pub use synthetic::{gen_synthetic, synthesize, synthesize_corpus, ShapeKind, SyntheticCorpusSpec, SyntheticSample};
pub use train::{pretrain, pretrain_with, read_metrics, MetricsRow, PretrainOptions, PretrainSummary, METRICS_HEADER};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{load_image, load_label_map, resize_bilinear, rgb_to_lab, ImageTensor, LabelMap};
use crate::refine::downsample_labels;
use crate::scalar::Scalar;
use crate::slic::slic_segment;

/// Derives an independent seed for one use of randomness from the run seed.
pub fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    [tag, a, b].into_iter().fold(mix(seed), |h, v| mix(h ^ v))
}

/// Images at the configured side, with optional ground-truth object labels (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor<T>>,
    pub gt: Option<Vec<LabelMap>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        match (&cfg.path, &cfg.synthetic) {
            (Some(p), None) => Self::load_dir(p, cfg.side),
            (None, Some(s)) => Self::from_synthetic(s, cfg.side),
            _ => Err(Error::Config("set exactly one of data.path and data.synthetic".into())),
        }
    }

    pub fn from_synthetic(spec: &SyntheticCorpusSpec, side: usize) -> Result<Self> {
        let samples = synthesize_corpus::<T>(spec)?;
        let names = (0..samples.len()).map(|i| format!("{i:05}")).collect();
        let (images, gt) = samples.into_iter().map(|s| (resize_bilinear(&s.image, side, side), s.gt)).unzip();
        Ok(Self {
            names,
            images,
            gt: Some(gt),
        })
    }

    /// Reads `dir/images/*.png`; ground truth is used when every image has `dir/gt/<stem>.r2ol`.
    pub fn load_dir(dir: &Path, side: usize) -> Result<Self> {
        let mut data = Self::load_images(&dir.join("images"), side)?;
        let gt_paths: Vec<PathBuf> = data.names.iter().map(|n| dir.join("gt").join(format!("{n}.r2ol"))).collect();
        if !gt_paths.is_empty() && gt_paths.iter().all(|p| p.is_file()) {
            data.gt = Some(gt_paths.iter().map(|p| load_label_map(p)).collect::<Result<Vec<_>>>()?);
        }
        Ok(data)
    }

    /// Reads every PNG directly inside `dir`, sorted by file name.
    pub fn load_images(dir: &Path, side: usize) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let names = paths
            .iter()
            .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let images = paths
            .iter()
            .map(|p| load_image::<T>(p).map(|im| resize_bilinear(&im, side, side)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { names, images, gt: None })
    }
}

/// The region prior of an image at full resolution.
pub fn full_prior<T: Scalar>(img: &ImageTensor<T>, prior: &PriorConfig) -> Result<LabelMap> {
    match prior.kind {
        PriorKind::Slic => Ok(slic_segment(&rgb_to_lab(img), &prior.slic)?.labels),
        PriorKind::Grid => Ok(LabelMap::grid(img.height(), img.width(), prior.grid_n)),
    }
}

/// The region prior reduced to the `side x side` feature grid.
pub fn grid_prior<T: Scalar>(img: &ImageTensor<T>, prior: &PriorConfig, side: usize) -> Result<LabelMap> {
    downsample_labels(&full_prior(img, prior)?, side, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_and_repeat() {
        let a = stream_seed(1, 2, 3, 4);
        assert_eq!(a, stream_seed(1, 2, 3, 4));
        assert_ne!(a, stream_seed(1, 2, 4, 3));
        assert_ne!(a, stream_seed(0, 2, 3, 4));
    }

    #[test]
    fn disk_and_memory_corpora_agree() {
        let spec = SyntheticCorpusSpec { n_images: 3, side: 16, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(&spec, dir.path()).unwrap();
        let disk = Dataset::<f64>::load_dir(dir.path(), 16).unwrap();
        let mem = Dataset::<f64>::from_synthetic(&spec, 16).unwrap();
        assert_eq!(disk.gt, mem.gt);
        for (a, b) in disk.images.iter().zip(&mem.images) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
