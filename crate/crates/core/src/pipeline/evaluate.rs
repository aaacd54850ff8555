//! Evaluation drivers over a dataset with ground-truth object labels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::{FeatureMap, Mode, NetworkPair};
use crate::error::{Error, Result};
use crate::eval::{abo, masks_per_label, unsup_fg_segment, upsample_nearest, BinaryMask};
use crate::imaging::LabelMap;
use crate::optim::OptimizerState;
use crate::pipeline::{full_prior, grid_prior, stream_seed, Checkpoint, Dataset, RunConfig};
use crate::refine::{k_at, refine_batch, ClusterScope};
use crate::scalar::Scalar;

const TAG_EVAL: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AboRow {
    pub epoch: usize,
    pub k: usize,
    pub refined_abo: f64,
    pub slic_abo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegRow {
    pub name: String,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub miou: f64,
}

/// Network restored from a checkpoint, with its completed-epoch count.
pub fn load_network<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<(NetworkPair<T>, usize)> {
    let ck = Checkpoint::<T>::load(path)?;
    let mut net = NetworkPair::new(&cfg.encoder, &cfg.heads, 0)?;
    let mut opt = OptimizerState::new(&net.online.params());
    ck.restore(&mut net, &mut opt)?;
    Ok((net, ck.epoch as usize))
}

fn gt_of<T>(data: &Dataset<T>) -> Result<&[LabelMap]> {
    data.gt.as_deref().ok_or_else(|| Error::Config("evaluation needs ground-truth label maps".into()))
}

fn objects(gt: &LabelMap) -> Vec<BinaryMask> {
    masks_per_label(gt).into_iter().filter(|(l, _)| *l > 0).map(|(_, m)| m).collect()
}

/// ABO pooled over all ground-truth objects, each scored against one image's proposal map.
fn pooled_abo(gt: &[LabelMap], proposals: &[LabelMap]) -> Result<f64> {
    let mut best = Vec::new();
    for (g, p) in gt.iter().zip(proposals) {
        let objs = objects(g);
        if objs.is_empty() {
            continue;
        }
        let p = if (p.height(), p.width()) == (g.height(), g.width()) { p.clone() } else { upsample_nearest(p, g.height(), g.width()) };
        let props: Vec<BinaryMask> = masks_per_label(&p).into_iter().map(|(_, m)| m).collect();
        best.extend(abo(&objs, &props)?.best);
    }
    if best.is_empty() {
        return Err(Error::Degenerate("no ground-truth objects in the corpus".into()));
    }
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

/// ABO of the raw region prior at image resolution.
pub fn prior_abo<T: Scalar>(cfg: &RunConfig, data: &Dataset<T>) -> Result<f64> {
    let gt = gt_of(data)?;
    let priors = data.images.iter().map(|im| full_prior(im, &cfg.prior)).collect::<Result<Vec<_>>>()?;
    pooled_abo(gt, &priors)
}

/// ABO of masks refined with the target network at `k` clusters.
pub fn refined_abo<T: Scalar>(cfg: &RunConfig, net: &NetworkPair<T>, data: &Dataset<T>, k: usize, scope: ClusterScope) -> Result<f64> {
    let gt = gt_of(data)?;
    let mid = cfg.encoder.mid_side();
    let mut masks = Vec::with_capacity(data.len());
    for (bi, chunk) in (0..data.len()).collect::<Vec<_>>().chunks(cfg.train.batch_size).enumerate() {
        let imgs: Vec<_> = chunk.iter().map(|&i| data.images[i].clone()).collect();
        let feats = net.target.encoder.forward(&imgs, Mode::Eval)?;
        let maps: Vec<FeatureMap<T>> = (0..chunk.len()).map(|b| FeatureMap::from_act(&feats.mid, b)).collect();
        let priors = imgs.iter().map(|im| grid_prior(im, &cfg.prior, mid)).collect::<Result<Vec<_>>>()?;
        let seed = stream_seed(cfg.train.seed, TAG_EVAL, bi as u64, 0);
        let (m, _) = refine_batch(&maps, &priors, k, scope, seed, &cfg.kmeans)?;
        masks.extend(m.iter().map(|m| m.to_label_map()));
    }
    pooled_abo(gt, &masks)
}

/// One row per checkpoint: refined ABO at that checkpoint's K, and the (constant) prior ABO.
pub fn eval_abo_over_checkpoints<T: Scalar>(cfg: &RunConfig, data: &Dataset<T>, checkpoints: &[PathBuf], scope: ClusterScope) -> Result<Vec<AboRow>> {
    let slic = prior_abo(cfg, data)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (net, epoch) = load_network::<T>(cfg, path)?;
        let k = k_at(&cfg.curriculum, epoch.min(cfg.train.epochs))?;
        rows.push(AboRow {
            epoch,
            k,
            refined_abo: refined_abo(cfg, &net, data, k, scope)?,
            slic_abo: slic,
        });
    }
    Ok(rows)
}

pub fn write_abo_csv(path: &Path, rows: &[AboRow]) -> Result<()> {
    let mut s = String::from("epoch,K,refined_abo,slic_abo\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.epoch, r.k, r.refined_abo, r.slic_abo).expect("writing to a string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Foreground segmentation from final-tap target features; the foreground is every
/// non-zero ground-truth label.
pub fn eval_seg<T: Scalar>(cfg: &RunConfig, net: &NetworkPair<T>, data: &Dataset<T>, k: usize) -> Result<Vec<SegRow>> {
    let gt = gt_of(data)?;
    let mut rows = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(cfg.train.batch_size) {
        let imgs: Vec<_> = chunk.iter().map(|&i| data.images[i].clone()).collect();
        let feats = net.target.encoder.forward(&imgs, Mode::Eval)?;
        for (b, &i) in chunk.iter().enumerate() {
            let g = &gt[i];
            let fg = BinaryMask::new(g.height(), g.width(), g.labels().iter().map(|&l| l > 0).collect())?;
            let r = unsup_fg_segment(&FeatureMap::from_act(&feats.fin, b), &fg, k, stream_seed(cfg.train.seed, TAG_EVAL, i as u64, 1))?;
            rows.push(SegRow {
                name: data.names[i].clone(),
                fg_iou: r.fg_iou,
                bg_iou: r.bg_iou,
                miou: r.miou,
            });
        }
    }
    Ok(rows)
}
