//! Masked BYOL objective over refined masks.

use serde::{Deserialize, Serialize};

use crate::encoder::{Act, BnStats, EncoderCache, NetworkPair, OnlineNet, MLP_PARAMS};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::refine::RefinedMask;
use crate::scalar::Scalar;

/// Norm floor used by the cosine in [`byol_pair_loss`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Mean over all (image, cluster, direction) triples.
    #[default]
    PerTriple,
    /// Mean within each image, then over images.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Online branch on view 1, target on view 2.
    OneToTwo,
    TwoToOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss<T> {
    pub image: usize,
    pub cluster: u32,
    pub direction: Direction,
    pub loss: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub per_pair: Vec<PairLoss<T>>,
    /// Number of (image, cluster, direction) triples.
    pub n_pairs: usize,
    /// Images whose two views share no cluster.
    pub skipped_images: usize,
    /// Vectors whose norm fell under [`NORM_EPS`].
    pub guarded_norms: usize,
}

/// Batch statistics to fold into the online running averages after a step.
#[derive(Debug, Clone)]
pub struct OnlineStats<T> {
    encoder: Vec<Vec<BnStats<T>>>,
    projector: Vec<BnStats<T>>,
    predictor: Vec<BnStats<T>>,
}

impl<T: Scalar> OnlineStats<T> {
    pub fn commit(&self, net: &mut OnlineNet<T>) {
        for s in &self.encoder {
            net.encoder.commit_running_stats(s);
        }
        for s in &self.projector {
            net.projector.bn.commit(s);
        }
        for s in &self.predictor {
            net.predictor.bn.commit(s);
        }
    }
}

pub struct LossOutput<T> {
    pub report: LossReport<T>,
    /// Gradients ordered as [`OnlineNet::params`]; the target branch receives none.
    pub grads: Vec<Vec<T>>,
    pub stats: OnlineStats<T>,
}

/// Mean feature over the cells of `mask` carrying `id`, for image `b` of a `C x N x H x W` batch.
pub fn mask_pool<T: Scalar>(features: &Act<T>, b: usize, mask: &RefinedMask, id: u32) -> Result<Vec<T>> {
    check_mask(features, mask)?;
    let mut out = vec![T::zero(); features.c];
    let mut count = 0usize;
    for (cell, _) in mask.ids.iter().enumerate().filter(|(_, &m)| m == id) {
        count += 1;
        for (c, o) in out.iter_mut().enumerate() {
            *o += features.data[features.idx(c, b, cell / features.w, cell % features.w)];
        }
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("cluster {id} is absent from the mask")));
    }
    let inv = T::one() / T::cast(count);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

fn check_mask<T>(features: &Act<T>, mask: &RefinedMask) -> Result<()> {
    if mask.height != features.h || mask.width != features.w {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match features {}x{}",
            mask.height, mask.width, features.h, features.w
        )));
    }
    Ok(())
}

fn guarded_norm<T: Scalar>(v: &[T]) -> (T, bool) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::cast(NORM_EPS);
    if n < eps {
        (eps, true)
    } else {
        (n, false)
    }
}

/// `2 - 2 cos(q, z)`.
pub fn byol_pair_loss<T: Scalar>(q: &[T], z: &[T]) -> T {
    pair_loss_grad(q, z, T::zero()).0
}

/// Loss, `scale * dL/dq`, and the number of guarded norms.
fn pair_loss_grad<T: Scalar>(q: &[T], z: &[T], scale: T) -> (T, Vec<T>, usize) {
    let (nq, gq) = guarded_norm(q);
    let (nz, gz) = guarded_norm(z);
    let dot: T = q.iter().zip(z).map(|(&a, &b)| a * b).sum();
    let two = T::cast(2.0);
    let cos = dot / (nq * nz);
    let loss = (two - two * cos).max(T::zero()).min(T::cast(4.0));
    let grad = q
        .iter()
        .zip(z)
        .map(|(&qi, &zi)| {
            let mut g = zi / (nq * nz);
            if !gq {
                g -= cos * qi / (nq * nq);
            }
            -two * g * scale
        })
        .collect();
    (loss, grad, gq as usize + gz as usize)
}

/// Sorted cluster ids present in both masks.
pub fn valid_pairs(m1: &RefinedMask, m2: &RefinedMask) -> Vec<u32> {
    m1.present.iter().copied().filter(|id| m2.contains(*id)).collect()
}

/// One mini-batch of view pairs with their aligned masks.
pub struct ViewBatch<'a, T> {
    pub views1: &'a [ImageTensor<T>],
    pub views2: &'a [ImageTensor<T>],
    pub masks1: &'a [RefinedMask],
    pub masks2: &'a [RefinedMask],
}

struct Branch<T> {
    fin: Act<T>,
    cache: EncoderCache<T>,
    target: Act<T>,
}

fn pool_rows<T: Scalar>(features: &Act<T>, masks: &[RefinedMask], pairs: &[(usize, u32)]) -> Result<Vec<T>> {
    let mut rows = Vec::with_capacity(pairs.len() * features.c);
    for &(b, id) in pairs {
        rows.extend(mask_pool(features, b, &masks[b], id)?);
    }
    Ok(rows)
}

fn scatter_rows<T: Scalar>(d_rows: &[T], masks: &[RefinedMask], pairs: &[(usize, u32)], grad: &mut Act<T>) {
    let c = grad.c;
    for (row, &(b, id)) in d_rows.chunks(c).zip(pairs) {
        let cells: Vec<usize> = masks[b].ids.iter().enumerate().filter(|(_, &m)| m == id).map(|(i, _)| i).collect();
        let inv = T::one() / T::cast(cells.len());
        for &cell in &cells {
            let (y, x) = (cell / grad.w, cell % grad.w);
            for (ch, &g) in row.iter().enumerate() {
                let i = grad.idx(ch, b, y, x);
                grad.data[i] += g * inv;
            }
        }
    }
}

/// Symmetric masked loss with gradients for the online parameters.
///
/// Online and target encoders and projectors run with batch statistics; the target
/// branch is treated as a constant. Running statistics are returned, not applied.
pub fn symmetric_masked_loss<T: Scalar>(net: &NetworkPair<T>, batch: &ViewBatch<'_, T>, norm: LossNormalization) -> Result<LossOutput<T>> {
    let n = batch.views1.len();
    if n == 0 || batch.views2.len() != n || batch.masks1.len() != n || batch.masks2.len() != n {
        return Err(Error::Shape("views and masks must pair up one-to-one".into()));
    }
    let mut pairs = Vec::new();
    let mut per_image = vec![0usize; n];
    for b in 0..n {
        let ids = valid_pairs(&batch.masks1[b], &batch.masks2[b]);
        per_image[b] = ids.len();
        pairs.extend(ids.into_iter().map(|id| (b, id)));
    }
    let skipped_images = per_image.iter().filter(|&&c| c == 0).count();
    if skipped_images > 0 {
        log::debug!("{skipped_images} image(s) without shared clusters");
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("no image has a cluster present in both views".into()));
    }
    let weights: Vec<T> = pairs
        .iter()
        .map(|&(b, _)| match norm {
            LossNormalization::PerTriple => T::one() / T::cast(2 * pairs.len()),
            LossNormalization::PerImage => T::one() / T::cast(2 * per_image[b] * (n - skipped_images)),
        })
        .collect();

    let branch = |views: &[ImageTensor<T>], masks: &[RefinedMask]| -> Result<Branch<T>> {
        let (on, cache) = net.online.encoder.forward_train(views)?;
        let tg = net.target.encoder.forward(views, crate::encoder::Mode::Train)?;
        for m in masks {
            check_mask(&on.fin, m)?;
        }
        Ok(Branch {
            fin: on.fin,
            cache,
            target: tg.fin,
        })
    };
    let v1 = branch(batch.views1, batch.masks1)?;
    let v2 = branch(batch.views2, batch.masks2)?;

    let online = &net.online;
    let n_enc = online.encoder.params().len();
    let mut grads = online.zero_grads();
    let mut per_pair = Vec::with_capacity(2 * pairs.len());
    let mut guarded = 0;
    let mut losses = [Vec::new(), Vec::new()];
    let mut d_fin = [Act::zeros(v1.fin.c, v1.fin.n, v1.fin.h, v1.fin.w), Act::zeros(v2.fin.c, v2.fin.n, v2.fin.h, v2.fin.w)];
    let mut stats = OnlineStats {
        encoder: vec![v1.cache.bn_stats().cloned().collect(), v2.cache.bn_stats().cloned().collect()],
        projector: Vec::new(),
        predictor: Vec::new(),
    };
    let rows = pairs.len();
    for (dir, (a, am, b, bm)) in [(&v1, batch.masks1, &v2, batch.masks2), (&v2, batch.masks2, &v1, batch.masks1)].into_iter().enumerate() {
        let p_on = pool_rows(&a.fin, am, &pairs)?;
        let (z_on, proj_cache) = online.projector.forward_train(&p_on, rows)?;
        let (q, pred_cache) = online.predictor.forward_train(&z_on, rows)?;
        let p_tg = pool_rows(&b.target, bm, &pairs)?;
        let z_tg = net.target.projector.forward(&p_tg, rows, crate::encoder::Mode::Train)?;
        let d = online.projector.out_dim();
        let mut dq = Vec::with_capacity(q.len());
        for (i, (qi, zi)) in q.chunks(d).zip(z_tg.chunks(d)).enumerate() {
            let (l, g, gcount) = pair_loss_grad(qi, zi, weights[i]);
            guarded += gcount;
            losses[dir].push(l);
            dq.extend(g);
        }
        let (head, pred_grads) = grads.split_at_mut(n_enc + MLP_PARAMS);
        let dz = online.predictor.backward(&pred_cache, &dq, pred_grads);
        let dp = online.projector.backward(&proj_cache, &dz, &mut head[n_enc..]);
        scatter_rows(&dp, am, &pairs, &mut d_fin[dir]);
        stats.projector.push(proj_cache.bn_stats().clone());
        stats.predictor.push(pred_cache.bn_stats().clone());
    }
    let mut total = T::zero();
    for (i, &(b, id)) in pairs.iter().enumerate() {
        let (l12, l21) = (losses[0][i], losses[1][i]);
        total += weights[i] * (l12 + l21);
        per_pair.push(PairLoss { image: b, cluster: id, direction: Direction::OneToTwo, loss: l12 });
        per_pair.push(PairLoss { image: b, cluster: id, direction: Direction::TwoToOne, loss: l21 });
    }
    for (cache, d) in [(&v1.cache, &d_fin[0]), (&v2.cache, &d_fin[1])] {
        let g = online.encoder.backward(cache, d)?;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v);
        }
    }
    Ok(LossOutput {
        report: LossReport {
            total,
            per_pair,
            n_pairs: 2 * pairs.len(),
            skipped_images,
            guarded_norms: guarded,
        },
        grads,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HeadConfig};

    fn mask(h: usize, w: usize, ids: &[u32]) -> RefinedMask {
        RefinedMask::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn pair_loss_cases() {
        let z = [1.0f64, -2.0, 0.5];
        assert!(byol_pair_loss(&[2.0, -4.0, 1.0], &z).abs() < 1e-15);
        assert!((byol_pair_loss(&[1.0f64, 0.0], &[0.0, 3.0]) - 2.0).abs() < 1e-15);
        assert!((byol_pair_loss(&[-1.0f64, 2.0, -0.5], &z) - 4.0).abs() < 1e-15);
        assert_eq!(byol_pair_loss(&[0.0f64; 3], &z), 2.0);
        let q = [0.3f64, 0.1, -0.7];
        let scaled: Vec<f64> = z.iter().map(|v| v * 17.0).collect();
        assert!((byol_pair_loss(&q, &z) - byol_pair_loss(&q, &scaled)).abs() < 1e-14);
    }

    #[test]
    fn pair_loss_gradient_matches_differences() {
        let q = [0.3f64, 0.1, -0.7];
        let z = [1.0f64, -2.0, 0.5];
        let (_, g, _) = pair_loss_grad(&q, &z, 1.0);
        for i in 0..3 {
            let mut p = q;
            let mut m = q;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (byol_pair_loss(&p, &z) - byol_pair_loss(&m, &z)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_and_pairs() {
        let mut a = Act::<f64>::zeros(2, 1, 2, 2);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        assert_eq!(mask_pool(&a, 0, &mask(2, 2, &[3, 3, 3, 3]), 3).unwrap(), vec![1.5, 5.5]);
        assert_eq!(mask_pool(&a, 0, &mask(2, 2, &[0, 0, 1, 0]), 1).unwrap(), vec![2.0, 6.0]);
        assert!(mask_pool(&a, 0, &mask(2, 2, &[0, 0, 1, 0]), 4).is_err());
        let m1 = mask(1, 3, &[0, 1, 2]);
        let m2 = mask(1, 3, &[1, 2, 5]);
        assert_eq!(valid_pairs(&m1, &m2), vec![1, 2]);
        assert_eq!(valid_pairs(&m1, &m1), vec![0, 1, 2]);
        assert!(valid_pairs(&mask(1, 1, &[0]), &mask(1, 1, &[1])).is_empty());
    }

    fn tiny() -> (EncoderConfig, HeadConfig) {
        (
            EncoderConfig {
                input_side: 8,
                stem_channels: 3,
                stem_stride: 1,
                stage_widths: vec![4, 4],
                convs_per_stage: 1,
                mid_stage: 0,
                final_stage: 1,
            },
            HeadConfig {
                projector_hidden: 6,
                projector_out: 4,
                predictor_hidden: 5,
            },
        )
    }

    fn image(seed: usize) -> ImageTensor<f64> {
        ImageTensor::from_fn(8, 8, |y, x| {
            let v = ((y * 5 + x * 3 + seed * 7) % 11) as f64 / 10.0;
            [v, 1.0 - v, (v * 3.0) % 1.0]
        })
    }

    #[test]
    fn symmetric_total_properties() {
        let (enc, heads) = tiny();
        let net = NetworkPair::<f64>::new(&enc, &heads, 5).unwrap();
        let v1 = vec![image(0), image(1)];
        let v2 = vec![image(2), image(3)];
        let m1 = vec![mask(2, 2, &[0, 0, 1, 1]), mask(2, 2, &[2, 2, 2, 0])];
        let m2 = vec![mask(2, 2, &[1, 0, 0, 3]), mask(2, 2, &[0, 2, 4, 4])];
        let batch = ViewBatch { views1: &v1, views2: &v2, masks1: &m1, masks2: &m2 };
        let out = symmetric_masked_loss(&net, &batch, LossNormalization::PerTriple).unwrap();
        assert_eq!(out.report.n_pairs, 8);
        let mean = out.report.per_pair.iter().map(|p| p.loss).sum::<f64>() / 8.0;
        assert!((out.report.total - mean).abs() < 1e-12);
        assert!(out.report.per_pair.iter().all(|p| (0.0..=4.0).contains(&p.loss)));
        let swapped = ViewBatch { views1: &v2, views2: &v1, masks1: &m2, masks2: &m1 };
        let s = symmetric_masked_loss(&net, &swapped, LossNormalization::PerTriple).unwrap();
        assert_eq!(s.report.total, out.report.total);
        assert_eq!(out.grads.len(), net.online.params().len());

        let none = vec![mask(2, 2, &[7, 7, 7, 7]), mask(2, 2, &[7, 7, 7, 7])];
        let bad = ViewBatch { views1: &v1, views2: &v2, masks1: &m1, masks2: &none };
        assert!(matches!(symmetric_masked_loss(&net, &bad, LossNormalization::PerTriple), Err(Error::Degenerate(_))));
    }

    #[test]
    fn parallel_prediction_and_target_give_zero() {
        let (enc, heads) = tiny();
        let mut net = NetworkPair::<f64>::new(&enc, &heads, 2).unwrap();
        // Silence every weight feeding the final layers so q and z are their biases.
        let p = &mut net.online.predictor;
        p.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let t = &mut net.target.projector;
        t.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        t.fc2.bias.value = vec![0.4, -1.0, 0.2, 0.7];
        net.online.predictor.fc2.bias.value = vec![1.2, -3.0, 0.6, 2.1];
        let v = vec![image(4)];
        let m = vec![mask(2, 2, &[0, 1, 1, 1])];
        let batch = ViewBatch { views1: &v, views2: &v, masks1: &m, masks2: &m };
        let out = symmetric_masked_loss(&net, &batch, LossNormalization::PerTriple).unwrap();
        assert!(out.report.total.abs() < 1e-12);
    }

    #[test]
    fn one_cluster_is_mean_of_two_terms() {
        let (enc, heads) = tiny();
        let net = NetworkPair::<f64>::new(&enc, &heads, 8).unwrap();
        let (v1, v2) = (vec![image(1)], vec![image(6)]);
        let (m1, m2) = (vec![mask(2, 2, &[3, 3, 3, 3])], vec![mask(2, 2, &[3, 3, 3, 3])]);
        let batch = ViewBatch { views1: &v1, views2: &v2, masks1: &m1, masks2: &m2 };
        let out = symmetric_masked_loss(&net, &batch, LossNormalization::PerImage).unwrap();
        assert_eq!(out.report.per_pair.len(), 2);
        let hand = (out.report.per_pair[0].loss + out.report.per_pair[1].loss) / 2.0;
        assert!((out.report.total - hand).abs() < 1e-15);
    }
}
