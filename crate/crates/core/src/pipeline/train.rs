//! The alternating training loop: refine masks with the target network, then take one
//! representation step on the masked objective.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::make_views;
use crate::encoder::{FeatureMap, Mode, NetworkPair};
use crate::error::{Error, Result};
use crate::imaging::{save_label_map, LabelMap};
use crate::objective::{symmetric_masked_loss, ViewBatch};
use crate::optim::{lr_at, step, tau_at, LrSchedule, OptimizerState};
use crate::pipeline::{grid_prior, stream_seed, Checkpoint, Dataset, RunConfig};
use crate::refine::{align_mask, k_at, refine_batch};
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "step,epoch,K,tau,lr,loss,n_pairs,wall_ms";

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_VIEWS: u64 = 3;
const TAG_KMEANS: u64 = 4;

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (the run can be resumed later).
    pub stop_after_epoch: Option<usize>,
    /// Resume even if the checkpoint was written under a different configuration.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub k: usize,
    pub tau: f64,
    pub lr: f64,
    pub loss: f64,
    pub n_pairs: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.k, self.tau, self.lr, self.loss, self.n_pairs, self.wall_ms
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed metrics row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            k: f[2].parse().map_err(|_| bad())?,
            tau: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
            loss: f[5].parse().map_err(|_| bad())?,
            n_pairs: f[6].parse().map_err(|_| bad())?,
            wall_ms: f[7].parse().map_err(|_| bad())?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}

pub struct PretrainSummary<T> {
    pub net: NetworkPair<T>,
    /// `(completed epochs, path)` of every checkpoint written by this call.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub metrics_path: PathBuf,
    pub epochs_completed: usize,
}

/// Index chunks of one epoch; a trailing single image is dropped.
fn batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    order.chunks(batch).filter(|c| c.len() >= 2).collect()
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Loads the configured dataset and trains.
pub fn pretrain<T: Scalar>(cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainSummary<T>> {
    let data = Dataset::<T>::from_config(&cfg.data)?;
    pretrain_with(cfg, &data, opts)
}

pub fn pretrain_with<T: Scalar>(cfg: &RunConfig, data: &Dataset<T>, opts: &PretrainOptions) -> Result<PretrainSummary<T>> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Config(format!("training needs at least two images, found {n}")));
    }
    let seed = cfg.train.seed;
    let epochs = cfg.train.epochs;
    let out = &cfg.output.dir;
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");

    let mut net = NetworkPair::<T>::new(&cfg.encoder, &cfg.heads, stream_seed(seed, TAG_INIT, 0, 0))?;
    let mut opt = OptimizerState::new(&net.online.params());
    let order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = batches(&order, cfg.train.batch_size).len() as u64;
    let sched = LrSchedule::new(&cfg.optim, cfg.train.batch_size, steps_per_epoch * epochs as u64)?;
    let hash = cfg.hash();

    let mut start_epoch = 0;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.config_hash != hash && !opts.force {
            return Err(Error::ConfigHashMismatch {
                expected: hash,
                found: ck.config_hash,
            });
        }
        ck.restore(&mut net, &mut opt)?;
        start_epoch = ck.epoch as usize;
        truncate_metrics(&metrics_path, ck.step)?;
        info!("resumed from {} at epoch {start_epoch}, step {}", path.display(), ck.step);
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mid = cfg.encoder.mid_side();
    let fin = cfg.encoder.final_side();
    let mut priors: Vec<Option<LabelMap>> = vec![None; n];
    let mut checkpoints = Vec::new();
    let last = opts.stop_after_epoch.map_or(epochs, |s| s.min(epochs));
    let clock = Instant::now();

    for epoch in start_epoch..last {
        let k = k_at(&cfg.curriculum, epoch)?;
        let tau = tau_at(&cfg.tau, epoch, epochs)?;
        let mut order = order.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_SHUFFLE, epoch as u64, 0)));
        for (bi, idx) in batches(&order, cfg.train.batch_size).into_iter().enumerate() {
            let t0 = clock.elapsed();
            let global = opt.step;
            // Refinement: region prior, target features, batch clustering.
            for &i in idx {
                if priors[i].is_none() {
                    priors[i] = Some(grid_prior(&data.images[i], &cfg.prior, mid)?);
                }
            }
            let full: Vec<_> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let feats = net.target.encoder.forward(&full, Mode::Eval)?;
            let maps: Vec<FeatureMap<T>> = (0..idx.len()).map(|b| FeatureMap::from_act(&feats.mid, b)).collect();
            let batch_priors: Vec<LabelMap> = idx.iter().map(|&i| priors[i].clone().expect("filled above")).collect();
            let (masks, _) = refine_batch(&maps, &batch_priors, k, cfg.train.cluster_scope, stream_seed(seed, TAG_KMEANS, global, 0), &cfg.kmeans)?;
            if cfg.output.mask_dump_every > 0 && bi == 0 && epoch % cfg.output.mask_dump_every == 0 {
                dump_masks(out, epoch, idx, &masks, &data.names)?;
            }

            // Representation step on two augmented views.
            let (mut v1, mut v2, mut m1, mut m2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (&i, mask) in idx.iter().zip(&masks) {
                let (a, b) = make_views(&data.images[i], &cfg.augment, stream_seed(seed, TAG_VIEWS, epoch as u64, i as u64))?;
                m1.push(align_mask(mask, &a.geometry, fin, fin)?);
                m2.push(align_mask(mask, &b.geometry, fin, fin)?);
                v1.push(a.image);
                v2.push(b.image);
            }
            let batch = ViewBatch {
                views1: &v1,
                views2: &v2,
                masks1: &m1,
                masks2: &m2,
            };
            let outcome = symmetric_masked_loss(&net, &batch, cfg.train.loss_normalization)?;
            let loss = outcome.report.total;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {global}")));
            }
            let lr = lr_at(&sched, global)?;
            step(&mut net.online.params_mut(), &outcome.grads, &mut opt, lr, &cfg.optim)?;
            outcome.stats.commit(&mut net.online);
            net.ema_update(T::cast(tau))?;

            let row = MetricsRow {
                step: global,
                epoch,
                k,
                tau,
                lr,
                loss: loss.f64(),
                n_pairs: outcome.report.n_pairs,
                wall_ms: (clock.elapsed() - t0).as_millis() as u64,
            };
            writeln!(metrics, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
        }
        let done = epoch + 1;
        info!("epoch {done}/{epochs} K={k} tau={tau:.5} step={}", opt.step);
        let every = cfg.output.checkpoint_every;
        if done == last || done == epochs || (every > 0 && done % every == 0) {
            let path = checkpoint_path(out, done);
            Checkpoint::capture(&net, &opt, done as u64, seed, hash).save(&path)?;
            checkpoints.push((done, path));
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(PretrainSummary {
        net,
        checkpoints,
        metrics_path,
        epochs_completed: last.max(start_epoch),
    })
}

fn truncate_metrics(path: &Path, steps_done: u64) -> Result<()> {
    let rows = if path.is_file() { read_metrics(path)? } else { Vec::new() };
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows.iter().filter(|r| r.step < steps_done) {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dump_masks(out: &Path, epoch: usize, idx: &[usize], masks: &[crate::refine::RefinedMask], names: &[String]) -> Result<()> {
    let dir = out.join("masks").join(format!("epoch_{epoch:04}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (&i, m) in idx.iter().zip(masks) {
        save_label_map(&dir.join(format!("{}.r2ol", names[i])), &m.to_label_map())?;
    }
    Ok(())
}
