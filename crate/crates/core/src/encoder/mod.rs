//! Small convolutional Siamese encoder with projector/predictor heads.
//!
//! The backbone is a stem convolution followed by stages of
//! `conv(stride 2)-BN-ReLU, conv-BN-ReLU`. Two stage outputs are exposed: a
//! "mid" tap used for region refinement and a "final" tap used for mask pooling.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::scalar::Scalar;
pub use layers::{Act, BatchNorm, BnCache, BnStats, Conv2d, Layout, Linear, Param, ParamKind};
use layers::{conv_out, relu_backward, relu_inplace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    /// Zero-based stage whose output is the mid tap.
    pub mid_stage: usize,
    /// Zero-based stage whose output is the final tap; later stages are not built.
    pub final_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            stem_channels: 16,
            stem_stride: 2,
            stage_widths: vec![16, 32, 64],
            convs_per_stage: 2,
            mid_stage: 1,
            final_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.stem_channels == 0 || self.stem_stride == 0 || self.convs_per_stage == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("encoder stage widths must be positive".into()));
        }
        if self.mid_stage >= self.final_stage || self.final_stage >= self.stage_widths.len() {
            return Err(Error::Config(format!(
                "need mid_stage < final_stage < {} (got {} and {})",
                self.stage_widths.len(),
                self.mid_stage,
                self.final_stage
            )));
        }
        Ok(())
    }

    fn side_after_stage(&self, stage: usize) -> usize {
        (0..=stage).fold(conv_out(self.input_side, self.stem_stride), |s, _| conv_out(s, 2))
    }

    /// Spatial side of the mid tap (the refined-mask grid).
    pub fn mid_side(&self) -> usize {
        self.side_after_stage(self.mid_stage)
    }

    pub fn final_side(&self) -> usize {
        self.side_after_stage(self.final_stage)
    }

    pub fn mid_dim(&self) -> usize {
        self.stage_widths[self.mid_stage]
    }

    pub fn final_dim(&self) -> usize {
        self.stage_widths[self.final_stage]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 128,
            projector_out: 32,
            predictor_hidden: 128,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projector_hidden == 0 || self.projector_out == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Whether normalization layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

struct BlockCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize, usize),
    bn: BnCache<T>,
    out: Act<T>,
}

/// Mid and final feature maps for a batch (`C x N x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<T> {
    pub mid: Act<T>,
    pub fin: Act<T>,
}

/// Per-image channel-last feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn from_act(a: &Act<T>, b: usize) -> Self {
        Self {
            h: a.h,
            w: a.w,
            d: a.c,
            data: a.image_hwc(b),
        }
    }

    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        &self.data[(y * self.w + x) * self.d..][..self.d]
    }
}

/// Reverse-pass state of a train-mode encoder forward.
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn bn_stats(&self) -> impl Iterator<Item = &BnStats<T>> {
        self.blocks.iter().map(|b| &b.bn.stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    blocks: Vec<ConvBlock<T>>,
    mid_block: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = vec![ConvBlock {
            conv: Conv2d::new("stem", 3, cfg.stem_channels, cfg.stem_stride, rng),
            bn: BatchNorm::new("stem.bn", cfg.stem_channels),
        }];
        let mut in_c = cfg.stem_channels;
        let mut mid_block = 0;
        for (s, &width) in cfg.stage_widths.iter().enumerate().take(cfg.final_stage + 1) {
            for j in 0..cfg.convs_per_stage {
                let name = format!("stage{s}.conv{j}");
                blocks.push(ConvBlock {
                    conv: Conv2d::new(&name, in_c, width, if j == 0 { 2 } else { 1 }, rng),
                    bn: BatchNorm::new(&format!("{name}.bn"), width),
                });
                in_c = width;
            }
            if s == cfg.mid_stage {
                mid_block = blocks.len() - 1;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            mid_block,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn images_to_act(&self, images: &[ImageTensor<T>]) -> Result<Act<T>> {
        let side = self.cfg.input_side;
        if images.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut a = Act::zeros(3, images.len(), side, side);
        for (n, img) in images.iter().enumerate() {
            if img.height() != side || img.width() != side {
                return Err(Error::Shape(format!("encoder expects {side}x{side} input, got {}x{}", img.height(), img.width())));
            }
            for (p, px) in img.data().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    let i = a.idx(c, n, p / side, p % side);
                    a.data[i] = px[c];
                }
            }
        }
        Ok(a)
    }

    fn run(&self, images: &[ImageTensor<T>], mode: Mode, keep_cache: bool) -> Result<(FeaturePair<T>, Vec<BlockCache<T>>, Vec<BnStats<T>>)> {
        let mut x = self.images_to_act(images)?;
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        let mut mid = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let in_shape = (x.c, x.n, x.h, x.w);
            let (mut y, cols) = block.conv.forward(&x);
            let layout = Layout::channel_major(y.c, y.plane());
            let bn_cache = match mode {
                Mode::Train => Some(block.bn.forward_train(&mut y.data, layout)),
                Mode::Eval => {
                    block.bn.forward_eval(&mut y.data, layout);
                    None
                }
            };
            relu_inplace(&mut y.data);
            if i == self.mid_block {
                mid = Some(y.clone());
            }
            if let Some(bn) = bn_cache {
                if keep_cache {
                    caches.push(BlockCache {
                        cols,
                        in_shape,
                        bn,
                        out: y.clone(),
                    });
                } else {
                    stats.push(bn.stats);
                }
            }
            x = y;
        }
        let pair = FeaturePair {
            mid: mid.expect("mid tap precedes final tap"),
            fin: x,
        };
        Ok((pair, caches, stats))
    }

    /// Forward pass without a reverse cache.
    pub fn forward(&self, images: &[ImageTensor<T>], mode: Mode) -> Result<FeaturePair<T>> {
        Ok(self.run(images, mode, false)?.0)
    }

    /// Train-mode forward that records what [`Encoder::backward`] needs.
    pub fn forward_train(&self, images: &[ImageTensor<T>]) -> Result<(FeaturePair<T>, EncoderCache<T>)> {
        let (pair, blocks, _) = self.run(images, Mode::Train, true)?;
        Ok((pair, EncoderCache { blocks }))
    }

    /// Gradients for [`Encoder::params`] given the gradient at the final tap.
    pub fn backward(&self, cache: &EncoderCache<T>, d_final: &Act<T>) -> Result<Vec<Vec<T>>> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::MissingCache);
        }
        let mut grads: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        let mut dy = d_final.clone();
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if dy.data.len() != bc.out.data.len() {
                return Err(Error::Shape("final-tap gradient does not match the cached activation".into()));
            }
            relu_backward(&bc.out.data, &mut dy.data);
            let layout = Layout::channel_major(dy.c, dy.plane());
            let (head, tail) = grads.split_at_mut(3 * i + 1);
            let (dg, db) = tail.split_at_mut(1);
            block.bn.backward(&bc.bn, &mut dy.data, layout, &mut dg[0], &mut db[0]);
            let dx = block.conv.backward(&bc.cols, &dy, bc.in_shape, &mut head[3 * i], i > 0);
            if let Some(dx) = dx {
                dy = dx;
            }
        }
        Ok(grads)
    }

    pub fn commit_running_stats<'a>(&mut self, stats: impl IntoIterator<Item = &'a BnStats<T>>) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn.commit(s);
        }
    }

    /// Per block: conv weight, bn gamma, bn beta.
    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| [&b.conv.weight, &b.bn.gamma, &b.bn.beta]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.conv.weight, &mut b.bn.gamma, &mut b.bn.beta])
            .collect()
    }

    /// Running means and variances, per block.
    pub fn buffers(&self) -> Vec<&Vec<T>> {
        self.blocks.iter().flat_map(|b| [&b.bn.running_mean, &b.bn.running_var]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }
}

/// Two-layer MLP: linear, batch norm, ReLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T> {
    input: Vec<T>,
    rows: usize,
    bn: BnCache<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn bn_stats(&self) -> &BnStats<T> {
        &self.bn.stats
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(name: &str, inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), inp, hidden, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), hidden),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, out, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    fn check(&self, x: &[T], rows: usize) -> Result<()> {
        if rows == 0 || x.len() != rows * self.in_dim() {
            return Err(Error::Shape(format!("MLP expects rows x {}, got {} values for {rows} rows", self.in_dim(), x.len())));
        }
        Ok(())
    }

    /// Row-major `[rows, in]` -> `[rows, out]`.
    pub fn forward(&self, x: &[T], rows: usize, mode: Mode) -> Result<Vec<T>> {
        Ok(match mode {
            Mode::Train => self.forward_train(x, rows)?.0,
            Mode::Eval => {
                self.check(x, rows)?;
                let mut h = self.fc1.forward(x, rows);
                self.bn.forward_eval(&mut h, Layout::row_major(rows, self.bn.channels()));
                relu_inplace(&mut h);
                self.fc2.forward(&h, rows)
            }
        })
    }

    pub fn forward_train(&self, x: &[T], rows: usize) -> Result<(Vec<T>, MlpCache<T>)> {
        self.check(x, rows)?;
        let mut h = self.fc1.forward(x, rows);
        let bn = self.bn.forward_train(&mut h, Layout::row_major(rows, self.bn.channels()));
        relu_inplace(&mut h);
        let y = self.fc2.forward(&h, rows);
        Ok((
            y,
            MlpCache {
                input: x.to_vec(),
                rows,
                bn,
                hidden: h,
            },
        ))
    }

    /// Accumulates into `grads` (ordered as [`Mlp::params`]) and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache<T>, dy: &[T], grads: &mut [Vec<T>]) -> Vec<T> {
        let [g1w, g1b, gg, gb, g2w, g2b] = grads else {
            panic!("MLP expects six gradient buffers");
        };
        let mut dh = self.fc2.backward(&cache.hidden, dy, cache.rows, g2w, g2b);
        relu_backward(&cache.hidden, &mut dh);
        self.bn.backward(&cache.bn, &mut dh, Layout::row_major(cache.rows, self.bn.channels()), gg, gb);
        self.fc1.backward(&cache.input, &dh, cache.rows, g1w, g1b)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.fc1.weight, &self.fc1.bias, &self.bn.gamma, &self.bn.beta, &self.fc2.weight, &self.fc2.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn buffers(&self) -> Vec<&Vec<T>> {
        vec![&self.bn.running_mean, &self.bn.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

pub const MLP_PARAMS: usize = 6;

/// Online branch: encoder, projector and predictor (parameters θ).
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNet<T> {
    pub encoder: Encoder<T>,
    pub projector: Mlp<T>,
    pub predictor: Mlp<T>,
}

/// Target branch: encoder and projector only (parameters ξ).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNet<T> {
    pub encoder: Encoder<T>,
    pub projector: Mlp<T>,
}

impl<T: Scalar> OnlineNet<T> {
    /// Encoder, projector, predictor parameters in that order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.projector.params());
        v.extend(self.predictor.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.projector.params_mut());
        v.extend(self.predictor.params_mut());
        v
    }

    pub fn buffers(&self) -> Vec<&Vec<T>> {
        let mut v = self.encoder.buffers();
        v.extend(self.projector.buffers());
        v.extend(self.predictor.buffers());
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.encoder.buffers_mut();
        v.extend(self.projector.buffers_mut());
        v.extend(self.predictor.buffers_mut());
        v
    }

    /// Zero gradient buffers matching [`OnlineNet::params`].
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    /// Projection `z` of pooled vectors.
    pub fn project(&self, pooled: &[T], rows: usize, mode: Mode) -> Result<Vec<T>> {
        self.projector.forward(pooled, rows, mode)
    }

    /// Prediction `q` from projections.
    pub fn predict(&self, z: &[T], rows: usize, mode: Mode) -> Result<Vec<T>> {
        self.predictor.forward(z, rows, mode)
    }
}

impl<T: Scalar> TargetNet<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.projector.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.projector.params_mut());
        v
    }

    pub fn buffers(&self) -> Vec<&Vec<T>> {
        let mut v = self.encoder.buffers();
        v.extend(self.projector.buffers());
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.encoder.buffers_mut();
        v.extend(self.projector.buffers_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPair<T> {
    pub online: OnlineNet<T>,
    pub target: TargetNet<T>,
}

impl<T: Scalar> NetworkPair<T> {
    /// Seeded initialization; the target starts as a copy of the online encoder and projector.
    pub fn new(enc: &EncoderConfig, heads: &HeadConfig, seed: u64) -> Result<Self> {
        heads.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(enc, &mut rng)?;
        let projector = Mlp::new("projector", enc.final_dim(), heads.projector_hidden, heads.projector_out, &mut rng);
        let predictor = Mlp::new("predictor", heads.projector_out, heads.predictor_hidden, heads.projector_out, &mut rng);
        let target = TargetNet {
            encoder: encoder.clone(),
            projector: projector.clone(),
        };
        Ok(Self {
            online: OnlineNet { encoder, projector, predictor },
            target,
        })
    }

    /// `ξ <- (1 - τ) θ + τ ξ` over encoder/projector parameters and running statistics.
    pub fn ema_update(&mut self, tau: T) -> Result<()> {
        ema_update(&self.online, &mut self.target, tau)
    }
}

fn values<'a, T>(ps: Vec<&'a Param<T>>) -> Vec<&'a Vec<T>> {
    ps.into_iter().map(|p| &p.value).collect()
}

fn values_mut<'a, T>(ps: Vec<&'a mut Param<T>>) -> Vec<&'a mut Vec<T>> {
    ps.into_iter().map(|p| &mut p.value).collect()
}

pub fn ema_update<T: Scalar>(online: &OnlineNet<T>, target: &mut TargetNet<T>, tau: T) -> Result<()> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::OutOfRange(format!("EMA coefficient {tau} outside [0,1]")));
    }
    let keep = T::one() - tau;
    let blend = |src: Vec<&Vec<T>>, dst: Vec<&mut Vec<T>>| -> Result<()> {
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("online and target networks differ in shape".into()));
        }
        for (s, d) in src.into_iter().zip(dst) {
            for (x, y) in s.iter().zip(d.iter_mut()) {
                *y = keep * *x + tau * *y;
            }
        }
        Ok(())
    };
    let mut src = values(online.encoder.params());
    src.extend(values(online.projector.params()));
    src.extend(online.encoder.buffers());
    src.extend(online.projector.buffers());
    let mut dst_shape: Vec<usize> = target.params().iter().map(|p| p.value.len()).collect();
    dst_shape.extend(target.buffers().iter().map(|b| b.len()));
    if src.len() != dst_shape.len() || src.iter().zip(&dst_shape).any(|(a, &b)| a.len() != b) {
        return Err(Error::Shape("online and target networks differ in shape".into()));
    }
    blend(values(online.encoder.params()), values_mut(target.encoder.params_mut()))?;
    blend(values(online.projector.params()), values_mut(target.projector.params_mut()))?;
    blend(online.encoder.buffers(), target.encoder.buffers_mut())?;
    blend(online.projector.buffers(), target.projector.buffers_mut())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_side: 16,
            stem_channels: 4,
            stem_stride: 1,
            stage_widths: vec![4, 8, 8],
            convs_per_stage: 2,
            mid_stage: 1,
            final_stage: 2,
        }
    }

    fn heads() -> HeadConfig {
        HeadConfig {
            projector_hidden: 8,
            projector_out: 4,
            predictor_hidden: 8,
        }
    }

    fn batch(n: usize, side: usize) -> Vec<ImageTensor<f64>> {
        (0..n)
            .map(|k| ImageTensor::from_fn(side, side, |y, x| [((y * 3 + x * 5 + k * 7) % 11) as f64 / 10.0, (x as f64 / side as f64), 0.5]))
            .collect()
    }

    #[test]
    fn default_config_taps() {
        let cfg = EncoderConfig::default();
        assert_eq!((cfg.mid_side(), cfg.final_side(), cfg.mid_dim(), cfg.final_dim()), (8, 4, 32, 64));
    }

    #[test]
    fn forward_shapes() {
        let net = NetworkPair::<f64>::new(&tiny(), &heads(), 0).unwrap();
        let out = net.online.encoder.forward(&batch(3, 16), Mode::Train).unwrap();
        assert_eq!((out.mid.c, out.mid.n, out.mid.h, out.mid.w), (8, 3, 4, 4));
        assert_eq!((out.fin.c, out.fin.n, out.fin.h, out.fin.w), (8, 3, 2, 2));
        let err = net.online.encoder.forward(&batch(1, 8), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mut net = NetworkPair::<f64>::new(&tiny(), &heads(), 0).unwrap();
        for p in net.online.encoder.params_mut() {
            if p.kind == ParamKind::Weight {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for mode in [Mode::Train, Mode::Eval] {
            let out = net.online.encoder.forward(&batch(2, 16), mode).unwrap();
            assert!(out.mid.data.iter().chain(&out.fin.data).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = NetworkPair::<f32>::new(&tiny(), &heads(), 5).unwrap();
        let imgs: Vec<ImageTensor<f32>> = batch(2, 16).iter().map(|i| i.cast()).collect();
        assert_eq!(net.online.encoder.forward(&imgs, Mode::Eval).unwrap(), net.online.encoder.forward(&imgs, Mode::Eval).unwrap());
    }

    #[test]
    fn identity_heads_compose_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::<f64>::new("m", 3, 3, 3, &mut rng);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        mlp.fc1.weight.value = eye.clone();
        mlp.fc2.weight.value = eye;
        mlp.fc1.bias.value = vec![0.5, -2.0, 0.0];
        mlp.fc2.bias.value = vec![0.1, 0.2, 0.3];
        let x = vec![1.0, 1.0, -3.0, 2.0, 0.5, 4.0];
        let y = mlp.forward(&x, 2, Mode::Eval).unwrap();
        let s = 1.0 / (1.0 + layers::BN_EPS).sqrt();
        for r in 0..2 {
            for j in 0..3 {
                let h = ((x[r * 3 + j] + mlp.fc1.bias.value[j]) * s).max(0.0);
                assert!((y[r * 3 + j] - (h + mlp.fc2.bias.value[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_zero_bias_heads() {
        let mut net = NetworkPair::<f64>::new(&tiny(), &heads(), 1).unwrap();
        for p in net.online.params_mut() {
            if p.kind == ParamKind::Bias {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let z = net.online.project(&[0.0; 8], 1, Mode::Eval).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let q = net.online.predict(&z, 1, Mode::Eval).unwrap();
        assert!(q.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_rows_keep_heads_finite() {
        let net = NetworkPair::<f64>::new(&tiny(), &heads(), 2).unwrap();
        let x: Vec<f64> = (0..3).flat_map(|_| [0.3, -0.1, 0.7, 0.2, 0.0, 1.0, -0.4, 0.5]).collect();
        let (z, cache) = net.online.projector.forward_train(&x, 3).unwrap();
        assert!(cache.bn_stats().var.iter().all(|v| *v < 1e-28));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ema_extremes_and_midpoint() {
        let mut a = NetworkPair::<f64>::new(&tiny(), &heads(), 1).unwrap();
        let b = NetworkPair::<f64>::new(&tiny(), &heads(), 2).unwrap();
        a.online = b.online.clone();
        let before = a.target.clone();
        a.ema_update(1.0).unwrap();
        assert_eq!(a.target, before);

        let mut half = a.clone();
        half.ema_update(0.5).unwrap();
        for ((p, o), t) in half.target.params().iter().zip(a.online.params()).zip(before.params()) {
            for ((x, y), z) in p.value.iter().zip(&o.value).zip(&t.value) {
                assert_eq!(*x, 0.5 * y + 0.5 * z);
            }
        }

        a.ema_update(0.0).unwrap();
        let theta: Vec<_> = a.online.encoder.params().into_iter().chain(a.online.projector.params()).cloned().collect();
        let xi: Vec<_> = a.target.params().into_iter().cloned().collect();
        assert_eq!(theta, xi);
        assert!(a.ema_update(1.5).is_err());
    }

    #[test]
    fn backward_without_cache_fails() {
        let net = NetworkPair::<f64>::new(&tiny(), &heads(), 3).unwrap();
        let empty = EncoderCache { blocks: Vec::new() };
        let d = Act::zeros(8, 1, 2, 2);
        assert!(matches!(net.online.encoder.backward(&empty, &d), Err(Error::MissingCache)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let net = NetworkPair::<f64>::new(&tiny(), &heads(), 4).unwrap();
        let (out, cache) = net.online.encoder.forward_train(&batch(2, 16)).unwrap();
        let d = Act::zeros(out.fin.c, out.fin.n, out.fin.h, out.fin.w);
        let grads = net.online.encoder.backward(&cache, &d).unwrap();
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut net = NetworkPair::<f64>::new(&tiny(), &heads(), 6).unwrap();
        let imgs = batch(2, 16);
        let (out, cache) = net.online.encoder.forward_train(&imgs).unwrap();
        let mut probe = out.fin.clone();
        for (i, v) in probe.data.iter_mut().enumerate() {
            *v = ((i * 37 % 17) as f64 - 8.0) / 8.0;
        }
        let grads = net.online.encoder.backward(&cache, &probe).unwrap();
        let loss = |n: &NetworkPair<f64>| -> f64 {
            let f = n.online.encoder.forward(&imgs, Mode::Train).unwrap().fin;
            f.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-4;
        let n_params = net.online.encoder.params().len();
        let mut worst: f64 = 0.0;
        for pi in 0..n_params {
            let len = net.online.encoder.params()[pi].value.len();
            for j in (0..len).step_by(len / 6 + 1) {
                let orig = net.online.encoder.params()[pi].value[j];
                net.online.encoder.params_mut()[pi].value[j] = orig + h;
                let lp = loss(&net);
                net.online.encoder.params_mut()[pi].value[j] = orig - h;
                let lm = loss(&net);
                net.online.encoder.params_mut()[pi].value[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads[pi][j];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
