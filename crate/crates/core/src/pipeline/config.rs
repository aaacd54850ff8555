//! Run configuration, read from a TOML file with one table per component.
//!
//! ```toml
//! [data]
//! side = 64
//! [data.synthetic]      # or: path = "corpus/"  (images/*.png, optional gt/*.r2ol)
//! n_images = 512
//!
//! [train]
//! batch_size = 32
//! epochs = 50
//! seed = 0
//!
//! [curriculum]          # `epochs` is taken from [train]
//! k0 = 16
//! k_final = 2
//!
//! [prior]
//! kind = "slic"         # or "grid" with `grid_n`
//!
//! [kmeans]
//! objective = "sse"     # plain Lloyd; "normalized" descends on the reported objective
//!
//! [output]
//! dir = "runs/r2o"
//! ```
//!
//! The remaining tables (`augment`, `encoder`, `heads`, `optim`, `tau`, `kmeans`,
//! `prior.slic`) accept the fields of the corresponding structs; every field has a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::encoder::{EncoderConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::objective::LossNormalization;
use crate::optim::{OptimConfig, TauConfig};
use crate::pipeline::synthetic::SyntheticCorpusSpec;
use crate::refine::{ClusterScope, CurriculumConfig, KMeansOptions};
use crate::slic::SlicConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `images/` (and optionally `gt/`).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generated in memory; a `[data]` table without this or `path` is rejected.
    #[serde(default)]
    pub synthetic: Option<SyntheticCorpusSpec>,
    /// Side the full images are resized to before refinement.
    pub side: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: Some(SyntheticCorpusSpec::default()),
            side: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_normalization: LossNormalization,
    pub cluster_scope: ClusterScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            seed: 0,
            loss_normalization: LossNormalization::PerTriple,
            cluster_scope: ClusterScope::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Slic,
    /// `grid_n x grid_n` square cells.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub slic: SlicConfig,
    pub grid_n: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Slic,
            slic: SlicConfig::default(),
            grid_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Checkpoint every this many epochs (the last epoch is always saved); 0 saves only the last.
    pub checkpoint_every: usize,
    /// Dump refined masks of the first batch every this many epochs; 0 disables.
    pub mask_dump_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/r2o"),
            checkpoint_every: 10,
            mask_dump_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    pub prior: PriorConfig,
    pub augment: AugmentationConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub optim: OptimConfig,
    pub tau: TauConfig,
    pub kmeans: KMeansOptions,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.normalized();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies shared values (epoch count) into the sub-configs that also carry them.
    pub fn normalized(mut self) -> Self {
        self.curriculum.epochs = self.train.epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(Error::Config("set exactly one of data.path and data.synthetic".into()));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.curriculum.epochs != self.train.epochs {
            return Err(Error::Config("curriculum.epochs must equal train.epochs".into()));
        }
        self.curriculum.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.heads.validate()?;
        self.optim.validate()?;
        crate::optim::tau_at(&self.tau, 0, self.train.epochs)?;
        match self.prior.kind {
            PriorKind::Slic => self.prior.slic.validate()?,
            PriorKind::Grid if self.prior.grid_n == 0 => return Err(Error::Config("grid_n must be positive".into())),
            PriorKind::Grid => {}
        }
        let side = self.encoder.input_side;
        if self.augment.side != side || self.data.side != side {
            return Err(Error::Config(format!(
                "data.side ({}), augment.side ({}) and encoder.input_side ({side}) must agree",
                self.data.side, self.augment.side
            )));
        }
        if self.data.side < self.encoder.mid_side() {
            return Err(Error::Config("images are smaller than the feature grid".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the training trajectory (the output table is excluded).
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
