use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use r2o::encoder::{FeatureMap, Mode};
use r2o::imaging::save_label_map;
use r2o::optim::tau_at;
use r2o::pipeline::{
    eval_abo_over_checkpoints, eval_seg, gen_synthetic, grid_prior, load_network, pretrain, write_abo_csv, Dataset, PretrainOptions, RunConfig,
    SyntheticCorpusSpec,
};
use r2o::refine::{k_at, refine_batch, ClusterScope};
use r2o::Real;

#[derive(Parser)]
#[command(name = "r2o", version, about = "Region-to-object self-supervised pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Batch,
    PerImage,
}

impl From<Scope> for ClusterScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Batch => ClusterScope::Batch,
            Scope::PerImage => ClusterScope::PerImage,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Resume even when the configuration hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Write refined masks (feature-grid label maps) for a directory of PNG images.
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "batch")]
        scope: Scope,
    },
    /// Print the cluster-count and EMA schedules as CSV.
    Schedule {
        #[arg(long)]
        config: PathBuf,
    },
    /// ABO of refined masks per checkpoint against the region prior.
    EvalAbo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Corpus directory with `images/` and `gt/`; defaults to the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "per-image")]
        scope: Scope,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unsupervised foreground segmentation scores.
    EvalSeg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic shapes corpus (`images/*.png`, `gt/*.r2ol`).
    GenSynthetic {
        /// TOML file with corpus fields; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset<Real>> {
    Ok(match dir {
        Some(d) => Dataset::load_dir(d, cfg.data.side)?,
        None => Dataset::from_config(&cfg.data)?,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, resume, stop_after, force } => {
            let cfg = RunConfig::load(&config)?;
            let opts = PretrainOptions {
                resume,
                stop_after_epoch: stop_after,
                force,
            };
            let summary = pretrain::<Real>(&cfg, &opts)?;
            for (epoch, path) in &summary.checkpoints {
                info!("checkpoint after epoch {epoch}: {}", path.display());
            }
            println!("metrics: {}", summary.metrics_path.display());
        }
        Command::Refine { config, checkpoint, images, k, out, scope } => {
            let cfg = RunConfig::load(&config)?;
            let (net, _) = load_network::<Real>(&cfg, &checkpoint)?;
            let data = Dataset::<Real>::load_images(&images, cfg.data.side)?;
            if data.is_empty() {
                bail!("no PNG images in {}", images.display());
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mid = cfg.encoder.mid_side();
            let idx: Vec<usize> = (0..data.len()).collect();
            for (bi, chunk) in idx.chunks(cfg.train.batch_size).enumerate() {
                let imgs: Vec<_> = chunk.iter().map(|&i| data.images[i].clone()).collect();
                let feats = net.target.encoder.forward(&imgs, Mode::Eval)?;
                let maps: Vec<FeatureMap<Real>> = (0..chunk.len()).map(|b| FeatureMap::from_act(&feats.mid, b)).collect();
                let priors = imgs.iter().map(|im| grid_prior(im, &cfg.prior, mid)).collect::<r2o::Result<Vec<_>>>()?;
                let (masks, _) = refine_batch(&maps, &priors, k, scope.into(), cfg.train.seed ^ bi as u64, &cfg.kmeans)?;
                for (&i, m) in chunk.iter().zip(&masks) {
                    save_label_map(&out.join(format!("{}.r2ol", data.names[i])), &m.to_label_map())?;
                }
            }
            println!("wrote {} masks to {}", data.len(), out.display());
        }
        Command::Schedule { config } => {
            let cfg = RunConfig::load(&config)?;
            let mut s = String::from("epoch,K,tau\n");
            for t in 0..=cfg.train.epochs {
                s.push_str(&format!("{t},{},{}\n", k_at(&cfg.curriculum, t)?, tau_at(&cfg.tau, t, cfg.train.epochs)?));
            }
            print!("{s}");
        }
        Command::EvalAbo { config, checkpoints, data, scope, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let rows = eval_abo_over_checkpoints(&cfg, &ds, &checkpoints, scope.into())?;
            match out {
                Some(p) => write_abo_csv(&p, &rows)?,
                None => {
                    println!("epoch,K,refined_abo,slic_abo");
                    for r in rows {
                        println!("{},{},{},{}", r.epoch, r.k, r.refined_abo, r.slic_abo);
                    }
                }
            }
        }
        Command::EvalSeg { config, checkpoint, data, k, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let (net, _) = load_network::<Real>(&cfg, &checkpoint)?;
            let rows = eval_seg(&cfg, &net, &ds, k)?;
            let mut s = String::from("image,fg_iou,bg_iou,miou\n");
            for r in &rows {
                s.push_str(&format!("{},{},{},{}\n", r.name, r.fg_iou, r.bg_iou, r.miou));
            }
            emit(out.as_deref(), &s)?;
            let mean = rows.iter().map(|r| r.miou).sum::<f64>() / rows.len().max(1) as f64;
            eprintln!("mean mIoU over {} images: {mean:.4}", rows.len());
        }
        Command::GenSynthetic { spec, out } => {
            let spec: SyntheticCorpusSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticCorpusSpec::default(),
            };
            let n = gen_synthetic(&spec, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
