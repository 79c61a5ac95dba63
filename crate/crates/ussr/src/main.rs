use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ussr::config::Config;
use ussr::dataio;
use ussr::synth;
use ussr::trainer;
use ussr_core::encoding::{Dataset, FeatureStats, RawRow};

#[derive(Parser)]
#[command(name = "ussr", version, about = "Universal and segmentation-specific user representation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts, metrics, and the audit log.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates the synthetic benchmark CSVs.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Fits preprocessing on the training split and encodes all splits.
    PrepareData {
        #[command(flatten)]
        common: Common,
    },
    /// Phase 1: trains the universal mixture model.
    TrainUniversal {
        #[command(flatten)]
        common: Common,
        /// Directory holding stats.bin and the encoded splits.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Phase 2: trains the segment interaction on a phase-1 checkpoint.
    TrainSegments {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Phase-1 checkpoint; defaults to <out>/universal.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores shifted data and widens the mixture by one cluster.
    ExpandClusters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Registers the next segment id and trains only its decoder.
    ExpandSegment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes click probabilities for a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoded cache (.bin) or raw CSV, re-encoded with the
        /// checkpoint's own preprocessing.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to <out>/scores.csv.
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Prints AUC for a labeled dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn setup(common: &Common) -> Result<(Config, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    let resolved = cfg.resolved();
    print!("{resolved}");
    dataio::write_atomic(&common.out.join("config.resolved.txt"), resolved.as_bytes())?;
    Ok((cfg, common.out.clone()))
}

fn audit(out: &Path, line: &str) -> Result<()> {
    dataio::append_audit(&out.join("audit.log"), line)
}

/// The directory prepared splits are read from: an explicit --data flag,
/// then the config's data_dir, then the output directory itself.
fn resolve_data_dir(cfg: &Config, flag: Option<&Path>, out: &Path) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| out.to_path_buf())
}

/// A split's CSV source: the explicit config path, else `{data_dir}/{stem}.csv`.
fn split_source(cfg: &Config, explicit: &Option<PathBuf>, stem: &str) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.clone());
    }
    let candidate = cfg.data_dir.as_ref()?.join(format!("{stem}.csv"));
    candidate.exists().then_some(candidate)
}

fn features_source(cfg: &Config) -> Option<PathBuf> {
    split_source(cfg, &cfg.segment_features, "segment_features")
}

fn load_dataset_for(path: &Path, stats: &FeatureStats) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e == "csv") {
        let rows = dataio::read_rows(path)?;
        dataio::encode_rows(stats, &rows)?
    } else {
        dataio::load_dataset(path)?
    };
    if ds.n_dense != stats.n_dense() || ds.n_sparse != stats.n_sparse() {
        bail!(
            "{}: {} dense and {} sparse fields, but the checkpoint expects {} and {}",
            path.display(),
            ds.n_dense,
            ds.n_sparse,
            stats.n_dense(),
            stats.n_sparse()
        );
    }
    Ok(ds)
}

fn load_split(dir: &Path, stem: &str) -> Result<Dataset> {
    dataio::load_dataset(&dir.join(format!("{stem}.bin")))
        .with_context(|| format!("loading the prepared {stem} split from {}", dir.display()))
}

fn best_val_auc(metrics: &[dataio::MetricsRow]) -> f64 {
    metrics.iter().map(|m| m.val_auc).fold(f64::NEG_INFINITY, f64::max)
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenSynth { common } => {
            let (cfg, out) = setup(&common)?;
            let spec = synth::SyntheticSpec::from_config(&cfg);
            let data = synth::generate(&spec, cfg.seed)?;
            let n_files = data.files.len() + 1;
            synth::write_files(&data, &out)?;
            audit(&out, &format!("gen-synth seed={} wrote {n_files} files", cfg.seed))?;
        }
        Cmd::PrepareData { common } => {
            let (cfg, out) = setup(&common)?;
            let train_path = split_source(&cfg, &cfg.train, "train")
                .ok_or_else(|| anyhow::anyhow!("no training CSV: set train= or data_dir="))?;
            let train_rows = dataio::read_rows(&train_path)?;
            let splits: [(&str, Option<PathBuf>); 6] = [
                ("val", split_source(&cfg, &cfg.val, "val")),
                ("test", split_source(&cfg, &cfg.test, "test")),
                ("phase2", split_source(&cfg, &cfg.phase2, "phase2")),
                ("phase2_heldout", split_source(&cfg, &cfg.phase2_heldout, "phase2_heldout")),
                ("newseg_train", split_source(&cfg, &cfg.newseg, "newseg_train")),
                ("newseg_heldout", split_source(&cfg, &cfg.newseg_heldout, "newseg_heldout")),
            ];

            let stats = if cfg.joint_fit {
                // Fold the test split into the frequency ranking, matching
                // setups that index features over train and test together.
                let mut rows: Vec<RawRow> = train_rows.clone();
                if let Some(p) = &splits[1].1 {
                    rows.extend(dataio::read_rows(p)?);
                }
                FeatureStats::fit(&rows, cfg.cap, cfg.embed_dim)?
            } else {
                FeatureStats::fit(&train_rows, cfg.cap, cfg.embed_dim)?
            };
            dataio::save_stats(&out.join("stats.bin"), &stats)?;
            dataio::save_dataset(
                &out.join("train.bin"),
                &dataio::encode_rows(&stats, &train_rows)?,
            )?;
            let mut encoded = 1;
            for (stem, path) in &splits {
                if let Some(path) = path {
                    let rows = dataio::read_rows(path)?;
                    dataio::save_dataset(
                        &out.join(format!("{stem}.bin")),
                        &dataio::encode_rows(&stats, &rows)?,
                    )?;
                    encoded += 1;
                }
            }
            audit(
                &out,
                &format!(
                    "prepare-data fitted stats on {} rows (joint_fit={}) and encoded {encoded} splits",
                    train_rows.len(),
                    cfg.joint_fit
                ),
            )?;
        }
        Cmd::TrainUniversal { common, data } => {
            let (cfg, out) = setup(&common)?;
            let dir = resolve_data_dir(&cfg, data.as_deref(), &out);
            let stats = dataio::load_stats(&dir.join("stats.bin"))
                .with_context(|| format!("loading stats from {}", dir.display()))?;
            let train = load_split(&dir, "train")?;
            let val = load_split(&dir, "val")?;
            let outcome = trainer::train_universal(&cfg, &stats, &train, &val, cfg.seed)?;
            dataio::write_metrics(&out.join("metrics_universal.csv"), &outcome.metrics)?;
            dataio::save_checkpoint(&out.join("universal.ckpt"), &outcome.ckpt)?;
            audit(
                &out,
                &format!(
                    "train-universal seed={} clusters={} epochs_run={} best_val_auc={}",
                    cfg.seed,
                    outcome.ckpt.k,
                    outcome.metrics.len(),
                    best_val_auc(&outcome.metrics)
                ),
            )?;
        }
        Cmd::TrainSegments { common, data, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            let dir = resolve_data_dir(&cfg, data.as_deref(), &out);
            let ckpt_path = checkpoint.unwrap_or_else(|| out.join("universal.ckpt"));
            let ckpt = dataio::load_checkpoint(&ckpt_path)?;
            let train = load_split(&dir, "train")?;
            let val = load_split(&dir, "val")?;
            let features = match features_source(&cfg) {
                Some(path) => Some(dataio::read_segment_features(&path, cfg.d_u)?),
                None => None,
            };
            let outcome =
                trainer::train_segments(&cfg, &ckpt, &train, &val, features.as_deref(), cfg.seed)?;
            dataio::write_metrics(&out.join("metrics_segments.csv"), &outcome.metrics)?;
            dataio::save_checkpoint(&out.join("segments.ckpt"), &outcome.ckpt)?;
            audit(
                &out,
                &format!(
                    "train-segments seed={} segments={} epochs_run={} best_val_auc={}",
                    cfg.seed,
                    outcome.ckpt.registry.len(),
                    outcome.metrics.len(),
                    best_val_auc(&outcome.metrics)
                ),
            )?;
        }
        Cmd::ExpandClusters { common, data, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            let dir = resolve_data_dir(&cfg, data.as_deref(), &out);
            let mut ckpt = dataio::load_checkpoint(&checkpoint)?;
            let phase2 = load_split(&dir, "phase2")?;
            let record = trainer::expand_clusters_op(&cfg, &mut ckpt, &phase2, cfg.seed)?;
            dataio::save_checkpoint(&out.join("expanded_clusters.ckpt"), &ckpt)?;
            audit(
                &out,
                &format!(
                    "expand-clusters seed={} K {}->{} buffered={} source_cluster={} final_loss={}",
                    cfg.seed,
                    record.old_k,
                    record.new_k,
                    record.buffered,
                    record.source,
                    record.final_loss
                ),
            )?;
        }
        Cmd::ExpandSegment { common, data, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            let dir = resolve_data_dir(&cfg, data.as_deref(), &out);
            let mut ckpt = dataio::load_checkpoint(&checkpoint)?;
            let newseg = load_split(&dir, "newseg_train")?;
            let features_path = features_source(&cfg)
                .ok_or_else(|| anyhow::anyhow!("no segment features file configured"))?;
            let features = dataio::read_segment_features(&features_path, cfg.d_u)?;
            let id = ckpt.registry.len();
            let u_new = features.get(id).ok_or_else(|| {
                anyhow::anyhow!("{} has no row for segment {id}", features_path.display())
            })?;
            let record = trainer::expand_segment_op(&cfg, &mut ckpt, &newseg, u_new, cfg.seed)?;
            dataio::save_checkpoint(&out.join("expanded_segment.ckpt"), &ckpt)?;
            audit(
                &out,
                &format!(
                    "expand-segment seed={} M {}->{} segment={} final_loss={}",
                    cfg.seed, record.old_m, record.new_m, record.id, record.final_loss
                ),
            )?;
        }
        Cmd::Predict { common, checkpoint, data, scores_out } => {
            let (cfg, out) = setup(&common)?;
            let ckpt = dataio::load_checkpoint(&checkpoint)?;
            let ds = load_dataset_for(&data, &ckpt.stats)?;
            let scores = trainer::predict(&cfg, &ckpt, &ds)?;
            let path = scores_out.unwrap_or_else(|| out.join("scores.csv"));
            dataio::write_scores(&path, &scores)?;
            audit(
                &out,
                &format!("predict wrote {} scores to {}", scores.len(), path.display()),
            )?;
        }
        Cmd::Evaluate { common, checkpoint, data } => {
            let (cfg, out) = setup(&common)?;
            let ckpt = dataio::load_checkpoint(&checkpoint)?;
            let ds = load_dataset_for(&data, &ckpt.stats)?;
            let value = trainer::evaluate(&cfg, &ckpt, &ds)?;
            println!("auc = {value}");
            dataio::write_atomic(&out.join("auc.txt"), format!("{value}\n").as_bytes())?;
            audit(&out, &format!("evaluate auc={value} on {} examples", ds.len()))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
