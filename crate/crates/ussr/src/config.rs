//! Flat key=value run configuration. Every knob has a default; a config
//! file overrides them; unknown keys are an error so typos cannot silently
//! fall back. `resolved()` renders the exact state a run used.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ussr_core::bipartite::BipartiteConfig;
use ussr_core::expansion::ExpansionConfig;
use ussr_core::universal::{EncoderKind, FeatureDims, UniversalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderChoice {
    Plain,
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Model.
    pub k: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_u: usize,
    pub hidden: usize,
    pub beta: f64,
    pub beta_c: f64,
    pub tau: f64,
    pub n_samples: usize,
    pub encoder: EncoderChoice,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub learnable_u: bool,
    pub gumbel: bool,

    // Optimization.
    pub lr: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,

    // Preprocessing.
    pub cap: u32,
    pub embed_dim: usize,
    pub joint_fit: bool,

    // Expansion.
    pub t_logit: f64,
    pub t_num: usize,
    pub expand_epochs: usize,
    pub perturb: f64,

    pub seed: u64,

    // Data paths; commands read the ones they need.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub phase2: Option<PathBuf>,
    pub phase2_heldout: Option<PathBuf>,
    pub newseg: Option<PathBuf>,
    pub newseg_heldout: Option<PathBuf>,
    pub segment_features: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,

    // Synthetic benchmark shape.
    pub synth_modes: usize,
    pub synth_segments: usize,
    pub synth_exponent: f64,
    pub synth_dense: usize,
    pub synth_sparse: usize,
    pub synth_vocab: usize,
    pub synth_train_rows: usize,
    pub synth_val_rows: usize,
    pub synth_test_rows: usize,
    pub synth_phase2_rows: usize,
    pub synth_heldout_rows: usize,
    pub synth_new_rows: usize,
    pub synth_new_heldout_rows: usize,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            k: 4,
            d_z: 8,
            d_h: 8,
            d_u: 4,
            hidden: 16,
            beta: 1e-2,
            beta_c: 1e-2,
            tau: 1.0,
            n_samples: 1,
            encoder: EncoderChoice::Plain,
            attn_layers: 1,
            attn_heads: 2,
            learnable_u: false,
            gumbel: false,
            lr: 0.05,
            clip: 5.0,
            batch_size: 256,
            epochs: 30,
            patience: 5,
            cap: 100_000,
            embed_dim: 8,
            joint_fit: false,
            t_logit: 1.0,
            t_num: 50,
            expand_epochs: 50,
            perturb: 1e-3,
            seed: 42,
            train: None,
            val: None,
            test: None,
            phase2: None,
            phase2_heldout: None,
            newseg: None,
            newseg_heldout: None,
            segment_features: None,
            data_dir: None,
            synth_modes: 3,
            synth_segments: 6,
            synth_exponent: 1.5,
            synth_dense: 4,
            synth_sparse: 2,
            synth_vocab: 12,
            synth_train_rows: 50_000,
            synth_val_rows: 10_000,
            synth_test_rows: 10_000,
            synth_phase2_rows: 10_000,
            synth_heldout_rows: 5_000,
            synth_new_rows: 2_000,
            synth_new_heldout_rows: 1_000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("config key '{key}': cannot parse '{value}': {e}"))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("config key '{key}': expected a boolean, got '{other}'"),
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected key = value, got '{line}'", no + 1);
            };
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("config line {}", no + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "k" => self.k = parse(key, value)?,
            "d_z" => self.d_z = parse(key, value)?,
            "d_h" => self.d_h = parse(key, value)?,
            "d_u" => self.d_u = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "beta_c" => self.beta_c = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "encoder" => {
                self.encoder = match value {
                    "plain" => EncoderChoice::Plain,
                    "attention" => EncoderChoice::Attention,
                    other => bail!("config key 'encoder': expected plain or attention, got '{other}'"),
                }
            }
            "attn_layers" => self.attn_layers = parse(key, value)?,
            "attn_heads" => self.attn_heads = parse(key, value)?,
            "learnable_u" => self.learnable_u = parse_bool(key, value)?,
            "gumbel" => self.gumbel = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "cap" => self.cap = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "joint_fit" => self.joint_fit = parse_bool(key, value)?,
            "t_logit" => self.t_logit = parse(key, value)?,
            "t_num" => self.t_num = parse(key, value)?,
            "expand_epochs" => self.expand_epochs = parse(key, value)?,
            "perturb" => self.perturb = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            // An empty value clears a path back to unset.
            "train" => self.train = opt_path(value),
            "val" => self.val = opt_path(value),
            "test" => self.test = opt_path(value),
            "phase2" => self.phase2 = opt_path(value),
            "phase2_heldout" => self.phase2_heldout = opt_path(value),
            "newseg" => self.newseg = opt_path(value),
            "newseg_heldout" => self.newseg_heldout = opt_path(value),
            "segment_features" => self.segment_features = opt_path(value),
            "data_dir" => self.data_dir = opt_path(value),
            "synth_modes" => self.synth_modes = parse(key, value)?,
            "synth_segments" => self.synth_segments = parse(key, value)?,
            "synth_exponent" => self.synth_exponent = parse(key, value)?,
            "synth_dense" => self.synth_dense = parse(key, value)?,
            "synth_sparse" => self.synth_sparse = parse(key, value)?,
            "synth_vocab" => self.synth_vocab = parse(key, value)?,
            "synth_train_rows" => self.synth_train_rows = parse(key, value)?,
            "synth_val_rows" => self.synth_val_rows = parse(key, value)?,
            "synth_test_rows" => self.synth_test_rows = parse(key, value)?,
            "synth_phase2_rows" => self.synth_phase2_rows = parse(key, value)?,
            "synth_heldout_rows" => self.synth_heldout_rows = parse(key, value)?,
            "synth_new_rows" => self.synth_new_rows = parse(key, value)?,
            "synth_new_heldout_rows" => self.synth_new_heldout_rows = parse(key, value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_z == 0 || self.d_h == 0 || self.d_u == 0 || self.hidden == 0 {
            bail!("model dimensions must be positive");
        }
        if self.batch_size == 0 || self.n_samples == 0 {
            bail!("batch_size and n_samples must be positive");
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            bail!("lr and tau must be positive");
        }
        if self.encoder == EncoderChoice::Attention {
            if self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
                bail!("attn_heads must divide embed_dim");
            }
        }
        Ok(())
    }

    /// Every field as sorted `key = value` lines, for the run log.
    pub fn resolved(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("k", self.k.to_string());
        map.insert("d_z", self.d_z.to_string());
        map.insert("d_h", self.d_h.to_string());
        map.insert("d_u", self.d_u.to_string());
        map.insert("hidden", self.hidden.to_string());
        map.insert("beta", self.beta.to_string());
        map.insert("beta_c", self.beta_c.to_string());
        map.insert("tau", self.tau.to_string());
        map.insert("n_samples", self.n_samples.to_string());
        map.insert(
            "encoder",
            match self.encoder {
                EncoderChoice::Plain => "plain".into(),
                EncoderChoice::Attention => "attention".into(),
            },
        );
        map.insert("attn_layers", self.attn_layers.to_string());
        map.insert("attn_heads", self.attn_heads.to_string());
        map.insert("learnable_u", self.learnable_u.to_string());
        map.insert("gumbel", self.gumbel.to_string());
        map.insert("lr", self.lr.to_string());
        map.insert("clip", self.clip.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("epochs", self.epochs.to_string());
        map.insert("patience", self.patience.to_string());
        map.insert("cap", self.cap.to_string());
        map.insert("embed_dim", self.embed_dim.to_string());
        map.insert("joint_fit", self.joint_fit.to_string());
        map.insert("t_logit", self.t_logit.to_string());
        map.insert("t_num", self.t_num.to_string());
        map.insert("expand_epochs", self.expand_epochs.to_string());
        map.insert("perturb", self.perturb.to_string());
        map.insert("seed", self.seed.to_string());
        let path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        map.insert("train", path(&self.train));
        map.insert("val", path(&self.val));
        map.insert("test", path(&self.test));
        map.insert("phase2", path(&self.phase2));
        map.insert("phase2_heldout", path(&self.phase2_heldout));
        map.insert("newseg", path(&self.newseg));
        map.insert("newseg_heldout", path(&self.newseg_heldout));
        map.insert("segment_features", path(&self.segment_features));
        map.insert("data_dir", path(&self.data_dir));
        map.insert("synth_modes", self.synth_modes.to_string());
        map.insert("synth_segments", self.synth_segments.to_string());
        map.insert("synth_exponent", self.synth_exponent.to_string());
        map.insert("synth_dense", self.synth_dense.to_string());
        map.insert("synth_sparse", self.synth_sparse.to_string());
        map.insert("synth_vocab", self.synth_vocab.to_string());
        map.insert("synth_train_rows", self.synth_train_rows.to_string());
        map.insert("synth_val_rows", self.synth_val_rows.to_string());
        map.insert("synth_test_rows", self.synth_test_rows.to_string());
        map.insert("synth_phase2_rows", self.synth_phase2_rows.to_string());
        map.insert("synth_heldout_rows", self.synth_heldout_rows.to_string());
        map.insert("synth_new_rows", self.synth_new_rows.to_string());
        map.insert("synth_new_heldout_rows", self.synth_new_heldout_rows.to_string());
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn universal_config(&self) -> UniversalConfig {
        UniversalConfig {
            k: self.k,
            d_z: self.d_z,
            hidden: self.hidden,
            beta: self.beta,
            beta_c: self.beta_c,
            n_samples: self.n_samples,
            encoder: match self.encoder {
                EncoderChoice::Plain => EncoderKind::Plain,
                EncoderChoice::Attention => EncoderKind::Attention {
                    layers: self.attn_layers,
                    heads: self.attn_heads,
                },
            },
        }
    }

    pub fn universal_config_with_k(&self, k: usize) -> UniversalConfig {
        let mut c = self.universal_config();
        c.k = k;
        c
    }

    pub fn bipartite_config(&self) -> BipartiteConfig {
        BipartiteConfig {
            d_u: self.d_u,
            d_h: self.d_h,
            hidden: self.hidden,
            tau: self.tau,
            learnable_u: self.learnable_u,
            gumbel: self.gumbel,
        }
    }

    pub fn expansion_config(&self) -> ExpansionConfig {
        ExpansionConfig {
            t_logit: self.t_logit,
            t_num: self.t_num,
            epochs: self.expand_epochs,
            lr: self.lr,
            clip: self.clip,
            perturb: self.perturb,
        }
    }

    pub fn feature_dims(&self, stats: &ussr_core::encoding::FeatureStats) -> FeatureDims {
        FeatureDims::from_stats(stats)
    }
}
