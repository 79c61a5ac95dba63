//! Synthetic benchmark generator: a handful of latent modes shape the
//! feature distribution, segments with their own label functions sit on a
//! long tail, and a schedule decides which modes land in phase 1 versus
//! phase 2 (for the expansion experiments). One seed fixes every byte.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ussr_core::rng::{seeded, stream};

use crate::config::Config;

/// Share of sparse draws that land on the mode's preferred category.
const PREF_PROB: f64 = 0.7;
/// Spread of the per-mode dense means; larger values separate the modes.
const MODE_SPREAD: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub segments: usize,
    pub exponent: f64,
    pub n_dense: usize,
    pub n_sparse: usize,
    pub vocab: usize,
    pub d_u: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    pub phase2_rows: usize,
    pub heldout_rows: usize,
    pub new_rows: usize,
    pub new_heldout_rows: usize,
    /// Modes that appear in train/val/test and the new-segment files.
    pub phase1_modes: Vec<usize>,
    /// Modes that appear only in the phase-2 files.
    pub phase2_modes: Vec<usize>,
}

impl SyntheticSpec {
    /// Default schedule: the last mode is held out of phase 1, so the
    /// phase-2 files exercise cluster expansion out of the box.
    pub fn from_config(cfg: &Config) -> SyntheticSpec {
        let modes = cfg.synth_modes;
        let split = modes.saturating_sub(1).max(1);
        SyntheticSpec {
            modes,
            segments: cfg.synth_segments,
            exponent: cfg.synth_exponent,
            n_dense: cfg.synth_dense,
            n_sparse: cfg.synth_sparse,
            vocab: cfg.synth_vocab,
            d_u: cfg.d_u,
            train_rows: cfg.synth_train_rows,
            val_rows: cfg.synth_val_rows,
            test_rows: cfg.synth_test_rows,
            phase2_rows: cfg.synth_phase2_rows,
            heldout_rows: cfg.synth_heldout_rows,
            new_rows: cfg.synth_new_rows,
            new_heldout_rows: cfg.synth_new_heldout_rows,
            phase1_modes: (0..split).collect(),
            phase2_modes: (split..modes).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.segments == 0 || self.vocab == 0 || self.d_u == 0 {
            bail!("modes, segments, vocab, d_u must be positive");
        }
        if self.n_dense == 0 && self.n_sparse == 0 {
            bail!("need at least one feature field");
        }
        if self.phase1_modes.is_empty() {
            bail!("phase 1 needs at least one mode");
        }
        for &t in self.phase1_modes.iter().chain(&self.phase2_modes) {
            if t >= self.modes {
                bail!("mode {t} out of range (modes = {})", self.modes);
            }
        }
        let distinct: BTreeSet<usize> =
            self.phase1_modes.iter().chain(&self.phase2_modes).copied().collect();
        if distinct.len() != self.phase1_modes.len() + self.phase2_modes.len() {
            bail!("phase mode lists overlap");
        }
        if !self.exponent.is_finite() {
            bail!("exponent must be finite");
        }
        Ok(())
    }
}

/// The hidden ground truth behind one generated dataset. Segment label
/// functions are linear in the dense block with a per-mode offset, and the
/// coefficients are a projection of the segment's feature vector, so the
/// features genuinely describe the segment.
struct World {
    dense_mean: Vec<Vec<f64>>,
    pref_cat: Vec<Vec<usize>>,
    seg_u: Vec<Vec<f64>>,
    seg_w: Vec<Vec<f64>>,
    seg_b: Vec<f64>,
    seg_a: Vec<Vec<f64>>,
    seg_cdf: Vec<f64>,
}

impl World {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> World {
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let dense_mean = (0..spec.modes)
            .map(|_| (0..spec.n_dense).map(|_| MODE_SPREAD * normal(rng)).collect())
            .collect();
        let pref_cat = (0..spec.modes)
            .map(|_| (0..spec.n_sparse).map(|_| rng.random_range(0..spec.vocab)).collect())
            .collect();

        // One extra segment beyond the registered ones, reserved for the
        // expansion experiment.
        let n_seg = spec.segments + 1;
        let proj: Vec<f64> = (0..spec.n_dense * spec.d_u).map(|_| normal(rng)).collect();
        let mut seg_u = Vec::with_capacity(n_seg);
        let mut seg_w = Vec::with_capacity(n_seg);
        let mut seg_b = Vec::with_capacity(n_seg);
        let mut seg_a = Vec::with_capacity(n_seg);
        // Keeps the logits in a range where the sigmoid stays responsive.
        let w_scale = 1.0 / ((spec.d_u * spec.n_dense.max(1)) as f64).sqrt();
        for _ in 0..n_seg {
            let u: Vec<f64> = (0..spec.d_u).map(|_| normal(rng)).collect();
            let w: Vec<f64> = (0..spec.n_dense)
                .map(|j| {
                    let dot: f64 =
                        (0..spec.d_u).map(|i| proj[j * spec.d_u + i] * u[i]).sum();
                    dot * w_scale
                })
                .collect();
            seg_u.push(u);
            seg_w.push(w);
            seg_b.push(0.5 * normal(rng));
            seg_a.push((0..spec.modes).map(|_| normal(rng)).collect());
        }

        let weights: Vec<f64> =
            (0..spec.segments).map(|m| ((m + 1) as f64).powf(-spec.exponent)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let seg_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();

        World { dense_mean, pref_cat, seg_u, seg_w, seg_b, seg_a, seg_cdf }
    }

    fn draw_segment(&self, rng: &mut ChaCha8Rng) -> u32 {
        let r: f64 = rng.random();
        self.seg_cdf.iter().position(|&c| r < c).unwrap_or(self.seg_cdf.len() - 1) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRow {
    pub mode: usize,
    pub dense: Vec<f64>,
    /// Category indices; serialized as `v{index}`.
    pub sparse: Vec<usize>,
    pub label: u8,
    pub segment: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// Feature vectors for segments `0..=segments`; the last row belongs
    /// to the reserved expansion segment.
    pub segment_features: Vec<Vec<f64>>,
    /// `(file stem, rows)` in generation order.
    pub files: Vec<(String, Vec<SynthRow>)>,
}

fn sample_row(
    spec: &SyntheticSpec,
    world: &World,
    allowed_modes: &[usize],
    segment_override: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> SynthRow {
    let mode = allowed_modes[rng.random_range(0..allowed_modes.len())];
    let segment = match segment_override {
        Some(m) => m,
        None => world.draw_segment(rng),
    };
    let dense: Vec<f64> = (0..spec.n_dense)
        .map(|j| world.dense_mean[mode][j] + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let sparse: Vec<usize> = (0..spec.n_sparse)
        .map(|f| {
            if rng.random::<f64>() < PREF_PROB {
                world.pref_cat[mode][f]
            } else {
                rng.random_range(0..spec.vocab)
            }
        })
        .collect();
    let s = segment as usize;
    let logit: f64 = world.seg_b[s]
        + world.seg_a[s][mode]
        + dense.iter().zip(&world.seg_w[s]).map(|(x, w)| x * w).sum::<f64>();
    let p = 1.0 / (1.0 + (-logit).exp());
    let label = (rng.random::<f64>() < p) as u8;
    SynthRow { mode, dense, sparse, label, segment }
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seeded(seed, stream::SYNTH);
    let world = World::sample(spec, &mut rng);
    let new_id = spec.segments as u32;

    let phase1 = &spec.phase1_modes;
    let phase2 = if spec.phase2_modes.is_empty() {
        spec.phase1_modes.clone()
    } else {
        spec.phase2_modes.clone()
    };
    let plan: [(&str, usize, &[usize], Option<u32>); 7] = [
        ("train", spec.train_rows, phase1, None),
        ("val", spec.val_rows, phase1, None),
        ("test", spec.test_rows, phase1, None),
        ("phase2", spec.phase2_rows, &phase2, None),
        ("phase2_heldout", spec.heldout_rows, &phase2, None),
        ("newseg_train", spec.new_rows, phase1, Some(new_id)),
        ("newseg_heldout", spec.new_heldout_rows, phase1, Some(new_id)),
    ];
    let mut files = Vec::with_capacity(plan.len());
    for (name, n, modes, seg) in plan {
        let rows =
            (0..n).map(|_| sample_row(spec, &world, modes, seg, &mut rng)).collect();
        files.push((name.to_string(), rows));
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        segment_features: world.seg_u.clone(),
        files,
    })
}

fn render_rows(spec: &SyntheticSpec, rows: &[SynthRow]) -> String {
    let mut out = String::new();
    let mut cols = Vec::new();
    cols.extend((1..=spec.n_dense).map(|j| format!("I{j}")));
    cols.extend((1..=spec.n_sparse).map(|f| format!("C{f}")));
    cols.push("label".into());
    cols.push("seg".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in rows {
        let mut cells = Vec::with_capacity(cols.len());
        cells.extend(row.dense.iter().map(|v| v.to_string()));
        cells.extend(row.sparse.iter().map(|c| format!("v{c}")));
        cells.push(row.label.to_string());
        cells.push(row.segment.to_string());
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn render_features(features: &[Vec<f64>]) -> String {
    let d_u = features.first().map(|u| u.len()).unwrap_or(0);
    let mut out = String::from("seg");
    for j in 0..d_u {
        out.push_str(&format!(",u_{j}"));
    }
    out.push('\n');
    for (m, u) in features.iter().enumerate() {
        out.push_str(&m.to_string());
        for v in u {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_files(data: &SyntheticData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, rows) in &data.files {
        let path = dir.join(format!("{name}.csv"));
        crate::dataio::write_atomic(&path, render_rows(&data.spec, rows).as_bytes())?;
    }
    let path = dir.join("segment_features.csv");
    crate::dataio::write_atomic(&path, render_features(&data.segment_features).as_bytes())?;
    Ok(())
}
