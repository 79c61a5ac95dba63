//! Training loops, prediction, and the expansion operations behind the
//! CLI. Phase 1 fits the universal mixture model; phase 2 freezes it and
//! fits the bipartite interaction plus per-segment decoders. All batching,
//! initialization, and sampling noise run off named seed streams, so one
//! seed fixes every reported number.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use ussr_core::bipartite::{gumbel_noise, segment_masks, BipartiteNet, SegmentGraph, SegmentRegistry};
use ussr_core::checkpoint::{Checkpoint, RngState};
use ussr_core::encoding::{batch_ranges, make_batch, shuffled_indices, Dataset, FeatureStats};
use ussr_core::expansion::{
    expand_cluster, expand_segment, score_batch, ClusterExpansion, ExpansionBuffer,
    SegmentExpansion,
};
use ussr_core::graph::{Gradients, Graph};
use ussr_core::metrics::auc;
use ussr_core::optim::{sgd_step, ParamSet};
use ussr_core::rng::{seeded, stream};
use ussr_core::tensor::Tensor;
use ussr_core::universal::{ElboGraph, FeatureDims, PredictGraph, UniversalNet};

use crate::config::Config;
use crate::dataio::MetricsRow;

pub struct TrainOutcome {
    pub ckpt: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

fn universal_net(cfg: &Config, k: usize, stats: &FeatureStats) -> Result<UniversalNet> {
    Ok(UniversalNet::new(FeatureDims::from_stats(stats), cfg.universal_config_with_k(k))?)
}

fn bipartite_net(cfg: &Config, k: usize) -> Result<BipartiteNet> {
    Ok(BipartiteNet::new(cfg.d_z, k, cfg.bipartite_config())?)
}

fn labels_of(ds: &Dataset) -> Vec<u8> {
    ds.examples.iter().map(|e| e.label).collect()
}

/// Zeroes every parameter gradient outside `keep`, so clipping norms see
/// only what the step is allowed to move.
fn keep_grads(grads: &mut Gradients, keep: &dyn Fn(&str) -> bool) {
    for (name, g) in grads.params.iter_mut() {
        if !keep(name) {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }
}

fn add_masks(
    inputs: &mut BTreeMap<String, Tensor>,
    segments: &[u32],
    m_count: usize,
) -> Result<()> {
    for (m, t) in segment_masks(segments, m_count)?.into_iter().enumerate() {
        inputs.insert(format!("mask.{m}"), t);
    }
    Ok(())
}

fn add_gumbel(
    inputs: &mut BTreeMap<String, Tensor>,
    bip: &BipartiteNet,
    m_count: usize,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) {
    if !bip.cfg.gumbel {
        return;
    }
    match rng {
        Some(rng) => {
            for m in 0..m_count {
                inputs.insert(format!("gumbel.{m}"), gumbel_noise(rng, bip.k));
            }
        }
        None => {
            for m in 0..m_count {
                inputs.insert(format!("gumbel.{m}"), Tensor::zeros(&[1, bip.k]));
            }
        }
    }
}

fn universal_scores(
    uni: &UniversalNet,
    params: &ParamSet,
    ds: &Dataset,
    vocab: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut graphs: BTreeMap<usize, PredictGraph> = BTreeMap::new();
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for (a, b) in batch_ranges(ds.len(), batch_size) {
        let batch = make_batch(ds, &idxs[a..b], vocab)?;
        let built = match graphs.entry(b - a) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(uni.build_predict(b - a)?),
        };
        let mut inputs = batch.inputs();
        inputs.remove("y");
        let eval = built.graph.forward_det(params, &inputs)?;
        out.extend_from_slice(eval.value(built.prob).data());
    }
    Ok(out)
}

/// Phase 1: fits the universal model on the training bound, early-stops on
/// validation AUC, and returns the best parameters as a fresh checkpoint.
pub fn train_universal(
    cfg: &Config,
    stats: &FeatureStats,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        bail!("training and validation sets must be non-empty");
    }
    let uni = universal_net(cfg, cfg.k, stats)?;
    let mut init_rng = seeded(seed, stream::INIT);
    let mut params = uni.init_params(&mut init_rng);
    let mut noise = seeded(seed, stream::NOISE);
    let mut shuffle = seeded(seed, stream::SHUFFLE);
    let vocab = stats.vocab_size();

    let mut graphs: BTreeMap<usize, ElboGraph> = BTreeMap::new();
    let mut metrics = Vec::new();
    let started = Instant::now();
    let mut best_params = params.clone();
    let mut best_rng = RngState::capture(&noise);
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train.len(), &mut shuffle);
        let mut loss_sum = 0.0;
        for (a, b) in batch_ranges(train.len(), cfg.batch_size) {
            let batch = make_batch(train, &order[a..b], vocab)?;
            let built = match graphs.entry(b - a) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(v) => v.insert(uni.build_elbo(b - a)?),
            };
            let eval = built.graph.forward(&params, &batch.inputs(), &mut noise)?;
            let grads = built.graph.backward(&eval, built.loss, None)?;
            sgd_step(&mut params, &grads, cfg.lr, cfg.clip, None)?;
            loss_sum += eval.value(built.loss).item() * (b - a) as f64;
        }
        let scores = universal_scores(&uni, &params, val, vocab, cfg.batch_size)?;
        let val_auc = auc(&scores, &labels_of(val)).context("validation AUC")?;
        metrics.push(MetricsRow {
            epoch,
            phase: "universal".into(),
            loss: loss_sum / train.len() as f64,
            val_auc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_params = params.clone();
            best_rng = RngState::capture(&noise);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let ckpt = Checkpoint {
        stats: stats.clone(),
        k: cfg.k,
        params: best_params,
        registry: SegmentRegistry::new(),
        rng: best_rng,
    };
    Ok(TrainOutcome { ckpt, metrics })
}

fn segment_count(train: &Dataset, val: &Dataset) -> usize {
    train
        .examples
        .iter()
        .chain(&val.examples)
        .map(|e| e.segment as usize)
        .max()
        .map_or(1, |m| m + 1)
}

/// Recomputes every segment representation from the current parameters
/// (deterministic expectation; no edge-weight noise).
fn interaction_h(bip: &BipartiteNet, params: &ParamSet, m_count: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let nodes = bip.interaction_into(&mut g, m_count)?;
    let mut inputs = BTreeMap::new();
    add_gumbel(&mut inputs, bip, m_count, None);
    let eval = g.forward_det(params, &inputs)?;
    Ok(nodes.h_hat.iter().map(|&id| eval.value(id).clone()).collect())
}

fn segment_scores(
    bip: &BipartiteNet,
    uni: &UniversalNet,
    params: &ParamSet,
    ds: &Dataset,
    vocab: usize,
    batch_size: usize,
    m_count: usize,
    graphs: &mut BTreeMap<usize, SegmentGraph>,
) -> Result<Vec<f64>> {
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for (a, b) in batch_ranges(ds.len(), batch_size) {
        let batch = make_batch(ds, &idxs[a..b], vocab)?;
        let built = match graphs.entry(b - a) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(bip.build_training(uni, b - a, m_count)?),
        };
        let mut inputs = batch.inputs();
        add_masks(&mut inputs, &batch.segments, m_count)?;
        add_gumbel(&mut inputs, bip, m_count, None);
        let eval = built.graph.forward_det(params, &inputs)?;
        out.extend_from_slice(eval.value(built.prob).data());
    }
    Ok(out)
}

/// Phase 2: freezes the universal model from `ckpt`, trains the bipartite
/// interaction and per-segment decoders, then stores each segment's
/// representation in the registry.
pub fn train_segments(
    cfg: &Config,
    ckpt: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
    features: Option<&[Tensor]>,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        bail!("training and validation sets must be non-empty");
    }
    if !ckpt.registry.is_empty() {
        bail!("segments are already trained in this checkpoint");
    }
    let stats = &ckpt.stats;
    let uni = universal_net(cfg, ckpt.k, stats)?;
    let bip = bipartite_net(cfg, ckpt.k)?;
    let m_count = segment_count(train, val);

    let mut seg_rng = seeded(seed, stream::SEG_INIT);
    let u_rows: Vec<Tensor> = match features {
        Some(rows) => {
            if rows.len() < m_count {
                bail!("segment features cover {} segments, data needs {m_count}", rows.len());
            }
            rows[..m_count].to_vec()
        }
        None => {
            if !cfg.learnable_u {
                bail!("no segment features given and learnable_u is off");
            }
            (0..m_count)
                .map(|_| {
                    let data =
                        (0..cfg.d_u).map(|_| seg_rng.sample(StandardNormal)).collect();
                    Tensor::new(vec![1, cfg.d_u], data)
                })
                .collect::<ussr_core::error::Result<_>>()?
        }
    };

    let mut params = ckpt.params.clone();
    bip.init_shared(&mut params, &mut seg_rng);
    let mut registry = SegmentRegistry::new();
    for (m, u) in u_rows.iter().enumerate() {
        bip.init_segment(&mut params, &mut seg_rng, m as u32, u)?;
        registry.add(u.clone());
    }

    let learnable_u = cfg.learnable_u;
    let trainable = move |name: &str| {
        name.starts_with("fe.")
            || name.starts_with("fv.")
            || name.starts_with("fe2.")
            || name.starts_with("fehat.")
            || name.starts_with("segdec.")
            || (learnable_u && name.starts_with("u."))
    };

    let mut noise = seeded(seed, stream::NOISE);
    let mut shuffle = seeded(seed, stream::SHUFFLE);
    let vocab = stats.vocab_size();
    let mut graphs: BTreeMap<usize, SegmentGraph> = BTreeMap::new();
    let mut metrics = Vec::new();
    let started = Instant::now();
    let mut best_params = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train.len(), &mut shuffle);
        let mut loss_sum = 0.0;
        for (a, b) in batch_ranges(train.len(), cfg.batch_size) {
            let batch = make_batch(train, &order[a..b], vocab)?;
            let built = match graphs.entry(b - a) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(v) => v.insert(bip.build_training(&uni, b - a, m_count)?),
            };
            let mut inputs = batch.inputs();
            add_masks(&mut inputs, &batch.segments, m_count)?;
            add_gumbel(&mut inputs, &bip, m_count, Some(&mut noise));
            let loss_node = built.loss.expect("training graph carries a loss");
            let eval = built.graph.forward_det(&params, &inputs)?;
            let mut grads = built.graph.backward(&eval, loss_node, None)?;
            keep_grads(&mut grads, &trainable);
            sgd_step(&mut params, &grads, cfg.lr, cfg.clip, Some(&trainable))?;
            loss_sum += eval.value(loss_node).item() * (b - a) as f64;
        }
        let scores =
            segment_scores(&bip, &uni, &params, val, vocab, cfg.batch_size, m_count, &mut graphs)?;
        let val_auc = auc(&scores, &labels_of(val)).context("validation AUC")?;
        metrics.push(MetricsRow {
            epoch,
            phase: "segments".into(),
            loss: loss_sum / train.len() as f64,
            val_auc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let params = best_params;
    let h_rows = interaction_h(&bip, &params, m_count)?;
    for (m, h) in h_rows.into_iter().enumerate() {
        let name = bip.feature_param_name(m as u32);
        let u_final = params
            .get(&name)
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("missing parameter {name}"))?;
        registry.store(m as u32, h, u_final)?;
    }

    let ckpt_out = Checkpoint {
        stats: stats.clone(),
        k: ckpt.k,
        params,
        registry,
        rng: RngState::capture(&noise),
    };
    Ok(TrainOutcome { ckpt: ckpt_out, metrics })
}

/// Click probabilities for every example, through the segment path when
/// segments are trained and the universal path otherwise. Deterministic.
pub fn predict(cfg: &Config, ckpt: &Checkpoint, ds: &Dataset) -> Result<Vec<f64>> {
    let uni = universal_net(cfg, ckpt.k, &ckpt.stats)?;
    let vocab = ckpt.stats.vocab_size();
    if ckpt.registry.is_empty() {
        return universal_scores(&uni, &ckpt.params, ds, vocab, cfg.batch_size);
    }
    let bip = bipartite_net(cfg, ckpt.k)?;
    let m_count = ckpt.registry.len();
    let mut graphs: BTreeMap<usize, SegmentGraph> = BTreeMap::new();
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for (a, b) in batch_ranges(ds.len(), cfg.batch_size) {
        let batch = make_batch(ds, &idxs[a..b], vocab)?;
        let built = match graphs.entry(b - a) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(bip.build_predict(&uni, b - a, &ckpt.registry)?),
        };
        let mut inputs = batch.inputs();
        inputs.remove("y");
        add_masks(&mut inputs, &batch.segments, m_count)?;
        let eval = built.graph.forward_det(&ckpt.params, &inputs)?;
        out.extend_from_slice(eval.value(built.prob).data());
    }
    Ok(out)
}

pub fn evaluate(cfg: &Config, ckpt: &Checkpoint, ds: &Dataset) -> Result<f64> {
    let scores = predict(cfg, ckpt, ds)?;
    Ok(auc(&scores, &labels_of(ds))?)
}

/// Mean universal training bound over a dataset, sampled on the evaluation
/// stream. Used to judge whether expansion helped on held-out data.
pub fn mean_universal_loss(
    cfg: &Config,
    ckpt: &Checkpoint,
    ds: &Dataset,
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        bail!("cannot average a loss over an empty dataset");
    }
    let uni = universal_net(cfg, ckpt.k, &ckpt.stats)?;
    let vocab = ckpt.stats.vocab_size();
    let mut rng = seeded(seed, stream::EVAL);
    let mut graphs: BTreeMap<usize, ElboGraph> = BTreeMap::new();
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut sum = 0.0;
    for (a, b) in batch_ranges(ds.len(), cfg.batch_size) {
        let batch = make_batch(ds, &idxs[a..b], vocab)?;
        let built = match graphs.entry(b - a) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(uni.build_elbo(b - a)?),
        };
        let eval = built.graph.forward(&ckpt.params, &batch.inputs(), &mut rng)?;
        sum += eval.value(built.loss).item() * (b - a) as f64;
    }
    Ok(sum / ds.len() as f64)
}

/// Scores phase-2 data under the current universal model, buffers the
/// poorly-explained examples, and widens the mixture by one cluster.
pub fn expand_clusters_op(
    cfg: &Config,
    ckpt: &mut Checkpoint,
    phase2: &Dataset,
    seed: u64,
) -> Result<ClusterExpansion> {
    let uni = universal_net(cfg, ckpt.k, &ckpt.stats)?;
    let vocab = ckpt.stats.vocab_size();
    let mut buffer = ExpansionBuffer::new(cfg.t_logit, cfg.t_num)?;
    let mut rng = seeded(seed, stream::EVAL);
    let idxs: Vec<usize> = (0..phase2.len()).collect();
    for (a, b) in batch_ranges(phase2.len(), cfg.batch_size) {
        let batch = make_batch(phase2, &idxs[a..b], vocab)?;
        let scores = score_batch(&uni, &ckpt.params, &batch.inputs(), b - a, &mut rng)?;
        for (&i, &s) in idxs[a..b].iter().zip(&scores) {
            buffer.offer(&phase2.examples[i], s);
        }
    }
    if !buffer.ready() {
        bail!(
            "only {} examples exceeded the score threshold {}; need more than {}",
            buffer.len(),
            buffer.t_logit(),
            buffer.t_num()
        );
    }
    let (new_uni, record) =
        expand_cluster(&uni, &mut ckpt.params, &mut buffer, &cfg.expansion_config(), seed)?;
    ckpt.k = new_uni.cfg.k;
    Ok(record)
}

/// Registers the next segment id, computes its representation against the
/// frozen graph, and trains only its decoder.
pub fn expand_segment_op(
    cfg: &Config,
    ckpt: &mut Checkpoint,
    data: &Dataset,
    u_new: &Tensor,
    seed: u64,
) -> Result<SegmentExpansion> {
    if ckpt.registry.is_empty() {
        bail!("train segments before expanding them");
    }
    let uni = universal_net(cfg, ckpt.k, &ckpt.stats)?;
    let bip = bipartite_net(cfg, ckpt.k)?;
    let id = ckpt.registry.len() as u32;
    Ok(expand_segment(
        &uni,
        &bip,
        &mut ckpt.params,
        &mut ckpt.registry,
        id,
        u_new,
        data,
        &cfg.expansion_config(),
        seed,
    )?)
}
