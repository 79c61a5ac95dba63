//! Adaptive capacity growth. Poorly explained examples (per-example bound
//! above `t_logit`) collect in a buffer; once it holds more than `t_num`
//! examples a new cluster is cloned from the best-matching existing head,
//! perturbed, and trained few-shot on the buffer alone while every old
//! parameter stays frozen. Segments grow the same way: the interaction is
//! recomputed once to obtain the new representation, a fresh decoder
//! trains on the new segment's data, and everything already stored stays
//! bit-identical.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bipartite::{segment_masks, BipartiteNet, SegmentRegistry};
use crate::encoding::{make_batch, Dataset, EncodedExample};
use crate::error::{CoreError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::optim::{sgd_step, ParamSet};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;
use crate::universal::{UniversalNet, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionConfig {
    /// Strict threshold on the per-example bound; higher means worse fit.
    pub t_logit: f64,
    /// The buffer must exceed this count before a cluster expansion runs.
    pub t_num: usize,
    /// Few-shot epochs over the buffer or the new segment's data.
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    /// Gaussian scale applied to the cloned head parameters.
    pub perturb: f64,
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_num == 0 {
            return Err(CoreError::invalid("t_num must be positive"));
        }
        if !(self.lr > 0.0) || !(self.perturb >= 0.0) {
            return Err(CoreError::invalid("lr must be positive, perturb nonnegative"));
        }
        if self.t_logit.is_nan() {
            return Err(CoreError::invalid("t_logit must not be NaN"));
        }
        Ok(())
    }
}

/// Holding pen for badly fit examples awaiting a cluster expansion.
#[derive(Debug, Clone)]
pub struct ExpansionBuffer {
    t_logit: f64,
    t_num: usize,
    examples: Vec<EncodedExample>,
    scores: Vec<f64>,
}

impl ExpansionBuffer {
    pub fn new(t_logit: f64, t_num: usize) -> Result<ExpansionBuffer> {
        if t_num == 0 {
            return Err(CoreError::invalid("t_num must be positive"));
        }
        Ok(ExpansionBuffer { t_logit, t_num, examples: Vec::new(), scores: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn t_logit(&self) -> f64 {
        self.t_logit
    }

    pub fn t_num(&self) -> usize {
        self.t_num
    }

    pub fn examples(&self) -> &[EncodedExample] {
        &self.examples
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Buffers the example iff its score strictly exceeds the threshold.
    pub fn offer(&mut self, ex: &EncodedExample, score: f64) -> bool {
        if score > self.t_logit {
            self.examples.push(ex.clone());
            self.scores.push(score);
            true
        } else {
            false
        }
    }

    /// Whether the buffer holds strictly more than `t_num` examples.
    pub fn ready(&self) -> bool {
        self.examples.len() > self.t_num
    }

    pub fn clear(&mut self) {
        self.examples.clear();
        self.scores.clear();
    }

    fn as_dataset(&self) -> Result<Dataset> {
        let first = self
            .examples
            .first()
            .ok_or(CoreError::invalid("expansion buffer is empty"))?;
        Dataset::new(first.dense.len(), first.sparse.len(), self.examples.clone())
    }
}

/// Per-example training bound for a batch, sampled with `rng`. Feed the
/// results to [`ExpansionBuffer::offer`].
pub fn score_batch(
    uni: &UniversalNet,
    params: &ParamSet,
    inputs: &BTreeMap<String, Tensor>,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let built = uni.build_elbo(b)?;
    let eval = built.graph.forward(params, inputs, rng)?;
    Ok(eval.value(built.per_example).data().to_vec())
}

/// Gate posterior mass per cluster, summed over the buffer. Each cluster's
/// addends are sorted before summing so the result cannot depend on buffer
/// order.
fn posterior_sums(uni: &UniversalNet, params: &ParamSet, buffer: &ExpansionBuffer) -> Result<Vec<f64>> {
    let ds = buffer.as_dataset()?;
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let batch = make_batch(&ds, &idxs, uni.dims.vocab)?;
    let mut inputs = batch.inputs();
    inputs.remove("y");
    let built = uni.build_predict(ds.len())?;
    let eval = built.graph.forward_det(params, &inputs)?;
    let q = eval.value(built.gate);
    let k = uni.cfg.k;
    let mut sums = Vec::with_capacity(k);
    for l in 0..k {
        let mut col: Vec<f64> = (0..ds.len()).map(|i| q.at2(i, l)).collect();
        col.sort_by(f64::total_cmp);
        sums.push(col.iter().sum());
    }
    Ok(sums)
}

fn argmax_ties_low(sums: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in sums.iter().enumerate().skip(1) {
        if v > sums[best] {
            best = i;
        }
    }
    best
}

/// Cluster whose summed posterior mass over the buffer is largest; ties
/// break toward the smaller index.
pub fn select_init_cluster(
    uni: &UniversalNet,
    params: &ParamSet,
    buffer: &ExpansionBuffer,
) -> Result<usize> {
    if buffer.is_empty() {
        return Err(CoreError::invalid("expansion buffer is empty"));
    }
    Ok(argmax_ties_low(&posterior_sums(uni, params, buffer)?))
}

/// Record of one cluster expansion, for the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterExpansion {
    pub old_k: usize,
    pub new_k: usize,
    /// Source cluster the new head was cloned from.
    pub source: usize,
    /// Buffer size consumed by the expansion.
    pub buffered: usize,
    /// Expansion objective on the buffer after the final epoch.
    pub final_loss: f64,
}

/// Record of one segment expansion, for the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentExpansion {
    pub old_m: usize,
    pub new_m: usize,
    pub id: u32,
    /// Decoder loss on the new segment's data after the final epoch.
    pub final_loss: f64,
}

fn grow_gate_column(params: &mut ParamSet, old_k: usize) -> Result<()> {
    let w = params
        .get("gate.1.w")
        .ok_or(CoreError::Missing { kind: "param", name: String::from("gate.1.w") })?
        .clone();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if cols != old_k {
        return Err(CoreError::invalid(format!(
            "gate output width {cols} does not match cluster count {old_k}"
        )));
    }
    let mut grown = alloc::vec![0.0; rows * (old_k + 1)];
    for r in 0..rows {
        for c in 0..old_k {
            grown[r * (old_k + 1) + c] = w.at2(r, c);
        }
    }
    params.insert("gate.1.w", Tensor::new(alloc::vec![rows, old_k + 1], grown)?);

    let b = params
        .get("gate.1.b")
        .ok_or(CoreError::Missing { kind: "param", name: String::from("gate.1.b") })?
        .clone();
    let mut grown = b.data().to_vec();
    grown.push(0.0);
    params.insert("gate.1.b", Tensor::new(alloc::vec![1, old_k + 1], grown)?);
    Ok(())
}

/// Copies every head and prior tensor of `src` to `dst` and adds Gaussian
/// noise of scale `perturb` to the copy.
fn clone_and_perturb_head(
    new_uni: &UniversalNet,
    params: &mut ParamSet,
    src: usize,
    dst: usize,
    perturb: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let from = new_uni.head_param_names(src);
    let to = new_uni.head_param_names(dst);
    for (a, b) in from.iter().zip(&to) {
        let mut t = params
            .get(a)
            .ok_or(CoreError::Missing { kind: "param", name: a.clone() })?
            .clone();
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += perturb * n;
        }
        params.insert(b, t);
    }
    Ok(())
}

/// Expansion objective: `-[log q(c=new|x) + log p(y|z_new) - KL_new]`,
/// averaged over the batch.
fn build_expansion_loss(new_uni: &UniversalNet, b: usize) -> Result<(Graph, NodeId)> {
    let new_k = new_uni.cfg.k - 1;
    let mut g = Graph::new();
    let x = new_uni.encode_into(&mut g, b)?;
    let y = g.input("y", &[b, 1])?;
    let q = new_uni.gate_into(&mut g, x)?;
    let qk = g.select_col(q, new_k)?;
    let q_safe = g.add_scalar(qk, LOG_FLOOR)?;
    let log_q = g.log(q_safe);
    let (mu, s, sigma) = new_uni.head_into(&mut g, new_k, x)?;
    let z = g.sample_gaussian(mu, sigma)?;
    let logit = new_uni.decoder_into(&mut g, z)?;
    let ll = new_uni.log_likelihood_into(&mut g, logit, y)?;
    let (p_mu, p_s) = new_uni.prior_into(&mut g, new_k)?;
    let kl = new_uni.kl_into(&mut g, mu, s, p_mu, p_s)?;
    let gain = g.add(log_q, ll)?;
    let per_ex = g.sub(gain, kl)?;
    let total = g.sum_all(per_ex);
    let loss = g.scale(total, -1.0 / b as f64)?;
    Ok((g, loss))
}

fn zero_unless(grads: &mut Gradients, allowed: &BTreeSet<String>) {
    for (name, g) in grads.params.iter_mut() {
        if !allowed.contains(name) {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Keeps only column `col` of the gate output layer's gradient.
fn mask_gate_gradient(grads: &mut Gradients, col: usize) {
    if let Some(w) = grads.params.get_mut("gate.1.w") {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        for r in 0..rows {
            for c in 0..cols {
                if c != col {
                    w.data_mut()[r * cols + c] = 0.0;
                }
            }
        }
    }
    if let Some(b) = grads.params.get_mut("gate.1.b") {
        let cols = b.shape()[1];
        for c in 0..cols {
            if c != col {
                b.data_mut()[c] = 0.0;
            }
        }
    }
}

/// Adds cluster `K+1`: clones the best-matching head, grows the gate by a
/// zero column, and trains only the new parameters on the buffer. Returns
/// the widened model; the buffer is cleared on success.
pub fn expand_cluster(
    uni: &UniversalNet,
    params: &mut ParamSet,
    buffer: &mut ExpansionBuffer,
    cfg: &ExpansionConfig,
    seed: u64,
) -> Result<(UniversalNet, ClusterExpansion)> {
    cfg.validate()?;
    if !buffer.ready() {
        return Err(CoreError::invalid(format!(
            "buffer below t_num: {} <= {}",
            buffer.len(),
            buffer.t_num
        )));
    }
    let source = select_init_cluster(uni, params, buffer)?;
    let old_k = uni.cfg.k;
    let mut new_cfg = uni.cfg;
    new_cfg.k = old_k + 1;
    let new_uni = UniversalNet::new(uni.dims, new_cfg)?;

    let mut perturb_rng = seeded(seed, stream::PERTURB);
    clone_and_perturb_head(&new_uni, params, source, old_k, cfg.perturb, &mut perturb_rng)?;
    grow_gate_column(params, old_k)?;

    let ds = buffer.as_dataset()?;
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let batch = make_batch(&ds, &idxs, new_uni.dims.vocab)?;
    let inputs = batch.inputs();
    let (graph, loss) = build_expansion_loss(&new_uni, ds.len())?;

    let mut allowed: BTreeSet<String> = new_uni.head_param_names(old_k).into_iter().collect();
    allowed.insert(String::from("gate.1.w"));
    allowed.insert(String::from("gate.1.b"));
    let trainable = |name: &str| allowed.contains(name);
    let mut noise_rng = seeded(seed, stream::NOISE);
    for _ in 0..cfg.epochs {
        let eval = graph.forward(params, &inputs, &mut noise_rng)?;
        let mut grads = graph.backward(&eval, loss, None)?;
        zero_unless(&mut grads, &allowed);
        mask_gate_gradient(&mut grads, old_k);
        sgd_step(params, &grads, cfg.lr, cfg.clip, Some(&trainable))?;
    }
    let eval = graph.forward(params, &inputs, &mut noise_rng)?;
    let final_loss = eval.value(loss).item();

    let record = ClusterExpansion {
        old_k,
        new_k: old_k + 1,
        source,
        buffered: buffer.len(),
        final_loss,
    };
    buffer.clear();
    Ok((new_uni, record))
}

/// Adds segment `M+1`: recomputes the interaction once (frozen nets, all
/// segments including the new one) to store its representation, then
/// trains only the new decoder on the new segment's data.
pub fn expand_segment(
    uni: &UniversalNet,
    bip: &BipartiteNet,
    params: &mut ParamSet,
    registry: &mut SegmentRegistry,
    id: u32,
    u_new: &Tensor,
    data: &Dataset,
    cfg: &ExpansionConfig,
    seed: u64,
) -> Result<SegmentExpansion> {
    cfg.validate()?;
    let old_m = registry.len();
    if (id as usize) < old_m {
        return Err(CoreError::invalid(format!("duplicate segment id {id}")));
    }
    if id as usize != old_m {
        return Err(CoreError::invalid(format!(
            "segment id {id} skips ahead of registry size {old_m}"
        )));
    }
    for seg in registry.iter() {
        if !seg.frozen || seg.h_hat.is_none() {
            return Err(CoreError::invalid(format!(
                "segment {} has no stored representation",
                seg.id
            )));
        }
    }
    if data.is_empty() {
        return Err(CoreError::invalid("segment expansion needs training data"));
    }
    for (i, ex) in data.examples.iter().enumerate() {
        if ex.segment != id {
            return Err(CoreError::invalid(format!(
                "example {i} belongs to segment {}, expected {id}",
                ex.segment
            )));
        }
    }

    let mut init_rng = seeded(seed, stream::INIT);
    bip.init_segment(params, &mut init_rng, id, u_new)?;

    // One frozen interaction pass over all M+1 segments. Zero noise keeps
    // the stored representation deterministic even for annealed nets.
    let mut g = Graph::new();
    let inter = bip.interaction_into(&mut g, old_m + 1)?;
    let mut inter_inputs = BTreeMap::new();
    if bip.cfg.gumbel {
        for m in 0..=old_m {
            inter_inputs.insert(format!("gumbel.{m}"), Tensor::zeros(&[1, bip.k]));
        }
    }
    let eval = g.forward_det(params, &inter_inputs)?;
    let h_new = eval.value(inter.h_hat[id as usize]).clone();

    let rid = registry.add(u_new.clone());
    debug_assert_eq!(rid, id);
    registry.store(id, h_new.clone(), u_new.clone())?;

    let mut h_rows = Vec::with_capacity(old_m + 1);
    for seg in registry.iter() {
        h_rows.push(registry.stored_h(seg.id)?.clone());
    }
    let b = data.len();
    let idxs: Vec<usize> = (0..b).collect();
    let batch = make_batch(data, &idxs, uni.dims.vocab)?;
    let mut inputs = batch.inputs();
    for (m, mask) in segment_masks(&batch.segments, old_m + 1)?.into_iter().enumerate() {
        inputs.insert(format!("mask.{m}"), mask);
    }
    let sg = bip.build_decoder_training(uni, b, &h_rows)?;
    let loss = sg.loss.expect("training graph has a loss");

    let allowed: BTreeSet<String> = bip.decoder_param_names(id).into_iter().collect();
    let trainable = |name: &str| allowed.contains(name);
    for _ in 0..cfg.epochs {
        let eval = sg.graph.forward_det(params, &inputs)?;
        let mut grads = sg.graph.backward(&eval, loss, None)?;
        zero_unless(&mut grads, &allowed);
        sgd_step(params, &grads, cfg.lr, cfg.clip, Some(&trainable))?;
    }
    let eval = sg.graph.forward_det(params, &inputs)?;
    let final_loss = eval.value(loss).item();

    Ok(SegmentExpansion { old_m, new_m: old_m + 1, id, final_loss })
}
