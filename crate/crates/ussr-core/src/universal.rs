//! Universal user representation: a mixture-of-Gaussians information
//! bottleneck trained by maximizing an evidence lower bound.
//!
//! A gate network maps the encoded features to a posterior over K clusters.
//! Each cluster owns a Gaussian encoding head producing (mean,
//! half-log-variance) and a learnable diagonal-Gaussian prior. The loss per
//! example is
//!
//! ```text
//! -sum_k q(c=k|x) [ log p(y|z_k) - beta * KL(q(z|x,c=k) || p(z|c=k)) ]
//!   + beta_c * KL(q(c|x) || uniform)
//! ```
//!
//! with `z_k` drawn once per head by reparameterization. Standard deviations
//! are always carried as half-log-variance `s` with `sigma = exp(s)`, so
//! positivity is structural.
//!
//! Inference is deterministic: the universal representation is the
//! gate-weighted mixture of posterior means, `zbar = sum_k q_k mu_k(x)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::FeatureStats;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

/// Floor inside `log` of probabilities that are positive by construction
/// but can underflow, e.g. softmax outputs under extreme logits.
pub(crate) const LOG_FLOOR: f64 = 1e-12;

/// Diagonal Gaussian in (mean, stddev) form for the standalone KL entry
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Closed-form KL divergence between diagonal Gaussians:
/// `sum_i log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2`.
pub fn kl_diag_gaussian(post: &GaussianParams, prior: &GaussianParams) -> Result<f64> {
    if post.mu.len() != post.sigma.len()
        || prior.mu.len() != prior.sigma.len()
        || post.mu.len() != prior.mu.len()
    {
        return Err(CoreError::invalid("KL dimension mismatch"));
    }
    if post.sigma.iter().chain(&prior.sigma).any(|&s| s <= 0.0) {
        return Err(CoreError::invalid("KL requires strictly positive sigma"));
    }
    let mut total = 0.0;
    for i in 0..post.mu.len() {
        let (m1, s1) = (post.mu[i], post.sigma[i]);
        let (m2, s2) = (prior.mu[i], prior.sigma[i]);
        total += crate::fmath::ln(s2 / s1) + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
    }
    Ok(total)
}

/// Feature-side dimensions the model needs, derived from fitted stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub dense_cols: usize,
    pub n_sparse: usize,
    pub vocab: usize,
    pub embed_dim: usize,
}

impl FeatureDims {
    pub fn from_stats(stats: &FeatureStats) -> FeatureDims {
        FeatureDims {
            // A dataset with no dense fields still carries one zero column
            // so batch shapes stay rank-2.
            dense_cols: stats.n_dense().max(1),
            n_sparse: stats.n_sparse(),
            vocab: stats.vocab_size(),
            embed_dim: stats.embed_dim(),
        }
    }

    /// Width of the encoded feature vector fed to gate and heads.
    pub fn width(&self) -> usize {
        self.dense_cols + self.n_sparse * self.embed_dim
    }
}

/// Front end between embeddings and the gate/head input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Dense block and sparse embeddings concatenated directly.
    Plain,
    /// Multi-head self-attention layers over the sparse-field embeddings
    /// with a residual connection; the dense block bypasses attention.
    Attention { layers: usize, heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniversalConfig {
    pub k: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub beta: f64,
    pub beta_c: f64,
    /// Reparameterization samples per head per example.
    pub n_samples: usize,
    pub encoder: EncoderKind,
}

impl UniversalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_z == 0 || self.hidden == 0 || self.n_samples == 0 {
            return Err(CoreError::invalid("k, d_z, hidden, n_samples must be positive"));
        }
        if let EncoderKind::Attention { layers, heads } = self.encoder {
            if layers == 0 || layers > 2 {
                return Err(CoreError::invalid("attention layers must be 1 or 2"));
            }
            if heads == 0 {
                return Err(CoreError::invalid("attention heads must be positive"));
            }
        }
        Ok(())
    }
}

/// ELBO training graph for one batch size, with the node ids a trainer or
/// scorer needs.
#[derive(Debug)]
pub struct ElboGraph {
    pub graph: Graph,
    /// Scalar mean loss over the batch.
    pub loss: NodeId,
    /// `[b, 1]` loss per example (buffering threshold input).
    pub per_example: NodeId,
    /// `[b, K]` cluster posterior.
    pub gate: NodeId,
    /// `[b, d_z]` deterministic mixture of posterior means.
    pub zbar: NodeId,
    /// `[b, 1]` sigmoid prediction from `zbar` (shares decoder weights).
    pub prob: NodeId,
    /// Scalar mean of the gate-weighted Gaussian KL term.
    pub kl_mean: NodeId,
}

/// Sampling-free inference graph.
#[derive(Debug)]
pub struct PredictGraph {
    pub graph: Graph,
    pub gate: NodeId,
    pub zbar: NodeId,
    pub prob: NodeId,
}

/// Builder for universal-model graphs. Holds only configuration; parameters
/// live in a [`ParamSet`] keyed by the names this builder declares.
#[derive(Debug, Clone)]
pub struct UniversalNet {
    pub dims: FeatureDims,
    pub cfg: UniversalConfig,
}

impl UniversalNet {
    pub fn new(dims: FeatureDims, cfg: UniversalConfig) -> Result<UniversalNet> {
        cfg.validate()?;
        if let EncoderKind::Attention { heads, .. } = cfg.encoder {
            if dims.n_sparse == 0 {
                return Err(CoreError::invalid("attention encoder needs sparse fields"));
            }
            if dims.embed_dim % heads != 0 {
                return Err(CoreError::invalid(format!(
                    "embed_dim {} not divisible by {heads} heads",
                    dims.embed_dim
                )));
            }
        }
        Ok(UniversalNet { dims, cfg })
    }

    // Parameter naming. Everything the universal model owns is listed here
    // so the trainer can freeze it during segment training and the
    // expansion path can clone whole heads.

    pub fn head_param_names(&self, k: usize) -> Vec<String> {
        alloc::vec![
            format!("head.{k}.trunk.w"),
            format!("head.{k}.trunk.b"),
            format!("head.{k}.mu.w"),
            format!("head.{k}.mu.b"),
            format!("head.{k}.s.w"),
            format!("head.{k}.s.b"),
            format!("prior.{k}.mu"),
            format!("prior.{k}.s"),
        ]
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for f in 0..self.dims.n_sparse {
            names.push(format!("embed.{f}"));
        }
        if let EncoderKind::Attention { layers, heads } = self.cfg.encoder {
            for l in 0..layers {
                for h in 0..heads {
                    names.push(format!("attn.{l}.{h}.wq"));
                    names.push(format!("attn.{l}.{h}.wk"));
                    names.push(format!("attn.{l}.{h}.wv"));
                }
                names.push(format!("attn.{l}.res.w"));
            }
        }
        names.extend(nn::mlp_param_names("gate", &[self.dims.width(), self.cfg.hidden, self.cfg.k]));
        for k in 0..self.cfg.k {
            names.extend(self.head_param_names(k));
        }
        names.extend(nn::mlp_param_names("dec", &[self.cfg.d_z, self.cfg.hidden, 1]));
        names
    }

    /// Fresh parameters for the current configuration.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut params = ParamSet::new();
        for f in 0..self.dims.n_sparse {
            let n = self.dims.vocab * self.dims.embed_dim;
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
            params.insert(
                &format!("embed.{f}"),
                Tensor::new(alloc::vec![self.dims.vocab, self.dims.embed_dim], data).expect("embed shape"),
            );
        }
        if let EncoderKind::Attention { layers, heads } = self.cfg.encoder {
            let de = self.dims.embed_dim;
            let dh = de / heads;
            for l in 0..layers {
                for h in 0..heads {
                    for suffix in ["wq", "wk", "wv"] {
                        let lim = crate::fmath::sqrt(6.0 / (de + dh) as f64);
                        let data: Vec<f64> = (0..de * dh).map(|_| rng.random_range(-lim..lim)).collect();
                        params.insert(
                            &format!("attn.{l}.{h}.{suffix}"),
                            Tensor::new(alloc::vec![de, dh], data).expect("attn shape"),
                        );
                    }
                }
                let lim = crate::fmath::sqrt(6.0 / (2 * de) as f64);
                let data: Vec<f64> = (0..de * de).map(|_| rng.random_range(-lim..lim)).collect();
                params.insert(
                    &format!("attn.{l}.res.w"),
                    Tensor::new(alloc::vec![de, de], data).expect("attn res shape"),
                );
            }
        }
        nn::init_mlp(&mut params, rng, "gate", &[self.dims.width(), self.cfg.hidden, self.cfg.k]);
        for k in 0..self.cfg.k {
            self.init_head(&mut params, rng, k);
        }
        nn::init_mlp(&mut params, rng, "dec", &[self.cfg.d_z, self.cfg.hidden, 1]);
        params
    }

    /// Initializes one Gaussian head and its prior (mean 0, sigma 1).
    pub fn init_head(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, k: usize) {
        let (w, h, dz) = (self.dims.width(), self.cfg.hidden, self.cfg.d_z);
        nn::init_linear(params, rng, &format!("head.{k}.trunk"), w, h);
        nn::init_linear(params, rng, &format!("head.{k}.mu"), h, dz);
        nn::init_linear(params, rng, &format!("head.{k}.s"), h, dz);
        params.insert(&format!("prior.{k}.mu"), Tensor::zeros(&[1, dz]));
        params.insert(&format!("prior.{k}.s"), Tensor::zeros(&[1, dz]));
    }

    // Graph-building blocks, shared by training, inference, and expansion.

    /// Declares the batch inputs and returns the encoded feature block
    /// `[b, width]`.
    pub fn encode_into(&self, g: &mut Graph, b: usize) -> Result<NodeId> {
        let dense = g.input("dense", &[b, self.dims.dense_cols])?;
        let mut fields = Vec::with_capacity(self.dims.n_sparse);
        for f in 0..self.dims.n_sparse {
            let onehot = g.input(&format!("sparse.{f}"), &[b, self.dims.vocab])?;
            let table = g.param(&format!("embed.{f}"), &[self.dims.vocab, self.dims.embed_dim])?;
            fields.push(g.matmul(onehot, table)?);
        }
        if let EncoderKind::Attention { layers, heads } = self.cfg.encoder {
            for l in 0..layers {
                fields = self.attention_layer(g, &fields, l, heads)?;
            }
        }
        let mut x = dense;
        for f in fields {
            x = g.concat(x, f, 1)?;
        }
        Ok(x)
    }

    /// One self-attention layer over per-field embeddings `[b, d_e]` each.
    fn attention_layer(
        &self,
        g: &mut Graph,
        fields: &[NodeId],
        layer: usize,
        heads: usize,
    ) -> Result<Vec<NodeId>> {
        let de = self.dims.embed_dim;
        let dh = de / heads;
        let nf = fields.len();
        let scale = 1.0 / crate::fmath::sqrt(dh as f64);
        let mut out = Vec::with_capacity(nf);
        // Projections per head, shared across fields.
        let mut projected: Vec<Vec<(NodeId, NodeId, NodeId)>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let wq = g.param(&format!("attn.{layer}.{h}.wq"), &[de, dh])?;
            let wk = g.param(&format!("attn.{layer}.{h}.wk"), &[de, dh])?;
            let wv = g.param(&format!("attn.{layer}.{h}.wv"), &[de, dh])?;
            let mut per_field = Vec::with_capacity(nf);
            for &e in fields {
                let q = g.matmul(e, wq)?;
                let k = g.matmul(e, wk)?;
                let v = g.matmul(e, wv)?;
                per_field.push((q, k, v));
            }
            projected.push(per_field);
        }
        let res_w = g.param(&format!("attn.{layer}.res.w"), &[de, de])?;
        for (f, &e) in fields.iter().enumerate() {
            let mut head_outputs = Vec::with_capacity(heads);
            for per_field in projected.iter() {
                let (q, _, _) = per_field[f];
                // Row of attention scores against every field.
                let mut scores = None;
                for &(_, kg, _) in per_field.iter() {
                    let prod = g.mul(q, kg)?;
                    let dot = g.sum_axis(prod, 1)?;
                    let dot = g.scale(dot, scale)?;
                    scores = Some(match scores {
                        None => dot,
                        Some(prev) => g.concat(prev, dot, 1)?,
                    });
                }
                let scores = scores.expect("at least one field");
                let weights = g.softmax(scores, 1)?;
                let mut mixed = None;
                for (gi, &(_, _, vg)) in per_field.iter().enumerate() {
                    let wcol = g.select_col(weights, gi)?;
                    let contrib = g.mul(vg, wcol)?;
                    mixed = Some(match mixed {
                        None => contrib,
                        Some(prev) => g.add(prev, contrib)?,
                    });
                }
                head_outputs.push(mixed.expect("at least one field"));
            }
            let mut cat = head_outputs[0];
            for &h in &head_outputs[1..] {
                cat = g.concat(cat, h, 1)?;
            }
            let residual = g.matmul(e, res_w)?;
            let summed = g.add(cat, residual)?;
            out.push(g.relu(summed));
        }
        Ok(out)
    }

    /// Cluster posterior `[b, K]`.
    pub fn gate_into(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let logits = nn::mlp(g, "gate", x, &[self.dims.width(), self.cfg.hidden, self.cfg.k])?;
        g.softmax(logits, 1)
    }

    /// Gaussian head `k`: returns `(mu, s, sigma)`, each `[b, d_z]`, where
    /// `s` is the half-log-variance and `sigma = exp(s)`.
    pub fn head_into(&self, g: &mut Graph, k: usize, x: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let (w, h, dz) = (self.dims.width(), self.cfg.hidden, self.cfg.d_z);
        let trunk = nn::linear(g, &format!("head.{k}.trunk"), x, w, h)?;
        let trunk = g.relu(trunk);
        let mu = nn::linear(g, &format!("head.{k}.mu"), trunk, h, dz)?;
        let s = nn::linear(g, &format!("head.{k}.s"), trunk, h, dz)?;
        let sigma = g.exp(s);
        Ok((mu, s, sigma))
    }

    /// Prior for cluster `k`: `(mu, s)`, each `[1, d_z]`.
    pub fn prior_into(&self, g: &mut Graph, k: usize) -> Result<(NodeId, NodeId)> {
        let mu = g.param(&format!("prior.{k}.mu"), &[1, self.cfg.d_z])?;
        let s = g.param(&format!("prior.{k}.s"), &[1, self.cfg.d_z])?;
        Ok((mu, s))
    }

    /// Decoder logit `[b, 1]` for a latent block `[b, d_z]`.
    pub fn decoder_into(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        nn::mlp(g, "dec", z, &[self.cfg.d_z, self.cfg.hidden, 1])
    }

    /// `log(1 + exp(x))` as `-log(sigmoid(-x))`. A relu-based form would
    /// kink at zero and report slope 0 there, which matters because fresh
    /// decoders emit exactly-zero logits on dead hidden rows; the sigmoid
    /// route differentiates to the true slope everywhere. Overflows only
    /// past roughly 700, far outside sane logit range.
    pub fn softplus_into(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let nx = g.neg(x)?;
        let s = g.sigmoid(nx);
        let ls = g.log(s);
        g.neg(ls)
    }

    /// Bernoulli log-likelihood `[b, 1]`: `y * logit - softplus(logit)`.
    pub fn log_likelihood_into(&self, g: &mut Graph, logit: NodeId, y: NodeId) -> Result<NodeId> {
        let yl = g.mul(y, logit)?;
        let sp = self.softplus_into(g, logit)?;
        g.sub(yl, sp)
    }

    /// Per-example KL between the head posterior and a prior row, `[b, 1]`,
    /// computed in half-log-variance space:
    /// `sum_dims s_p - s_q + (exp(2 s_q) + (mu_q - mu_p)^2) exp(-2 s_p)/2 - 1/2`.
    pub fn kl_into(
        &self,
        g: &mut Graph,
        mu_q: NodeId,
        s_q: NodeId,
        mu_p: NodeId,
        s_p: NodeId,
    ) -> Result<NodeId> {
        let d = g.sub(mu_q, mu_p)?;
        let d2 = g.mul(d, d)?;
        let two_sq = g.scale(s_q, 2.0)?;
        let var_q = g.exp(two_sq);
        let num = g.add(var_q, d2)?;
        let neg_two_sp = g.scale(s_p, -2.0)?;
        let inv_var_p = g.exp(neg_two_sp);
        let ratio = g.mul(num, inv_var_p)?;
        let ratio = g.scale(ratio, 0.5)?;
        let sdiff = g.sub(s_p, s_q)?;
        let dims = g.add(sdiff, ratio)?;
        let dims = g.add_scalar(dims, -0.5)?;
        g.sum_axis(dims, 1)
    }

    /// Categorical KL against the uniform distribution, `[b, 1]`:
    /// `sum_k q_k log q_k + log K`.
    pub fn categorical_kl_into(&self, g: &mut Graph, q: NodeId) -> Result<NodeId> {
        let q_safe = g.add_scalar(q, LOG_FLOOR)?;
        let lq = g.log(q_safe);
        let qlq = g.mul(q, lq)?;
        let s = g.sum_axis(qlq, 1)?;
        g.add_scalar(s, crate::fmath::ln(self.cfg.k as f64))
    }

    /// Builds the full ELBO training graph for batch size `b`.
    pub fn build_elbo(&self, b: usize) -> Result<ElboGraph> {
        let mut g = Graph::new();
        let x = self.encode_into(&mut g, b)?;
        let y = g.input("y", &[b, 1])?;
        let q = self.gate_into(&mut g, x)?;

        let mut terms: Option<NodeId> = None;
        let mut kls: Option<NodeId> = None;
        let mut zbar: Option<NodeId> = None;
        for k in 0..self.cfg.k {
            let (mu, s, sigma) = self.head_into(&mut g, k, x)?;
            let (pmu, ps) = self.prior_into(&mut g, k)?;
            let kl = self.kl_into(&mut g, mu, s, pmu, ps)?;

            let mut ll_sum: Option<NodeId> = None;
            for _ in 0..self.cfg.n_samples {
                let z = g.sample_gaussian(mu, sigma)?;
                let logit = self.decoder_into(&mut g, z)?;
                let ll = self.log_likelihood_into(&mut g, logit, y)?;
                ll_sum = Some(match ll_sum {
                    None => ll,
                    Some(prev) => g.add(prev, ll)?,
                });
            }
            let ll = g.scale(ll_sum.expect("n_samples > 0"), 1.0 / self.cfg.n_samples as f64)?;

            let weighted_kl = g.scale(kl, self.cfg.beta)?;
            let term = g.sub(ll, weighted_kl)?;
            terms = Some(match terms {
                None => term,
                Some(prev) => g.concat(prev, term, 1)?,
            });
            kls = Some(match kls {
                None => kl,
                Some(prev) => g.concat(prev, kl, 1)?,
            });

            let qk = g.select_col(q, k)?;
            let contrib = g.mul(mu, qk)?;
            zbar = Some(match zbar {
                None => contrib,
                Some(prev) => g.add(prev, contrib)?,
            });
        }
        let terms = terms.expect("k >= 1");
        let kls = kls.expect("k >= 1");
        let zbar = zbar.expect("k >= 1");

        let weighted = g.mul(q, terms)?;
        let expected = g.sum_axis(weighted, 1)?;
        let neg_expected = g.neg(expected)?;
        let cat_kl = self.categorical_kl_into(&mut g, q)?;
        let cat_term = g.scale(cat_kl, self.cfg.beta_c)?;
        let per_example = g.add(neg_expected, cat_term)?;
        let loss = g.mean_all(per_example)?;

        let weighted_kls = g.mul(q, kls)?;
        let kl_per_ex = g.sum_axis(weighted_kls, 1)?;
        let kl_mean = g.mean_all(kl_per_ex)?;

        let logit_bar = self.decoder_into(&mut g, zbar)?;
        let prob = g.sigmoid(logit_bar);

        Ok(ElboGraph { graph: g, loss, per_example, gate: q, zbar, prob, kl_mean })
    }

    /// Gate posterior and deterministic representation
    /// `zbar = sum_k q_k mu_k(x)` for an encoded block `x`.
    pub fn zbar_into(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
        let q = self.gate_into(g, x)?;
        let mut zbar: Option<NodeId> = None;
        for k in 0..self.cfg.k {
            let (mu, _s, _sigma) = self.head_into(g, k, x)?;
            let qk = g.select_col(q, k)?;
            let contrib = g.mul(mu, qk)?;
            zbar = Some(match zbar {
                None => contrib,
                Some(prev) => g.add(prev, contrib)?,
            });
        }
        Ok((q, zbar.expect("k >= 1")))
    }

    /// Builds the sampling-free inference graph for batch size `b`.
    pub fn build_predict(&self, b: usize) -> Result<PredictGraph> {
        let mut g = Graph::new();
        let x = self.encode_into(&mut g, b)?;
        let (q, zbar) = self.zbar_into(&mut g, x)?;
        let logit = self.decoder_into(&mut g, zbar)?;
        let prob = g.sigmoid(logit);
        Ok(PredictGraph { graph: g, gate: q, zbar, prob })
    }
}
