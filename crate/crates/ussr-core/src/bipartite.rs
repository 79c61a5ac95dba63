//! Segment-specific representations by bipartite neural interaction.
//!
//! Every cluster k contributes its representation `z_k` (the learned prior
//! mean of the universal model) and every segment m its feature vector
//! `u_m`. One encode-aggregate-decode round over the complete bipartite
//! graph between them yields, per segment,
//!
//! ```text
//! h1_{k,m} = f_e(z_k || u_m)
//! h2_k = f_v(sum_m h1_{k,m})        h2_m = f_v(sum_k h1_{k,m})
//! l_{k,m} = f_e2(h2_k || h2_m)      e_{.,m} = softmax_k(l_{.,m} / tau)
//! hhat_m = sum_k e_{k,m} fehat(z_k || u_m)
//! ```
//!
//! and the per-segment decoder scores a user as
//! `sigmoid(f_vm(hhat_m || zbar(x)))`. All of these rows are
//! batch-independent, so the interaction costs K*M perceptron evaluations
//! regardless of batch size.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::optim::ParamSet;
use crate::tensor::Tensor;
use crate::universal::UniversalNet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BipartiteConfig {
    /// Segment feature dimension.
    pub d_u: usize,
    /// Interaction representation dimension.
    pub d_h: usize,
    /// Hidden width of the interaction perceptrons.
    pub hidden: usize,
    /// Softmax temperature for the edge weights.
    pub tau: f64,
    /// Train segment feature vectors alongside the nets.
    pub learnable_u: bool,
    /// Draw edge weights by Gumbel-softmax instead of the deterministic
    /// expectation (ablation mode; noise arrives as graph inputs).
    pub gumbel: bool,
}

impl BipartiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_u == 0 || self.d_h == 0 || self.hidden == 0 {
            return Err(CoreError::invalid("d_u, d_h, hidden must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(CoreError::invalid("tau must be positive"));
        }
        Ok(())
    }
}

/// One registered segment. The id is the index in the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDescriptor {
    pub id: u32,
    /// Feature vector `[1, d_u]`; mirror of the `u.{m}` parameter.
    pub u: Tensor,
    /// Set once trained; the stored representation and decoder must not
    /// change afterwards.
    pub frozen: bool,
    /// Stored representation `[1, d_h]`, present once trained.
    pub h_hat: Option<Tensor>,
}

/// Dense registry of segments, ids `0..len-1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentRegistry {
    segments: Vec<SegmentDescriptor>,
}

impl SegmentRegistry {
    pub fn new() -> Self {
        SegmentRegistry::default()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Registers a new segment and returns its id.
    pub fn add(&mut self, u: Tensor) -> u32 {
        let id = self.segments.len() as u32;
        self.segments.push(SegmentDescriptor { id, u, frozen: false, h_hat: None });
        id
    }

    pub fn get(&self, m: u32) -> Result<&SegmentDescriptor> {
        self.segments
            .get(m as usize)
            .ok_or(CoreError::invalid(format!("unknown segment {m}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SegmentDescriptor> {
        self.segments.iter()
    }

    /// Stores the trained representation for a segment and freezes it.
    pub fn store(&mut self, m: u32, h_hat: Tensor, u: Tensor) -> Result<()> {
        let seg = self
            .segments
            .get_mut(m as usize)
            .ok_or(CoreError::invalid(format!("unknown segment {m}")))?;
        if seg.frozen {
            return Err(CoreError::invalid(format!("segment {m} is frozen")));
        }
        seg.h_hat = Some(h_hat);
        seg.u = u;
        seg.frozen = true;
        Ok(())
    }

    pub fn stored_h(&self, m: u32) -> Result<&Tensor> {
        self.get(m)?.h_hat.as_ref().ok_or(CoreError::invalid(format!(
            "segment {m} has no stored representation"
        )))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_u32(self.segments.len() as u32);
        for seg in &self.segments {
            w.put_u32(seg.id);
            w.put_u32(seg.u.len() as u32);
            for &v in seg.u.data() {
                w.put_f64(v);
            }
            w.put_u8(seg.frozen as u8);
            match &seg.h_hat {
                Some(h) => {
                    w.put_u8(1);
                    w.put_u32(h.len() as u32);
                    for &v in h.data() {
                        w.put_f64(v);
                    }
                }
                None => w.put_u8(0),
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<SegmentRegistry> {
        let mut r = ByteReader::new(buf);
        let reg = Self::decode(&mut r)?;
        r.finish()?;
        Ok(reg)
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.put_bytes(&self.to_bytes());
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<SegmentRegistry> {
        let n = r.take_u32()? as usize;
        let mut segments = Vec::with_capacity(n);
        for i in 0..n {
            let id = r.take_u32()?;
            if id as usize != i {
                return Err(CoreError::decode(format!("segment ids not dense: {id} at {i}")));
            }
            let ulen = r.take_u32()? as usize;
            let mut u = Vec::with_capacity(ulen);
            for _ in 0..ulen {
                u.push(r.take_f64()?);
            }
            let frozen = r.take_u8()? != 0;
            let h_hat = if r.take_u8()? != 0 {
                let hlen = r.take_u32()? as usize;
                let mut h = Vec::with_capacity(hlen);
                for _ in 0..hlen {
                    h.push(r.take_f64()?);
                }
                Some(Tensor::new(alloc::vec![1, hlen], h)?)
            } else {
                None
            };
            segments.push(SegmentDescriptor {
                id,
                u: Tensor::new(alloc::vec![1, ulen], u)?,
                frozen,
                h_hat,
            });
        }
        Ok(SegmentRegistry { segments })
    }
}

/// Node ids of one full interaction round.
#[derive(Debug)]
pub struct InteractionNodes {
    /// `h1[k][m]`, each `[1, d_h]`.
    pub h1: Vec<Vec<NodeId>>,
    /// `h2_k` per cluster, each `[1, d_h]`.
    pub h2_cluster: Vec<NodeId>,
    /// `h2_m` per segment, each `[1, d_h]`.
    pub h2_segment: Vec<NodeId>,
    /// Edge-weight rows per segment, each `[1, K]` summing to 1.
    pub weights: Vec<NodeId>,
    /// `hhat_m` per segment, each `[1, d_h]`.
    pub h_hat: Vec<NodeId>,
}

/// Training/prediction graph over the segment path.
#[derive(Debug)]
pub struct SegmentGraph {
    pub graph: Graph,
    /// Scalar mean loss over the batch (masked per-segment cross-entropy);
    /// absent on pure inference graphs.
    pub loss: Option<NodeId>,
    /// `[b, 1]` probability from each row's own segment decoder.
    pub prob: NodeId,
    /// `[b, d_z]` universal representation.
    pub zbar: NodeId,
    /// Present when the interaction is recomputed live (training graphs).
    pub interaction: Option<InteractionNodes>,
}

/// Builder for the bipartite interaction graphs. `k` is the current
/// cluster count of the universal model whose prior means serve as `z_k`.
#[derive(Debug, Clone)]
pub struct BipartiteNet {
    pub d_z: usize,
    pub k: usize,
    pub cfg: BipartiteConfig,
}

impl BipartiteNet {
    pub fn new(d_z: usize, k: usize, cfg: BipartiteConfig) -> Result<BipartiteNet> {
        cfg.validate()?;
        if d_z == 0 || k == 0 {
            return Err(CoreError::invalid("d_z and k must be positive"));
        }
        Ok(BipartiteNet { d_z, k, cfg })
    }

    fn edge_dims(&self) -> [usize; 3] {
        [self.d_z + self.cfg.d_u, self.cfg.hidden, self.cfg.d_h]
    }

    fn vertex_dims(&self) -> [usize; 3] {
        [self.cfg.d_h, self.cfg.hidden, self.cfg.d_h]
    }

    fn logit_dims(&self) -> [usize; 3] {
        [2 * self.cfg.d_h, self.cfg.hidden, 1]
    }

    fn decoder_dims(&self, d_z: usize) -> [usize; 3] {
        [self.cfg.d_h + d_z, self.cfg.hidden, 1]
    }

    /// Names of the shared interaction nets (everything except per-segment
    /// decoders and features).
    pub fn shared_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(nn::mlp_param_names("fe", &self.edge_dims()));
        names.extend(nn::mlp_param_names("fv", &self.vertex_dims()));
        names.extend(nn::mlp_param_names("fe2", &self.logit_dims()));
        names.extend(nn::mlp_param_names("fehat", &self.edge_dims()));
        names
    }

    pub fn decoder_param_names(&self, m: u32) -> Vec<String> {
        nn::mlp_param_names(&format!("segdec.{m}"), &self.decoder_dims(self.d_z))
    }

    pub fn feature_param_name(&self, m: u32) -> String {
        format!("u.{m}")
    }

    /// Initializes the shared interaction nets.
    pub fn init_shared(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        nn::init_mlp(params, rng, "fe", &self.edge_dims());
        nn::init_mlp(params, rng, "fv", &self.vertex_dims());
        nn::init_mlp(params, rng, "fe2", &self.logit_dims());
        nn::init_mlp(params, rng, "fehat", &self.edge_dims());
    }

    /// Initializes one segment's decoder and its feature parameter.
    pub fn init_segment(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng, m: u32, u: &Tensor) -> Result<()> {
        if u.shape() != [1, self.cfg.d_u] {
            return Err(CoreError::invalid(format!(
                "segment feature shape {:?}, expected [1, {}]",
                u.shape(),
                self.cfg.d_u
            )));
        }
        params.insert(&self.feature_param_name(m), u.clone());
        nn::init_mlp(params, rng, &format!("segdec.{m}"), &self.decoder_dims(self.d_z));
        Ok(())
    }

    /// Builds the full K x M interaction. `z_k` references the universal
    /// prior means by parameter name; `u_m` references `u.{m}`.
    pub fn interaction_into(&self, g: &mut Graph, m_count: usize) -> Result<InteractionNodes> {
        if m_count == 0 {
            return Err(CoreError::invalid("interaction needs at least one segment"));
        }
        let (kk, dz, du) = (self.k, self.d_z, self.cfg.d_u);
        let mut z = Vec::with_capacity(kk);
        for k in 0..kk {
            z.push(g.param(&format!("prior.{k}.mu"), &[1, dz])?);
        }
        let mut u = Vec::with_capacity(m_count);
        for m in 0..m_count {
            u.push(g.param(&format!("u.{m}"), &[1, du])?);
        }

        let mut h1 = Vec::with_capacity(kk);
        for &zk in &z {
            let mut row = Vec::with_capacity(m_count);
            for &um in &u {
                let pair = g.concat(zk, um, 1)?;
                row.push(nn::mlp(g, "fe", pair, &self.edge_dims())?);
            }
            h1.push(row);
        }

        let mut h2_cluster = Vec::with_capacity(kk);
        for row in &h1 {
            let mut total = row[0];
            for &e in &row[1..] {
                total = g.add(total, e)?;
            }
            h2_cluster.push(nn::mlp(g, "fv", total, &self.vertex_dims())?);
        }
        let mut h2_segment = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut total = h1[0][m];
            for row in &h1[1..] {
                total = g.add(total, row[m])?;
            }
            h2_segment.push(nn::mlp(g, "fv", total, &self.vertex_dims())?);
        }

        let mut weights = Vec::with_capacity(m_count);
        let mut h_hat = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut logits: Option<NodeId> = None;
            for k in 0..kk {
                let pair = g.concat(h2_cluster[k], h2_segment[m], 1)?;
                let l = nn::mlp(g, "fe2", pair, &self.logit_dims())?;
                logits = Some(match logits {
                    None => l,
                    Some(prev) => g.concat(prev, l, 1)?,
                });
            }
            let mut row = logits.expect("k >= 1");
            if self.cfg.gumbel {
                let noise = g.input(&format!("gumbel.{m}"), &[1, kk])?;
                row = g.add(row, noise)?;
            }
            let row = g.scale(row, 1.0 / self.cfg.tau)?;
            let e = g.softmax(row, 1)?;
            weights.push(e);

            let mut mix: Option<NodeId> = None;
            for (k, &zk) in z.iter().enumerate() {
                let pair = g.concat(zk, u[m], 1)?;
                let dec = nn::mlp(g, "fehat", pair, &self.edge_dims())?;
                let wk = g.select_col(e, k)?;
                let contrib = g.mul(dec, wk)?;
                mix = Some(match mix {
                    None => contrib,
                    Some(prev) => g.add(prev, contrib)?,
                });
            }
            h_hat.push(mix.expect("k >= 1"));
        }

        Ok(InteractionNodes { h1, h2_cluster, h2_segment, weights, h_hat })
    }

    /// Per-segment decoder branch: `sigmoid(f_vm(hhat_m || zbar))` masked
    /// into a shared loss and probability column. `h_rows[m]` must be a
    /// `[1, d_h]` node (live or constant).
    fn decode_masked(
        &self,
        g: &mut Graph,
        uni: &UniversalNet,
        b: usize,
        h_rows: &[NodeId],
        zbar: NodeId,
        with_loss: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let y = if with_loss { Some(g.input("y", &[b, 1])?) } else { None };
        let mut prob_total: Option<NodeId> = None;
        let mut ll_total: Option<NodeId> = None;
        for (m, &h) in h_rows.iter().enumerate() {
            let mask = g.input(&format!("mask.{m}"), &[b, 1])?;
            let tiled = g.tile_rows(h, b)?;
            let dec_in = g.concat(tiled, zbar, 1)?;
            let logit = nn::mlp(g, &format!("segdec.{m}"), dec_in, &self.decoder_dims(uni.cfg.d_z))?;
            let p = g.sigmoid(logit);
            let masked_p = g.mul(p, mask)?;
            prob_total = Some(match prob_total {
                None => masked_p,
                Some(prev) => g.add(prev, masked_p)?,
            });
            if let Some(y) = y {
                let ll = uni.log_likelihood_into(g, logit, y)?;
                let masked_ll = g.mul(ll, mask)?;
                ll_total = Some(match ll_total {
                    None => masked_ll,
                    Some(prev) => g.add(prev, masked_ll)?,
                });
            }
        }
        let prob = prob_total.expect("m >= 1");
        let loss = match ll_total {
            Some(ll) => {
                let total = g.sum_all(ll);
                Some(g.scale(total, -1.0 / b as f64)?)
            }
            None => None,
        };
        Ok((prob, loss))
    }

    fn check_universal(&self, uni: &UniversalNet) -> Result<()> {
        if uni.cfg.k != self.k || uni.cfg.d_z != self.d_z {
            return Err(CoreError::invalid("universal and bipartite dimensions disagree"));
        }
        Ok(())
    }

    /// Training graph: universal front end (to be frozen via the update
    /// filter), live interaction recompute, masked per-segment decoders.
    pub fn build_training(&self, uni: &UniversalNet, b: usize, m_count: usize) -> Result<SegmentGraph> {
        self.check_universal(uni)?;
        let mut g = Graph::new();
        let x = uni.encode_into(&mut g, b)?;
        let (_q, zbar) = uni.zbar_into(&mut g, x)?;
        let inter = self.interaction_into(&mut g, m_count)?;
        let h_rows = inter.h_hat.clone();
        let (prob, loss) = self.decode_masked(&mut g, uni, b, &h_rows, zbar, true)?;
        Ok(SegmentGraph { graph: g, loss, prob, zbar, interaction: Some(inter) })
    }

    /// Inference graph using stored representations from the registry; no
    /// interaction recompute, no sampling.
    pub fn build_predict(&self, uni: &UniversalNet, b: usize, registry: &SegmentRegistry) -> Result<SegmentGraph> {
        self.check_universal(uni)?;
        if registry.is_empty() {
            return Err(CoreError::invalid("no segments registered"));
        }
        let mut g = Graph::new();
        let x = uni.encode_into(&mut g, b)?;
        let (_q, zbar) = uni.zbar_into(&mut g, x)?;
        let mut h_rows = Vec::with_capacity(registry.len());
        for seg in registry.iter() {
            let h = registry.stored_h(seg.id)?;
            h_rows.push(g.constant(h.clone()));
        }
        let (prob, loss) = self.decode_masked(&mut g, uni, b, &h_rows, zbar, false)?;
        Ok(SegmentGraph { graph: g, loss, prob, zbar, interaction: None })
    }

    /// Like [`build_predict`](Self::build_predict) but with a loss node,
    /// used to train a single new decoder against stored representations.
    pub fn build_decoder_training(
        &self,
        uni: &UniversalNet,
        b: usize,
        h_rows_fixed: &[Tensor],
    ) -> Result<SegmentGraph> {
        self.check_universal(uni)?;
        let mut g = Graph::new();
        let x = uni.encode_into(&mut g, b)?;
        let (_q, zbar) = uni.zbar_into(&mut g, x)?;
        let mut h_rows = Vec::with_capacity(h_rows_fixed.len());
        for h in h_rows_fixed {
            h_rows.push(g.constant(h.clone()));
        }
        let (prob, loss) = self.decode_masked(&mut g, uni, b, &h_rows, zbar, true)?;
        Ok(SegmentGraph { graph: g, loss, prob, zbar, interaction: None })
    }
}

/// One `[b, 1]` 0/1 mask per segment; errors on a segment id with no
/// registered slot.
pub fn segment_masks(segments: &[u32], m_count: usize) -> Result<Vec<Tensor>> {
    let b = segments.len();
    let mut masks = alloc::vec![alloc::vec![0.0; b]; m_count];
    for (i, &m) in segments.iter().enumerate() {
        if m as usize >= m_count {
            return Err(CoreError::invalid(format!("unknown segment {m}")));
        }
        masks[m as usize][i] = 1.0;
    }
    masks
        .into_iter()
        .map(|col| Tensor::new(alloc::vec![b, 1], col))
        .collect()
}

/// Standard Gumbel noise `-ln(-ln(U))` for the sampling ablation.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    use rand::Rng;
    let data: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            -crate::fmath::ln(-crate::fmath::ln(u))
        })
        .collect();
    Tensor::new(alloc::vec![1, k], data).expect("gumbel shape")
}
