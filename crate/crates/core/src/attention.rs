//! Patch encoder and dual cross-attention between concept prototypes and
//! visual tokens.
//!
//! Conventions: vectors are row vectors, so a linear map is `x · W` with `W`
//! of shape `in×out`. Per-batch work that does not depend on the sample
//! (query heads, key/value head slices, relevance keys) is done once in
//! [`DcaState::prepare`] and shared by every per-sample call.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{BoundParams, ParamId, ParamStore};
use crate::schema::ConceptDictionary;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable stand-in for an image backbone: every patch goes through one
/// affine map and a ReLU; the CLS token is the mean encoded patch passed
/// through a second affine map.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    d_in: usize,
    d_v: usize,
}

/// `cls` is `1×d_v`, `patches` is `P×d_v`, `tokens` stacks them as
/// `(P+1)×d_v` with CLS first.
#[derive(Clone, Copy, Debug)]
pub struct VisualTokens {
    pub cls: Var,
    pub patches: Var,
    pub tokens: Var,
}

impl PatchEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_in: usize, d_v: usize) -> Result<Self> {
        Ok(PatchEncoder {
            patch_w: store.insert_glorot("encoder/patch_w", d_in, d_v, rng)?,
            patch_b: store.insert("encoder/patch_b", Tensor::zeros(&[d_v]))?,
            cls_w: store.insert_glorot("encoder/cls_w", d_v, d_v, rng)?,
            cls_b: store.insert("encoder/cls_b", Tensor::zeros(&[d_v]))?,
            d_in,
            d_v,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.d_v
    }

    /// `raw` is the `P×d_in` patch grid of one sample.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, raw: Var) -> Result<VisualTokens> {
        let shape = tape.value(raw).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.d_in {
            return Err(Error::shape("patch_encoder", &shape, &[0, self.d_in]));
        }
        let lin = tape.matmul(raw, bound.var(self.patch_w))?;
        let lin = tape.add_row(lin, bound.var(self.patch_b))?;
        let patches = tape.relu(lin);
        let mean = tape.mean_axis(patches, 0)?;
        let mean = tape.reshape(mean, &[1, self.d_v])?;
        let cls = tape.matmul(mean, bound.var(self.cls_w))?;
        let cls = tape.add_row(cls, bound.var(self.cls_b))?;
        let tokens = tape.concat(&[cls, patches], 0)?;
        Ok(VisualTokens { cls, patches, tokens })
    }
}

/// Parameters of both attention branches and the per-concept value heads.
#[derive(Clone, Debug)]
pub struct DcaState {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub i2t_key: ParamId,
    pub value_w: Vec<ParamId>,
    pub value_b: Vec<ParamId>,
    heads: usize,
    tau: f64,
    d_v: usize,
    groups: Vec<Range<usize>>,
}

/// Sample-independent tensors computed once per tape.
#[derive(Clone, Debug)]
pub struct DcaShared {
    /// Per head: `M×d_h` queries already divided by `sqrt(d_h)`.
    queries: Vec<Var>,
    /// Per head: transposed key projection slice, `d_h×d_v`.
    key_proj_t: Vec<Var>,
    /// Per head: value projection slice, `d_v×d_h`.
    value_proj: Vec<Var>,
    /// Relevance keys, transposed and divided by the temperature: `d_v×M`.
    i2t_keys_t: Var,
    /// `K×M` mean-pooling matrix over each concept's value nodes.
    pool: Var,
    pool_t: Var,
}

/// Everything the attention stage produces for one sample.
#[derive(Clone, Debug)]
pub struct DcaOutput {
    /// `M×d_v` attended visual evidence per node.
    pub evidence: Var,
    /// Per-head `M×(P+1)` attention weights, CLS column first.
    pub head_attention: Vec<Var>,
    /// `1×M` independent relevance gates.
    pub relevance: Var,
    /// `M×d_v` gated evidence.
    pub fused: Var,
    /// One `1×M_k` logit row per concept.
    pub concept_logits: Vec<Var>,
    /// `1×K` mean relevance per concept.
    pub concept_relevance: Var,
}

impl DcaShared {
    /// `K×M` mean-pooling matrix (constant).
    pub fn pool(&self) -> Var {
        self.pool
    }
}

impl DcaState {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        dict: &ConceptDictionary,
        d_v: usize,
        heads: usize,
        tau: f64,
    ) -> Result<Self> {
        check_heads(d_v, heads)?;
        check_tau(tau)?;
        let w_q = store.insert_glorot("dca/w_q", d_v, d_v, rng)?;
        let w_k = store.insert_glorot("dca/w_k", d_v, d_v, rng)?;
        let w_v = store.insert_glorot("dca/w_v", d_v, d_v, rng)?;
        let w_o = store.insert_glorot("dca/w_o", d_v, d_v, rng)?;
        let i2t_key = store.insert_glorot("dca/i2t_key", d_v, d_v, rng)?;
        let mut value_w = Vec::new();
        let mut value_b = Vec::new();
        for (k, m_k) in dict.values_per_concept().into_iter().enumerate() {
            value_w.push(store.insert_glorot(&format!("dca/value_w/{k}"), d_v, m_k, rng)?);
            value_b.push(store.insert(format!("dca/value_b/{k}"), Tensor::zeros(&[m_k]))?);
        }
        let groups = (0..dict.num_concepts()).map(|k| dict.concept_nodes(k)).collect();
        Ok(DcaState {
            w_q,
            w_k,
            w_v,
            w_o,
            i2t_key,
            value_w,
            value_b,
            heads,
            tau,
            d_v,
            groups,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        check_tau(tau)?;
        self.tau = tau;
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    /// Builds the per-tape shared tensors from the projected prototypes
    /// (`M×d_v`).
    pub fn prepare(&self, tape: &mut Tape, bound: &BoundParams, prototypes: Var) -> Result<DcaShared> {
        let m = self.num_nodes();
        let shape = tape.value(prototypes).shape().to_vec();
        if shape != [m, self.d_v] {
            return Err(Error::shape("t2i_attention", &shape, &[m, self.d_v]));
        }
        let d_h = self.d_v / self.heads;
        let inv_sqrt = 1.0 / (d_h as f64).sqrt();
        let q = tape.matmul(prototypes, bound.var(self.w_q))?;
        let w_k_t = tape.transpose(bound.var(self.w_k))?;
        let mut queries = Vec::with_capacity(self.heads);
        let mut key_proj_t = Vec::with_capacity(self.heads);
        let mut value_proj = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols: Vec<usize> = (h * d_h..(h + 1) * d_h).collect();
            let q_h = tape.index_select(q, 1, &cols)?;
            queries.push(tape.scale(q_h, inv_sqrt));
            key_proj_t.push(tape.index_select(w_k_t, 0, &cols)?);
            value_proj.push(tape.index_select(bound.var(self.w_v), 1, &cols)?);
        }
        let keys = tape.matmul(prototypes, bound.var(self.i2t_key))?;
        let keys_t = tape.transpose(keys)?;
        let i2t_keys_t = tape.scale(keys_t, 1.0 / self.tau);

        let mut pool = Tensor::zeros(&[self.groups.len(), m]);
        for (k, g) in self.groups.iter().enumerate() {
            for node in g.clone() {
                pool.set(k, node, 1.0 / g.len() as f64);
            }
        }
        let pool_t = Tensor::new(vec![m, self.groups.len()], crate::tensor::transpose_raw(pool.data(), self.groups.len(), m))?;
        let pool = tape.constant(pool);
        let pool_t = tape.constant(pool_t);
        Ok(DcaShared {
            queries,
            key_proj_t,
            value_proj,
            i2t_keys_t,
            pool,
            pool_t,
        })
    }

    /// Multi-head attention with the prototypes as queries and the full
    /// token sequence as keys and values. Returns the `M×d_v` evidence and
    /// the per-head weights.
    pub fn t2i_attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        shared: &DcaShared,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(tokens).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_v || shape[0] < 2 {
            return Err(Error::shape("t2i_attention", &shape, &[0, self.d_v]));
        }
        let tokens_t = tape.transpose(tokens)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let keys_t = tape.matmul(shared.key_proj_t[h], tokens_t)?;
            let values = tape.matmul(tokens, shared.value_proj[h])?;
            let scores = tape.matmul(shared.queries[h], keys_t)?;
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, values)?);
            weights.push(attn);
        }
        let heads = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let evidence = tape.matmul(heads, bound.var(self.w_o))?;
        Ok((evidence, weights))
    }

    /// Independent sigmoid gate per node from the CLS token (`1×d_v`).
    pub fn i2t_relevance(&self, tape: &mut Tape, shared: &DcaShared, cls: Var) -> Result<Var> {
        let logits = tape.matmul(cls, shared.i2t_keys_t)?;
        Ok(tape.sigmoid(logits))
    }

    /// Row `m` of the result is `relevance[m]` times evidence row `m`.
    pub fn fuse(&self, tape: &mut Tape, evidence: Var, relevance: Var) -> Result<Var> {
        tape.scale_rows(evidence, relevance)
    }

    /// Mean-pools each concept's node rows of `fused` and applies that
    /// concept's affine value head. Also returns the pooled relevance `1×K`.
    pub fn concept_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        shared: &DcaShared,
        fused: Var,
        relevance: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let pooled = tape.matmul(shared.pool, fused)?;
        let mut logits = Vec::with_capacity(self.groups.len());
        for k in 0..self.groups.len() {
            let c_k = tape.index_select(pooled, 0, &[k])?;
            let u = tape.matmul(c_k, bound.var(self.value_w[k]))?;
            logits.push(tape.add_row(u, bound.var(self.value_b[k]))?);
        }
        let alpha_k = tape.matmul(relevance, shared.pool_t)?;
        Ok((logits, alpha_k))
    }

    /// The whole attention stage for one sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        shared: &DcaShared,
        tokens: &VisualTokens,
    ) -> Result<DcaOutput> {
        let (evidence, head_attention) = self.t2i_attention(tape, bound, shared, tokens.tokens)?;
        let relevance = self.i2t_relevance(tape, shared, tokens.cls)?;
        let fused = self.fuse(tape, evidence, relevance)?;
        let (concept_logits, concept_relevance) = self.concept_logits(tape, bound, shared, fused, relevance)?;
        Ok(DcaOutput {
            evidence,
            head_attention,
            relevance,
            fused,
            concept_logits,
            concept_relevance,
        })
    }
}

/// Head-averaged patch attention (`M×P`): the CLS column is dropped and
/// each row renormalized over the patches.
pub fn attention_maps(tape: &Tape, head_attention: &[Var]) -> Tensor {
    let first = tape.value(head_attention[0]);
    let (m, cols) = (first.rows(), first.cols());
    let p = cols - 1;
    let mut out = vec![0.0; m * p];
    for &h in head_attention {
        let a = tape.value(h);
        for i in 0..m {
            for j in 0..p {
                out[i * p + j] += a.at(i, j + 1);
            }
        }
    }
    for row in out.chunks_mut(p) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::matrix(m, p, out).expect("consistent shape")
}

/// Softmax of each concept's logit row.
pub fn predicted_value_probs(tape: &mut Tape, logits: &[Var]) -> Result<Vec<Var>> {
    logits.iter().map(|&u| tape.softmax(u, 1)).collect()
}

fn check_heads(d_v: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_v % heads != 0 {
        return Err(Error::Config(format!("head count {heads} must divide width {d_v}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}
