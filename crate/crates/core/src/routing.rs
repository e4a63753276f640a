//! Per-block token scoring, Top-K selection and gated-residual routing.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::GateMode;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial router output bias, so every gate starts near one.
pub const ROUTER_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.trunc_normal(format!("{name}.w"), group, &[fan_in, fan_out], rng),
            b: store.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Two-layer scorer `d → d_r → 1` with a GELU between.
#[derive(Debug, Clone, Copy)]
pub struct RouterParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl RouterParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, d_r: usize, rng: &mut R) -> Self {
        let fc1 = LinearParams::new(store, &format!("{name}.fc1"), ParamGroup::Router, d, d_r, rng);
        let fc2 = LinearParams::new(store, &format!("{name}.fc2"), ParamGroup::Router, d_r, 1, rng);
        store.get_mut(fc2.b).data_mut()[0] = ROUTER_BIAS_INIT;
        Self { fc1, fc2 }
    }
}

/// Pre-norm encoder block parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub heads: usize,
}

impl EncoderBlockParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Block;
        let mut lin = |store: &mut ParamStore, n: &str, i, o| LinearParams::new(store, &format!("{name}.{n}"), grp, i, o, rng);
        let q = lin(store, "attn.q", d, d);
        let k = lin(store, "attn.k", d, d);
        let v = lin(store, "attn.v", d, d);
        let o = lin(store, "attn.o", d, d);
        let fc1 = lin(store, "mlp.fc1", d, d_ff);
        let fc2 = lin(store, "mlp.fc2", d_ff, d);
        Self {
            ln1_gamma: store.ones(format!("{name}.ln1.gamma"), grp, &[d]),
            ln1_beta: store.zeros(format!("{name}.ln1.beta"), grp, &[d]),
            q,
            k,
            v,
            o,
            ln2_gamma: store.ones(format!("{name}.ln2.gamma"), grp, &[d]),
            ln2_beta: store.zeros(format!("{name}.ln2.beta"), grp, &[d]),
            fc1,
            fc2,
            heads,
        }
    }
}

/// Importance score per token, shape `[N]`.
pub fn score_tokens(g: &mut Graph, p: &Bound, router: &RouterParams, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).shape()[0];
    let h = router.fc1.apply(g, p, x)?;
    let h = g.gelu(h)?;
    let s = router.fc2.apply(g, p, h)?;
    g.reshape(s, &[n])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    /// Processed token indices, ascending.
    pub selected: Vec<usize>,
    /// The complement of `selected`, ascending.
    pub bypassed: Vec<usize>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

/// All token indices in selection priority: CLS first, then by descending
/// score with ties to the lower index. Every Top-K is a prefix.
pub fn rank_tokens(scores: &[f64], cls_index: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = (0..scores.len()).filter(|&i| i != cls_index).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut order = Vec::with_capacity(scores.len());
    if cls_index < scores.len() {
        order.push(cls_index);
    }
    order.extend(rest);
    order
}

pub fn decision_from_ranking(scores: &[f64], ranking: &[usize], k: usize) -> Result<RoutingDecision> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!("Top-K needs 1 ≤ K ≤ N, got K = {k}, N = {n}")));
    }
    let mut selected = ranking[..k].to_vec();
    selected.sort_unstable();
    let mut mask = vec![false; n];
    selected.iter().for_each(|&i| mask[i] = true);
    let bypassed = (0..n).filter(|&i| !mask[i]).collect();
    Ok(RoutingDecision { scores: scores.to_vec(), selected, bypassed })
}

/// The `k` highest-scoring tokens with the CLS token always kept.
pub fn select_topk(scores: &[f64], k: usize, cls_index: usize) -> Result<RoutingDecision> {
    if cls_index >= scores.len() {
        return Err(Error::InvalidArgument(format!("CLS index {cls_index} outside {} tokens", scores.len())));
    }
    decision_from_ranking(scores, &rank_tokens(scores, cls_index), k)
}

/// Shapes produced inside one block evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTrace {
    /// `[heads, K, K]`.
    pub attention_shape: Vec<usize>,
}

/// Residual update `E(X) − X` of the pre-norm block on `x: [K, d]`.
pub fn block_update(g: &mut Graph, p: &Bound, blk: &EncoderBlockParams, x: NodeId) -> Result<(NodeId, BlockTrace)> {
    let shape = g.value(x).shape().to_vec();
    let (k, d) = (shape[0], shape[1]);
    let (heads, dh) = (blk.heads, d / blk.heads);
    let h = g.layernorm(x, p[blk.ln1_gamma], p[blk.ln1_beta])?;
    let split = |g: &mut Graph, lin: &LinearParams| -> Result<NodeId> {
        let y = lin.apply(g, p, h)?;
        let y = g.reshape(y, &[k, heads, dh])?;
        g.transpose(y, 0, 1)
    };
    let q = split(g, &blk.q)?;
    let kk = split(g, &blk.k)?;
    let v = split(g, &blk.v)?;
    let logits = g.matmul_ex(q, kk, true)?;
    let attention_shape = g.value(logits).shape().to_vec();
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(logits)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.transpose(ctx, 0, 1)?;
    let ctx = g.reshape(ctx, &[k, d])?;
    let a = blk.o.apply(g, p, ctx)?;
    let x1 = g.add(x, a)?;
    let h2 = g.layernorm(x1, p[blk.ln2_gamma], p[blk.ln2_beta])?;
    let m = blk.fc1.apply(g, p, h2)?;
    let m = g.gelu(m)?;
    let m = blk.fc2.apply(g, p, m)?;
    let delta = g.add(a, m)?;
    Ok((delta, BlockTrace { attention_shape }))
}

/// Gate values `[K, 1]` for the selected rows of `scores: [N]`.
pub fn gates(g: &mut Graph, scores: NodeId, selected: &[usize], mode: GateMode) -> Result<NodeId> {
    let n = g.value(scores).numel();
    let col = g.reshape(scores, &[n, 1])?;
    let s = g.gather_rows(col, selected)?;
    match mode {
        GateMode::Raw => Ok(s),
        GateMode::Sigmoid => g.sigmoid(s),
    }
}

/// `X̄ = X` on bypassed rows and `X + s·(E(X_sel) − X_sel)` on selected rows;
/// attention runs over the selected tokens only.
pub fn routed_block_forward(
    g: &mut Graph,
    p: &Bound,
    blk: &EncoderBlockParams,
    x: NodeId,
    scores: NodeId,
    decision: &RoutingDecision,
    gate: GateMode,
) -> Result<(NodeId, BlockTrace)> {
    let n = g.value(x).shape()[0];
    if decision.scores.len() != n || g.value(scores).numel() != n {
        return Err(Error::Shape {
            op: "routed_block_forward",
            detail: format!("{} scores / decision over {} for {n} tokens", g.value(scores).numel(), decision.scores.len()),
        });
    }
    let xs = g.gather_rows(x, &decision.selected)?;
    let (delta, trace) = block_update(g, p, blk, xs)?;
    let s = gates(g, scores, &decision.selected, gate)?;
    let upd = g.mul(delta, s)?;
    let out = g.scatter_rows_add(x, &decision.selected, upd)?;
    Ok((out, trace))
}

/// Uniform random scores for the random-routing ablation.
pub fn random_scores<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[n], 0.0, 1.0, rng)
}
