//! The full network: tokenizers, routed encoder blocks, keep ratios and head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::*;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::keepratio::{bracket_ratio, budget_penalty, dual_pass_combine, inference_k, Bracket};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::routing::{
    decision_from_ranking, random_scores, rank_tokens, routed_block_forward, score_tokens, BlockTrace,
    EncoderBlockParams, LinearParams, RouterParams,
};
use crate::tensor::Tensor;
use crate::tokenizers::{assemble_sequence, ModalityFrame, TokenizerParams};

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub encoder: EncoderBlockParams,
    pub router: RouterParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tokenizer: TokenizerParams,
    pub blocks: Vec<BlockParams>,
    /// Keep ratios `r`, shape `[L]`.
    pub keep_ratio: ParamId,
    pub final_gamma: ParamId,
    pub final_beta: ParamId,
    pub head: LinearParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelParams,
}

/// Where per-block token scores come from.
pub enum ScoreSource<'a> {
    Router,
    /// Uniform scores from `rng`, used as both ranking and gates.
    Random(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagnostics {
    pub k_down: usize,
    pub k_up: usize,
    pub w_up: f64,
    pub traces: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[classes]` or `[vehicles]`.
    pub logits: NodeId,
    /// Keep-ratio node, shape `[L]`.
    pub r: NodeId,
    pub r_avg: f64,
    pub diagnostics: Vec<BlockDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Binary(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Beam { top1: usize, top3: Vec<usize>, top5: Vec<usize> },
    Handover { status: Vec<u8> },
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = TokenizerParams::new(&mut store, &config, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| BlockParams {
                encoder: EncoderBlockParams::new(
                    &mut store,
                    &format!("block{l}"),
                    config.d,
                    config.heads,
                    config.d_ff,
                    &mut rng,
                ),
                router: RouterParams::new(&mut store, &format!("router{l}"), config.d, config.d_router, &mut rng),
            })
            .collect();
        let keep_ratio = store.ones("keep_ratio", ParamGroup::KeepRatio, &[config.layers]);
        let final_gamma = store.ones("final_ln.gamma", ParamGroup::Head, &[config.d]);
        let final_beta = store.zeros("final_ln.beta", ParamGroup::Head, &[config.d]);
        let head = LinearParams::new(&mut store, "head", ParamGroup::Head, config.d, config.task.output_size(), &mut rng);
        let ids = ModelParams { tokenizer, blocks, keep_ratio, final_gamma, final_beta, head };
        Ok(Self { config, params: store, ids })
    }

    pub fn token_count(&self) -> usize {
        self.config.token_count()
    }

    pub fn keep_ratios(&self) -> Vec<f64> {
        self.params.get(self.ids.keep_ratio).data().to_vec()
    }

    pub fn set_keep_ratios(&mut self, r: &[f64]) -> Result<()> {
        let (lo, l) = (self.config.r_min(), self.config.layers);
        if r.len() != l || r.iter().any(|&v| !(v >= lo && v <= 1.0)) {
            return Err(Error::InvalidArgument(format!("need {l} keep ratios in [{lo}, 1], got {r:?}")));
        }
        self.params.get_mut(self.ids.keep_ratio).data_mut().copy_from_slice(r);
        Ok(())
    }

    /// Per-block token counts used by `forward_infer`.
    pub fn inference_ks(&self) -> Vec<usize> {
        let n = self.token_count();
        self.keep_ratios().iter().map(|&r| inference_k(r, n)).collect()
    }

    /// Copy with every parameter rounded to 32-bit precision.
    pub fn to_f32_storage(&self) -> Self {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| {
            let rg = p.tensor.requires_grad;
            p.tensor = p.tensor.to_f32_precision().with_requires_grad(rg);
        });
        m
    }

    fn block_scores(
        &self,
        g: &mut Graph,
        p: &Bound,
        l: usize,
        x: NodeId,
        source: &mut ScoreSource<'_>,
    ) -> Result<NodeId> {
        match source {
            ScoreSource::Router => score_tokens(g, p, &self.ids.blocks[l].router, x),
            ScoreSource::Random(rng) => {
                let n = g.value(x).shape()[0];
                g.constant(random_scores(n, *rng))
            }
        }
    }

    fn head(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let cls = g.gather_rows(x, &[0])?;
        let h = g.layernorm(cls, p[self.ids.final_gamma], p[self.ids.final_beta])?;
        let logits = self.ids.head.apply(g, p, h)?;
        g.reshape(logits, &[self.config.task.output_size()])
    }

    /// Training forward: every block runs the two-pass keep-ratio blend.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &[ModalityFrame],
        mut source: ScoreSource<'_>,
    ) -> Result<ForwardOutput> {
        let seq = assemble_sequence(g, p, &self.ids.tokenizer, &self.config, frames)?;
        let n = seq.len();
        let r = p[self.ids.keep_ratio];
        let r_values = g.value(r).data().to_vec();
        let mut x = seq.tokens;
        let mut diagnostics = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let scores = self.block_scores(g, p, l, x, &mut source)?;
            let ranking = rank_tokens(g.value(scores).data(), 0);
            let bracket: Bracket = bracket_ratio(r_values[l], n)?;
            let r_l = g.gather_rows(r, &[l])?;
            let blk = &self.ids.blocks[l].encoder;
            let out = dual_pass_combine(g, p, blk, x, scores, &ranking, &bracket, r_l, self.config.gate)?;
            diagnostics.push(BlockDiagnostics {
                k_down: bracket.k_down,
                k_up: bracket.k_up,
                w_up: bracket.w_up,
                traces: out.traces,
            });
            x = out.output;
        }
        let logits = self.head(g, p, x)?;
        let r_avg = r_values.iter().sum::<f64>() / r_values.len() as f64;
        Ok(ForwardOutput { logits, r, r_avg, diagnostics })
    }

    /// Inference forward with `K_l = ⌈r_l·N⌉` and no gradient recording.
    /// Returns the logits and the per-block token counts.
    pub fn forward_infer_detailed(
        &self,
        frames: &[ModalityFrame],
        mut source: ScoreSource<'_>,
    ) -> Result<(Tensor, Vec<BlockTrace>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let seq = assemble_sequence(&mut g, &p, &self.ids.tokenizer, &self.config, frames)?;
        let n = seq.len();
        let mut x = seq.tokens;
        let mut traces = Vec::with_capacity(self.config.layers);
        for (l, k) in self.inference_ks().into_iter().enumerate() {
            let scores = self.block_scores(&mut g, &p, l, x, &mut source)?;
            let values = g.value(scores).data().to_vec();
            let decision = decision_from_ranking(&values, &rank_tokens(&values, 0), k.min(n))?;
            let blk = &self.ids.blocks[l].encoder;
            let (out, trace) = routed_block_forward(&mut g, &p, blk, x, scores, &decision, self.config.gate)?;
            traces.push(trace);
            x = out;
        }
        let logits = self.head(&mut g, &p, x)?;
        Ok((g.value(logits).clone(), traces))
    }

    pub fn forward_infer(&self, frames: &[ModalityFrame]) -> Result<Tensor> {
        Ok(self.forward_infer_detailed(frames, ScoreSource::Router)?.0)
    }
}

/// Cross-entropy for beams, mean binary cross-entropy for link status.
pub fn task_loss(g: &mut Graph, logits: NodeId, target: &Target, task: Task) -> Result<NodeId> {
    match (task, target) {
        (Task::Beam { classes }, Target::Class(c)) => {
            if *c >= classes {
                return Err(Error::InvalidArgument(format!("class index {c} out of range for {classes} beams")));
            }
            let row = g.reshape(logits, &[1, classes])?;
            g.cross_entropy(row, &[*c])
        }
        (Task::Handover { vehicles }, Target::Binary(bits)) => {
            if bits.len() != vehicles {
                return Err(Error::InvalidArgument(format!("{} link bits for {vehicles} vehicles", bits.len())));
            }
            g.bce_with_logits(logits, bits)
        }
        (task, target) => Err(Error::InvalidArgument(format!("target {target:?} does not fit task {}", task.name()))),
    }
}

/// Task loss plus the keep-ratio budget penalty.
pub fn total_loss(g: &mut Graph, logits: NodeId, target: &Target, r: NodeId, config: &ModelConfig) -> Result<NodeId> {
    let task = task_loss(g, logits, target, config.task)?;
    let penalty = budget_penalty(g, r, config.gamma_prime, config.lambda)?;
    g.add(task, penalty)
}

/// Indices of the `k` largest logits, best first, ties to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    order
}

pub fn predict(logits: &[f64], task: Task) -> Prediction {
    match task {
        Task::Beam { .. } => Prediction::Beam { top1: top_k(logits, 1)[0], top3: top_k(logits, 3), top5: top_k(logits, 5) },
        Task::Handover { .. } => Prediction::Handover {
            status: logits.iter().map(|&z| u8::from(1.0 / (1.0 + (-z).exp()) > 0.5)).collect(),
        },
    }
}
