//! Trainable keep ratios: integer bracketing, the two-pass blend that makes
//! the token count differentiable, and the budget penalty.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::GateMode;
use crate::params::Bound;
use crate::routing::{decision_from_ranking, routed_block_forward, BlockTrace, EncoderBlockParams};

/// `N·r` within this distance of an integer is treated as that integer.
pub const LATTICE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub k_down: usize,
    pub k_up: usize,
    pub w_up: f64,
    pub w_down: f64,
    pub degenerate: bool,
}

/// Splits `N·r` into its neighbouring integers and interpolation weights.
pub fn bracket_ratio(r: f64, n: usize) -> Result<Bracket> {
    let r_min = 1.0 / n as f64;
    if n == 0 || !(r >= r_min - LATTICE_TOL && r <= 1.0 + LATTICE_TOL) {
        return Err(Error::InvalidArgument(format!("keep ratio {r} outside [1/{n}, 1]")));
    }
    let nr = n as f64 * r;
    let nearest = nr.round();
    if (nr - nearest).abs() <= LATTICE_TOL {
        let k = (nearest as usize).clamp(1, n);
        return Ok(Bracket { k_down: k, k_up: k, w_up: 0.0, w_down: 1.0, degenerate: true });
    }
    let k_down = (nr.floor() as usize).max(1);
    let k_up = (k_down + 1).min(n);
    let w_up = nr - k_down as f64;
    Ok(Bracket { k_down, k_up, w_up, w_down: k_up as f64 - nr, degenerate: false })
}

/// Token count used at inference, `⌈N·r⌉` with lattice snapping, at least 1.
pub fn inference_k(r: f64, n: usize) -> usize {
    let nr = n as f64 * r;
    let k = if (nr - nr.round()).abs() <= LATTICE_TOL { nr.round() } else { nr.ceil() };
    (k.max(1.0) as usize).min(n)
}

/// Result of one routed block under a keep ratio.
#[derive(Debug, Clone)]
pub struct CombineOutput {
    pub output: NodeId,
    pub bracket: Bracket,
    pub traces: Vec<BlockTrace>,
}

/// Runs the block at `K_down` and `K_up` over the shared `ranking` and blends
/// the outputs with weights that are affine in the scalar node `r: [1]`.
#[allow(clippy::too_many_arguments)]
pub fn dual_pass_combine(
    g: &mut Graph,
    p: &Bound,
    blk: &EncoderBlockParams,
    x: NodeId,
    scores: NodeId,
    ranking: &[usize],
    bracket: &Bracket,
    r: NodeId,
    gate: GateMode,
) -> Result<CombineOutput> {
    let n = g.value(x).shape()[0];
    let consistent = bracket.k_down >= 1
        && bracket.k_up <= n
        && (bracket.degenerate && bracket.k_up == bracket.k_down || !bracket.degenerate && bracket.k_up == bracket.k_down + 1);
    if !consistent || ranking.len() != n {
        return Err(Error::InvalidArgument(format!("bracket {bracket:?} inconsistent with N = {n}")));
    }
    let score_values = g.value(scores).data().to_vec();
    let pass = |g: &mut Graph, k: usize| {
        let d = decision_from_ranking(&score_values, ranking, k)?;
        routed_block_forward(g, p, blk, x, scores, &d, gate)
    };
    if bracket.degenerate {
        let (output, trace) = pass(g, bracket.k_down)?;
        return Ok(CombineOutput { output, bracket: *bracket, traces: vec![trace] });
    }
    let (up, t_up) = pass(g, bracket.k_up)?;
    let (down, t_down) = pass(g, bracket.k_down)?;
    let nf = n as f64;
    let w_up = g.affine(r, nf, -(bracket.k_down as f64))?;
    let w_down = g.affine(r, -nf, bracket.k_up as f64)?;
    let a = g.mul(up, w_up)?;
    let b = g.mul(down, w_down)?;
    let output = g.add(a, b)?;
    Ok(CombineOutput { output, bracket: *bracket, traces: vec![t_up, t_down] })
}

/// `λ·(mean(r) − γ')²` as a scalar node.
pub fn budget_penalty(g: &mut Graph, r: NodeId, gamma_prime: f64, lambda: f64) -> Result<NodeId> {
    let avg = g.mean(r)?;
    let diff = g.affine(avg, 1.0, -gamma_prime)?;
    let sq = g.mul(diff, diff)?;
    g.scale(sq, lambda)
}

/// `γ' = √(γ / FLOPs_max)` clamped to `[r_min, 1]`.
pub fn target_ratio_from_flops(gamma: f64, flops_max: f64, r_min: f64) -> Result<f64> {
    if !(gamma > 0.0) || !(flops_max > 0.0) {
        return Err(Error::InvalidArgument(format!("budget {gamma} and full-model FLOPs {flops_max} must be positive")));
    }
    Ok((gamma / flops_max).sqrt().clamp(r_min, 1.0))
}
