//! Analytic FLOPs and activation-memory accounting.
//!
//! One multiply-add counts as 2 FLOPs. Softmax, layernorm and GELU count
//! [`ELEMENTWISE_FLOPS`] per element.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keepratio::inference_k;
use crate::model::{Modality, ModelConfig};

pub const ELEMENTWISE_FLOPS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub name: String,
    pub flops: u64,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Within,
    Over,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
    pub total_flops: u64,
    pub total_memory_bytes: u64,
    pub element_bytes: u64,
    /// Tokens processed by each block.
    pub token_counts: Vec<usize>,
    pub budget: Option<f64>,
    pub verdict: Option<Verdict>,
}

impl FlopsReport {
    fn new(entries: Vec<FlopsEntry>, element_bytes: u64, token_counts: Vec<usize>) -> Self {
        let total_flops = entries.iter().map(|e| e.flops).sum();
        let total_memory_bytes = entries.iter().map(|e| e.memory_bytes).sum();
        Self { entries, total_flops, total_memory_bytes, element_bytes, token_counts, budget: None, verdict: None }
    }

    /// Sum over entries whose name starts with `prefix`.
    pub fn flops_with_prefix(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.flops).sum()
    }

    /// Sum over entries whose name ends with `suffix`.
    pub fn flops_with_suffix(&self, suffix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.ends_with(suffix)).map(|e| e.flops).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table with one row per component and a total row.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>16}  {:>8}  {:>14}", "component", "flops", "share", "memory_bytes");
        let total = self.total_flops.max(1) as f64;
        for e in &self.entries {
            let share = 100.0 * e.flops as f64 / total;
            let _ = writeln!(out, "{:<width$}  {:>16}  {:>7.3}%  {:>14}", e.name, e.flops, share, e.memory_bytes);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>7.3}%  {:>14}",
            "total", self.total_flops, 100.0, self.total_memory_bytes
        );
        if let (Some(b), Some(v)) = (self.budget, self.verdict) {
            let _ = writeln!(out, "budget {b:.0}: {v:?}");
        }
        out
    }
}

/// `4·K²·d`: scores plus weighted values over all heads.
pub fn attention_flops(k: usize, d: usize) -> u64 {
    4 * (k as u64).pow(2) * d as u64
}

/// `K·d` elements.
pub fn attention_memory(k: usize, d: usize, element_bytes: u64) -> u64 {
    (k * d) as u64 * element_bytes
}

fn linear_flops(rows: usize, fan_in: usize, fan_out: usize) -> u64 {
    2 * (rows * fan_in * fan_out) as u64
}

fn linear_memory(rows: usize, fan_in: usize, fan_out: usize, eb: u64) -> u64 {
    (rows * (fan_in + fan_out)) as u64 * eb
}

#[derive(Default)]
struct Tally {
    flops: u64,
    memory: u64,
}

impl Tally {
    /// Square conv on a `side × side × c_in` input; returns the output side.
    fn conv(&mut self, side: usize, c_in: usize, c_out: usize, k: usize, stride: usize, gelu: bool, eb: u64) -> usize {
        let pad = k / 2;
        let out = (side + 2 * pad - k) / stride + 1;
        let cells = (out * out) as u64;
        self.flops += 2 * cells * (k * k * c_in * c_out) as u64;
        if gelu {
            self.flops += ELEMENTWISE_FLOPS * cells * c_out as u64;
        }
        self.memory += (cells * c_out as u64 + (side * side * c_in) as u64) * eb;
        out
    }

    fn linear(&mut self, rows: usize, fan_in: usize, fan_out: usize, gelu: bool, eb: u64) {
        self.flops += linear_flops(rows, fan_in, fan_out);
        if gelu {
            self.flops += ELEMENTWISE_FLOPS * (rows * fan_out) as u64;
        }
        self.memory += linear_memory(rows, fan_in, fan_out, eb);
    }
}

fn conv_stack(config: &ModelConfig, side: usize, channels: usize, eb: u64) -> Tally {
    let tc = &config.tokenizer;
    let [c0, c1] = tc.conv_channels;
    let mut t = Tally::default();
    let mut s = t.conv(side, channels, c0, tc.stem_kernel(), tc.stem_stride, true, eb);
    for (c, c_next) in [(c0, c1), (c1, c1)] {
        t.conv(s, c, c, 3, 1, true, eb);
        t.conv(s, c, c, 3, 1, false, eb);
        // Residual add followed by GELU.
        t.flops += (1 + ELEMENTWISE_FLOPS) * (s * s * c) as u64;
        s = t.conv(s, c, c_next, 3, 2, true, eb);
    }
    t.linear(s * s, c1, config.d, false, eb);
    t
}

fn tokenizer_tally(config: &ModelConfig, m: Modality, eb: u64) -> Tally {
    let tc = &config.tokenizer;
    let per_frame = match m {
        Modality::Image => conv_stack(config, tc.image_size, tc.image_channels, eb),
        Modality::Pointcloud => conv_stack(config, tc.bev_size, 1, eb),
        Modality::Radar => {
            let mut t = Tally::default();
            t.linear(tc.radar_tokens, 4, tc.radar_hidden, true, eb);
            t.linear(tc.radar_tokens, tc.radar_hidden, config.d, false, eb);
            t
        }
        Modality::Gps | Modality::Rssi => {
            let fan_in = if m == Modality::Gps { 2 } else { 1 };
            let mut t = Tally::default();
            t.linear(1, fan_in, tc.scalar_hidden, true, eb);
            t.linear(1, tc.scalar_hidden, config.d, false, eb);
            t
        }
    };
    let tau = config.window as u64;
    Tally { flops: per_frame.flops * tau, memory: per_frame.memory * tau }
}

fn check_ks(config: &ModelConfig, ks: &[usize]) -> Result<usize> {
    let n = config.token_count();
    if ks.len() != config.layers {
        return Err(Error::InvalidArgument(format!("{} token counts for {} blocks", ks.len(), config.layers)));
    }
    if let Some(&k) = ks.iter().find(|&&k| k < 1 || k > n) {
        return Err(Error::InvalidArgument(format!("token count {k} outside [1, {n}]")));
    }
    Ok(n)
}

fn router_flops(n: usize, d: usize, d_r: usize, k: usize) -> u64 {
    let selection = (n as f64 * (k as f64).log2()).ceil() as u64;
    linear_flops(n, d, d_r) + ELEMENTWISE_FLOPS * (n * d_r) as u64 + linear_flops(n, d_r, 1) + selection
}

fn entry(name: String, flops: u64, memory_bytes: u64) -> FlopsEntry {
    FlopsEntry { name, flops, memory_bytes }
}

/// Per-component report for block token counts `ks`, with activation memory
/// at `element_bytes` per value.
pub fn count_flops_with(config: &ModelConfig, ks: &[usize], element_bytes: u64) -> Result<FlopsReport> {
    let n = check_ks(config, ks)?;
    let (d, d_ff, heads, eb) = (config.d, config.d_ff, config.heads, element_bytes);
    let mut entries = Vec::new();
    for &m in &config.modalities {
        let t = tokenizer_tally(config, m, eb);
        entries.push(entry(format!("tokenizer.{}", m.name()), t.flops, t.memory));
    }
    for (l, &k) in ks.iter().enumerate() {
        entries.push(entry(format!("router.{l}"), router_flops(n, d, config.d_router, k), ((k * d + d) as u64) * eb));
        entries.push(entry(format!("block.{l}.qkvo"), 8 * (k * d * d) as u64, 4 * linear_memory(k, d, d, eb)));
        entries.push(entry(format!("block.{l}.attention"), attention_flops(k, d), attention_memory(k, d, eb)));
        entries.push(entry(
            format!("block.{l}.mlp"),
            4 * (k * d * d_ff) as u64,
            linear_memory(k, d, d_ff, eb) + linear_memory(k, d_ff, d, eb),
        ));
        let elementwise = heads * k * k + 2 * k * d + k * d_ff;
        entries.push(entry(format!("block.{l}.elementwise"), ELEMENTWISE_FLOPS * elementwise as u64, 0));
    }
    let out = config.task.output_size();
    entries.push(entry(
        "head".into(),
        ELEMENTWISE_FLOPS * d as u64 + linear_flops(1, d, out),
        linear_memory(1, d, out, eb),
    ));
    Ok(FlopsReport::new(entries, eb, ks.to_vec()))
}

/// [`count_flops_with`] at 64-bit elements.
pub fn count_flops(config: &ModelConfig, ks: &[usize]) -> Result<FlopsReport> {
    count_flops_with(config, ks, 8)
}

/// Activation bytes per component.
pub fn estimate_memory(config: &ModelConfig, ks: &[usize], element_bytes: u64) -> Result<Vec<(String, u64)>> {
    Ok(count_flops_with(config, ks, element_bytes)?.entries.into_iter().map(|e| (e.name, e.memory_bytes)).collect())
}

/// Inference token counts `⌈r_l·N⌉` for per-block ratios.
pub fn token_counts_for_ratios(config: &ModelConfig, ratios: &[f64]) -> Vec<usize> {
    let n = config.token_count();
    ratios.iter().map(|&r| inference_k(r, n)).collect()
}

/// Within iff `total ≤ γ`; records the budget and verdict on the report.
pub fn check_budget(report: &mut FlopsReport, gamma: f64) -> Result<Verdict> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("FLOPs budget {gamma} must be positive")));
    }
    let verdict = if report.total_flops as f64 <= gamma { Verdict::Within } else { Verdict::Over };
    report.budget = Some(gamma);
    report.verdict = Some(verdict);
    Ok(verdict)
}
