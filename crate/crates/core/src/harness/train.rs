use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, TrainSettings};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::keepratio::{budget_penalty, target_ratio_from_flops};
use crate::flops::count_flops;
use crate::model::{predict, task_loss, Model, ModelConfig, Prediction, ScoreSource, Task};
use crate::optim::{optimizer_step, AdamConfig, OptimizerState, UpdateRule};
use crate::params::ParamGroup;
use crate::scene::{Dataset, Label};

/// Stream offsets keep shuffling and random routing independent of init.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const ROUTING_STREAM: u64 = 0x524F_5554;
const EVAL_STREAM: u64 = 0x4556_414C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss plus mean batch penalty.
    pub train_loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    pub keep_ratios: Vec<f64>,
    pub r_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalScores {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl EvalScores {
    /// Top-1 for beams, accuracy for link status.
    pub fn headline(&self) -> f64 {
        self.top1.or(self.accuracy).unwrap_or(0.0)
    }
}

/// γ' to train towards: the explicit target, or the one implied by a FLOPs budget.
pub fn resolve_gamma_prime(config: &ModelConfig, settings: &TrainSettings) -> Result<f64> {
    match settings.budget_flops {
        None => Ok(settings.gamma_prime),
        Some(gamma) => {
            let n = config.token_count();
            let full = count_flops(config, &vec![n; config.layers])?.total_flops as f64;
            target_ratio_from_flops(gamma, full, config.r_min())
        }
    }
}

/// Freezes parameter groups and pins keep ratios as the ablation requires.
pub fn apply_ablation(model: &mut Model, ablation: Ablation) -> Result<()> {
    match ablation {
        Ablation::None => {}
        Ablation::FreezeTokenizers => model.params.set_trainable(ParamGroup::Tokenizer, false),
        Ablation::RandomRouting => model.params.set_trainable(ParamGroup::Router, false),
        Ablation::UniformRatio(p) => {
            let l = model.config.layers;
            model.set_keep_ratios(&vec![p.max(model.config.r_min()); l])?;
            model.params.set_trainable(ParamGroup::KeepRatio, false);
        }
    }
    Ok(())
}

fn label_matches(label: &Label, task: Task) -> bool {
    match (label, task) {
        (Label::Beam { index }, Task::Beam { classes }) => *index < classes,
        (Label::Handover { status }, Task::Handover { vehicles }) => status.len() == vehicles,
        _ => false,
    }
}

pub fn check_compatible(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.config.window != dataset.config.window {
        return Err(Error::InvalidArgument(format!(
            "model window {} differs from dataset window {}",
            model.config.window, dataset.config.window
        )));
    }
    if let Some(s) = dataset.samples.iter().find(|s| !label_matches(&s.label, model.config.task)) {
        return Err(Error::InvalidArgument(format!(
            "dataset label {:?} does not fit task {:?}",
            s.label, model.config.task
        )));
    }
    Ok(())
}

/// Mini-batch training with the budgeted loss. Returns one record per epoch.
pub fn train_model(
    model: &mut Model,
    dataset: &Dataset,
    indices: &[usize],
    settings: &TrainSettings,
) -> Result<Vec<EpochRecord>> {
    check_compatible(model, dataset)?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    apply_ablation(model, settings.ablation)?;
    let gamma_prime = resolve_gamma_prime(&model.config, settings)?;
    model.config.gamma_prime = gamma_prime;
    model.config.lambda = settings.lambda;
    let use_penalty = !matches!(settings.ablation, Ablation::UniformRatio(_)) && settings.lambda > 0.0;
    let random = settings.ablation == Ablation::RandomRouting;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ SHUFFLE_STREAM);
    let mut routing_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ ROUTING_STREAM);
    let mut state = OptimizerState::new(AdamConfig {
        lr: settings.lr,
        weight_decay: settings.weight_decay,
        ..AdamConfig::default()
    });
    let r_min = model.config.r_min();
    let rules: Vec<UpdateRule> = model
        .params
        .iter()
        .map(|p| match p.group {
            ParamGroup::KeepRatio => UpdateRule { lr: settings.keep_ratio_lr, weight_decay: 0.0, clamp: Some((r_min, 1.0)) },
            _ => state.default_rule(),
        })
        .collect();
    let modalities = model.config.modalities.clone();
    let task = model.config.task;

    let mut order = indices.to_vec();
    let mut records = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut task_sum, mut penalty_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(settings.batch) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let frames = dataset.window(i, &modalities);
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true)?;
                let source = if random { ScoreSource::Random(&mut routing_rng) } else { ScoreSource::Router };
                let out = model.forward_train(&mut g, &p, &frames, source)?;
                let loss = task_loss(&mut g, out.logits, &dataset.samples[i].label.target(), task)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite loss {value} at epoch {epoch}, sample {i}, keep ratios {:?}",
                        model.keep_ratios()
                    )));
                }
                task_sum += value * scale;
                let grads = g.backward(loss)?;
                model.params.accumulate_grads(&p, &grads, scale);
            }
            if use_penalty {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true)?;
                let r = p[model.ids.keep_ratio];
                let pen = budget_penalty(&mut g, r, gamma_prime, settings.lambda)?;
                penalty_sum += g.value(pen).item();
                let grads = g.backward(pen)?;
                model.params.accumulate_grads(&p, &grads, 1.0);
            }
            let mut tensors: Vec<_> = model.params.iter_mut().map(|p| &mut p.tensor).collect();
            optimizer_step(&mut tensors, &rules, &mut state)?;
            batches += 1;
        }
        let keep_ratios = model.keep_ratios();
        let r_avg = keep_ratios.iter().sum::<f64>() / keep_ratios.len() as f64;
        let (task_loss, penalty) = (task_sum / batches as f64, penalty_sum / batches as f64);
        log::info!("epoch {epoch}: task loss {task_loss:.4}, penalty {penalty:.4}, r {keep_ratios:.3?}");
        records.push(EpochRecord { epoch, train_loss: task_loss + penalty, task_loss, penalty, keep_ratios, r_avg });
    }
    model.params.zero_grads();
    Ok(records)
}

/// Inference over `indices`; random-routing models are scored with random routing.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize], ablation: Ablation, seed: u64) -> Result<EvalScores> {
    check_compatible(model, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    let modalities = &model.config.modalities;
    let (mut hits, mut bits) = ([0usize; 3], (0usize, 0usize));
    for &i in indices {
        let frames = dataset.window(i, modalities);
        let source = if ablation == Ablation::RandomRouting { ScoreSource::Random(&mut rng) } else { ScoreSource::Router };
        let (logits, _) = model.forward_infer_detailed(&frames, source)?;
        match (predict(logits.data(), model.config.task), &dataset.samples[i].label) {
            (Prediction::Beam { top1, top3, top5 }, Label::Beam { index }) => {
                hits[0] += usize::from(top1 == *index);
                hits[1] += usize::from(top3.contains(index));
                hits[2] += usize::from(top5.contains(index));
            }
            (Prediction::Handover { status }, Label::Handover { status: truth }) => {
                bits.0 += status.iter().zip(truth).filter(|(a, b)| a == b).count();
                bits.1 += truth.len();
            }
            _ => unreachable!("checked by check_compatible"),
        }
    }
    let n = indices.len();
    let frac = |k: usize, total: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    Ok(match model.config.task {
        Task::Beam { .. } => EvalScores {
            samples: n,
            top1: Some(frac(hits[0], n)),
            top3: Some(frac(hits[1], n)),
            top5: Some(frac(hits[2], n)),
            accuracy: None,
        },
        Task::Handover { .. } => EvalScores { samples: n, accuracy: Some(frac(bits.0, bits.1)), ..Default::default() },
    })
}
