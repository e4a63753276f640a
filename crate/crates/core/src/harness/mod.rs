//! Command implementations behind the `tokenflow` CLI: dataset generation,
//! budgeted training, evaluation, latency benchmarks and ablations.

mod config;
mod train;

pub use config::*;
pub use train::*;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{count_flops, FlopsReport};
use crate::model::{load_checkpoint, save_checkpoint, Model, Task};
use crate::scene::{build_dataset, read_dataset, write_dataset, Dataset, Label, ScenarioConfig, Split};
use crate::tokenizers::ModalityFrame;

/// Ratios every benchmark forces in addition to the trained ones.
pub const BENCH_RATIOS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub inference_ms_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: Task,
    pub ablation: Ablation,
    pub seed: u64,
    pub gamma_prime: f64,
    pub lambda: f64,
    pub train_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub keep_ratios: Vec<f64>,
    pub inference_tokens: Vec<usize>,
    pub eval: EvalScores,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without wall-clock fields; identical across reruns with one seed.
    pub fn deterministic_json(&self) -> Result<String> {
        Self { timing: None, ..self.clone() }.to_json()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Median wall-clock of `runs` batch-1 inferences, milliseconds.
pub fn time_inference(model: &Model, frames: &[ModalityFrame], runs: usize) -> Result<f64> {
    model.forward_infer(frames)?;
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        model.forward_infer(frames)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut ms))
}

fn limited(mut idx: Vec<usize>, limit: Option<usize>) -> Vec<usize> {
    if let Some(n) = limit {
        idx.truncate(n);
    }
    idx
}

pub fn split_indices(dataset: &Dataset, settings: &TrainSettings) -> (Vec<usize>, Vec<usize>) {
    (
        limited(dataset.indices(Split::Train), settings.train_limit),
        limited(dataset.indices(Split::Val), settings.val_limit),
    )
}

pub fn flops_report(model: &Model) -> Result<FlopsReport> {
    count_flops(&model.config, &model.inference_ks())
}

/// Trains one model from scratch and scores it on the validation split.
pub fn train_and_evaluate(config: &RunConfig, dataset: &Dataset, seed: u64) -> Result<(Model, MetricsRecord)> {
    let settings = TrainSettings { seed, ..config.train.clone() };
    let mut model_config = config.model.config(dataset.config.task);
    model_config.window = dataset.config.window;
    let mut model = Model::new(model_config, seed)?;
    let (train_idx, val_idx) = split_indices(dataset, &settings);
    let t0 = Instant::now();
    let epochs = train_model(&mut model, dataset, &train_idx, &settings)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let eval = evaluate(&model, dataset, &val_idx, settings.ablation, seed)?;
    let eval_seconds = t0.elapsed().as_secs_f64();
    let probe = val_idx.first().or(train_idx.first()).copied().unwrap_or(0);
    let inference_ms_median = time_inference(&model, &dataset.window(probe, &model.config.modalities), 5)?;
    let record = MetricsRecord {
        task: model.config.task,
        ablation: settings.ablation,
        seed,
        gamma_prime: model.config.gamma_prime,
        lambda: model.config.lambda,
        train_samples: train_idx.len(),
        epochs,
        keep_ratios: model.keep_ratios(),
        inference_tokens: model.inference_ks(),
        eval,
        flops: flops_report(&model)?.total_flops,
        timing: Some(Timing { train_seconds, eval_seconds, inference_ms_median }),
    };
    Ok((model, record))
}

pub fn keep_ratio_csv(model: &Model) -> String {
    let mut out = String::from("layer,keep_ratio,tokens\n");
    for (l, (r, k)) in model.keep_ratios().iter().zip(model.inference_ks()).enumerate() {
        out.push_str(&format!("{l},{r},{k}\n"));
    }
    out
}

/// Checkpoint, metrics, keep-ratio CSV and FLOPs report for one trained model.
pub fn write_run_outputs(dir: &Path, model: &Model, record: &MetricsRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(model, &dir.join("model.ckpt"))?;
    fs::write(dir.join("metrics.json"), record.to_json()?)?;
    fs::write(dir.join("keep_ratios.csv"), keep_ratio_csv(model))?;
    fs::write(dir.join("flops.json"), flops_report(model)?.to_json()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub frames: usize,
    pub labels: BTreeMap<String, usize>,
}

pub fn scenario_config(config: &RunConfig) -> ScenarioConfig {
    let model = config.model.config(config.task);
    ScenarioConfig {
        scenarios: config.scenarios,
        frames: config.frames,
        seed: config.train.seed,
        ..ScenarioConfig::for_model(&model)
    }
}

pub fn summarize(dataset: &Dataset) -> GenerateSummary {
    let mut labels = BTreeMap::new();
    for s in &dataset.samples {
        let key = match &s.label {
            Label::Beam { index } => format!("beam_{index}"),
            Label::Handover { status } => format!("link_{}", status.iter().map(u8::to_string).collect::<String>()),
        };
        *labels.entry(key).or_insert(0) += 1;
    }
    GenerateSummary {
        samples: dataset.len(),
        train: dataset.indices(Split::Train).len(),
        val: dataset.indices(Split::Val).len(),
        frames: dataset.frames.len(),
        labels,
    }
}

pub fn run_generate(config: &RunConfig) -> Result<GenerateSummary> {
    let dataset = build_dataset(&scenario_config(config))?;
    write_dataset(&config.dataset, &dataset)?;
    Ok(summarize(&dataset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl SeedSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), values }
    }
}

/// Trains `seeds` models; with one seed the outputs land in `out`, otherwise
/// in `out/seed_<s>` next to a `summary.json`.
pub fn run_train(config: &RunConfig) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    let dataset = read_dataset(&config.dataset)?;
    let mut records = Vec::with_capacity(config.seeds);
    for k in 0..config.seeds {
        let seed = config.train.seed + k as u64;
        let (model, record) = train_and_evaluate(config, &dataset, seed)?;
        let dir = if config.seeds == 1 { config.out.clone() } else { config.out.join(format!("seed_{seed}")) };
        write_run_outputs(&dir, &model, &record)?;
        records.push(record);
    }
    if config.seeds > 1 {
        let summary = SeedSummary::new(records.iter().map(|r| r.eval.headline()).collect());
        fs::write(config.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(records)
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config.checkpoint.clone().unwrap_or_else(|| config.out.join("model.ckpt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval: EvalScores,
    pub keep_ratios: Vec<f64>,
    pub inference_tokens: Vec<usize>,
    pub flops: FlopsReport,
}

pub fn run_eval(config: &RunConfig) -> Result<EvalReport> {
    let model = load_checkpoint(&checkpoint_path(config))?;
    let dataset = read_dataset(&config.dataset)?;
    let (_, val) = split_indices(&dataset, &config.train);
    let eval = evaluate(&model, &dataset, &val, config.train.ablation, config.train.seed)?;
    let report = EvalReport {
        eval,
        keep_ratios: model.keep_ratios(),
        inference_tokens: model.inference_ks(),
        flops: flops_report(&model)?,
    };
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    /// Mean keep ratio.
    pub ratio: f64,
    pub tokens: Vec<usize>,
    pub median_ms: f64,
    pub flops: u64,
}

/// Batch-1 latency at the trained ratios and at each forced uniform ratio.
pub fn benchmark(model: &Model, frames: &[ModalityFrame], ratios: &[f64], runs: usize) -> Result<Vec<BenchRow>> {
    let mut variants = vec![("trained".to_string(), model.clone())];
    for &r in ratios {
        let mut m = model.clone();
        m.set_keep_ratios(&vec![r.max(m.config.r_min()); m.config.layers])?;
        variants.push((format!("uniform_{r}"), m));
    }
    variants
        .into_iter()
        .map(|(label, m)| {
            let median_ms = time_inference(&m, frames, runs)?;
            let r = m.keep_ratios();
            Ok(BenchRow {
                label,
                ratio: r.iter().sum::<f64>() / r.len() as f64,
                tokens: m.inference_ks(),
                median_ms,
                flops: flops_report(&m)?.total_flops,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("label,ratio,tokens,median_ms,flops\n");
    for r in rows {
        let tokens: Vec<String> = r.tokens.iter().map(usize::to_string).collect();
        out.push_str(&format!("{},{},{},{:.4},{}\n", r.label, r.ratio, tokens.join(";"), r.median_ms, r.flops));
    }
    out
}

pub fn run_benchmark(config: &RunConfig) -> Result<Vec<BenchRow>> {
    let model = load_checkpoint(&checkpoint_path(config))?;
    let dataset = read_dataset(&config.dataset)?;
    check_compatible(&model, &dataset)?;
    let probe = dataset.indices(Split::Val).first().copied().unwrap_or(0);
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one sample".into()));
    }
    let rows = benchmark(&model, &dataset.window(probe, &model.config.modalities), &BENCH_RATIOS, config.bench_runs)?;
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("bench.csv"), bench_csv(&rows))?;
    fs::write(config.out.join("flops.json"), flops_report(&model)?.to_json()?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Ablation,
    pub top1: SeedSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top3: Option<SeedSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<SeedSummary>,
}

pub fn ablation_modes(gamma_prime: f64) -> [Ablation; 4] {
    [Ablation::None, Ablation::FreezeTokenizers, Ablation::RandomRouting, Ablation::UniformRatio(gamma_prime)]
}

/// Proposed model and the three ablations over `seeds` shared seeds.
pub fn ablate(config: &RunConfig, dataset: &Dataset, modes: &[Ablation]) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let run = RunConfig { train: TrainSettings { ablation: mode, ..config.train.clone() }, ..config.clone() };
            let scores: Vec<EvalScores> = (0..config.seeds)
                .map(|k| Ok(train_and_evaluate(&run, dataset, config.train.seed + k as u64)?.1.eval))
                .collect::<Result<_>>()?;
            let collect = |f: fn(&EvalScores) -> Option<f64>| -> Option<SeedSummary> {
                scores.iter().map(f).collect::<Option<Vec<f64>>>().map(SeedSummary::new)
            };
            Ok(AblationRow {
                mode,
                top1: SeedSummary::new(scores.iter().map(EvalScores::headline).collect()),
                top3: collect(|s| s.top3),
                top5: collect(|s| s.top5),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,top1_mean,top1_std,top3_mean,top5_mean\n");
    let fmt = |s: &Option<SeedSummary>| s.as_ref().map_or(String::new(), |s| format!("{:.4}", s.mean));
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4},{},{}\n", r.mode, r.top1.mean, r.top1.std, fmt(&r.top3), fmt(&r.top5)));
    }
    out
}

pub fn run_ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let dataset = read_dataset(&config.dataset)?;
    let model_config = config.model.config(dataset.config.task);
    let gamma_prime = resolve_gamma_prime(&model_config, &config.train)?;
    let rows = ablate(config, &dataset, &ablation_modes(gamma_prime))?;
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("ablation.csv"), ablation_csv(&rows))?;
    fs::write(config.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
