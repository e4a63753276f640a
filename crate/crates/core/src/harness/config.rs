use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "ratio")]
pub enum Ablation {
    #[default]
    None,
    /// Tokenizer parameters stay at their initial values.
    FreezeTokenizers,
    /// Routers frozen; every block ranks and gates by fresh `U(0, 1)` scores.
    RandomRouting,
    /// Keep ratios frozen at `p` in every block, no budget penalty.
    UniformRatio(f64),
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::None => write!(f, "none"),
            Ablation::FreezeTokenizers => write!(f, "freeze_tokenizers"),
            Ablation::RandomRouting => write!(f, "random_routing"),
            Ablation::UniformRatio(p) => write!(f, "uniform_ratio({p})"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts `none`, `freeze_tokenizers`, `random_routing`,
    /// `uniform_ratio(p)` and `uniform_ratio:p`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" | "proposed" => return Ok(Ablation::None),
            "freeze_tokenizers" => return Ok(Ablation::FreezeTokenizers),
            "random_routing" => return Ok(Ablation::RandomRouting),
            _ => {}
        }
        let arg = s
            .strip_prefix("uniform_ratio")
            .map(|rest| rest.trim_start_matches([':', '(', '=']).trim_end_matches(')'))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode {s:?}")))?;
        let p: f64 = arg.parse().map_err(|_| Error::InvalidArgument(format!("bad uniform ratio {arg:?}")))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("uniform ratio {p} outside (0, 1]")));
        }
        Ok(Ablation::UniformRatio(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Tiny,
    Desk,
    Full,
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tiny" => Ok(ModelPreset::Tiny),
            "desk" => Ok(ModelPreset::Desk),
            "full" => Ok(ModelPreset::Full),
            other => Err(Error::InvalidArgument(format!("unknown model preset {other:?}"))),
        }
    }
}

impl ModelPreset {
    /// Preset architecture with the given task.
    pub fn config(self, task: Task) -> ModelConfig {
        let handover = matches!(task, Task::Handover { .. });
        let mut cfg = match (self, handover) {
            (ModelPreset::Tiny, _) => ModelConfig::tiny(),
            (ModelPreset::Desk, false) => ModelConfig::desk_beam(),
            (ModelPreset::Desk, true) => ModelConfig::desk_handover(),
            (ModelPreset::Full, false) => ModelConfig::full_beam(),
            (ModelPreset::Full, true) => ModelConfig::full_handover(),
        };
        if self == ModelPreset::Tiny && handover {
            cfg.modalities = ModelConfig::desk_handover().modalities;
        }
        cfg.task = task;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub weight_decay: f64,
    /// Step size of the keep ratios, which take no weight decay.
    pub keep_ratio_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma_prime: f64,
    /// FLOPs budget γ; when set it replaces `gamma_prime`.
    pub budget_flops: Option<f64>,
    pub seed: u64,
    pub ablation: Ablation,
    /// Use only the first `n` training / validation samples.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            keep_ratio_lr: 1e-2,
            batch: 16,
            epochs: 15,
            lambda: 10.0,
            gamma_prime: 0.5,
            budget_flops: None,
            seed: 0,
            ablation: Ablation::None,
            train_limit: None,
            val_limit: None,
        }
    }
}

/// Everything a command needs; filled from a flat `key = value` file and
/// then overridden by command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelPreset,
    pub task: Task,
    pub scenarios: usize,
    pub frames: usize,
    pub train: TrainSettings,
    /// Seeds per configuration for `ablate` and multi-seed `train`.
    pub seeds: usize,
    pub bench_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: None,
            model: ModelPreset::Desk,
            task: Task::Beam { classes: 16 },
            scenarios: 20,
            frames: 105,
            train: TrainSettings::default(),
            seeds: 1,
            bench_runs: 30,
        }
    }
}

/// Keys accepted by [`RunConfig::set`] and config files.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dataset", "dataset directory"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint to evaluate or benchmark (default <out>/model.ckpt)"),
    ("model", "architecture preset: tiny, desk or full"),
    ("task", "beam, beam:<classes> or handover"),
    ("scenarios", "scenarios to generate"),
    ("frames", "frames per scenario"),
    ("seed", "master seed"),
    ("seeds", "seeds per configuration"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("keep_ratio_lr", "keep-ratio learning rate"),
    ("batch", "batch size"),
    ("epochs", "training epochs"),
    ("lambda", "budget penalty weight"),
    ("gamma_prime", "target mean keep ratio"),
    ("budget_flops", "FLOPs budget; overrides gamma_prime"),
    ("ablation", "none, freeze_tokenizers, random_routing or uniform_ratio(p)"),
    ("train_samples", "cap on training samples"),
    ("val_samples", "cap on validation samples"),
    ("bench_runs", "timed runs per ratio"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

pub fn parse_task(s: &str) -> Result<Task> {
    match s.trim() {
        "beam" => Ok(Task::Beam { classes: 16 }),
        "handover" => Ok(Task::Handover { vehicles: 1 }),
        other => {
            if let Some(n) = other.strip_prefix("beam:") {
                return Ok(Task::Beam { classes: parse("task", n)? });
            }
            if let Some(n) = other.strip_prefix("handover:") {
                return Ok(Task::Handover { vehicles: parse("task", n)? });
            }
            Err(Error::InvalidArgument(format!("unknown task {other:?}")))
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "model" => self.model = v.parse()?,
            "task" => self.task = parse_task(v)?,
            "scenarios" => self.scenarios = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "keep_ratio_lr" => t.keep_ratio_lr = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "gamma_prime" => t.gamma_prime = parse(key, v)?,
            "budget_flops" => t.budget_flops = Some(parse(key, v)?),
            "ablation" => t.ablation = v.parse()?,
            "train_samples" => t.train_limit = Some(parse(key, v)?),
            "val_samples" => t.val_limit = Some(parse(key, v)?),
            "bench_runs" => self.bench_runs = parse(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch == 0 || self.seeds == 0 || self.bench_runs == 0 {
            return Err(Error::InvalidArgument("batch, seeds and bench_runs must be positive".into()));
        }
        if !(t.lr > 0.0) || !(t.keep_ratio_lr >= 0.0) || !(t.weight_decay >= 0.0) || !(t.lambda >= 0.0) {
            return Err(Error::InvalidArgument("learning rates, decay and lambda must be non-negative".into()));
        }
        if !(t.gamma_prime > 0.0 && t.gamma_prime <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma_prime {} outside (0, 1]", t.gamma_prime)));
        }
        Ok(())
    }
}
