use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Pointcloud,
    Radar,
    Gps,
    Rssi,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Image, Modality::Pointcloud, Modality::Radar, Modality::Gps, Modality::Rssi];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Pointcloud => "pointcloud",
            Modality::Radar => "radar",
            Modality::Gps => "gps",
            Modality::Rssi => "rssi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    /// Predict the index of the best codeword among `classes`.
    Beam { classes: usize },
    /// Predict one link-status bit per tracked vehicle.
    Handover { vehicles: usize },
}

impl Task {
    pub fn output_size(self) -> usize {
        match self {
            Task::Beam { classes } => classes,
            Task::Handover { vehicles } => vehicles,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Beam { .. } => "beam",
            Task::Handover { .. } => "handover",
        }
    }
}

/// How router scores gate the block update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Raw,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Sum,
    Max,
}

/// World rectangle `[x_min, x_max] × [y_min, y_max]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Square image side `H = W`.
    pub image_size: usize,
    pub image_channels: usize,
    /// Square bird's-eye-view grid side.
    pub bev_size: usize,
    pub bev_bounds: Bounds,
    /// Points at or below this height are ground returns and are dropped.
    pub ground_height: f64,
    pub bev_pool: PoolMode,
    /// Channel widths of the two residual stages.
    pub conv_channels: [usize; 2],
    /// Stride of the stem convolution; two stride-2 stages follow.
    pub stem_stride: usize,
    pub radar_tokens: usize,
    pub radar_hidden: usize,
    /// Per-column multipliers for `[velocity, azimuth, altitude, depth]`.
    pub radar_scale: [f64; 4],
    pub scalar_hidden: usize,
    pub rssi_offset: f64,
    pub rssi_scale: f64,
    pub share_position_embedding: bool,
}

impl TokenizerConfig {
    pub fn downsample(&self) -> usize {
        self.stem_stride * 4
    }

    pub fn image_grid(&self) -> usize {
        self.image_size / self.downsample()
    }

    pub fn bev_grid(&self) -> usize {
        self.bev_size / self.downsample()
    }

    pub fn stem_kernel(&self) -> usize {
        (2 * (self.stem_stride / 2) + 1).max(3)
    }

    fn validate(&self) -> Result<()> {
        let ds = self.downsample();
        if self.stem_stride == 0 || self.image_size % ds != 0 || self.bev_size % ds != 0 {
            return Err(Error::InvalidArgument(format!(
                "image ({}) and BEV ({}) sizes must be multiples of {ds}",
                self.image_size, self.bev_size
            )));
        }
        if self.conv_channels.contains(&0) || self.image_channels == 0 {
            return Err(Error::InvalidArgument("conv channel counts must be positive".into()));
        }
        if self.rssi_scale == 0.0 {
            return Err(Error::InvalidArgument("rssi_scale must be nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_router: usize,
    /// Frames per input window (τ).
    pub window: usize,
    pub modalities: Vec<Modality>,
    pub task: Task,
    pub gamma_prime: f64,
    pub lambda: f64,
    pub gate: GateMode,
    pub tokenizer: TokenizerConfig,
}

impl ModelConfig {
    /// CPU-scale beam-selection model: N = 206, d = 32, L = 4.
    pub fn desk_beam() -> Self {
        Self {
            d: 32,
            layers: 4,
            heads: 4,
            d_ff: 64,
            d_router: 16,
            window: 5,
            modalities: vec![Modality::Image, Modality::Pointcloud, Modality::Radar, Modality::Gps],
            task: Task::Beam { classes: 16 },
            gamma_prime: 0.5,
            lambda: 10.0,
            gate: GateMode::Raw,
            tokenizer: TokenizerConfig {
                image_size: 64,
                image_channels: 1,
                bev_size: 64,
                bev_bounds: Bounds { x_min: -50.0, x_max: 50.0, y_min: 5.0, y_max: 14.5 },
                ground_height: 0.2,
                bev_pool: PoolMode::Sum,
                conv_channels: [4, 8],
                stem_stride: 4,
                radar_tokens: 8,
                radar_hidden: 16,
                radar_scale: [0.2, 1.0, 1.0, 0.02],
                scalar_hidden: 16,
                rssi_offset: -47.0,
                rssi_scale: 10.0,
                share_position_embedding: false,
            },
        }
    }

    /// CPU-scale handover model over image, LiDAR and RSSI: N = 166.
    pub fn desk_handover() -> Self {
        Self {
            modalities: vec![Modality::Image, Modality::Pointcloud, Modality::Rssi],
            task: Task::Handover { vehicles: 1 },
            ..Self::desk_beam()
        }
    }

    /// Full-size beam configuration (1024 image + 1024 LiDAR + 300 radar + 1 GPS tokens per frame).
    pub fn full_beam() -> Self {
        Self {
            d: 64,
            layers: 8,
            heads: 8,
            d_ff: 256,
            d_router: 64,
            window: 5,
            modalities: vec![Modality::Image, Modality::Pointcloud, Modality::Radar, Modality::Gps],
            task: Task::Beam { classes: 64 },
            gamma_prime: 0.3,
            lambda: 10.0,
            gate: GateMode::Raw,
            tokenizer: TokenizerConfig {
                image_size: 256,
                image_channels: 3,
                bev_size: 256,
                conv_channels: [32, 64],
                stem_stride: 2,
                radar_tokens: 300,
                radar_hidden: 64,
                scalar_hidden: 64,
                ..Self::desk_beam().tokenizer
            },
        }
    }

    /// Full-size handover configuration (image + LiDAR + RSSI).
    pub fn full_handover() -> Self {
        Self {
            modalities: vec![Modality::Image, Modality::Pointcloud, Modality::Rssi],
            task: Task::Handover { vehicles: 1 },
            ..Self::full_beam()
        }
    }

    /// Gradient-check scale: N = 10, d = 8, L = 2.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            layers: 2,
            heads: 2,
            d_ff: 16,
            d_router: 8,
            window: 1,
            modalities: vec![Modality::Image, Modality::Radar, Modality::Gps],
            task: Task::Beam { classes: 4 },
            gamma_prime: 0.5,
            lambda: 10.0,
            gate: GateMode::Raw,
            tokenizer: TokenizerConfig {
                image_size: 8,
                image_channels: 1,
                bev_size: 8,
                conv_channels: [2, 3],
                stem_stride: 1,
                radar_tokens: 4,
                radar_hidden: 4,
                scalar_hidden: 4,
                ..Self::desk_beam().tokenizer
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk_beam" | "desk" => Ok(Self::desk_beam()),
            "desk_handover" => Ok(Self::desk_handover()),
            "full_beam" | "full" => Ok(Self::full_beam()),
            "full_handover" => Ok(Self::full_handover()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidArgument(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Tokens contributed by one frame of `m`.
    pub fn tokens_per_frame(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.tokenizer.image_grid().pow(2),
            Modality::Pointcloud => self.tokenizer.bev_grid().pow(2),
            Modality::Radar => self.tokenizer.radar_tokens,
            Modality::Gps | Modality::Rssi => 1,
        }
    }

    /// Sequence length including the CLS token.
    pub fn token_count(&self) -> usize {
        1 + self.window * self.modalities.iter().map(|&m| self.tokens_per_frame(m)).sum::<usize>()
    }

    /// Smallest legal keep ratio, one token (the CLS) per block.
    pub fn r_min(&self) -> f64 {
        1.0 / self.token_count() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 || self.window == 0 || self.d_ff == 0 || self.d_router == 0 {
            return bad("layers, window, d_ff and d_router must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad(format!("duplicate modality in {:?}", self.modalities));
        }
        if self.task.output_size() == 0 {
            return bad("task output size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma_prime) || self.lambda < 0.0 {
            return bad(format!("gamma_prime {} / lambda {}", self.gamma_prime, self.lambda));
        }
        self.tokenizer.validate()
    }
}
