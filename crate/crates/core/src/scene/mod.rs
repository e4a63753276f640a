//! Synthetic road-side-unit scenarios: vehicle and blocker kinematics,
//! occlusion, idealized sensor renderings and labeled datasets.

mod dataset;

pub use dataset::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{best_rss, build_codebook, direction_angles, AntennaConfig, BeamCodebook, ChannelParams, PropagationPath, RssCombine};
use crate::error::{Error, Result};
use crate::model::{Bounds, Modality, ModelConfig, Task};
use crate::tensor::Tensor;
use crate::tokenizers::ModalityFrame;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed of scenario `index` under `master`.
pub fn scenario_seed(master: u64, index: usize) -> u64 {
    let mut s = master.wrapping_add(GOLDEN.wrapping_mul(index as u64));
    splitmix64(&mut s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSize {
    /// Extent along the road, meters.
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Region covered by the top-down image.
    pub bounds: Bounds,
    /// Spacing of LiDAR returns along object outlines, meters.
    pub lidar_spacing: f64,
    /// Height layers sampled per outline.
    pub lidar_levels: usize,
    pub rssi_noise_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Straight road along world x, centered on the RSU.
    pub road_length: f64,
    pub lanes: usize,
    pub lane_width: f64,
    /// Distance from the RSU to the near road edge along world y.
    pub road_offset: f64,
    pub rsu_height: f64,
    pub antenna_height: f64,
    pub vehicles: usize,
    /// Vehicle speed range, m/s.
    pub speed_range: [f64; 2],
    /// Per-frame lateral jitter std, meters.
    pub lane_jitter: f64,
    pub vehicle_size: ObjectSize,
    /// Chance each of `max_blockers` slots spawns a blocker.
    pub blocker_probability: f64,
    pub max_blockers: usize,
    pub blocker_size: ObjectSize,
    pub blocker_speed_range: [f64; 2],
    /// Δt between frames, seconds.
    pub frame_period: f64,
    pub frames: usize,
    /// τ, frames per input window.
    pub window: usize,
    pub scenarios: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub task: Task,
    pub antenna: AntennaConfig,
    pub channel: ChannelParams,
    /// Draw per-path fading; off gives the deterministic channel.
    pub fading: bool,
    pub sensors: SensorConfig,
}

impl ScenarioConfig {
    /// Scenario generator matched to a model's window, task and sensors.
    pub fn for_model(model: &ModelConfig) -> Self {
        let tc = &model.tokenizer;
        let mut cfg = Self {
            road_length: 100.0,
            lanes: 2,
            lane_width: 4.0,
            road_offset: 6.0,
            rsu_height: 6.0,
            antenna_height: 1.5,
            vehicles: 1,
            speed_range: [1.8, 3.0],
            lane_jitter: 0.1,
            vehicle_size: ObjectSize { length: 4.5, width: 1.8, height: 1.5 },
            blocker_probability: 0.8,
            max_blockers: 2,
            blocker_size: ObjectSize { length: 10.0, width: 2.5, height: 3.5 },
            blocker_speed_range: [1.0, 6.0],
            frame_period: 0.3,
            frames: 105,
            window: model.window,
            scenarios: 20,
            val_fraction: 0.1,
            seed: 0,
            task: model.task,
            antenna: AntennaConfig::default(),
            channel: ChannelParams::default(),
            fading: true,
            sensors: SensorConfig {
                image_size: tc.image_size,
                image_channels: tc.image_channels,
                bounds: tc.bev_bounds,
                lidar_spacing: 0.5,
                lidar_levels: 3,
                rssi_noise_db: 0.5,
            },
        };
        if let Task::Handover { vehicles } = model.task {
            cfg.vehicles = vehicles;
            cfg.channel = ChannelParams {
                combine: RssCombine::PowerSum,
                tx_power_dbm: 48.0,
                reflection_loss_db: 15.0,
                ..ChannelParams::default()
            };
        }
        cfg
    }

    pub fn desk_beam() -> Self {
        Self::for_model(&ModelConfig::desk_beam())
    }

    pub fn desk_handover() -> Self {
        Self::for_model(&ModelConfig::desk_handover())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.vehicles == 0 {
            return bad("a scenario needs at least one vehicle".into());
        }
        if self.window == 0 {
            return bad("window τ must be at least 1".into());
        }
        if !(self.frame_period > 0.0) {
            return bad(format!("frame period {} must be positive", self.frame_period));
        }
        if self.lanes == 0 || !(self.lane_width > 0.0) || !(self.road_length > 0.0) {
            return bad("road needs a positive length and at least one lane".into());
        }
        if !(self.road_offset > 0.0) {
            return bad("road must not pass through the RSU".into());
        }
        if !(self.speed_range[0] <= self.speed_range[1]) || !(self.blocker_speed_range[0] <= self.blocker_speed_range[1]) {
            return bad("speed ranges must be ordered".into());
        }
        if !(0.0..=1.0).contains(&self.blocker_probability) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.sensors.image_size == 0 || self.sensors.image_channels == 0 || !(self.sensors.lidar_spacing > 0.0) {
            return bad("sensor resolution must be positive".into());
        }
        match self.task {
            Task::Beam { classes: 0 } => return bad("codebook needs at least one beam".into()),
            Task::Handover { vehicles } if vehicles != self.vehicles => {
                return bad(format!("handover task tracks {vehicles} vehicles, scenario has {}", self.vehicles))
            }
            _ => {}
        }
        self.channel.validate()
    }

    pub fn codebook(&self) -> Result<BeamCodebook> {
        let size = match self.task {
            Task::Beam { classes } => classes,
            Task::Handover { .. } => 16,
        };
        build_codebook(&self.antenna, size)
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        self.road_offset + self.lane_width * (lane as f64 + 0.5)
    }

    fn road_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Vehicle,
    Blocker,
}

/// Axis-aligned footprint `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Footprint center.
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub size: ObjectSize,
}

impl SceneObject {
    pub fn rect(&self) -> Rect {
        let (hl, hw) = (self.size.length / 2.0, self.size.width / 2.0);
        Rect { x_min: self.x - hl, y_min: self.y - hw, x_max: self.x + hl, y_max: self.y + hw }
    }
}

/// Whether the closed segment `a → b` touches the rectangle.
pub fn segment_hits_rect(a: (f64, f64), b: (f64, f64), r: &Rect) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, dp, lo, hi) in [(a.0, b.0 - a.0, r.x_min, r.x_max), (a.1, b.1 - a.1, r.y_min, r.y_max)] {
        if dp == 0.0 {
            if p < lo || p > hi {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - p) / dp, (hi - p) / dp);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub frame: usize,
    pub time: f64,
    pub vehicles: Vec<SceneObject>,
    pub blockers: Vec<SceneObject>,
    /// Per vehicle: LoS (when clear) then the ground reflection.
    pub paths: Vec<Vec<PropagationPath>>,
    pub los_blocked: Vec<bool>,
    /// Sampled fading per vehicle, `[LoS, reflection]` in dB.
    pub fading_db: Vec<[f64; 2]>,
    /// Best-beam RSS of each vehicle, dBm.
    pub rss_dbm: Vec<f64>,
    /// What the RSSI sensor reports this frame, dBm.
    pub rssi_reading: f64,
}

impl SceneState {
    pub fn objects(&self) -> impl Iterator<Item = &SceneObject> {
        self.vehicles.iter().chain(&self.blockers)
    }
}

/// Whether anything other than `skip` blocks the ground-plane sight line
/// from the RSU to `(x, y)`.
fn occluded(x: f64, y: f64, objects: &[SceneObject], skip: usize) -> bool {
    objects
        .iter()
        .enumerate()
        .any(|(i, o)| i != skip && segment_hits_rect((0.0, 0.0), (x, y), &o.rect()))
}

/// LoS and ground-reflection geometry from the RSU at `(0, 0, h)` to an
/// antenna at `(x, y, z)`. The array faces world +y with its x axis along
/// the road and its y axis pointing up.
pub fn path_geometry(x: f64, y: f64, z: f64, rsu_height: f64) -> [(f64, f64, f64); 2] {
    let geo = |dz: f64| {
        let (theta, phi) = direction_angles(x, dz, y);
        (theta, phi, (x * x + y * y + dz * dz).sqrt())
    };
    [geo(z - rsu_height), geo(-z - rsu_height)]
}

/// Deterministic frame sequence of one scenario.
pub fn simulate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Vec<SceneState>> {
    config.validate()?;
    let codebook = config.codebook()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = config.road_length / 2.0;
    let jitter = Normal::new(0.0, config.lane_jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let fading = Normal::new(0.0, config.channel.xi_std_db).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, config.sensors.rssi_noise_db).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let duration = config.frame_period * config.frames.saturating_sub(1) as f64;

    struct Track {
        x0: f64,
        vx: f64,
        lane_y: f64,
    }
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let tracks: Vec<Track> = (0..config.vehicles)
        .map(|v| {
            let dir = sign(&mut rng);
            let speed = rng.random_range(config.speed_range[0]..=config.speed_range[1]);
            let lane = config.lanes - 1 - v % config.lanes;
            let start = half - rng.random_range(2.0..4.0);
            Track { x0: -dir * start, vx: dir * speed, lane_y: config.lane_center(lane) }
        })
        .collect();

    // Blockers in the near lane are timed to cross the first vehicle's sight line.
    let near_y = config.lane_center(0);
    let target = &tracks[0];
    let mut blockers = Vec::new();
    for _ in 0..config.max_blockers {
        if rng.random::<f64>() >= config.blocker_probability {
            continue;
        }
        let dir = sign(&mut rng);
        let speed = rng.random_range(config.blocker_speed_range[0]..=config.blocker_speed_range[1]);
        let tc = rng.random_range(0.15..0.85) * duration;
        let x_cross = (target.x0 + target.vx * tc) * near_y / target.lane_y;
        blockers.push(Track { x0: x_cross - dir * speed * tc, vx: dir * speed, lane_y: near_y });
    }

    let mut states: Vec<SceneState> = Vec::with_capacity(config.frames);
    for frame in 0..config.frames {
        let time = frame as f64 * config.frame_period;
        let vehicles: Vec<SceneObject> = tracks
            .iter()
            .map(|t| SceneObject {
                kind: ObjectKind::Vehicle,
                x: t.x0 + t.vx * time,
                y: t.lane_y + jitter.sample(&mut rng),
                vx: t.vx,
                vy: 0.0,
                size: config.vehicle_size,
            })
            .collect();
        let blocker_objs: Vec<SceneObject> = blockers
            .iter()
            .map(|t| SceneObject {
                kind: ObjectKind::Blocker,
                x: t.x0 + t.vx * time,
                y: t.lane_y,
                vx: t.vx,
                vy: 0.0,
                size: config.blocker_size,
            })
            .collect();
        let all: Vec<SceneObject> = vehicles.iter().chain(&blocker_objs).copied().collect();

        let mut paths = Vec::with_capacity(vehicles.len());
        let mut los_blocked = Vec::with_capacity(vehicles.len());
        let mut fading_db = Vec::with_capacity(vehicles.len());
        let mut rss_dbm = Vec::with_capacity(vehicles.len());
        for (i, v) in vehicles.iter().enumerate() {
            let xi = if config.fading { [fading.sample(&mut rng), fading.sample(&mut rng)] } else { [0.0, 0.0] };
            let blocked = occluded(v.x, v.y, &all, i);
            let [los, refl] = path_geometry(v.x, v.y, config.antenna_height, config.rsu_height);
            let mut p = Vec::with_capacity(2);
            if !blocked {
                p.push(PropagationPath { azimuth: los.0, elevation: los.1, length: los.2, is_los: true, fading_db: xi[0] });
            }
            p.push(PropagationPath { azimuth: refl.0, elevation: refl.1, length: refl.2, is_los: false, fading_db: xi[1] });
            rss_dbm.push(best_rss(&p, &codebook, &config.channel, &config.antenna)?);
            paths.push(p);
            los_blocked.push(blocked);
            fading_db.push(xi);
        }
        let measured = states.last().map_or(rss_dbm[0], |s| s.rss_dbm[0]);
        let rssi_reading = measured + noise.sample(&mut rng);
        states.push(SceneState {
            frame,
            time,
            vehicles,
            blockers: blocker_objs,
            paths,
            los_blocked,
            fading_db,
            rss_dbm,
            rssi_reading,
        });
    }
    Ok(states)
}

/// All five sensor payloads of one frame, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    /// `[H, W, C]`.
    pub image: Tensor,
    /// `[P, 4]` rows `(x, y, z, reflectivity)`.
    pub pointcloud: Tensor,
    /// `[R, 5]` rows `(radial velocity, azimuth, altitude, depth, magnitude)`.
    pub radar: Tensor,
    pub gps: Tensor,
    pub rssi: Tensor,
}

impl FrameRecord {
    pub fn payload(&self, kind: Modality) -> &Tensor {
        match kind {
            Modality::Image => &self.image,
            Modality::Pointcloud => &self.pointcloud,
            Modality::Radar => &self.radar,
            Modality::Gps => &self.gps,
            Modality::Rssi => &self.rssi,
        }
    }

    pub fn modality_frames(&self, modalities: &[Modality], frame_index: usize) -> Vec<ModalityFrame> {
        modalities
            .iter()
            .map(|&m| ModalityFrame::new(m, self.payload(m).clone(), frame_index))
            .collect()
    }
}

fn intensity(kind: ObjectKind) -> f64 {
    match kind {
        ObjectKind::Vehicle => 1.0,
        ObjectKind::Blocker => 0.5,
    }
}

/// Top-down grayscale image; row 0 is the `y_min` edge, column 0 the `x_min` edge.
pub fn render_image(objects: &[SceneObject], sensors: &SensorConfig) -> Tensor {
    let (n, c, b) = (sensors.image_size, sensors.image_channels, &sensors.bounds);
    let mut data = vec![0.0; n * n * c];
    for o in objects {
        let r = o.rect();
        for row in 0..n {
            let y = b.y_min + (row as f64 + 0.5) / n as f64 * (b.y_max - b.y_min);
            if y < r.y_min || y > r.y_max {
                continue;
            }
            for col in 0..n {
                let x = b.x_min + (col as f64 + 0.5) / n as f64 * (b.x_max - b.x_min);
                if r.contains(x, y) {
                    let cell = &mut data[(row * n + col) * c..(row * n + col + 1) * c];
                    for v in cell {
                        *v = f64::max(*v, intensity(o.kind));
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n, c], data)
}

pub fn render_pointcloud(objects: &[SceneObject], sensors: &SensorConfig) -> Tensor {
    let mut data = Vec::new();
    for o in objects {
        let r = o.rect();
        let corners = [(r.x_min, r.y_min), (r.x_max, r.y_min), (r.x_max, r.y_max), (r.x_min, r.y_max)];
        for level in 0..sensors.lidar_levels {
            let z = o.size.height * (level as f64 + 1.0) / sensors.lidar_levels as f64;
            for e in 0..4 {
                let (a, b) = (corners[e], corners[(e + 1) % 4]);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let steps = ((len / sensors.lidar_spacing).ceil() as usize).max(1);
                for k in 0..steps {
                    let t = k as f64 / steps as f64;
                    data.extend_from_slice(&[a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), z, intensity(o.kind)]);
                }
            }
        }
    }
    let rows = data.len() / 4;
    Tensor::from_parts(vec![rows, 4], data)
}

/// One return per object whose center the RSU can see.
pub fn render_radar(objects: &[SceneObject], rsu_height: f64) -> Tensor {
    let mut data = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if occluded(o.x, o.y, objects, i) {
            continue;
        }
        let (dx, dy, dz) = (o.x, o.y, o.size.height / 2.0 - rsu_height);
        let ground = dx.hypot(dy);
        let depth = (ground * ground + dz * dz).sqrt();
        let velocity = (o.vx * dx + o.vy * dy) / depth;
        data.extend_from_slice(&[velocity, dx.atan2(dy), dz.atan2(ground), depth, 1.0 / (depth * depth)]);
    }
    let rows = data.len() / 5;
    Tensor::from_parts(vec![rows, 5], data)
}

pub fn render_frame(state: &SceneState, config: &ScenarioConfig) -> FrameRecord {
    let objects: Vec<SceneObject> = state.objects().copied().collect();
    let gps = match state.vehicles.first() {
        Some(v) => vec![
            2.0 * (v.x + config.road_length / 2.0) / config.road_length - 1.0,
            2.0 * (v.y - config.road_offset) / config.road_width() - 1.0,
        ],
        None => vec![0.0, 0.0],
    };
    FrameRecord {
        image: render_image(&objects, &config.sensors).to_f32_precision(),
        pointcloud: render_pointcloud(&objects, &config.sensors).to_f32_precision(),
        radar: render_radar(&objects, config.rsu_height).to_f32_precision(),
        gps: Tensor::from_parts(vec![2], gps).to_f32_precision(),
        rssi: Tensor::from_parts(vec![1], vec![state.rssi_reading]).to_f32_precision(),
    }
}
