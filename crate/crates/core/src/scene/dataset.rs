//! Windowed, labeled datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` and `records.bin`. The record
//! file is little-endian:
//!
//! ```text
//! magic   b"MMTD"
//! u32     version (1)
//! u64     frame count
//! ...     per frame: image, pointcloud, radar, gps, rssi as TNSR blobs (f32)
//! ```
//!
//! Overlapping windows share frames, so samples reference frame ids and the
//! manifest records the byte offset of every frame.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render_frame, scenario_seed, simulate_scenario, FrameRecord, Rect, ScenarioConfig, SceneState};
use crate::channel::{best_rss, link_status, optimal_beam};
use crate::error::{Error, Result};
use crate::model::{Modality, Target, Task};
use crate::tensor::{read_tensor, write_tensor, Dtype};
use crate::tokenizers::ModalityFrame;

pub const DATASET_FORMAT: &str = "MMTD-1";
pub const RECORDS_MAGIC: &[u8; 4] = b"MMTD";
pub const RECORDS_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Label {
    Beam { index: usize },
    Handover { status: Vec<u8> },
}

impl Label {
    pub fn target(&self) -> Target {
        match self {
            Label::Beam { index } => Target::Class(*index),
            Label::Handover { status } => Target::Binary(status.iter().map(|&s| f64::from(s)).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Scene at the label frame, enough to recompute the label from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    /// Vehicle antenna positions `(x, y)`; the antenna height is in the config.
    pub vehicles: Vec<[f64; 2]>,
    /// Footprints of every object, vehicles first, then blockers.
    pub footprints: Vec<Rect>,
    pub fading_db: Vec<[f64; 2]>,
    pub los_blocked: Vec<bool>,
}

impl SceneMeta {
    fn from_state(s: &SceneState) -> Self {
        Self {
            vehicles: s.vehicles.iter().map(|v| [v.x, v.y]).collect(),
            footprints: s.objects().map(|o| o.rect()).collect(),
            fading_db: s.fading_db.clone(),
            los_blocked: s.los_blocked.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scenario: usize,
    /// Last input frame within the scenario; the label is for `t + 1`.
    pub t: usize,
    /// Global frame ids, oldest first.
    pub frames: Vec<usize>,
    pub label: Label,
    pub split: Split,
    pub meta: SceneMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub frames: Vec<FrameRecord>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: ScenarioConfig,
    pub frame_count: usize,
    pub frame_offsets: Vec<u64>,
    pub sample_count: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Input frames of sample `i`, with frame indices `0..τ`.
    pub fn window(&self, i: usize, modalities: &[Modality]) -> Vec<ModalityFrame> {
        self.samples[i]
            .frames
            .iter()
            .enumerate()
            .flat_map(|(k, &f)| self.frames[f].modality_frames(modalities, k))
            .collect()
    }

    /// Keeps the first `n` samples of each split and drops unused frames.
    pub fn truncated(&self, n_train: usize, n_val: usize) -> Self {
        let mut keep = Vec::new();
        for (split, n) in [(Split::Train, n_train), (Split::Val, n_val)] {
            keep.extend(self.indices(split).into_iter().take(n));
        }
        keep.sort_unstable();
        let mut remap = vec![usize::MAX; self.frames.len()];
        let mut frames = Vec::new();
        let mut samples = Vec::with_capacity(keep.len());
        for i in keep {
            let mut s = self.samples[i].clone();
            for f in &mut s.frames {
                if remap[*f] == usize::MAX {
                    remap[*f] = frames.len();
                    frames.push(self.frames[*f].clone());
                }
                *f = remap[*f];
            }
            samples.push(s);
        }
        Self { config: self.config.clone(), frames, samples }
    }
}

fn label_at(state: &SceneState, config: &ScenarioConfig, codebook: &crate::channel::BeamCodebook) -> Result<Label> {
    Ok(match config.task {
        Task::Beam { .. } => Label::Beam { index: optimal_beam(&state.paths, codebook, &config.channel, &config.antenna)? },
        Task::Handover { .. } => Label::Handover {
            status: state
                .paths
                .iter()
                .map(|p| Ok(link_status(best_rss(p, codebook, &config.channel, &config.antenna)?, config.channel.s_th_dbm)))
                .collect::<Result<_>>()?,
        },
    })
}

/// Number of scenarios held out for validation.
pub fn val_scenarios(config: &ScenarioConfig) -> usize {
    (config.scenarios as f64 * config.val_fraction).round() as usize
}

/// Simulates every scenario, renders its frames and cuts `F − τ` windows.
pub fn build_dataset(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    if config.frames < config.window + 1 {
        return Err(Error::InvalidArgument(format!(
            "scenario of {} frames is shorter than τ + 1 = {}",
            config.frames,
            config.window + 1
        )));
    }
    let codebook = config.codebook()?;
    let first_val = config.scenarios - val_scenarios(config);
    let mut frames = Vec::with_capacity(config.scenarios * config.frames);
    let mut samples = Vec::with_capacity(config.scenarios * (config.frames - config.window));
    for s in 0..config.scenarios {
        let states = simulate_scenario(config, scenario_seed(config.seed, s))?;
        let base = frames.len();
        frames.extend(states.iter().map(|st| render_frame(st, config)));
        let split = if s < first_val { Split::Train } else { Split::Val };
        for t in config.window - 1..config.frames - 1 {
            let next = &states[t + 1];
            samples.push(Sample {
                scenario: s,
                t,
                frames: (t + 1 - config.window..=t).map(|k| base + k).collect(),
                label: label_at(next, config, &codebook)?,
                split,
                meta: SceneMeta::from_state(next),
            });
        }
    }
    log::info!("built {} samples from {} scenarios", samples.len(), config.scenarios);
    Ok(Dataset { config: config.clone(), frames, samples })
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORDS_MAGIC);
    buf.extend_from_slice(&RECORDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.frames.len() as u64).to_le_bytes());
    let mut offsets = Vec::with_capacity(dataset.frames.len());
    for f in &dataset.frames {
        offsets.push(buf.len() as u64);
        for m in Modality::ALL {
            write_tensor(&mut buf, f.payload(m), Dtype::F32)?;
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config: dataset.config.clone(),
        frame_count: dataset.frames.len(),
        frame_offsets: offsets,
        sample_count: dataset.samples.len(),
        samples: dataset.samples.clone(),
    };
    fs::File::create(dir.join("records.bin"))?.write_all(&buf)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let format = value.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if format != DATASET_FORMAT {
        return Err(Error::Version { expected: DATASET_FORMAT.into(), found: format.into() });
    }
    let manifest: DatasetManifest = serde_json::from_value(value)?;
    if manifest.sample_count != manifest.samples.len() {
        return Err(Error::CountMismatch { manifest: manifest.sample_count, found: manifest.samples.len() });
    }
    if manifest.frame_offsets.len() != manifest.frame_count {
        return Err(Error::CountMismatch { manifest: manifest.frame_count, found: manifest.frame_offsets.len() });
    }
    if let Some(bad) = manifest.samples.iter().flat_map(|s| &s.frames).find(|&&f| f >= manifest.frame_count) {
        return Err(Error::Format(format!("sample references frame {bad} of {}", manifest.frame_count)));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join("records.bin"))?;
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Truncated(format!("records header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != RECORDS_MAGIC {
        return Err(Error::Format(format!("bad records magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RECORDS_VERSION {
        return Err(Error::Version { expected: RECORDS_VERSION.to_string(), found: version.to_string() });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if count != manifest.frame_count {
        return Err(Error::CountMismatch { manifest: manifest.frame_count, found: count });
    }
    let offsets = &manifest.frame_offsets;
    if offsets.first().is_some_and(|&o| o != HEADER_LEN) {
        return Err(Error::CorruptOffsets(format!("first frame at {} instead of {HEADER_LEN}", offsets[0])));
    }
    if let Some(w) = offsets.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::CorruptOffsets(format!("offsets {} and {} not strictly increasing", w, w + 1)));
    }
    let mut cursor = Cursor::new(&bytes[..]);
    cursor.set_position(HEADER_LEN);
    let mut frames = Vec::with_capacity(count);
    for (i, &off) in offsets.iter().enumerate() {
        if cursor.position() != off {
            return Err(Error::CorruptOffsets(format!("frame {i} listed at {off}, found at {}", cursor.position())));
        }
        let mut next = || read_tensor(&mut cursor).map(|(t, _)| t);
        frames.push(FrameRecord { image: next()?, pointcloud: next()?, radar: next()?, gps: next()?, rssi: next()? });
    }
    if cursor.position() != bytes.len() as u64 {
        return Err(Error::CorruptOffsets(format!("{} trailing bytes after the last frame", bytes.len() as u64 - cursor.position())));
    }
    Ok(Dataset { config: manifest.config, frames, samples: manifest.samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task_handover: bool) -> ScenarioConfig {
        let base = if task_handover { ScenarioConfig::desk_handover() } else { ScenarioConfig::desk_beam() };
        ScenarioConfig { frames: 12, scenarios: 3, sensors: super::super::SensorConfig { image_size: 16, ..base.sensors.clone() }, ..base }
    }

    #[test]
    fn window_arithmetic() {
        let cfg = small(false);
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 3 * (12 - 5));
        assert_eq!(ds.frames.len(), 36);
        let s = &ds.samples[0];
        assert_eq!((s.t, s.frames.clone()), (4, vec![0, 1, 2, 3, 4]));
        let one = build_dataset(&ScenarioConfig { frames: 6, scenarios: 1, ..cfg.clone() }).unwrap();
        assert_eq!(one.len(), 1);
        assert!(build_dataset(&ScenarioConfig { frames: 5, ..cfg }).is_err());
    }

    #[test]
    fn split_is_by_scenario_block() {
        let cfg = ScenarioConfig { scenarios: 10, frames: 7, ..small(false) };
        let ds = build_dataset(&cfg).unwrap();
        for s in &ds.samples {
            assert_eq!(s.split == Split::Val, s.scenario == 9);
        }
    }

    #[test]
    fn window_frames_are_reindexed() {
        let ds = build_dataset(&small(true)).unwrap();
        let fr = ds.window(3, &[Modality::Image, Modality::Rssi]);
        assert_eq!(fr.len(), 10);
        assert_eq!(fr.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(matches!(ds.samples[3].label.target(), Target::Binary(ref v) if v.len() == 1));
    }

    #[test]
    fn truncation_keeps_referenced_frames() {
        let ds = build_dataset(&ScenarioConfig { val_fraction: 0.34, ..small(false) }).unwrap();
        let cut = ds.truncated(2, 1);
        assert_eq!(cut.len(), 3);
        assert_eq!(cut.frames.len(), 6 + 5);
        assert_eq!(cut.window(1, &Modality::ALL), ds.window(1, &Modality::ALL));
    }
}
