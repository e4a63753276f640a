//! Modality tokenizers and sequence assembly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Bounds, Modality, ModelConfig, PoolMode, TokenizerConfig};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFrame {
    pub kind: Modality,
    /// Image `H×W×C`; pointcloud `P×4` rows `(x, y, z, feature)`; radar
    /// `R×4` or `R×5` (explicit magnitude last); gps `[2]`; rssi `[1]` in dBm.
    pub payload: Tensor,
    pub frame_index: usize,
}

impl ModalityFrame {
    pub fn new(kind: Modality, payload: Tensor, frame_index: usize) -> Self {
        Self { kind, payload, frame_index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    /// `None` for the CLS token.
    pub modality: Option<Modality>,
    pub frame_index: usize,
    /// Index within the modality's tokens for one frame.
    pub position: usize,
    pub is_cls: bool,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `N×d` token matrix.
    pub tokens: NodeId,
    pub layout: Vec<TokenInfo>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    conv_a: Conv,
    conv_b: Conv,
    down: Conv,
}

/// Stem, two residual stages with stride-2 downsampling, then a per-cell
/// projection to `d`.
#[derive(Debug, Clone, Copy)]
pub struct ConvStackParams {
    stem: Conv,
    stages: [Stage; 2],
    proj: Linear,
    stem_stride: usize,
    stem_kernel: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    first: Linear,
    second: Linear,
}

#[derive(Debug, Clone)]
pub struct TokenizerParams {
    pub image: Option<ConvStackParams>,
    pub pointcloud: Option<ConvStackParams>,
    pub radar: Option<MlpParams>,
    pub gps: Option<MlpParams>,
    pub rssi: Option<MlpParams>,
    /// Per-modality position tables, indexed like `config.modalities`.
    pub position: Vec<ParamId>,
    pub time: ParamId,
    pub modality: ParamId,
    pub cls: ParamId,
}

struct Builder<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..c_out * c_in * k * k).map(|_| normal.sample(self.rng)).collect();
        let w = Tensor::new(&[c_out, c_in, k, k], data).expect("consistent shape");
        Conv {
            w: self.store.add(format!("{name}.w"), ParamGroup::Tokenizer, w),
            b: self.store.zeros(format!("{name}.b"), ParamGroup::Tokenizer, &[c_out]),
        }
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.trunc_normal(format!("{name}.w"), group, &[fan_in, fan_out], self.rng),
            b: self.store.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    fn conv_stack(&mut self, name: &str, in_channels: usize, cfg: &TokenizerConfig, d: usize) -> ConvStackParams {
        let [c0, c1] = cfg.conv_channels;
        let k = cfg.stem_kernel();
        let stem = self.conv(&format!("{name}.stem"), c0, in_channels, k);
        let mut stage = |i: usize, c: usize, c_next: usize| Stage {
            conv_a: self.conv(&format!("{name}.stage{i}.conv_a"), c, c, 3),
            conv_b: self.conv(&format!("{name}.stage{i}.conv_b"), c, c, 3),
            down: self.conv(&format!("{name}.stage{i}.down"), c_next, c, 3),
        };
        let stages = [stage(0, c0, c1), stage(1, c1, c1)];
        let proj = self.linear(&format!("{name}.proj"), ParamGroup::Tokenizer, c1, d);
        ConvStackParams { stem, stages, proj, stem_stride: cfg.stem_stride, stem_kernel: k }
    }

    fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, d: usize) -> MlpParams {
        MlpParams {
            first: self.linear(&format!("{name}.fc1"), ParamGroup::Tokenizer, fan_in, hidden),
            second: self.linear(&format!("{name}.fc2"), ParamGroup::Tokenizer, hidden, d),
        }
    }
}

impl TokenizerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let cfg = &config.tokenizer;
        let d = config.d;
        let has = |m| config.modalities.contains(&m);
        let mut b = Builder { store, rng };
        let image = has(Modality::Image).then(|| b.conv_stack("tok.image", cfg.image_channels, cfg, d));
        let pointcloud = has(Modality::Pointcloud).then(|| b.conv_stack("tok.pointcloud", 1, cfg, d));
        let radar = has(Modality::Radar).then(|| b.mlp("tok.radar", 4, cfg.radar_hidden, d));
        let gps = has(Modality::Gps).then(|| b.mlp("tok.gps", 2, cfg.scalar_hidden, d));
        let rssi = has(Modality::Rssi).then(|| b.mlp("tok.rssi", 1, cfg.scalar_hidden, d));

        let share = cfg.share_position_embedding
            && has(Modality::Image)
            && config.tokens_per_frame(Modality::Image) == config.tokens_per_frame(Modality::Pointcloud);
        let mut image_table = None;
        let mut position = Vec::new();
        for &m in &config.modalities {
            let id = match (m, image_table) {
                (Modality::Pointcloud, Some(id)) if share => id,
                _ => {
                    let shape = [config.tokens_per_frame(m), d];
                    b.store.trunc_normal(format!("emb.position.{}", m.name()), ParamGroup::Tokenizer, &shape, b.rng)
                }
            };
            if m == Modality::Image {
                image_table = Some(id);
            }
            position.push(id);
        }
        let time = b.store.trunc_normal("emb.time", ParamGroup::Tokenizer, &[config.window, d], b.rng);
        let modality =
            b.store.trunc_normal("emb.modality", ParamGroup::Tokenizer, &[config.modalities.len(), d], b.rng);
        let cls = b.store.trunc_normal("emb.cls", ParamGroup::Tokenizer, &[1, d], b.rng);
        Self { image, pointcloud, radar, gps, rssi, position, time, modality, cls }
    }
}

fn conv_gelu(g: &mut Graph, p: &Bound, x: NodeId, c: Conv, stride: usize, pad: usize) -> Result<NodeId> {
    let y = g.conv2d(x, p[c.w], Some(p[c.b]), stride, pad)?;
    g.gelu(y)
}

/// `x: [B, C, H, W]` → `[B, g², d]`.
fn run_conv_stack(g: &mut Graph, p: &Bound, s: &ConvStackParams, x: NodeId) -> Result<NodeId> {
    let mut h = conv_gelu(g, p, x, s.stem, s.stem_stride, s.stem_kernel / 2)?;
    for st in &s.stages {
        let a = conv_gelu(g, p, h, st.conv_a, 1, 1)?;
        let bb = g.conv2d(a, p[st.conv_b.w], Some(p[st.conv_b.b]), 1, 1)?;
        let sum = g.add(h, bb)?;
        h = g.gelu(sum)?;
        h = conv_gelu(g, p, h, st.down, 2, 1)?;
    }
    let shape = g.value(h).shape().to_vec();
    let flat = g.reshape(h, &[shape[0], shape[1], shape[2] * shape[3]])?;
    let cells = g.transpose(flat, 1, 2)?;
    g.linear(cells, p[s.proj.w], Some(p[s.proj.b]))
}

fn run_mlp(g: &mut Graph, p: &Bound, m: &MlpParams, x: NodeId) -> Result<NodeId> {
    let h = g.linear(x, p[m.first.w], Some(p[m.first.b]))?;
    let h = g.gelu(h)?;
    g.linear(h, p[m.second.w], Some(p[m.second.b]))
}

fn missing(what: Modality) -> Error {
    Error::InvalidArgument(format!("model has no {} tokenizer", what.name()))
}

fn check_kind(frame: &ModalityFrame, kind: Modality) -> Result<()> {
    if frame.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {} frame, got {}",
            kind.name(),
            frame.kind.name()
        )));
    }
    if !frame.payload.is_finite() {
        return Err(Error::NonFinite { op: "tokenize" });
    }
    Ok(())
}

/// `H×W×C` image payloads → `[B, C, H, W]`.
fn image_batch(frames: &[&ModalityFrame], cfg: &TokenizerConfig) -> Result<Tensor> {
    let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.image_channels);
    let mut data = Vec::with_capacity(frames.len() * h * w * c);
    for f in frames {
        check_kind(f, Modality::Image)?;
        if f.payload.shape() != [h, w, c] {
            return Err(Error::Shape {
                op: "tokenize_image",
                detail: format!("expected payload [{h}, {w}, {c}], got {:?}", f.payload.shape()),
            });
        }
        let src = f.payload.data();
        for ch in 0..c {
            data.extend((0..h * w).map(|i| src[i * c + ch]));
        }
    }
    Tensor::new(&[frames.len(), c, h, w], data)
}

/// Bird's-eye-view grid `[1, H, W]` of point features; points at or below
/// the ground height or outside the bounds are dropped.
pub fn rasterize_bev(points: &Tensor, size: usize, bounds: &Bounds, ground: f64, pool: PoolMode) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 4 {
        return Err(Error::Shape {
            op: "rasterize_bev",
            detail: format!("expected points [P, 4], got {:?}", points.shape()),
        });
    }
    let mut grid = vec![0.0; size * size];
    let mut hit = vec![false; size * size];
    for i in 0..points.shape()[0] {
        let &[x, y, z, feat] = points.row(i) else { unreachable!() };
        if z <= ground || !bounds.contains(x, y) {
            continue;
        }
        let col = ((x - bounds.x_min) / (bounds.x_max - bounds.x_min) * size as f64) as usize;
        let row = ((y - bounds.y_min) / (bounds.y_max - bounds.y_min) * size as f64) as usize;
        let cell = row.min(size - 1) * size + col.min(size - 1);
        match pool {
            PoolMode::Sum => grid[cell] += feat,
            PoolMode::Max => grid[cell] = if hit[cell] { grid[cell].max(feat) } else { feat },
        }
        hit[cell] = true;
    }
    Tensor::new(&[1, size, size], grid)
}

fn bev_batch(frames: &[&ModalityFrame], cfg: &TokenizerConfig) -> Result<Tensor> {
    let mut data = Vec::new();
    for f in frames {
        check_kind(f, Modality::Pointcloud)?;
        let grid = rasterize_bev(&f.payload, cfg.bev_size, &cfg.bev_bounds, cfg.ground_height, cfg.bev_pool)?;
        data.extend_from_slice(grid.data());
    }
    Tensor::new(&[frames.len(), 1, cfg.bev_size, cfg.bev_size], data)
}

/// Rows of a radar payload with the largest return magnitude, best first;
/// ties go to the lower row index.
pub fn select_radar_rows(payload: &Tensor, n_rad: usize) -> Result<Vec<usize>> {
    let cols = payload.shape().get(1).copied().unwrap_or(0);
    if payload.rank() != 2 || !(cols == 4 || cols == 5) {
        return Err(Error::Shape {
            op: "tokenize_radar",
            detail: format!("expected payload [R, 4] or [R, 5], got {:?}", payload.shape()),
        });
    }
    let mag = |i: usize| payload.row(i)[cols - 1];
    let mut order: Vec<usize> = (0..payload.shape()[0]).collect();
    order.sort_by(|&a, &b| mag(b).total_cmp(&mag(a)).then(a.cmp(&b)));
    order.truncate(n_rad);
    Ok(order)
}

fn radar_batch(frames: &[&ModalityFrame], cfg: &TokenizerConfig) -> Result<Tensor> {
    let n = cfg.radar_tokens;
    let mut data = vec![0.0; frames.len() * n * 4];
    for (fi, f) in frames.iter().enumerate() {
        check_kind(f, Modality::Radar)?;
        for (slot, row) in select_radar_rows(&f.payload, n)?.into_iter().enumerate() {
            let src = f.payload.row(row);
            for c in 0..4 {
                data[(fi * n + slot) * 4 + c] = src[c] * cfg.radar_scale[c];
            }
        }
    }
    Tensor::new(&[frames.len(), n, 4], data)
}

fn scalar_batch(frames: &[&ModalityFrame], kind: Modality, cfg: &TokenizerConfig) -> Result<Tensor> {
    let width = if kind == Modality::Gps { 2 } else { 1 };
    let mut data = Vec::with_capacity(frames.len() * width);
    for f in frames {
        check_kind(f, kind)?;
        if f.payload.numel() != width {
            return Err(Error::Shape {
                op: "tokenize_scalar",
                detail: format!("{} payload needs {width} values, got {:?}", kind.name(), f.payload.shape()),
            });
        }
        match kind {
            Modality::Rssi => data.push((f.payload.data()[0] - cfg.rssi_offset) / cfg.rssi_scale),
            _ => data.extend_from_slice(f.payload.data()),
        }
    }
    Tensor::new(&[frames.len(), 1, width], data)
}

/// Tokens `[B, n, d]` for a batch of same-kind frames.
fn tokenize_batch(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    kind: Modality,
    frames: &[&ModalityFrame],
) -> Result<NodeId> {
    match kind {
        Modality::Image => {
            let s = params.image.as_ref().ok_or_else(|| missing(kind))?;
            let x = g.constant(image_batch(frames, cfg)?)?;
            run_conv_stack(g, p, s, x)
        }
        Modality::Pointcloud => {
            let s = params.pointcloud.as_ref().ok_or_else(|| missing(kind))?;
            let x = g.constant(bev_batch(frames, cfg)?)?;
            run_conv_stack(g, p, s, x)
        }
        Modality::Radar => {
            let m = params.radar.as_ref().ok_or_else(|| missing(kind))?;
            let x = g.constant(radar_batch(frames, cfg)?)?;
            run_mlp(g, p, m, x)
        }
        Modality::Gps | Modality::Rssi => {
            let m = if kind == Modality::Gps { params.gps.as_ref() } else { params.rssi.as_ref() };
            let m = m.ok_or_else(|| missing(kind))?;
            let x = g.constant(scalar_batch(frames, kind, cfg)?)?;
            run_mlp(g, p, m, x)
        }
    }
}

fn single(g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
    let s = g.value(tokens).shape().to_vec();
    g.reshape(tokens, &[s[1], s[2]])
}

/// `g²×d` tokens for one image frame.
pub fn tokenize_image(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    frame: &ModalityFrame,
) -> Result<NodeId> {
    let t = tokenize_batch(g, p, params, cfg, Modality::Image, &[frame])?;
    single(g, t)
}

/// `g²×d` tokens for one LiDAR frame.
pub fn tokenize_pointcloud(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    frame: &ModalityFrame,
) -> Result<NodeId> {
    let t = tokenize_batch(g, p, params, cfg, Modality::Pointcloud, &[frame])?;
    single(g, t)
}

/// `N_rad×d` tokens for one radar frame.
pub fn tokenize_radar(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    frame: &ModalityFrame,
) -> Result<NodeId> {
    let t = tokenize_batch(g, p, params, cfg, Modality::Radar, &[frame])?;
    single(g, t)
}

/// One `1×d` token for a GPS or RSSI frame.
pub fn tokenize_scalar(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    cfg: &TokenizerConfig,
    frame: &ModalityFrame,
) -> Result<NodeId> {
    let t = tokenize_batch(g, p, params, cfg, frame.kind, &[frame])?;
    single(g, t)
}

/// Groups `frames` by configured modality, each sorted by frame index, or
/// reports every missing or duplicated `(modality, frame)` slot.
pub fn group_frames<'a>(config: &ModelConfig, frames: &'a [ModalityFrame]) -> Result<Vec<Vec<&'a ModalityFrame>>> {
    let tau = config.window;
    let mut slots: Vec<Vec<Option<&ModalityFrame>>> = vec![vec![None; tau]; config.modalities.len()];
    let mut problems = Vec::new();
    for f in frames {
        let Some(m) = config.modalities.iter().position(|&m| m == f.kind) else {
            problems.push(format!("unexpected {} frame", f.kind.name()));
            continue;
        };
        if f.frame_index >= tau {
            problems.push(format!("{} frame index {} ≥ window {tau}", f.kind.name(), f.frame_index));
            continue;
        }
        let slot = &mut slots[m][f.frame_index];
        if slot.is_some() {
            problems.push(format!("duplicate {} frame {}", f.kind.name(), f.frame_index));
        }
        *slot = Some(f);
    }
    for (m, row) in config.modalities.iter().zip(&slots) {
        for (t, s) in row.iter().enumerate() {
            if s.is_none() {
                problems.push(format!("missing {} frame {t}", m.name()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::MissingInput(problems.join(", ")));
    }
    Ok(slots.into_iter().map(|row| row.into_iter().flatten().collect()).collect())
}

/// CLS followed by, for each frame in order, every configured modality's
/// tokens with position, time and modality embeddings added.
pub fn assemble_sequence(
    g: &mut Graph,
    p: &Bound,
    params: &TokenizerParams,
    config: &ModelConfig,
    frames: &[ModalityFrame],
) -> Result<TokenSequence> {
    let grouped = group_frames(config, frames)?;
    let (tau, d) = (config.window, config.d);
    let time = g.reshape(p[params.time], &[tau, 1, d])?;
    let mut blocks = Vec::with_capacity(grouped.len());
    for (mi, (&kind, batch)) in config.modalities.iter().zip(&grouped).enumerate() {
        let tokens = tokenize_batch(g, p, params, &config.tokenizer, kind, batch)?;
        let with_pos = g.add(tokens, p[params.position[mi]])?;
        let with_time = g.add(with_pos, time)?;
        let emb = g.gather_rows(p[params.modality], &[mi])?;
        blocks.push(g.add(with_time, emb)?);
    }
    let per_frame: usize = config.modalities.iter().map(|&m| config.tokens_per_frame(m)).sum();
    let joined = if blocks.len() == 1 { blocks[0] } else { g.concat(&blocks, 1)? };
    let flat = g.reshape(joined, &[tau * per_frame, d])?;
    let tokens = g.concat(&[p[params.cls], flat], 0)?;

    let mut layout = Vec::with_capacity(1 + tau * per_frame);
    layout.push(TokenInfo { modality: None, frame_index: 0, position: 0, is_cls: true });
    for t in 0..tau {
        for &m in &config.modalities {
            layout.extend((0..config.tokens_per_frame(m)).map(|position| TokenInfo {
                modality: Some(m),
                frame_index: t,
                position,
                is_cls: false,
            }));
        }
    }
    debug_assert_eq!(layout.len(), config.token_count());
    Ok(TokenSequence { tokens, layout })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zero_frame(config: &ModelConfig, kind: Modality, t: usize) -> ModalityFrame {
        let c = &config.tokenizer;
        let payload = match kind {
            Modality::Image => Tensor::zeros(&[c.image_size, c.image_size, c.image_channels]),
            Modality::Pointcloud => Tensor::zeros(&[0, 4]),
            Modality::Radar => Tensor::zeros(&[0, 5]),
            Modality::Gps => Tensor::zeros(&[2]),
            Modality::Rssi => Tensor::vector(&[c.rssi_offset]),
        };
        ModalityFrame::new(kind, payload, t)
    }

    fn all_frames(config: &ModelConfig) -> Vec<ModalityFrame> {
        (0..config.window)
            .flat_map(|t| config.modalities.iter().map(move |&m| (m, t)))
            .map(|(m, t)| zero_frame(config, m, t))
            .collect()
    }

    fn setup(config: &ModelConfig) -> (ParamStore, TokenizerParams) {
        let mut store = ParamStore::new();
        let params = TokenizerParams::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0));
        (store, params)
    }

    #[test]
    fn desk_sequence_has_206_tokens() {
        let config = ModelConfig::desk_beam();
        let (store, params) = setup(&config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let seq = assemble_sequence(&mut g, &p, &params, &config, &all_frames(&config)).unwrap();
        assert_eq!(seq.len(), 206);
        assert_eq!(g.value(seq.tokens).shape(), &[206, 32]);
        assert!(seq.layout[0].is_cls);
        assert_eq!(seq.layout.iter().filter(|t| t.is_cls).count(), 1);
    }

    #[test]
    fn zero_inputs_with_zero_biases_give_zero_tokens() {
        let config = ModelConfig::desk_beam();
        let (store, params) = setup(&config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        for kind in [Modality::Image, Modality::Pointcloud, Modality::Radar, Modality::Gps] {
            let f = zero_frame(&config, kind, 0);
            let t = match kind {
                Modality::Image => tokenize_image(&mut g, &p, &params, &config.tokenizer, &f),
                Modality::Pointcloud => tokenize_pointcloud(&mut g, &p, &params, &config.tokenizer, &f),
                Modality::Radar => tokenize_radar(&mut g, &p, &params, &config.tokenizer, &f),
                _ => tokenize_scalar(&mut g, &p, &params, &config.tokenizer, &f),
            }
            .unwrap();
            let v = g.value(t);
            assert_eq!(v.shape(), &[config.tokens_per_frame(kind), 32]);
            assert!(v.data().iter().all(|&x| x == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn wrong_resolution_names_both_shapes() {
        let config = ModelConfig::desk_beam();
        let (store, params) = setup(&config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let f = ModalityFrame::new(Modality::Image, Tensor::zeros(&[32, 32, 1]), 0);
        let err = tokenize_image(&mut g, &p, &params, &config.tokenizer, &f).unwrap_err().to_string();
        assert!(err.contains("[64, 64, 1]") && err.contains("[32, 32, 1]"), "{err}");
    }

    #[test]
    fn radar_selection_ranks_by_magnitude_with_index_ties() {
        let mags = [9.0, 1.0, 5.0, 5.0, 7.0];
        let rows: Vec<f64> = mags.iter().flat_map(|&m| [0.0, 0.0, 0.0, 1.0, m]).collect();
        let payload = Tensor::new(&[5, 5], rows).unwrap();
        assert_eq!(select_radar_rows(&payload, 4).unwrap(), vec![0, 4, 2, 3]);
    }

    #[test]
    fn bev_rasterization_examples() {
        let b = Bounds { x_min: 0.0, x_max: 4.0, y_min: 0.0, y_max: 4.0 };
        let one = Tensor::new(&[1, 4], vec![1.5, 2.5, 1.0, 2.0]).unwrap();
        let grid = rasterize_bev(&one, 4, &b, 0.2, PoolMode::Sum).unwrap();
        let nonzero: Vec<usize> = (0..16).filter(|&i| grid.data()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![2 * 4 + 1]);

        let two = Tensor::new(&[3, 4], vec![0.2, 0.2, 1.0, 1.0, 0.7, 0.9, 2.0, 3.0, 0.5, 0.5, 0.0, 9.0]).unwrap();
        let grid = rasterize_bev(&two, 4, &b, 0.2, PoolMode::Sum).unwrap();
        assert_eq!(grid.data()[0], 4.0);
        assert_eq!(grid.data().iter().sum::<f64>(), 4.0);
        let grid = rasterize_bev(&two, 4, &b, 0.2, PoolMode::Max).unwrap();
        assert_eq!(grid.data()[0], 3.0);
    }

    #[test]
    fn missing_frames_are_listed() {
        let config = ModelConfig::desk_beam();
        let (store, params) = setup(&config);
        let mut frames = all_frames(&config);
        frames.retain(|f| !(f.kind == Modality::Radar && f.frame_index == 3));
        frames.retain(|f| !(f.kind == Modality::Gps && f.frame_index == 0));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let err = assemble_sequence(&mut g, &p, &params, &config, &frames).unwrap_err().to_string();
        assert!(err.contains("missing radar frame 3") && err.contains("missing gps frame 0"), "{err}");
    }

    #[test]
    fn gps_is_order_sensitive() {
        let config = ModelConfig::desk_beam();
        let (store, params) = setup(&config);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let a = ModalityFrame::new(Modality::Gps, Tensor::vector(&[0.3, -0.6]), 0);
        let b = ModalityFrame::new(Modality::Gps, Tensor::vector(&[-0.6, 0.3]), 0);
        let ta = tokenize_scalar(&mut g, &p, &params, &config.tokenizer, &a).unwrap();
        let tb = tokenize_scalar(&mut g, &p, &params, &config.tokenizer, &b).unwrap();
        assert!(g.value(ta).max_abs_diff(g.value(tb)) > 0.0);
    }

    #[test]
    fn shared_position_table_is_reused() {
        let mut config = ModelConfig::desk_beam();
        config.tokenizer.share_position_embedding = true;
        let (_, params) = setup(&config);
        assert_eq!(params.position[0], params.position[1]);
        let (_, params) = setup(&ModelConfig::desk_beam());
        assert_ne!(params.position[0], params.position[1]);
    }
}
