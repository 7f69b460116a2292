//! Binary trajectory and checkpoint files, dataset splits and CSV import.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, DffError, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::scorenet::{ModelConfig, NoisePredictor, ScoreModel};
use crate::trainer::{LossWeighting, TrainConfig, TrainerState};

pub const TRAJ_MAGIC: &[u8; 8] = b"DFFTRAJ1";
pub const TRAJ_VERSION: u32 = 1;
pub const CKPT_MAGIC: &[u8; 8] = b"DFFCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Oracle = 0,
    Simulation = 1,
    Iid = 2,
    External = 3,
}

impl Provenance {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Provenance::Oracle,
            1 => Provenance::Simulation,
            2 => Provenance::Iid,
            3 => Provenance::External,
            _ => return None,
        })
    }
}

/// Frames stored in single precision, frame-major, bead-major, coordinate-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_beads: usize,
    dim: usize,
    frames: Vec<f32>,
    pub kt: f64,
    /// Integration timestep; 0 for i.i.d. samples.
    pub dt: f64,
    /// Steps between saved frames; 0 for i.i.d. samples.
    pub save_every: u64,
    pub provenance: Provenance,
    /// Start index of every segment after the first.
    segments: Vec<u64>,
}

impl Trajectory {
    pub fn new(n_beads: usize, dim: usize, frames: Vec<f32>, kt: f64, provenance: Provenance) -> Result<Self> {
        if n_beads == 0 || dim == 0 {
            return Err(invalid("trajectory needs n_beads >= 1 and dim >= 1"));
        }
        if !frames.len().is_multiple_of(n_beads * dim) {
            return Err(invalid(format!(
                "{} values do not form whole frames of {} beads x {} dims",
                frames.len(),
                n_beads,
                dim
            )));
        }
        if let Some(k) = frames.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "frame {} holds a non-finite coordinate",
                k / (n_beads * dim)
            )));
        }
        Ok(Self {
            n_beads,
            dim,
            frames,
            kt,
            dt: 0.0,
            save_every: 0,
            provenance,
            segments: Vec::new(),
        })
    }

    /// Rounds double-precision frames to single precision.
    pub fn from_f64(n_beads: usize, dim: usize, frames: &[f64], kt: f64, provenance: Provenance) -> Result<Self> {
        Self::new(n_beads, dim, frames.iter().map(|&v| v as f32).collect(), kt, provenance)
    }

    pub fn with_timing(mut self, dt: f64, save_every: u64) -> Self {
        self.dt = dt;
        self.save_every = save_every;
        self
    }

    pub fn with_segments(mut self, segments: Vec<u64>) -> Result<Self> {
        check_segments(&segments, self.n_frames() as u64)?;
        self.segments = segments;
        Ok(self)
    }

    pub fn n_beads(&self) -> usize {
        self.n_beads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_len(&self) -> usize {
        self.n_beads * self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let c = self.frame_len();
        &self.frames[i * c..(i + 1) * c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&v| v as f64).collect()
    }

    pub fn segments(&self) -> &[u64] {
        &self.segments
    }

    /// Half-open frame ranges of the segments.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        let mut starts = vec![0usize];
        starts.extend(self.segments.iter().map(|&s| s as usize));
        let n = self.n_frames();
        starts
            .iter()
            .enumerate()
            .map(|(k, &s)| (s, starts.get(k + 1).copied().unwrap_or(n)))
            .filter(|(s, e)| e > s)
            .collect()
    }

    /// Frames at `indices` (in that order), without segment boundaries.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let c = self.frame_len();
        let mut frames = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.n_frames() {
                return Err(invalid(format!("frame index {i} out of range")));
            }
            frames.extend_from_slice(self.frame(i));
        }
        Ok(Self {
            frames,
            segments: Vec::new(),
            ..self.clone()
        })
    }

    pub fn header_len(&self) -> usize {
        8 + 4 * 3 + 8 + 8 + 8 + 8 + 1 + 4 + 8 * self.segments.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.header_len() + self.frames.len() * 4);
        b.extend_from_slice(TRAJ_MAGIC);
        b.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.n_beads as u32).to_le_bytes());
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.n_frames() as u64).to_le_bytes());
        b.extend_from_slice(&self.kt.to_le_bytes());
        b.extend_from_slice(&self.dt.to_le_bytes());
        b.extend_from_slice(&self.save_every.to_le_bytes());
        b.push(self.provenance as u8);
        b.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            b.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.frames {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(8)? != TRAJ_MAGIC {
            return Err(r.format("not a trajectory file (bad magic)"));
        }
        let version = r.u32()?;
        if version != TRAJ_VERSION {
            return Err(r.format(&format!("unsupported trajectory version {version}")));
        }
        let n_beads = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let n_frames = r.u64()?;
        let kt = r.f64()?;
        let dt = r.f64()?;
        let save_every = r.u64()?;
        let prov = r.take(1)?[0];
        let provenance =
            Provenance::from_u8(prov).ok_or_else(|| r.format(&format!("unknown provenance tag {prov}")))?;
        let n_segments = r.u32()? as usize;
        let header = r.pos + n_segments * 8;
        if n_beads == 0 || dim == 0 {
            return Err(r.format("zero beads or dimensions"));
        }
        let payload = (n_frames as usize)
            .checked_mul(n_beads * dim * 4)
            .ok_or_else(|| r.format("frame count overflows"))?;
        let expected = (header + payload) as u64;
        if bytes.len() as u64 != expected {
            return Err(DffError::Corruption {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let segments = (0..n_segments).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let frames: Vec<f32> = r
            .take(payload)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let traj = Trajectory::new(n_beads, dim, frames, kt, provenance)
            .map_err(|e| r.format(&e.to_string()))?
            .with_timing(dt, save_every);
        traj.with_segments(segments).map_err(|e| r.format(&e.to_string()))
    }
}

fn check_segments(segments: &[u64], n_frames: u64) -> Result<()> {
    let mut prev = 0;
    for &s in segments {
        if s <= prev || s >= n_frames {
            return Err(invalid(format!(
                "segment boundary {s} is not strictly increasing inside (0, {n_frames})"
            )));
        }
        prev = s;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(DffError::Corruption {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format(&self, detail: &str) -> DffError {
        DffError::Format {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    write_file(path.as_ref(), &traj.to_bytes())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    Trajectory::from_bytes(&fs::read(path)?, path)
}

/// A named array of doubles with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![v],
        }
    }
}

/// Serializes named arrays in the tagged checkpoint container.
pub fn encode_container(entries: &[(String, Entry)]) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(CKPT_MAGIC);
    for (name, e) in entries {
        let n = name.as_bytes();
        if n.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
            return Err(invalid(format!("entry {name} is too large to encode")));
        }
        if e.dims.iter().product::<usize>() != e.data.len() {
            return Err(invalid(format!("entry {name} shape does not match its data")));
        }
        b.extend_from_slice(&(n.len() as u16).to_le_bytes());
        b.extend_from_slice(n);
        b.push(e.dims.len() as u8);
        for d in &e.dims {
            b.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(b)
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Entry>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != CKPT_MAGIC {
        return Err(r.format("not a checkpoint file (bad magic)"));
    }
    let mut out = BTreeMap::new();
    while r.remaining() > 0 {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.format("entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| r.format(&format!("entry {name} has an absurd shape")))?;
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Entry { dims, data });
    }
    Ok(out)
}

/// Model plus, when saved from a trainer, everything needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ScoreModel,
    pub ema_params: Vec<f64>,
    pub training: Option<(TrainConfig, TrainerState)>,
}

impl Checkpoint {
    pub fn from_model(model: ScoreModel) -> Self {
        let ema_params = model.params().to_vec();
        Self {
            model,
            ema_params,
            training: None,
        }
    }

    /// Model with the EMA parameters, used for sampling and simulation.
    pub fn ema_model(&self) -> Result<ScoreModel> {
        self.model.with_params(&self.ema_params)
    }
}

fn config_entry(c: &ModelConfig) -> Entry {
    Entry::vector(vec![
        c.n_beads as f64,
        c.dim as f64,
        c.n_layers as f64,
        c.n_features as f64,
        c.levels as f64,
        c.conservative as u8 as f64,
        c.embed_dim as f64,
        c.anchored as u8 as f64,
    ])
}

fn config_from(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 8 {
        return Err(invalid("model_config must hold 8 values"));
    }
    let cfg = ModelConfig {
        n_beads: v[0] as usize,
        dim: v[1] as usize,
        n_layers: v[2] as usize,
        n_features: v[3] as usize,
        levels: v[4] as usize,
        conservative: v[5] != 0.0,
        embed_dim: v[6] as usize,
        anchored: v[7] != 0.0,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Splits an integer into 32-bit halves, each exact in a double.
fn u64_parts(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn u64_from(parts: &[f64]) -> u64 {
    parts[0] as u64 | ((parts[1] as u64) << 32)
}

fn train_config_entry(c: &TrainConfig) -> Entry {
    let [s0, s1] = u64_parts(c.seed);
    Entry::vector(vec![
        c.batch_size as f64,
        c.learning_rate,
        c.min_learning_rate,
        c.iterations as f64,
        c.ema_decay,
        c.augment_rotations as u8 as f64,
        c.noise_split,
        s0,
        s1,
        match c.loss_weighting {
            LossWeighting::Unit => 0.0,
            LossWeighting::Elbo => 1.0,
        },
        c.validation_interval as f64,
        c.validation_samples as f64,
        c.patience.map(|p| p as f64).unwrap_or(-1.0),
        c.antithetic as u8 as f64,
    ])
}

fn train_config_from(v: &[f64]) -> Result<TrainConfig> {
    // 13-value entries predate the antithetic flag.
    if v.len() != 13 && v.len() != 14 {
        return Err(invalid("train_config must hold 13 or 14 values"));
    }
    Ok(TrainConfig {
        batch_size: v[0] as usize,
        learning_rate: v[1],
        min_learning_rate: v[2],
        iterations: v[3] as usize,
        ema_decay: v[4],
        augment_rotations: v[5] != 0.0,
        noise_split: v[6],
        seed: u64_from(&v[7..9]),
        loss_weighting: if v[9] == 0.0 { LossWeighting::Unit } else { LossWeighting::Elbo },
        validation_interval: v[10] as usize,
        validation_samples: v[11] as usize,
        patience: (v[12] >= 0.0).then_some(v[12] as usize),
        antithetic: v.get(13).is_some_and(|&a| a != 0.0),
    })
}

fn rng_entries(rng: &ChaCha8Rng) -> [(&'static str, Entry); 3] {
    let seed = rng.get_seed();
    let seed: Vec<f64> = seed
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let stream = u64_parts(rng.get_stream()).to_vec();
    let pos = rng.get_word_pos();
    let word: Vec<f64> = (0..4).map(|k| ((pos >> (32 * k)) & 0xffff_ffff) as f64).collect();
    [
        ("rng_seed", Entry::vector(seed)),
        ("rng_stream", Entry::vector(stream)),
        ("rng_word_pos", Entry::vector(word)),
    ]
}

fn rng_from(seed: &[f64], stream: &[f64], word: &[f64]) -> Result<ChaCha8Rng> {
    if seed.len() != 8 || stream.len() != 2 || word.len() != 4 {
        return Err(invalid("RNG state entries have the wrong length"));
    }
    let mut bytes = [0u8; 32];
    for (k, v) in seed.iter().enumerate() {
        bytes[4 * k..4 * k + 4].copy_from_slice(&(*v as u32).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(u64_from(stream));
    let pos = word.iter().enumerate().fold(0u128, |a, (k, v)| a | ((*v as u128) << (32 * k)));
    rng.set_word_pos(pos);
    Ok(rng)
}

pub fn checkpoint_entries(ckpt: &Checkpoint) -> Vec<(String, Entry)> {
    let m = &ckpt.model;
    let sched = m.schedule();
    let kind = match sched.kind() {
        ScheduleKind::Cosine => 0.0,
        ScheduleKind::Linear => 1.0,
        ScheduleKind::Custom => 2.0,
    };
    let mut e: Vec<(String, Entry)> = vec![
        ("model_config".into(), config_entry(m.config())),
        ("schedule_kind".into(), Entry::scalar(kind)),
        ("schedule_betas".into(), Entry::vector(sched.betas().to_vec())),
        ("params".into(), Entry::vector(m.params().to_vec())),
        ("ema_params".into(), Entry::vector(ckpt.ema_params.clone())),
    ];
    if let Some((cfg, st)) = &ckpt.training {
        e.push(("train_config".into(), train_config_entry(cfg)));
        e.push(("iteration".into(), Entry::scalar(st.iteration as f64)));
        e.push(("adam_m".into(), Entry::vector(st.adam_m.clone())));
        e.push(("adam_v".into(), Entry::vector(st.adam_v.clone())));
        e.push(("best_val".into(), Entry::scalar(st.best_val)));
        e.push(("stale_checks".into(), Entry::scalar(st.stale_checks as f64)));
        for (name, entry) in rng_entries(&st.rng) {
            e.push((name.into(), entry));
        }
    }
    e
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_file(path.as_ref(), &encode_container(&checkpoint_entries(ckpt))?)
}

const MODEL_ENTRIES: [&str; 5] = ["model_config", "schedule_kind", "schedule_betas", "params", "ema_params"];
const TRAIN_ENTRIES: [&str; 9] = [
    "train_config",
    "iteration",
    "adam_m",
    "adam_v",
    "best_val",
    "stale_checks",
    "rng_seed",
    "rng_stream",
    "rng_word_pos",
];

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let map = decode_container(&fs::read(path)?, path)?;
    let missing: Vec<String> = MODEL_ENTRIES
        .iter()
        .filter(|n| !map.contains_key(**n))
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DffError::Incompatible { missing });
    }
    let get = |n: &str| &map[n].data;
    let config = config_from(get("model_config"))?;
    let betas = get("schedule_betas").clone();
    let schedule = match get("schedule_kind").first().copied() {
        Some(k) if k == 0.0 => NoiseSchedule::from_betas_with_kind(ScheduleKind::Cosine, betas)?,
        Some(k) if k == 1.0 => NoiseSchedule::from_betas_with_kind(ScheduleKind::Linear, betas)?,
        _ => NoiseSchedule::from_betas(betas)?,
    };
    let model = ScoreModel::new(config, schedule, 0)?.with_params(get("params"))?;
    let ema_params = get("ema_params").clone();
    if ema_params.len() != model.n_params() {
        return Err(invalid("EMA parameters do not match the model"));
    }

    let present = TRAIN_ENTRIES.iter().filter(|n| map.contains_key(**n)).count();
    let training = if present == 0 {
        None
    } else if present < TRAIN_ENTRIES.len() {
        let missing = TRAIN_ENTRIES
            .iter()
            .filter(|n| !map.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
        return Err(DffError::Incompatible { missing });
    } else {
        let cfg = train_config_from(get("train_config"))?;
        let state = TrainerState {
            iteration: get("iteration")[0] as usize,
            params: model.params().to_vec(),
            ema: ema_params.clone(),
            adam_m: get("adam_m").clone(),
            adam_v: get("adam_v").clone(),
            rng: rng_from(get("rng_seed"), get("rng_stream"), get("rng_word_pos"))?,
            best_val: get("best_val")[0],
            stale_checks: get("stale_checks")[0] as usize,
        };
        if state.adam_m.len() != model.n_params() || state.adam_v.len() != model.n_params() {
            return Err(invalid("optimizer moments do not match the model"));
        }
        Some((cfg, state))
    };
    Ok(Checkpoint {
        model,
        ema_params,
        training,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Shuffles frame indices and cuts them into train/validation/test.
pub fn split_dataset(n_frames: usize, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid("split fractions must be non-negative and sum to 1"));
    }
    let mut idx: Vec<usize> = (0..n_frames).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = n_frames as f64;
    let n_train = ((a * n).round() as usize).min(n_frames);
    let n_val = ((b * n).round() as usize).min(n_frames - n_train);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(DatasetSplit {
        train: idx,
        validation,
        test,
        seed,
    })
}

/// Reads one frame per row (bead-major, coordinate-minor). A leading row
/// that does not parse as numbers is treated as a header.
pub fn read_csv_frames(path: impl AsRef<Path>, n_beads: usize, dim: usize, kt: f64) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let width = n_beads * dim;
    let mut frames = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f32>, _> = line.split(',').map(|s| s.trim().parse::<f32>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if line_no == 0 => continue,
            Err(e) => {
                return Err(DffError::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", line_no + 1),
                })
            }
        };
        if row.len() != width {
            return Err(DffError::Format {
                path: path.to_path_buf(),
                detail: format!("line {} has {} columns, expected {}", line_no + 1, row.len(), width),
            });
        }
        frames.extend(row);
    }
    Trajectory::new(n_beads, dim, frames, kt, Provenance::External).map_err(|e| DffError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_cosine_schedule;
    use crate::trainer::Trainer;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_traj() -> Trajectory {
        let frames: Vec<f32> = (0..18).map(|k| k as f32 * 0.37 - 2.0).collect();
        Trajectory::new(3, 3, frames, 0.6, Provenance::Simulation)
            .unwrap()
            .with_timing(0.04, 250)
    }

    #[test]
    fn trajectory_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.traj");
        let t = sample_traj().with_segments(vec![1]).unwrap();
        write_trajectory(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"DFFTRAJ1");
        assert_eq!(bytes.len() - t.header_len(), 72);
        assert_eq!(t.header_len(), 8 + 12 + 8 + 8 + 8 + 8 + 1 + 4 + 8);
        let back = read_trajectory(&p).unwrap();
        assert_eq!(back, t);
        assert!(back.frames().iter().zip(t.frames()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.segment_ranges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let t = Trajectory::new(2, 3, vec![], 1.0, Provenance::Iid).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), t.header_len());
        assert_eq!(Trajectory::from_bytes(&bytes, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn malformed_trajectories_are_rejected() {
        let t = sample_traj();
        let bytes = t.to_bytes();
        let p = Path::new("bad.traj");

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Trajectory::from_bytes(&magic, p), Err(DffError::Format { .. })));

        let mut version = bytes.clone();
        version[8] = 2;
        assert!(matches!(Trajectory::from_bytes(&version, p), Err(DffError::Format { .. })));

        let cut = &bytes[..bytes.len() - 5];
        match Trajectory::from_bytes(cut, p) {
            Err(DffError::Corruption { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Trajectory::from_bytes(&bytes[..20], p),
            Err(DffError::Corruption { .. })
        ));

        let mut nan = bytes.clone();
        let at = t.header_len();
        nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Trajectory::from_bytes(&nan, p), Err(DffError::Format { .. })));
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(2, 3, vec![0.0; 5], 1.0, Provenance::Oracle).is_err());
        assert!(Trajectory::new(1, 1, vec![f32::INFINITY], 1.0, Provenance::Oracle).is_err());
        let t = sample_traj();
        assert!(t.clone().with_segments(vec![0]).is_err());
        assert!(t.clone().with_segments(vec![2]).is_err());
        let four = Trajectory::new(1, 1, vec![0.0; 4], 1.0, Provenance::Oracle).unwrap();
        assert!(four.clone().with_segments(vec![2, 1]).is_err());
        assert!(four.with_segments(vec![1, 3]).is_ok());
    }

    fn tiny_model() -> ScoreModel {
        let cfg = ModelConfig {
            n_beads: 2,
            dim: 2,
            n_layers: 1,
            n_features: 4,
            levels: 20,
            conservative: true,
            embed_dim: 2,
            anchored: false,
        };
        ScoreModel::new(cfg, make_cosine_schedule(20).unwrap(), 5).unwrap()
    }

    #[test]
    fn untouched_checkpoint_reproduces_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny_model();
        write_checkpoint(&p, &Checkpoint::from_model(m.clone())).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.model.params(), m.params());
        assert_eq!(back.model.config(), m.config());
        assert_eq!(back.model.schedule().betas(), m.schedule().betas());
        assert_eq!(back.model.schedule().kind(), ScheduleKind::Cosine);
        assert!(back.training.is_none());
        let x = [0.1, 0.2, -0.3, 0.5];
        assert_eq!(back.model.energy(&x, 3).unwrap(), m.energy(&x, 3).unwrap());
    }

    #[test]
    fn resume_from_checkpoint_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cfg = TrainConfig {
            batch_size: 8,
            iterations: 20,
            validation_interval: 5,
            validation_samples: 50,
            seed: 77,
            patience: Some(50),
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(tiny_model(), data.clone(), data[..100].to_vec(), cfg.clone()).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::new(tiny_model(), data.clone(), data[..100].to_vec(), cfg.clone()).unwrap();
        first.run_until(10).unwrap();
        let ckpt = Checkpoint {
            model: first.raw_model(),
            ema_params: first.state().ema.clone(),
            training: Some((cfg.clone(), first.state().clone())),
        };
        write_checkpoint(&p, &ckpt).unwrap();
        let back = read_checkpoint(&p).unwrap();
        let (cfg2, state) = back.training.clone().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(&state, first.state());
        let mut resumed = Trainer::resume(back.model, data.clone(), data[..100].to_vec(), cfg2, state).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.state(), straight.state());
    }

    #[test]
    fn container_names_and_missing_entries() {
        let entries = vec![
            ("Ångström_θ".to_string(), Entry { dims: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] }),
            ("s".to_string(), Entry::scalar(-0.5)),
        ];
        let bytes = encode_container(&entries).unwrap();
        let map = decode_container(&bytes, Path::new("c")).unwrap();
        assert_eq!(map["Ångström_θ"], entries[0].1);
        assert_eq!(map["s"], entries[1].1);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("partial.ckpt");
        fs::write(&p, &bytes).unwrap();
        match read_checkpoint(&p) {
            Err(DffError::Incompatible { missing }) => {
                assert!(missing.contains(&"params".to_string()));
                assert_eq!(missing.len(), 5);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_container(&bytes[..bytes.len() - 3], Path::new("c")),
            Err(DffError::Corruption { .. })
        ));
        assert!(matches!(decode_container(b"NOTACKPT", Path::new("c")), Err(DffError::Format { .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(10, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split_dataset(10, DEFAULT_SPLIT, 3).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(10, (0.5, 0.5, 0.5), 3).is_err());
        let big = split_dataset(1003, DEFAULT_SPLIT, 1).unwrap();
        assert!((big.train.len() as f64 - 702.1).abs() <= 1.0);
        assert!((big.validation.len() as f64 - 100.3).abs() <= 1.0);
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "x0,y0,x1,y1\n1,2,3,4\n\n5,6,7,8\n").unwrap();
        let t = read_csv_frames(&p, 2, 2, 1.5).unwrap();
        assert_eq!(t.n_frames(), 2);
        assert_eq!(t.frame(1), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(t.provenance, Provenance::External);
        fs::write(&p, "1,2,3\n").unwrap();
        assert!(matches!(read_csv_frames(&p, 2, 2, 1.0), Err(DffError::Format { .. })));
    }
}
