//! Synthetic sequences with per-sequence nuisance modes.
//!
//! A sample's class lives only in its dynamics: every channel oscillates at
//! `(label + 1)` cycles per sequence, starting from a neutral frame at `t = 0`.
//! A per-sequence appearance offset and a mode transform (additive bias,
//! channel gains, or an orthogonal mixing) are constant over the sequence and
//! carry no class information. Gaussian noise is added last.
//!
//! Datasets are stored as a text manifest plus a binary frame file; see
//! [`save_dataset`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec, Matrix, Vector};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const FRAMES_MAGIC: &[u8; 6] = b"MVSEQ1";

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    AdditiveBias,
    ChannelGain,
    LinearTransform,
}

impl ModeKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ModeKind::AdditiveBias => "additive",
            ModeKind::ChannelGain => "gain",
            ModeKind::LinearTransform => "orthogonal",
        }
    }
}

impl FromStr for ModeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" | "additive_bias" | "bias" => Ok(ModeKind::AdditiveBias),
            "gain" | "channel_gain" => Ok(ModeKind::ChannelGain),
            "orthogonal" | "linear_transform" | "rotation" => Ok(ModeKind::LinearTransform),
            other => Err(Error::invalid(format!("unknown mode kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ModePayload {
    AdditiveBias(Vector),
    ChannelGain(Vector),
    LinearTransform(Matrix),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mode_id: u32,
    #[serde(flatten)]
    pub payload: ModePayload,
}

impl ModeSpec {
    pub fn kind(&self) -> ModeKind {
        match self.payload {
            ModePayload::AdditiveBias(_) => ModeKind::AdditiveBias,
            ModePayload::ChannelGain(_) => ModeKind::ChannelGain,
            ModePayload::LinearTransform(_) => ModeKind::LinearTransform,
        }
    }

    pub fn identity(mode_id: u32, kind: ModeKind, dim: usize) -> Self {
        let payload = match kind {
            ModeKind::AdditiveBias => ModePayload::AdditiveBias(Vector::zeros(dim)),
            ModeKind::ChannelGain => ModePayload::ChannelGain(Vector::filled(dim, 1.0)),
            ModeKind::LinearTransform => ModePayload::LinearTransform(Matrix::identity(dim)),
        };
        ModeSpec { mode_id, payload }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match &self.payload {
            ModePayload::AdditiveBias(b) if b.dim() == dim && b.is_finite() => Ok(()),
            ModePayload::ChannelGain(g) if g.dim() == dim && g.iter().all(|x| x.is_finite() && *x != 0.0) => Ok(()),
            ModePayload::LinearTransform(q) if q.shape() == (dim, dim) => {
                let gram = q.transpose().matmul(q)?;
                let err = gram.max_abs_diff(&Matrix::identity(dim));
                if err < 1e-9 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "mode {}: transform is not orthogonal (|QᵀQ - I| = {err:.3e})",
                        self.mode_id
                    )))
                }
            }
            _ => Err(Error::invalid(format!(
                "mode {}: payload does not match kind {:?} with dimension {dim}",
                self.mode_id,
                self.kind()
            ))),
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        match &self.payload {
            ModePayload::AdditiveBias(b) => x.add(b).expect("validated dims"),
            ModePayload::ChannelGain(g) => x.hadamard(g).expect("validated dims"),
            ModePayload::LinearTransform(q) => matvec(q, x).expect("validated dims"),
        }
    }

    pub fn invert(&self, x: &Vector) -> Vector {
        match &self.payload {
            ModePayload::AdditiveBias(b) => x.sub(b).expect("validated dims"),
            ModePayload::ChannelGain(g) => {
                Vector::from_vec(x.iter().zip(g.iter()).map(|(a, b)| a / b).collect())
            }
            ModePayload::LinearTransform(q) => matvec(&q.transpose(), x).expect("validated dims"),
        }
    }

    /// Factor by which the mode's inverse can amplify additive noise.
    pub fn inverse_gain(&self) -> f64 {
        match &self.payload {
            ModePayload::ChannelGain(g) => g.iter().map(|x| 1.0 / x.abs()).fold(1.0, f64::max),
            _ => 1.0,
        }
    }
}

/// `kind:count`, e.g. `additive:2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeGroup {
    pub kind: ModeKind,
    pub count: usize,
}

/// A comma-separated list of [`ModeGroup`]s: `additive:2,gain:1,orthogonal:1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeList(pub Vec<ModeGroup>);

impl ModeList {
    pub fn total(&self) -> usize {
        self.0.iter().map(|g| g.count).sum()
    }
}

impl Default for ModeList {
    fn default() -> Self {
        "additive:2,gain:2".parse().expect("valid default")
    }
}

impl FromStr for ModeList {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, count) = match part.split_once(':') {
                Some((k, c)) => (
                    k.trim().parse()?,
                    c.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad mode count in '{part}'")))?,
                ),
                None => (part.parse()?, 1),
            };
            groups.push(ModeGroup { kind, count });
        }
        let list = ModeList(groups);
        if list.total() == 0 {
            return Err(Error::invalid("at least one mode is required"));
        }
        Ok(list)
    }
}

impl fmt::Display for ModeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|g| format!("{}:{}", g.kind.short_name(), g.count))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for ModeList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModeList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Standard deviation of the i.i.d. frame noise.
    pub noise: f64,
    pub samples_per_cell: usize,
    /// Mode groups; the first mode of the first group is the identity.
    pub modes: ModeList,
    /// Strength of the non-identity modes: bias standard deviation, maximum
    /// gain excess over 1, and rotation angle as a fraction of a quarter turn.
    /// Gains never drop below 1, so undoing a mode never amplifies noise.
    pub mode_scale: f64,
    /// Standard deviation of the per-sequence appearance offset.
    pub appearance: f64,
    /// Per-sample spread of the oscillation direction around its class
    /// direction.
    pub direction_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_dim: 16,
            seq_len: 24,
            num_classes: 6,
            noise: 0.05,
            samples_per_cell: 40,
            modes: ModeList::default(),
            mode_scale: 0.5,
            appearance: 0.3,
            direction_jitter: 0.3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.seq_len < 4 {
            return Err(Error::invalid("sequences need at least four frames"));
        }
        if 2 * self.num_classes >= self.seq_len {
            return Err(Error::invalid(format!(
                "{} classes need more than {} frames per sequence to stay below the Nyquist rate",
                self.num_classes,
                2 * self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::invalid("samples_per_cell must be positive"));
        }
        if self.modes.total() == 0 {
            return Err(Error::invalid("at least one mode is required"));
        }
        if !(self.noise >= 0.0 && self.mode_scale >= 0.0 && self.appearance >= 0.0 && self.direction_jitter >= 0.0) {
            return Err(Error::invalid(
                "noise, mode_scale, appearance and direction_jitter must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * self.modes.total() * self.samples_per_cell
    }
}

/// Class-defining signal of one sample: `offset + amplitude ⊙ sin(2π f t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalParams {
    /// Cycles per frame.
    pub frequency: f64,
    /// Phase at `t = 0`; always zero so the first frame is neutral.
    pub phase: f64,
    pub amplitude: Vector,
    pub offset: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Vector>,
    pub label: usize,
    pub mode_id: u32,
    pub signal: SignalParams,
    pub seed: u64,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.frames.first().map_or(0, Vector::dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub class: usize,
    pub mode: u32,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub total_samples: usize,
    pub generator: GeneratorConfig,
    pub modes: Vec<ModeSpec>,
    pub counts: Vec<CellCount>,
}

impl DatasetManifest {
    pub fn mode(&self, id: u32) -> Option<&ModeSpec> {
        self.modes.iter().find(|m| m.mode_id == id)
    }

    pub fn mode_ids(&self) -> Vec<u32> {
        self.modes.iter().map(|m| m.mode_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub manifest: DatasetManifest,
}

/// Seed of sample `index`: the first word of counter stream `index` of the
/// master generator, so samples can be produced in any order.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds the mode table for `config`. Mode 0 is the identity of the first
/// group's kind.
pub fn make_modes(config: &GeneratorConfig, master: u64) -> Vec<ModeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(u64::MAX);
    let d = config.input_dim;
    let s = config.mode_scale;
    let mut modes = Vec::new();
    for group in &config.modes.0 {
        for _ in 0..group.count {
            let id = modes.len() as u32;
            if id == 0 {
                modes.push(ModeSpec::identity(0, group.kind, d));
                continue;
            }
            let payload = match group.kind {
                ModeKind::AdditiveBias => {
                    ModePayload::AdditiveBias(Vector::from_vec((0..d).map(|_| s * normal(&mut rng)).collect()))
                }
                ModeKind::ChannelGain => ModePayload::ChannelGain(Vector::from_vec(
                    (0..d).map(|_| 1.0 + rng.random_range(0.0..=s)).collect(),
                )),
                ModeKind::LinearTransform => ModePayload::LinearTransform(random_rotation(d, s, &mut rng)),
            };
            modes.push(ModeSpec { mode_id: id, payload });
        }
    }
    modes
}

/// Product of `2·dim` Givens rotations on random coordinate pairs with angles
/// up to `scale · π/2`.
fn random_rotation(dim: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let mut q = Matrix::identity(dim);
    if dim < 2 {
        return q;
    }
    let max_angle = scale * std::f64::consts::FRAC_PI_2;
    for _ in 0..2 * dim {
        let a = rng.random_range(0..dim);
        let mut b = rng.random_range(0..dim - 1);
        if b >= a {
            b += 1;
        }
        let theta = rng.random_range(-max_angle..=max_angle);
        let (sin, cos) = theta.sin_cos();
        for c in 0..dim {
            let (x, y) = (q[(a, c)], q[(b, c)]);
            q[(a, c)] = cos * x - sin * y;
            q[(b, c)] = sin * x + cos * y;
        }
    }
    q
}

/// Unit direction shared by every sample of class `label`.
pub fn class_direction(dim: usize, master: u64, label: usize) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((1u64 << 32) + label as u64);
    let raw = Vector::from_vec((0..dim).map(|_| normal(&mut rng)).collect());
    raw.scale(1.0 / raw.norm2().max(1e-12))
}

/// Draws the class signal for `seed`. Deterministic; used again when a
/// dataset is reloaded.
pub fn signal_params(config: &GeneratorConfig, master: u64, label: usize, seed: u64) -> SignalParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.input_dim;
    let dir = class_direction(d, master, label);
    let raw: Vec<f64> = dir
        .iter()
        .map(|v| v + config.direction_jitter * normal(&mut rng) / (d as f64).sqrt())
        .collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let amplitude = Vector::from_vec(raw.iter().map(|x| x / norm * (d as f64).sqrt()).collect());
    let offset = Vector::from_vec((0..d).map(|_| config.appearance * normal(&mut rng)).collect());
    SignalParams {
        frequency: (label + 1) as f64 / config.seq_len as f64,
        phase: 0.0,
        amplitude,
        offset,
    }
}

/// Renders one sample. `noisy = false` skips the noise stream, giving the
/// clean signal under `mode`.
pub fn render_sample(
    config: &GeneratorConfig,
    master: u64,
    mode: &ModeSpec,
    label: usize,
    seed: u64,
    noisy: bool,
) -> SequenceSample {
    let signal = signal_params(config, master, label, seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let omega = 2.0 * std::f64::consts::PI * signal.frequency;
    let frames = (0..config.seq_len)
        .map(|t| {
            let phase = (omega * t as f64 + signal.phase).sin();
            let clean = Vector::from_vec(
                signal
                    .offset
                    .iter()
                    .zip(signal.amplitude.iter())
                    .map(|(o, a)| o + a * phase)
                    .collect(),
            );
            let mut x = mode.apply(&clean);
            if noisy {
                for k in 0..x.dim() {
                    x[k] += config.noise * normal(&mut noise_rng);
                }
            }
            x
        })
        .collect();
    SequenceSample {
        frames,
        label,
        mode_id: mode.mode_id,
        signal,
        seed,
    }
}

/// Generates `samples_per_cell` samples for every (mode, class) pair, ordered
/// by mode, then class, then replicate.
pub fn generate_dataset(config: &GeneratorConfig, master_seed: u64) -> Result<Dataset> {
    config.validate()?;
    let modes = make_modes(config, master_seed);
    for m in &modes {
        m.validate(config.input_dim)?;
    }
    let n = config.samples_per_cell;
    let jobs: Vec<(usize, usize, usize)> = (0..modes.len())
        .flat_map(|m| (0..config.num_classes).flat_map(move |k| (0..n).map(move |j| (m, k, j))))
        .collect();
    let render = |&(m, k, j): &(usize, usize, usize)| {
        let index = ((m * config.num_classes + k) * n + j) as u64;
        render_sample(config, master_seed, &modes[m], k, sample_seed(master_seed, index), true)
    };
    #[cfg(feature = "parallel")]
    let samples: Vec<SequenceSample> = {
        use rayon::prelude::*;
        jobs.par_iter().map(render).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let samples: Vec<SequenceSample> = jobs.iter().map(render).collect();

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        master_seed,
        total_samples: samples.len(),
        generator: config.clone(),
        counts: count_cells(&samples, config.num_classes, &modes),
        modes,
    };
    Ok(Dataset { samples, manifest })
}

pub fn count_cells(samples: &[SequenceSample], num_classes: usize, modes: &[ModeSpec]) -> Vec<CellCount> {
    let mut map: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for m in modes {
        for k in 0..num_classes {
            map.insert((k, m.mode_id), 0);
        }
    }
    for s in samples {
        *map.entry((s.label, s.mode_id)).or_default() += 1;
    }
    map.into_iter()
        .map(|((class, mode), count)| CellCount { class, mode, count })
        .collect()
}

/// `n` copies of frame `tau`.
pub fn make_static_sequence(sample: &SequenceSample, tau: usize, n: usize) -> Result<Vec<Vector>> {
    if tau >= sample.frames.len() {
        return Err(Error::invalid(format!(
            "tau {tau} out of range for a sequence of {} frames",
            sample.frames.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("static sequence length must be at least 1"));
    }
    Ok(vec![sample.frames[tau].clone(); n])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldConfig {
    /// Number of folds; 1 trains on every seen-mode sample.
    pub folds: usize,
    /// Which fold is held out.
    pub index: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { folds: 5, index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<SequenceSample>,
    pub seen_test: Vec<SequenceSample>,
    pub unseen_test: BTreeMap<u32, Vec<SequenceSample>>,
    /// Unseen modes with no test samples.
    pub empty_unseen: Vec<u32>,
}

/// Fold of every sample: its position within its (mode, class) cell modulo
/// the fold count.
pub fn fold_assignment(samples: &[SequenceSample], folds: usize) -> Vec<usize> {
    let mut seen: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    samples
        .iter()
        .map(|s| {
            let pos = seen.entry((s.mode_id, s.label)).or_default();
            let fold = *pos % folds.max(1);
            *pos += 1;
            fold
        })
        .collect()
}

/// Train on the seen modes, test on the held-out fold of every mode.
///
/// Samples never share a base-signal seed across the train and test sets;
/// that seed stands in for subject identity.
pub fn split_by_mode(
    samples: &[SequenceSample],
    seen_modes: &[u32],
    unseen_modes: &[u32],
    fold: FoldConfig,
) -> Result<Split> {
    if seen_modes.is_empty() {
        return Err(Error::invalid("no seen modes given"));
    }
    if let Some(m) = seen_modes.iter().find(|m| unseen_modes.contains(m)) {
        return Err(Error::invalid(format!("mode {m} is both seen and unseen")));
    }
    if fold.folds == 0 || (fold.folds > 1 && fold.index >= fold.folds) {
        return Err(Error::invalid(format!("fold {} of {} is invalid", fold.index, fold.folds)));
    }
    let folds = fold_assignment(samples, fold.folds);
    let held_out = |f: usize| fold.folds == 1 || f == fold.index;

    let mut split = Split {
        train: Vec::new(),
        seen_test: Vec::new(),
        unseen_test: unseen_modes.iter().map(|&m| (m, Vec::new())).collect(),
        empty_unseen: Vec::new(),
    };
    for (s, &f) in samples.iter().zip(&folds) {
        if seen_modes.contains(&s.mode_id) {
            if fold.folds > 1 && f == fold.index {
                split.seen_test.push(s.clone());
            } else {
                split.train.push(s.clone());
            }
        } else if let Some(bucket) = split.unseen_test.get_mut(&s.mode_id) {
            if held_out(f) {
                bucket.push(s.clone());
            }
        }
    }
    if split.train.is_empty() {
        return Err(Error::Empty("training partition"));
    }
    split.empty_unseen = split
        .unseen_test
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(&m, _)| m)
        .collect();
    Ok(split)
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_extension(stem, "manifest")
}

pub fn frames_path(stem: &Path) -> PathBuf {
    with_extension(stem, "frames")
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_frames(samples: &[SequenceSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&(s.frames.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(s.input_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        buf.extend_from_slice(&s.mode_id.to_le_bytes());
        buf.extend_from_slice(&s.seed.to_le_bytes());
        for f in &s.frames {
            for v in f.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = CRC64.checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.at)));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Raw records of a frame file: `(label, mode, seed, frames)`.
pub type FrameRecord = (usize, u32, u64, Vec<Vector>);

pub fn decode_frames(buf: &[u8]) -> Result<Vec<FrameRecord>> {
    if buf.len() < FRAMES_MAGIC.len() + 4 + 8 {
        return Err(Error::Format("frame file too short".into()));
    }
    if &buf[..FRAMES_MAGIC.len()] != FRAMES_MAGIC {
        return Err(Error::Format("bad magic (expected MVSEQ1)".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        at: FRAMES_MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let label = r.u32()? as usize;
        let mode = r.u32()?;
        let seed = r.u64()?;
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let v: Vec<f64> = (0..d).map(|_| r.f64()).collect::<Result<_>>()?;
            frames.push(Vector::from_vec(v));
        }
        out.push((label, mode, seed, frames));
    }
    if r.at != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(out)
}

/// Writes `<stem>.manifest` (TOML) and `<stem>.frames` (binary).
pub fn save_dataset(dataset: &Dataset, stem: &Path) -> Result<()> {
    let manifest = toml::to_string(&dataset.manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&frames_path(stem), &encode_frames(&dataset.samples))?;
    write_atomic(&manifest_path(stem), manifest.as_bytes())?;
    Ok(())
}

pub fn load_dataset(stem: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path(stem))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let records = decode_frames(&fs::read(frames_path(stem))?)?;
    let cfg = &manifest.generator;
    let mut samples = Vec::with_capacity(records.len());
    for (label, mode_id, seed, frames) in records {
        if frames.len() != cfg.seq_len || frames.iter().any(|f| f.dim() != cfg.input_dim) {
            return Err(Error::Format(format!("sample with seed {seed} does not match the manifest shape")));
        }
        if label >= cfg.num_classes || manifest.mode(mode_id).is_none() {
            return Err(Error::Format(format!("sample with seed {seed} has unknown label or mode")));
        }
        samples.push(SequenceSample {
            frames,
            label,
            mode_id,
            signal: signal_params(cfg, manifest.master_seed, label, seed),
            seed,
        });
    }
    if samples.len() != manifest.total_samples
        || count_cells(&samples, cfg.num_classes, &manifest.modes) != manifest.counts
    {
        return Err(Error::Format("sample counts disagree with the manifest".into()));
    }
    Ok(Dataset { samples, manifest })
}
