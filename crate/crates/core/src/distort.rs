//! The nine synchrony distortions and benchmark manifests.
//!
//! Every kernel is a pure function of the clip and the [`DistortionSpec`];
//! stochastic kinds draw from a ChaCha stream seeded by the spec alone, so any
//! manifest row can be reproduced in isolation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::media::{self, ClipBundle, MediaError};
use crate::wsola::time_stretch;

pub const DEFAULT_GAP_PROBABILITY: f64 = 0.40;

const SHIFT_LEVELS: [f64; 10] = [-1.0, -0.5, -0.125, 0.045, 0.1, 0.125, 0.25, 0.5, 1.0, 2.0];
const SPEED_LEVELS: [f64; 10] = [0.025, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.4, 0.5, 0.75];
const DURATION_LEVELS: [f64; 10] = [0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.5, 4.0];
const FRAGMENT_LEVELS: [f64; 10] = [0.3, 0.4, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

#[derive(Debug, Error)]
pub enum DistortError {
    #[error("level {level} is not in the catalog for {kind}")]
    LevelOutOfCatalog { kind: DistortionKind, level: f64 },
    #[error("gap probability {0} outside (0, 1]")]
    InvalidGapProbability(f64),
    #[error("clip too short: {0}")]
    ClipTooShort(String),
    #[error("duplicate source id {0:?}")]
    DuplicateSourceId(String),
    #[error("empty source list")]
    NoSources,
    #[error("bad manifest row {row}: {reason}")]
    BadManifest { row: usize, reason: String },
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistortionKind {
    AudioShift,
    AudioSpeedUp,
    VideoSpeedUp,
    AudioSpeedDown,
    VideoSpeedDown,
    IntermittentMute,
    RandomVideoGaps,
    FragmentShuffle,
    AvFlicker,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 9] = [
        DistortionKind::AudioShift,
        DistortionKind::AudioSpeedUp,
        DistortionKind::VideoSpeedUp,
        DistortionKind::AudioSpeedDown,
        DistortionKind::VideoSpeedDown,
        DistortionKind::IntermittentMute,
        DistortionKind::RandomVideoGaps,
        DistortionKind::FragmentShuffle,
        DistortionKind::AvFlicker,
    ];

    /// Catalog id, 1 through 9.
    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::AudioShift => "audio_shift",
            DistortionKind::AudioSpeedUp => "audio_speed_up",
            DistortionKind::VideoSpeedUp => "video_speed_up",
            DistortionKind::AudioSpeedDown => "audio_speed_down",
            DistortionKind::VideoSpeedDown => "video_speed_down",
            DistortionKind::IntermittentMute => "intermittent_mute",
            DistortionKind::RandomVideoGaps => "random_video_gaps",
            DistortionKind::FragmentShuffle => "fragment_shuffle",
            DistortionKind::AvFlicker => "av_flicker",
        }
    }

    /// The ten catalog levels, in catalog order. The last entry is the most extreme
    /// except for shifts, where the order runs from -1 s to +2 s.
    pub fn levels(self) -> &'static [f64; 10] {
        match self {
            DistortionKind::AudioShift => &SHIFT_LEVELS,
            DistortionKind::AudioSpeedUp
            | DistortionKind::VideoSpeedUp
            | DistortionKind::AudioSpeedDown
            | DistortionKind::VideoSpeedDown => &SPEED_LEVELS,
            DistortionKind::IntermittentMute
            | DistortionKind::RandomVideoGaps
            | DistortionKind::AvFlicker => &DURATION_LEVELS,
            DistortionKind::FragmentShuffle => &FRAGMENT_LEVELS,
        }
    }

    /// 1-based catalog position of `level`.
    pub fn level_index(self, level: f64) -> Option<usize> {
        self.levels()
            .iter()
            .position(|&l| (l - level).abs() < 1e-9)
            .map(|i| i + 1)
    }

    pub fn max_level(self) -> f64 {
        self.levels()[9]
    }

    pub fn uses_gap_probability(self) -> bool {
        matches!(self, DistortionKind::RandomVideoGaps | DistortionKind::AvFlicker)
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(id) = s.parse::<u8>() {
            return Self::from_id(id).ok_or_else(|| format!("unknown distortion id {id}"));
        }
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown distortion kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: f64,
    pub seed: u64,
    pub gap_probability: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: f64, seed: u64) -> Self {
        DistortionSpec {
            kind,
            level,
            seed,
            gap_probability: DEFAULT_GAP_PROBABILITY,
        }
    }

    pub fn validate(&self) -> Result<(), DistortError> {
        if self.kind.level_index(self.level).is_none() {
            return Err(DistortError::LevelOutOfCatalog {
                kind: self.kind,
                level: self.level,
            });
        }
        if self.kind.uses_gap_probability()
            && !(self.gap_probability > 0.0 && self.gap_probability <= 1.0)
        {
            return Err(DistortError::InvalidGapProbability(self.gap_probability));
        }
        Ok(())
    }

    pub fn level_index(&self) -> Option<usize> {
        self.kind.level_index(self.level)
    }
}

/// Applies a catalog distortion.
pub fn apply_distortion(clip: &ClipBundle, spec: &DistortionSpec) -> Result<ClipBundle, DistortError> {
    spec.validate()?;
    apply_raw(clip, spec)
}

/// Applies a distortion without the catalog check, so that off-catalog
/// parameters (level 0, probability 0) can be exercised.
pub fn apply_raw(clip: &ClipBundle, spec: &DistortionSpec) -> Result<ClipBundle, DistortError> {
    let mut out = clip.clone();
    let level = spec.level;
    match spec.kind {
        DistortionKind::AudioShift => shift_audio(&mut out, level)?,
        DistortionKind::AudioSpeedUp => speed_audio(&mut out, 1.0 + level)?,
        DistortionKind::AudioSpeedDown => speed_audio(&mut out, 1.0 - level)?,
        DistortionKind::VideoSpeedUp => speed_video(&mut out, 1.0 + level)?,
        DistortionKind::VideoSpeedDown => speed_video(&mut out, 1.0 - level)?,
        DistortionKind::IntermittentMute => intermittent_mute(&mut out, level),
        DistortionKind::RandomVideoGaps => {
            for (start, end) in gap_schedule(clip.duration_seconds(), level, spec.gap_probability, spec.seed) {
                blank_video(&mut out, start, end);
            }
        }
        DistortionKind::AvFlicker => {
            for (start, end) in gap_schedule(clip.duration_seconds(), level, spec.gap_probability, spec.seed) {
                blank_video(&mut out, start, end);
                silence_audio(&mut out, start, end);
            }
        }
        DistortionKind::FragmentShuffle => shuffle_fragments(&mut out, level, spec.seed)?,
    }
    Ok(out)
}

fn shift_audio(clip: &mut ClipBundle, seconds: f64) -> Result<(), DistortError> {
    let samples = &mut clip.audio.samples;
    let n = (seconds.abs() * clip.audio.sample_rate as f64).round() as usize;
    if n == 0 {
        return Ok(());
    }
    if n >= samples.len() {
        return Err(DistortError::ClipTooShort(format!(
            "shift of {seconds} s on a {:.3} s track",
            clip.audio.duration_seconds()
        )));
    }
    let len = samples.len();
    if seconds > 0.0 {
        samples.truncate(len - n);
        samples.splice(0..0, std::iter::repeat_n(0, n));
    } else {
        samples.drain(..n);
        samples.resize(len, 0);
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<(), DistortError> {
    if rate <= 0.0 {
        return Err(DistortError::ClipTooShort(format!("speed factor {rate} leaves no content")));
    }
    Ok(())
}

/// Audio played at `rate` with pitch kept; the longer track is then trimmed.
fn speed_audio(clip: &mut ClipBundle, rate: f64) -> Result<(), DistortError> {
    check_rate(rate)?;
    if rate == 1.0 {
        return Ok(());
    }
    let original = clip.audio.samples.len();
    let stretched = time_stretch(&clip.audio.samples, clip.audio.sample_rate, rate);
    clip.audio.samples = stretched;
    if rate > 1.0 {
        trim_to_common(clip);
    } else {
        clip.audio.samples.truncate(original);
    }
    Ok(())
}

/// Frames remapped to the nearest source frame at `rate`; the longer track is then trimmed.
fn speed_video(clip: &mut ClipBundle, rate: f64) -> Result<(), DistortError> {
    check_rate(rate)?;
    if rate == 1.0 {
        return Ok(());
    }
    let n = clip.video.frames.len();
    let n_out = if rate > 1.0 {
        (n as f64 / rate).floor() as usize
    } else {
        n
    };
    let frames = (0..n_out)
        .map(|j| clip.video.frames[((j as f64 * rate).round() as usize).min(n - 1)].clone())
        .collect();
    clip.video.frames = frames;
    if rate > 1.0 {
        trim_to_common(clip);
    }
    Ok(())
}

/// Trims both tracks to the shorter duration, snapped to the frame grid.
fn trim_to_common(clip: &mut ClipBundle) {
    let period = clip.video.frame_period();
    let sr = clip.audio.sample_rate as f64;
    let dur = clip.audio.duration_seconds().min(clip.video.duration_seconds());
    let frames = (dur / period + 1e-9).floor() as usize;
    clip.video.frames.truncate(frames);
    let samples = ((frames as f64 * period * sr).round() as usize).min(clip.audio.samples.len());
    clip.audio.samples.truncate(samples);
}

/// One second audible, then `level` seconds muted, repeating from t = 0.
fn intermittent_mute(clip: &mut ClipBundle, level: f64) {
    if level <= 0.0 {
        return;
    }
    let sr = clip.audio.sample_rate as usize;
    let cycle = ((1.0 + level) * sr as f64).round() as usize;
    for (i, s) in clip.audio.samples.iter_mut().enumerate() {
        if i % cycle >= sr {
            *s = 0;
        }
    }
}

/// Gap intervals `[s, s + length)` for whole seconds `s` selected with probability `p`.
/// Overlapping intervals are merged.
pub fn gap_schedule(duration: f64, length: f64, p: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(f64, f64)> = Vec::new();
    if length <= 0.0 {
        return out;
    }
    let mut s = 0u64;
    while (s as f64) < duration {
        let u: f64 = rng.random();
        if u < p {
            let (start, end) = (s as f64, (s as f64 + length).min(duration));
            match out.last_mut() {
                Some(last) if start <= last.1 => last.1 = last.1.max(end),
                _ => out.push((start, end)),
            }
        }
        s += 1;
    }
    out
}

fn blank_video(clip: &mut ClipBundle, start: f64, end: f64) {
    let fps = clip.video.fps;
    // frame j is shown at j * den / num seconds; blank frames whose time falls in [start, end)
    let first = (start * fps.num as f64 / fps.den as f64 - 1e-9).ceil().max(0.0) as usize;
    let last = (end * fps.num as f64 / fps.den as f64 - 1e-9).ceil().max(0.0) as usize;
    let n = clip.video.frames.len();
    for f in &mut clip.video.frames[first.min(n)..last.min(n)] {
        f.blank();
    }
}

fn silence_audio(clip: &mut ClipBundle, start: f64, end: f64) {
    let sr = clip.audio.sample_rate as f64;
    let n = clip.audio.samples.len();
    let a = ((start * sr).round() as usize).min(n);
    let b = ((end * sr).round() as usize).min(n);
    clip.audio.samples[a..b].fill(0);
}

/// Seeded permutation of `n` fragment indices.
pub fn fragment_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

fn shuffle_fragments(clip: &mut ClipBundle, seconds: f64, seed: u64) -> Result<(), DistortError> {
    let dur = clip.duration_seconds();
    if seconds <= 0.0 || seconds > dur + 1e-9 {
        return Err(DistortError::ClipTooShort(format!(
            "fragment of {seconds} s on a {dur:.3} s clip"
        )));
    }
    let n_seg = (dur / seconds + 1e-9).floor() as usize;
    let sr = clip.audio.sample_rate as f64;
    let fps = clip.video.fps.as_f64();
    let a_edge = |k: usize| ((k as f64 * seconds * sr).round() as usize).min(clip.audio.samples.len());
    let v_edge = |k: usize| ((k as f64 * seconds * fps).round() as usize).min(clip.video.frames.len());
    let perm = fragment_permutation(n_seg, seed);

    let mut samples = Vec::with_capacity(clip.audio.samples.len());
    let mut frames = Vec::with_capacity(clip.video.frames.len());
    for &src in &perm {
        samples.extend_from_slice(&clip.audio.samples[a_edge(src)..a_edge(src + 1)]);
        frames.extend_from_slice(&clip.video.frames[v_edge(src)..v_edge(src + 1)]);
    }
    samples.extend_from_slice(&clip.audio.samples[a_edge(n_seg)..]);
    frames.extend_from_slice(&clip.video.frames[v_edge(n_seg)..]);
    clip.audio.samples = samples;
    clip.video.frames = frames;
    Ok(())
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq)]
pub enum Treatment {
    GroundTruth,
    Distorted(DistortionSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub output_id: String,
    pub source_id: String,
    pub treatment: Treatment,
}

impl ManifestRow {
    pub fn spec(&self) -> Option<&DistortionSpec> {
        match &self.treatment {
            Treatment::GroundTruth => None,
            Treatment::Distorted(s) => Some(s),
        }
    }

    pub fn is_ground_truth(&self) -> bool {
        matches!(self.treatment, Treatment::GroundTruth)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchmarkManifest {
    pub rows: Vec<ManifestRow>,
}

pub fn output_id(source_id: &str, spec: Option<&DistortionSpec>) -> String {
    match spec {
        None => format!("{source_id}__gt"),
        Some(s) => format!(
            "{source_id}__k{}_l{:02}",
            s.kind.id(),
            s.level_index().unwrap_or(0)
        ),
    }
}

/// Row seed derived from the run seed and the row's identity only.
pub fn derive_seed(seed: u64, source_id: &str, kind: DistortionKind, level: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(source_id.as_bytes());
    h.update([0, kind.id()]);
    h.update(level.to_bits().to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The full grid: one ground-truth row and 9 x 10 distorted rows per source.
pub fn build_benchmark_manifest(sources: &[String], seed: u64) -> Result<BenchmarkManifest, DistortError> {
    if sources.is_empty() {
        return Err(DistortError::NoSources);
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(sources.len() * 91);
    for src in sources {
        if !seen.insert(src.as_str()) {
            return Err(DistortError::DuplicateSourceId(src.clone()));
        }
        rows.push(ManifestRow {
            output_id: output_id(src, None),
            source_id: src.clone(),
            treatment: Treatment::GroundTruth,
        });
        for kind in DistortionKind::ALL {
            for &level in kind.levels() {
                let spec = DistortionSpec::new(kind, level, derive_seed(seed, src, kind, level));
                rows.push(ManifestRow {
                    output_id: output_id(src, Some(&spec)),
                    source_id: src.clone(),
                    treatment: Treatment::Distorted(spec),
                });
            }
        }
    }
    Ok(BenchmarkManifest { rows })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    output_id: String,
    source_id: String,
    kind: String,
    level: f64,
    seed: u64,
    gap_probability: Option<f64>,
}

const GROUND_TRUTH: &str = "ground_truth";

impl BenchmarkManifest {
    pub fn to_csv(&self) -> Result<String, DistortError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let row = match &r.treatment {
                Treatment::GroundTruth => CsvRow {
                    output_id: r.output_id.clone(),
                    source_id: r.source_id.clone(),
                    kind: GROUND_TRUTH.into(),
                    level: 0.0,
                    seed: 0,
                    gap_probability: None,
                },
                Treatment::Distorted(s) => CsvRow {
                    output_id: r.output_id.clone(),
                    source_id: r.source_id.clone(),
                    kind: s.kind.name().into(),
                    level: s.level,
                    seed: s.seed,
                    gap_probability: s.kind.uses_gap_probability().then_some(s.gap_probability),
                },
            };
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| DistortError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, DistortError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        let mut ids = HashSet::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let rec = rec?;
            let bad = |reason: String| DistortError::BadManifest { row: i + 1, reason };
            if !ids.insert(rec.output_id.clone()) {
                return Err(bad(format!("duplicate output_id {:?}", rec.output_id)));
            }
            let treatment = if rec.kind == GROUND_TRUTH {
                Treatment::GroundTruth
            } else {
                let kind: DistortionKind = rec.kind.parse().map_err(bad)?;
                let spec = DistortionSpec {
                    kind,
                    level: rec.level,
                    seed: rec.seed,
                    gap_probability: rec.gap_probability.unwrap_or(DEFAULT_GAP_PROBABILITY),
                };
                spec.validate().map_err(|e| bad(e.to_string()))?;
                Treatment::Distorted(spec)
            };
            rows.push(ManifestRow {
                output_id: rec.output_id,
                source_id: rec.source_id,
                treatment,
            });
        }
        Ok(BenchmarkManifest { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DistortError> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DistortError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn row(&self, output_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.output_id == output_id)
    }
}

/// Runs every manifest row: loads `in_dir/<source_id>`, writes `out_dir/<output_id>`.
///
/// Sources are processed in parallel on `jobs` threads; each row depends only on
/// its source and spec, so output is identical to a serial run.
pub fn run_manifest(
    manifest: &BenchmarkManifest,
    in_dir: &Path,
    out_dir: &Path,
    jobs: usize,
) -> Result<usize, DistortError> {
    let mut by_source: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for r in &manifest.rows {
        by_source.entry(r.source_id.as_str()).or_default().push(r);
    }
    let groups: Vec<_> = by_source.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        groups.par_iter().try_for_each(|(src, rows)| {
            let clip = media::load_bundle(in_dir.join(src))?;
            for row in rows {
                let mut out = match row.spec() {
                    None => clip.clone(),
                    Some(spec) => apply_distortion(&clip, spec)?,
                };
                out.clip_id = row.output_id.clone();
                media::save_bundle(&out, out_dir.join(&row.output_id))?;
            }
            Ok::<_, DistortError>(())
        })
    })?;
    Ok(manifest.rows.len())
}
