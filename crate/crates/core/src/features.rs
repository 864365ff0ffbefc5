//! Per-window modality embeddings.
//!
//! Real pipelines feed externally computed embeddings through the `.emb` file
//! format. For self-contained runs two deterministic extractors stand in for
//! the pretrained backbones:
//!
//! * audio: log mel-band energies of a short-time power spectrum, averaged
//!   over each of `slices` equal sub-spans of the window;
//! * video: a fixed seeded random projection of the log downsampled mean
//!   frame and log mean absolute inter-frame difference, again per sub-span.
//!
//! With one slice these reduce to a single spectrum / single mean frame per
//! window. Windows do not overlap and a trailing partial window is dropped.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::ClipBundle;

pub const DEFAULT_WINDOW_SECONDS: f64 = 0.96;
/// Power floor applied before taking logs; digital silence maps to `log10(LOG_FLOOR)`.
pub const LOG_FLOOR: f32 = 1e-4;
/// Offset added to mean luma and mean motion (both in [0, 1]) before taking logs.
pub const VIDEO_FLOOR: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip of {duration:.3} s is shorter than one {window} s window")]
    ClipTooShort { duration: f64, window: f64 },
    #[error("unknown extractor {0:?}")]
    UnknownExtractor(String),
    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes, header implies {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// An `n x dim` row-major feature matrix for one clip and one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub clip_id: String,
    pub modality: Modality,
    pub window_seconds: f64,
    pub extractor: String,
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn n_windows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn check_finite(&self) -> Result<(), FeatureError> {
        match self.rows.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(FeatureError::NonFinite {
                row: p / self.dim,
                col: p % self.dim,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbHeader {
    clip_id: String,
    modality: Modality,
    n: usize,
    d: usize,
    window_seconds: f64,
    extractor: String,
}

/// One UTF-8 JSON header line, then `n * d` little-endian f32 values.
pub fn encode_embeddings(seq: &EmbeddingSequence) -> Vec<u8> {
    let header = EmbHeader {
        clip_id: seq.clip_id.clone(),
        modality: seq.modality,
        n: seq.n_windows(),
        d: seq.dim,
        window_seconds: seq.window_seconds,
        extractor: seq.extractor.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(seq.rows.len() * 4);
    for v in &seq.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSequence, FeatureError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FeatureError::MalformedHeader("no header line".into()))?;
    let header: EmbHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| FeatureError::MalformedHeader(e.to_string()))?;
    if header.d == 0 {
        return Err(FeatureError::MalformedHeader("zero dimension".into()));
    }
    let payload = &bytes[nl + 1..];
    let expected = header
        .n
        .checked_mul(header.d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| FeatureError::MalformedHeader("n * d overflows".into()))?;
    if payload.len() != expected {
        return Err(FeatureError::DimensionMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let seq = EmbeddingSequence {
        clip_id: header.clip_id,
        modality: header.modality,
        window_seconds: header.window_seconds,
        extractor: header.extractor,
        dim: header.d,
        rows: payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    seq.check_finite()?;
    Ok(seq)
}

pub fn write_embeddings(seq: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_embeddings(seq))?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSequence, FeatureError> {
    decode_embeddings(&std::fs::read(path)?)
}

/// Conventional file name for one clip's embeddings of one modality.
pub fn embedding_file_name(clip_id: &str, modality: Modality) -> String {
    format!("{clip_id}.{modality}.emb")
}

/// Configuration of the deterministic synthetic extractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExtractor {
    pub audio_bands: usize,
    pub audio_slices: usize,
    pub video_dim: usize,
    pub video_slices: usize,
    pub video_grid: usize,
    pub projection_seed: u64,
}

impl Default for SyntheticExtractor {
    /// 128-d audio and 1024-d video, one slice per window.
    fn default() -> Self {
        SyntheticExtractor {
            audio_bands: 128,
            audio_slices: 1,
            video_dim: 1024,
            video_slices: 1,
            video_grid: 8,
            projection_seed: 0x5eed,
        }
    }
}

impl SyntheticExtractor {
    /// Small window-level features; same structure as the default at a
    /// fraction of the dimension.
    pub fn small() -> Self {
        SyntheticExtractor {
            audio_bands: 16,
            audio_slices: 1,
            video_dim: 32,
            video_slices: 1,
            video_grid: 4,
            projection_seed: 0x5eed,
        }
    }

    /// Small features resolved into four sub-window slices, for desk-scale training.
    pub fn desk() -> Self {
        SyntheticExtractor {
            audio_bands: 8,
            audio_slices: 4,
            video_dim: 32,
            video_slices: 4,
            video_grid: 2,
            projection_seed: 0x5eed,
        }
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_bands * self.audio_slices
    }

    fn video_stats(&self) -> usize {
        self.video_slices * 2 * self.video_grid * self.video_grid
    }

    /// Self-describing tag, parseable by [`FromStr`].
    pub fn tag(&self) -> String {
        if *self == Self::default() {
            return "synthetic".into();
        }
        if *self == Self::small() {
            return "synthetic-small".into();
        }
        if *self == Self::desk() {
            return "synthetic-desk".into();
        }
        format!(
            "synthetic:bands={},aslices={},vdim={},vslices={},grid={},seed={}",
            self.audio_bands,
            self.audio_slices,
            self.video_dim,
            self.video_slices,
            self.video_grid,
            self.projection_seed
        )
    }

    /// The `video_dim x stats` projection matrix, entries N(0, 1/stats).
    fn projection(&self) -> Vec<f32> {
        let stats = self.video_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        let scale = (1.0 / stats as f64).sqrt();
        (0..self.video_dim * stats)
            .map(|_| {
                // Box-Muller on two uniforms
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random();
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale) as f32
            })
            .collect()
    }

    pub fn extract(
        &self,
        clip: &ClipBundle,
        window_seconds: f64,
    ) -> Result<(EmbeddingSequence, EmbeddingSequence), FeatureError> {
        let duration = clip.duration_seconds();
        let n = (duration / window_seconds + 1e-9).floor() as usize;
        if n == 0 || window_seconds <= 0.0 {
            return Err(FeatureError::ClipTooShort {
                duration,
                window: window_seconds,
            });
        }
        let tag = self.tag();
        let audio = EmbeddingSequence {
            clip_id: clip.clip_id.clone(),
            modality: Modality::Audio,
            window_seconds,
            extractor: tag.clone(),
            dim: self.audio_dim(),
            rows: self.audio_rows(clip, window_seconds, n),
        };
        let video = EmbeddingSequence {
            clip_id: clip.clip_id.clone(),
            modality: Modality::Video,
            window_seconds,
            extractor: tag,
            dim: self.video_dim,
            rows: self.video_rows(clip, window_seconds, n),
        };
        Ok((audio, video))
    }

    fn audio_rows(&self, clip: &ClipBundle, window_seconds: f64, n: usize) -> Vec<f32> {
        let sr = clip.audio.sample_rate as f64;
        let win = (window_seconds * sr).round() as usize;
        let frame = ((0.025 * sr).round() as usize).max(2);
        let hop = ((0.010 * sr).round() as usize).max(1);
        let nfft = frame.next_power_of_two();
        let fft = FftPlanner::<f32>::new().plan_fft_forward(nfft);
        let hann: Vec<f32> = (0..frame)
            .map(|i| 0.5 - 0.5 * (std::f32::consts::TAU * i as f32 / frame as f32).cos())
            .collect();
        let filters = mel_filterbank(self.audio_bands, nfft, sr);
        let samples: Vec<f32> = clip
            .audio
            .samples
            .iter()
            .map(|&s| s as f32 / 32768.0)
            .collect();

        let mut out = Vec::with_capacity(n * self.audio_dim());
        let mut buf = vec![Complex32::new(0.0, 0.0); nfft];
        let mut power = vec![0f32; nfft / 2 + 1];
        for k in 0..n {
            let w0 = k * win;
            for s in 0..self.audio_slices {
                let a = w0 + s * win / self.audio_slices;
                let b = w0 + (s + 1) * win / self.audio_slices;
                power.fill(0.0);
                let mut frames = 0usize;
                let mut start = a;
                loop {
                    let end = (start + frame).min(b);
                    for (i, c) in buf.iter_mut().enumerate() {
                        let v = if i < frame && start + i < end {
                            samples.get(start + i).copied().unwrap_or(0.0) * hann[i]
                        } else {
                            0.0
                        };
                        *c = Complex32::new(v, 0.0);
                    }
                    fft.process(&mut buf);
                    for (p, c) in power.iter_mut().zip(&buf) {
                        *p += c.norm_sqr() / frame as f32;
                    }
                    frames += 1;
                    start += hop;
                    if start + frame > b {
                        break;
                    }
                }
                for filt in &filters {
                    let e: f32 = filt.iter().map(|&(bin, w)| power[bin] * w).sum::<f32>() / frames as f32;
                    out.push((e + LOG_FLOOR).log10());
                }
            }
        }
        out
    }

    fn video_rows(&self, clip: &ClipBundle, window_seconds: f64, n: usize) -> Vec<f32> {
        let proj = self.projection();
        let stats_len = self.video_stats();
        let g = self.video_grid;
        let fps = clip.video.fps.as_f64();
        let frames = &clip.video.frames;
        let (w, h) = clip.video.geometry().unwrap_or((0, 0));
        let cell = |x: usize, y: usize| ((y * g / h.max(1)) * g + x * g / w.max(1)).min(g * g - 1);

        let mut out = Vec::with_capacity(n * self.video_dim);
        let mut stats = vec![0f32; stats_len];
        for k in 0..n {
            let j0 = ((k as f64 * window_seconds * fps) - 1e-9).ceil() as usize;
            let j1 = ((((k + 1) as f64 * window_seconds * fps) - 1e-9).ceil() as usize).min(frames.len());
            let span = j1.saturating_sub(j0);
            stats.fill(0.0);
            for s in 0..self.video_slices {
                let a = j0 + s * span / self.video_slices;
                let b = j0 + (s + 1) * span / self.video_slices;
                let base = s * 2 * g * g;
                let mut counts = vec![0f32; g * g];
                let mut diffs = 0usize;
                for j in a..b {
                    let luma = frames[j].luma();
                    for (p, &v) in luma.iter().enumerate() {
                        let c = cell(p % w, p / w);
                        stats[base + c] += v as f32 / 255.0;
                        if j == a {
                            counts[c] += 1.0;
                        }
                    }
                    if j > j0 {
                        let prev = frames[j - 1].luma();
                        for (p, (&v, &u)) in luma.iter().zip(prev).enumerate() {
                            let c = cell(p % w, p / w);
                            stats[base + g * g + c] += (v as f32 - u as f32).abs() / 255.0;
                        }
                        diffs += 1;
                    }
                }
                let nf = (b - a) as f32;
                for c in 0..g * g {
                    let px = counts[c].max(1.0);
                    if nf > 0.0 {
                        stats[base + c] /= nf * px;
                    }
                    if diffs > 0 {
                        stats[base + g * g + c] /= diffs as f32 * px;
                    }
                }
                for v in &mut stats[base..base + 2 * g * g] {
                    *v = (*v + VIDEO_FLOOR).log10();
                }
            }
            for r in 0..self.video_dim {
                let row = &proj[r * stats_len..(r + 1) * stats_len];
                out.push(row.iter().zip(&stats).map(|(a, b)| a * b).sum());
            }
        }
        out
    }
}

impl FromStr for SyntheticExtractor {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || FeatureError::UnknownExtractor(s.to_string());
        match s {
            "synthetic" => return Ok(Self::default()),
            "synthetic-small" => return Ok(Self::small()),
            "synthetic-desk" => return Ok(Self::desk()),
            _ => {}
        }
        let params = s.strip_prefix("synthetic:").ok_or_else(unknown)?;
        let mut cfg = Self::default();
        for kv in params.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(unknown)?;
            let v: u64 = v.parse().map_err(|_| unknown())?;
            match k {
                "bands" => cfg.audio_bands = v as usize,
                "aslices" => cfg.audio_slices = v as usize,
                "vdim" => cfg.video_dim = v as usize,
                "vslices" => cfg.video_slices = v as usize,
                "grid" => cfg.video_grid = v as usize,
                "seed" => cfg.projection_seed = v,
                _ => return Err(unknown()),
            }
        }
        if cfg.audio_bands == 0 || cfg.audio_slices == 0 || cfg.video_dim == 0 || cfg.video_slices == 0 || cfg.video_grid == 0 {
            return Err(unknown());
        }
        Ok(cfg)
    }
}

/// Triangular mel filters as sparse `(bin, weight)` lists, 125 Hz up to min(7.5 kHz, Nyquist).
fn mel_filterbank(bands: usize, nfft: usize, sr: f64) -> Vec<Vec<(usize, f32)>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let lo = mel(125.0);
    let hi = mel(7500.0f64.min(sr / 2.0));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = sr / nfft as f64;
    (0..bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut f: Vec<(usize, f32)> = (0..=nfft / 2)
                .filter_map(|bin| {
                    let x = bin as f64 * bin_hz;
                    let w = if x > l && x <= c {
                        (x - l) / (c - l)
                    } else if x > c && x < r {
                        (r - x) / (r - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((bin, w as f32))
                })
                .collect();
            if f.is_empty() {
                // narrower than one bin: take the nearest bin
                f.push((((c / bin_hz).round() as usize).min(nfft / 2), 1.0));
            }
            f
        })
        .collect()
}

/// Runs the named extractor. Only synthetic extractors run in-process; real
/// backbone features arrive as `.emb` files.
pub fn extract_features(
    clip: &ClipBundle,
    extractor: &str,
    window_seconds: f64,
) -> Result<(EmbeddingSequence, EmbeddingSequence), FeatureError> {
    extractor.parse::<SyntheticExtractor>()?.extract(clip, window_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{AudioTrack, ClipMeta, Frame, PixelFormat, Rational, VideoTrack};
    use crate::synth::SynthConfig;

    fn silent_black(seconds: f64) -> ClipBundle {
        ClipBundle {
            clip_id: "quiet".into(),
            audio: AudioTrack::new(16_000, vec![0; (seconds * 16_000.0) as usize]),
            video: VideoTrack {
                fps: Rational::new(25, 1),
                pixel_format: PixelFormat::Yuv420,
                frames: vec![Frame::black(16, 16, PixelFormat::Yuv420); (seconds * 25.0) as usize],
            },
            meta: ClipMeta::default(),
        }
    }

    #[test]
    fn ten_seconds_gives_ten_windows() {
        let clip = SynthConfig {
            width: 16,
            height: 16,
            ..Default::default()
        }
        .generate("c", 0);
        let (a, v) = extract_features(&clip, "synthetic", 0.96).unwrap();
        assert_eq!(a.n_windows(), 10);
        assert_eq!(v.n_windows(), 10);
        assert_eq!(a.dim, 128);
        assert_eq!(v.dim, 1024);
        a.check_finite().unwrap();
        v.check_finite().unwrap();
    }

    #[test]
    fn half_second_clip_is_too_short() {
        assert!(matches!(
            extract_features(&silent_black(0.5), "synthetic", 0.96),
            Err(FeatureError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn unknown_extractor() {
        assert!(matches!(
            extract_features(&silent_black(2.0), "i3d", 0.96),
            Err(FeatureError::UnknownExtractor(_))
        ));
    }

    #[test]
    fn silence_maps_to_floor_vector() {
        let floor = LOG_FLOOR.log10();
        let (a, v) = extract_features(&silent_black(3.0), "synthetic", 0.96).unwrap();
        assert!(a.rows.iter().all(|&x| x == floor));
        // black frames carry no luma and no motion: every statistic sits at the video floor
        let ex = SyntheticExtractor::default();
        let proj = ex.projection();
        let stats = ex.video_stats();
        let base = VIDEO_FLOOR.log10();
        let expected: Vec<f32> = (0..ex.video_dim)
            .map(|r| proj[r * stats..(r + 1) * stats].iter().map(|p| p * base).sum())
            .collect();
        for i in 0..v.n_windows() {
            assert_eq!(v.row(i), expected.as_slice());
        }
    }

    #[test]
    fn audio_shift_by_whole_windows_shifts_rows() {
        let clip = SynthConfig {
            width: 8,
            height: 8,
            ..Default::default()
        }
        .generate("c", 5);
        let ex = SyntheticExtractor::desk();
        let mut shifted = clip.clone();
        let k = 2;
        let n = k * 15_360;
        let len = shifted.audio.samples.len();
        shifted.audio.samples.truncate(len - n);
        shifted.audio.samples.splice(0..0, std::iter::repeat_n(0, n));
        let (a0, _) = ex.extract(&clip, 0.96).unwrap();
        let (a1, _) = ex.extract(&shifted, 0.96).unwrap();
        for i in k..a0.n_windows() {
            assert_eq!(a1.row(i), a0.row(i - k), "row {i}");
        }
    }

    #[test]
    fn tags_round_trip() {
        for ex in [
            SyntheticExtractor::default(),
            SyntheticExtractor::desk(),
            SyntheticExtractor::small(),
            SyntheticExtractor {
                audio_bands: 3,
                projection_seed: 17,
                ..SyntheticExtractor::desk()
            },
        ] {
            assert_eq!(ex.tag().parse::<SyntheticExtractor>().unwrap(), ex);
        }
    }

    #[test]
    fn file_round_trip_and_size_checks() {
        let seq = EmbeddingSequence {
            clip_id: "c 1".into(),
            modality: Modality::Audio,
            window_seconds: 0.96,
            extractor: "vggish".into(),
            dim: 128,
            rows: (0..1280).map(|i| i as f32 * 0.25 - 7.0).collect(),
        };
        let bytes = encode_embeddings(&seq);
        assert_eq!(decode_embeddings(&bytes).unwrap(), seq);
        assert!(matches!(
            decode_embeddings(&bytes[..bytes.len() - 4]),
            Err(FeatureError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            decode_embeddings(b"{not json\n"),
            Err(FeatureError::MalformedHeader(_))
        ));
    }

    #[test]
    fn video_payload_arithmetic() {
        let header = br#"{"clip_id":"v","modality":"video","n":10,"d":1024,"window_seconds":0.96,"extractor":"i3d"}"#;
        let mut bytes = header.to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat_n(0u8, 40_960));
        let seq = decode_embeddings(&bytes).unwrap();
        assert_eq!(seq.n_windows(), 10);
        bytes.push(0);
        match decode_embeddings(&bytes) {
            Err(FeatureError::DimensionMismatch { expected, actual }) => {
                assert_eq!((expected, actual), (40_960, 40_961))
            }
            other => panic!("{other:?}"),
        }
    }
}
