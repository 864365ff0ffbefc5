//! Raw media types and the directory bundle interchange format.
//!
//! A bundle is a directory holding `meta.json`, `audio.wav` (PCM16 mono) and
//! either `video.y4m` or a `frame_%06d.pgm` sequence. Only uncompressed
//! storage is supported; transcoding happens outside this crate.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header in {file} at byte {offset}: {reason}")]
    MalformedHeader {
        file: String,
        offset: usize,
        reason: String,
    },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

fn malformed(file: &str, offset: usize, reason: impl Into<String>) -> MediaError {
    MediaError::MalformedHeader {
        file: file.to_string(),
        offset,
        reason: reason.into(),
    }
}

/// A positive frame rate `num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub const fn new(num: u32, den: u32) -> Self {
        Rational { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_positive(self) -> bool {
        self.num > 0 && self.den > 0
    }

    fn parse(s: &str) -> Option<Rational> {
        let s = s.trim();
        let (n, d) = match s.split_once(':').or_else(|| s.split_once('/')) {
            Some((n, d)) => (n.trim().parse().ok()?, d.trim().parse().ok()?),
            None => (s.parse().ok()?, 1),
        };
        Some(Rational::new(n, d))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelFormat {
    Gray8,
    Yuv420,
}

impl PixelFormat {
    /// Bytes of one planar frame: luma plus (for 4:2:0) two quarter-size chroma planes.
    pub fn frame_len(self, width: usize, height: usize) -> usize {
        match self {
            PixelFormat::Gray8 => width * height,
            PixelFormat::Yuv420 => width * height + 2 * chroma_len(width, height),
        }
    }
}

fn chroma_len(width: usize, height: usize) -> usize {
    width.div_ceil(2) * height.div_ceil(2)
}

/// One planar frame. For YUV420 `data` is Y, then U, then V.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    /// An all-black frame: zero luma, neutral chroma.
    pub fn black(width: usize, height: usize, format: PixelFormat) -> Frame {
        let mut data = vec![0u8; format.frame_len(width, height)];
        data[width * height..].fill(128);
        Frame {
            width,
            height,
            data,
        }
    }

    pub fn luma(&self) -> &[u8] {
        &self.data[..self.width * self.height]
    }

    pub fn luma_mut(&mut self) -> &mut [u8] {
        let n = self.width * self.height;
        &mut self.data[..n]
    }

    /// Blacks the frame out in place.
    pub fn blank(&mut self) {
        let n = self.width * self.height;
        self.data[..n].fill(0);
        self.data[n..].fill(128);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioTrack {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
}

impl AudioTrack {
    pub fn new(sample_rate: u32, samples: Vec<i16>) -> Self {
        AudioTrack {
            sample_rate,
            samples,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoTrack {
    pub fps: Rational,
    pub pixel_format: PixelFormat,
    pub frames: Vec<Frame>,
}

impl VideoTrack {
    pub fn duration_seconds(&self) -> f64 {
        self.frames.len() as f64 * self.fps.den as f64 / self.fps.num as f64
    }

    pub fn frame_period(&self) -> f64 {
        self.fps.den as f64 / self.fps.num as f64
    }

    pub fn geometry(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub labels: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipBundle {
    pub clip_id: String,
    pub audio: AudioTrack,
    pub video: VideoTrack,
    pub meta: ClipMeta,
}

impl ClipBundle {
    /// Duration of the shorter track.
    pub fn duration_seconds(&self) -> f64 {
        self.audio
            .duration_seconds()
            .min(self.video.duration_seconds())
    }

    pub fn frame_period(&self) -> f64 {
        self.video.frame_period()
    }
}

/// A broken invariant found by [`validate_bundle`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyClipId,
    NonPositiveSampleRate,
    NonPositiveFps(Rational),
    DurationMismatch {
        audio_seconds: f64,
        video_seconds: f64,
        tolerance: f64,
    },
    HeterogeneousGeometry {
        index: usize,
        width: usize,
        height: usize,
    },
    FrameSize {
        index: usize,
        expected: usize,
        actual: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyClipId => write!(f, "clip_id is empty"),
            Violation::NonPositiveSampleRate => write!(f, "sample_rate must be positive"),
            Violation::NonPositiveFps(r) => write!(f, "fps must be positive, got {r}"),
            Violation::DurationMismatch {
                audio_seconds,
                video_seconds,
                tolerance,
            } => write!(
                f,
                "duration mismatch {:.3} s > {:.3} s (audio {audio_seconds:.3} s, video {video_seconds:.3} s)",
                (audio_seconds - video_seconds).abs(),
                tolerance
            ),
            Violation::HeterogeneousGeometry {
                index,
                width,
                height,
            } => write!(
                f,
                "heterogeneous frame geometry at index {index} ({width}x{height})"
            ),
            Violation::FrameSize {
                index,
                expected,
                actual,
            } => write!(
                f,
                "frame {index} holds {actual} bytes, expected {expected}"
            ),
        }
    }
}

/// Checks every type invariant; an empty list means the bundle is valid.
pub fn validate_bundle(bundle: &ClipBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    if bundle.clip_id.is_empty() {
        out.push(Violation::EmptyClipId);
    }
    if bundle.audio.sample_rate == 0 {
        out.push(Violation::NonPositiveSampleRate);
    }
    let fps = bundle.video.fps;
    if !fps.is_positive() {
        out.push(Violation::NonPositiveFps(fps));
    }
    if let Some((w0, h0)) = bundle.video.geometry() {
        let expected = bundle.video.pixel_format.frame_len(w0, h0);
        for (i, fr) in bundle.video.frames.iter().enumerate() {
            if fr.width != w0 || fr.height != h0 {
                out.push(Violation::HeterogeneousGeometry {
                    index: i,
                    width: fr.width,
                    height: fr.height,
                });
            } else if fr.data.len() != expected {
                out.push(Violation::FrameSize {
                    index: i,
                    expected,
                    actual: fr.data.len(),
                });
            }
        }
    }
    if bundle.audio.sample_rate > 0 && fps.is_positive() {
        let a = bundle.audio.duration_seconds();
        let v = bundle.video.duration_seconds();
        let tol = bundle.video.frame_period();
        if (a - v).abs() > tol + 1e-9 {
            out.push(Violation::DurationMismatch {
                audio_seconds: a,
                video_seconds: v,
                tolerance: tol,
            });
        }
    }
    out
}

// ---------------------------------------------------------------- WAV

pub fn parse_wav(bytes: &[u8]) -> Result<AudioTrack, MediaError> {
    const F: &str = "audio.wav";
    if bytes.len() < 12 {
        return Err(malformed(F, bytes.len(), "truncated RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(malformed(F, 0, "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(malformed(F, 8, "missing WAVE form type"));
    }
    let mut pos = 12;
    let mut fmt_seen: Option<u32> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(malformed(
                F,
                pos + 4,
                format!("chunk length {len} runs past end of file"),
            ));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(malformed(F, pos + 4, "fmt chunk shorter than 16 bytes"));
                }
                let b = &bytes[body..body + 16];
                let format = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                if format != 1 {
                    return Err(MediaError::UnsupportedEncoding(format!(
                        "WAV audio_format {format} (only PCM=1)"
                    )));
                }
                if channels != 1 {
                    return Err(MediaError::UnsupportedEncoding(format!(
                        "WAV with {channels} channels (mono required)"
                    )));
                }
                if bits != 16 {
                    return Err(MediaError::UnsupportedEncoding(format!(
                        "WAV with {bits}-bit samples (16-bit required)"
                    )));
                }
                if rate == 0 {
                    return Err(malformed(F, body + 4, "sample rate is zero"));
                }
                fmt_seen = Some(rate);
            }
            b"data" => {
                let Some(rate) = fmt_seen else {
                    return Err(malformed(F, pos, "data chunk before fmt chunk"));
                };
                if !len.is_multiple_of(2) {
                    return Err(malformed(F, pos + 4, "odd data length for 16-bit samples"));
                }
                let samples = bytes[body..body + len]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                return Ok(AudioTrack::new(rate, samples));
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err(malformed(F, pos.min(bytes.len()), "no data chunk"))
}

pub fn encode_wav(track: &AudioTrack) -> Vec<u8> {
    let data_len = track.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&track.sample_rate.to_le_bytes());
    out.extend_from_slice(&(track.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &track.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------- Y4M

pub fn parse_y4m(bytes: &[u8]) -> Result<VideoTrack, MediaError> {
    const F: &str = "video.y4m";
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed(F, bytes.len(), "unterminated stream header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| malformed(F, e.valid_up_to(), "header is not ASCII"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(malformed(F, 0, "missing YUV4MPEG2 magic"));
    }
    let (mut width, mut height, mut fps) = (None, None, None);
    let mut format = PixelFormat::Yuv420;
    let mut offset = 10;
    for tok in tokens {
        if tok.is_empty() {
            offset += 1;
            continue;
        }
        let (tag, val) = tok.split_at(1);
        match tag {
            "W" => width = val.parse::<usize>().ok(),
            "H" => height = val.parse::<usize>().ok(),
            "F" => fps = Rational::parse(val).filter(|r| r.is_positive()),
            "C" => {
                format = match val {
                    "420" | "420jpeg" | "420paldv" | "420mpeg2" => PixelFormat::Yuv420,
                    "mono" => PixelFormat::Gray8,
                    other => {
                        return Err(MediaError::UnsupportedEncoding(format!(
                            "Y4M chroma C{other}"
                        )))
                    }
                }
            }
            "I" | "A" | "X" => {}
            _ => return Err(malformed(F, offset, format!("unknown tag {tok:?}"))),
        }
        if matches!(tag, "W" | "H") && !val.parse::<usize>().is_ok_and(|v| v > 0) {
            return Err(malformed(F, offset, format!("bad dimension {tok:?}")));
        }
        if tag == "F" && fps.is_none() {
            return Err(malformed(F, offset, format!("bad frame rate {tok:?}")));
        }
        offset += tok.len() + 1;
    }
    let width = width.ok_or_else(|| malformed(F, header_end, "missing W tag"))?;
    let height = height.ok_or_else(|| malformed(F, header_end, "missing H tag"))?;
    let fps = fps.ok_or_else(|| malformed(F, header_end, "missing F tag"))?;
    let frame_len = format.frame_len(width, height);

    let mut frames = Vec::new();
    let mut pos = header_end + 1;
    while pos < bytes.len() {
        if !bytes[pos..].starts_with(b"FRAME") {
            return Err(malformed(F, pos, "expected FRAME marker"));
        }
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed(F, pos, "unterminated FRAME header"))?;
        let start = pos + nl + 1;
        if start + frame_len > bytes.len() {
            return Err(malformed(
                F,
                pos,
                format!("truncated frame {} ({} bytes expected)", frames.len(), frame_len),
            ));
        }
        frames.push(Frame {
            width,
            height,
            data: bytes[start..start + frame_len].to_vec(),
        });
        pos = start + frame_len;
    }
    Ok(VideoTrack {
        fps,
        pixel_format: format,
        frames,
    })
}

/// Writes `YUV4MPEG2 W.. H.. F..:.. C420` (or `Cmono`) followed by `FRAME\n` chunks.
pub fn encode_y4m(track: &VideoTrack) -> Result<Vec<u8>, MediaError> {
    let (w, h) = track
        .geometry()
        .ok_or_else(|| MediaError::Invalid("cannot write a Y4M stream with no frames".into()))?;
    let chroma = match track.pixel_format {
        PixelFormat::Yuv420 => "420",
        PixelFormat::Gray8 => "mono",
    };
    let mut out = format!(
        "YUV4MPEG2 W{w} H{h} F{}:{} C{chroma}\n",
        track.fps.num, track.fps.den
    )
    .into_bytes();
    for f in &track.frames {
        out.extend_from_slice(b"FRAME\n");
        out.extend_from_slice(&f.data);
    }
    Ok(out)
}

// ---------------------------------------------------------------- PGM

pub fn parse_pgm(bytes: &[u8], file: &str) -> Result<Frame, MediaError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(file, pos, "truncated PGM header"));
        }
        fields.push((start, &bytes[start..pos]));
    }
    if fields[0].1 != b"P5" {
        return Err(malformed(file, 0, "missing P5 magic"));
    }
    let num = |(off, raw): (usize, &[u8])| -> Result<usize, MediaError> {
        std::str::from_utf8(raw)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(file, off, "expected decimal integer"))
    };
    let width = num(fields[1])?;
    let height = num(fields[2])?;
    let maxval = num(fields[3])?;
    if width == 0 || height == 0 {
        return Err(malformed(file, fields[1].0, "zero dimension"));
    }
    if maxval != 255 {
        return Err(MediaError::UnsupportedEncoding(format!(
            "PGM maxval {maxval} (8-bit required)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height;
    if start + len > bytes.len() {
        return Err(malformed(file, start.min(bytes.len()), "truncated raster"));
    }
    Ok(Frame {
        width,
        height,
        data: bytes[start..start + len].to_vec(),
    })
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(frame.luma());
    out
}

// ---------------------------------------------------------------- bundle

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    clip_id: String,
    fps: serde_json::Value,
    sample_rate: u32,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, MediaError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(MediaError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn pgm_name(i: usize) -> String {
    format!("frame_{i:06}.pgm")
}

/// Loads a bundle directory and reconciles track durations.
///
/// When audio and video disagree by more than one frame period, the longer
/// track is trimmed to the shorter one.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ClipBundle, MediaError> {
    let dir = dir.as_ref();
    let meta_bytes = read_file(&dir.join("meta.json"))?;
    let meta: MetaFile = serde_json::from_slice(&meta_bytes).map_err(|e| {
        malformed(
            "meta.json",
            line_col_offset(&meta_bytes, e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let fps = match &meta.fps {
        serde_json::Value::Number(n) => n
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .map(|v| Rational::new(v, 1)),
        serde_json::Value::String(s) => Rational::parse(s),
        _ => None,
    }
    .filter(|r| r.is_positive())
    .ok_or_else(|| malformed("meta.json", 0, format!("bad fps {}", meta.fps)))?;

    let audio = parse_wav(&read_file(&dir.join("audio.wav"))?)?;
    if audio.sample_rate != meta.sample_rate {
        return Err(malformed(
            "audio.wav",
            24,
            format!(
                "sample rate {} disagrees with meta.json {}",
                audio.sample_rate, meta.sample_rate
            ),
        ));
    }

    let y4m = dir.join("video.y4m");
    let video = if y4m.exists() {
        let v = parse_y4m(&read_file(&y4m)?)?;
        if v.fps != fps {
            return Err(malformed(
                "video.y4m",
                0,
                format!("frame rate {} disagrees with meta.json {fps}", v.fps),
            ));
        }
        v
    } else if dir.join(pgm_name(0)).exists() {
        let mut frames = Vec::new();
        loop {
            let p = dir.join(pgm_name(frames.len()));
            if !p.exists() {
                break;
            }
            let name = pgm_name(frames.len());
            frames.push(parse_pgm(&read_file(&p)?, &name)?);
        }
        VideoTrack {
            fps,
            pixel_format: PixelFormat::Gray8,
            frames,
        }
    } else {
        return Err(MediaError::MissingFile(y4m));
    };

    let mut bundle = ClipBundle {
        clip_id: meta.clip_id,
        audio,
        video,
        meta: ClipMeta {
            labels: meta.labels,
            notes: meta.notes,
        },
    };
    reconcile_durations(&mut bundle);
    Ok(bundle)
}

fn line_col_offset(bytes: &[u8], line: usize, col: usize) -> usize {
    let mut off = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return off + col.saturating_sub(1);
        }
        off += l.len() + 1;
    }
    off.min(bytes.len())
}

/// Trims the longer track when the two disagree by more than one frame period.
pub fn reconcile_durations(bundle: &mut ClipBundle) {
    if bundle.video.frames.is_empty() || bundle.audio.sample_rate == 0 {
        return;
    }
    let a = bundle.audio.duration_seconds();
    let v = bundle.video.duration_seconds();
    let period = bundle.video.frame_period();
    if a - v > period {
        let keep = (v * bundle.audio.sample_rate as f64).round() as usize;
        bundle.audio.samples.truncate(keep);
    } else if v - a > period {
        let keep = (a / period).round() as usize;
        bundle.video.frames.truncate(keep);
    }
}

/// Writes a bundle directory. GRAY8 video goes to a PGM sequence, YUV420 to `video.y4m`.
pub fn save_bundle(bundle: &ClipBundle, dir: impl AsRef<Path>) -> Result<(), MediaError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let fps = bundle.video.fps;
    let meta = MetaFile {
        clip_id: bundle.clip_id.clone(),
        fps: if fps.den == 1 {
            serde_json::Value::from(fps.num)
        } else {
            serde_json::Value::from(fps.to_string())
        },
        sample_rate: bundle.audio.sample_rate,
        labels: bundle.meta.labels.clone(),
        notes: bundle.meta.notes.clone(),
    };
    let mut meta_bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    meta_bytes.push(b'\n');
    fs::write(dir.join("meta.json"), meta_bytes)?;
    fs::write(dir.join("audio.wav"), encode_wav(&bundle.audio))?;

    // stale video from a previous save would shadow or extend this one
    let y4m = dir.join("video.y4m");
    if y4m.exists() {
        fs::remove_file(&y4m)?;
    }
    let mut i = 0;
    while dir.join(pgm_name(i)).exists() {
        fs::remove_file(dir.join(pgm_name(i)))?;
        i += 1;
    }

    match bundle.video.pixel_format {
        PixelFormat::Yuv420 => {
            let mut f = fs::File::create(&y4m)?;
            f.write_all(&encode_y4m(&bundle.video)?)?;
        }
        PixelFormat::Gray8 => {
            for (i, frame) in bundle.video.frames.iter().enumerate() {
                fs::write(dir.join(pgm_name(i)), encode_pgm(frame))?;
            }
        }
    }
    Ok(())
}
