//! The demo's operations as plain Rust, so they can be tested natively.

use serde::Serialize;

use avsync::analysis::{bin_score, bin_upper_edge, N_BINS};
use avsync::distort::{apply_distortion, DistortionKind, DistortionSpec};
use avsync::features::SyntheticExtractor;
use avsync::frechet::{distortion_sweep, SweepRow};
use avsync::media::ClipBundle;
use avsync::synth::SynthConfig;

const WINDOW_SECONDS: f64 = 0.96;

fn demo_clip(id: &str, seed: u64, seconds: f64) -> ClipBundle {
    SynthConfig {
        duration_seconds: seconds,
        width: 16,
        height: 16,
        ..Default::default()
    }
    .generate(id, seed)
}

/// Per-video-frame activity of both modalities, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tracks {
    /// RMS of the audio samples spanning each frame.
    pub audio: Vec<f64>,
    /// Mean luma of each frame.
    pub video: Vec<f64>,
}

fn tracks(clip: &ClipBundle) -> Tracks {
    let period = clip.video.frame_period();
    let rate = clip.audio.sample_rate as f64;
    let samples = &clip.audio.samples;
    let audio = (0..clip.video.frames.len())
        .map(|i| {
            let a = ((i as f64 * period * rate) as usize).min(samples.len());
            let b = (((i + 1) as f64 * period * rate) as usize).min(samples.len());
            if a == b {
                return 0.0;
            }
            let ss: f64 = samples[a..b].iter().map(|&s| (s as f64 / 32768.0).powi(2)).sum();
            (ss / (b - a) as f64).sqrt()
        })
        .collect();
    let video = clip
        .video
        .frames
        .iter()
        .map(|f| {
            let l = f.luma();
            l.iter().map(|&p| p as f64).sum::<f64>() / (255.0 * l.len().max(1) as f64)
        })
        .collect();
    Tracks { audio, video }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preview {
    pub kind: &'static str,
    pub level_index: usize,
    pub level: f64,
    pub fps: f64,
    pub original: Tracks,
    pub distorted: Tracks,
    pub seconds_in: f64,
    pub seconds_out: f64,
}

/// Distorts a four-second synthetic clip and summarizes both versions.
pub fn preview(kind: &str, level_index: usize, seed: u64) -> Result<Preview, String> {
    let kind: DistortionKind = kind.parse()?;
    if !(1..=10).contains(&level_index) {
        return Err(format!("level index {level_index} outside 1..=10"));
    }
    let level = kind.levels()[level_index - 1];
    let clip = demo_clip("demo", seed, 4.0);
    let out = apply_distortion(&clip, &DistortionSpec::new(kind, level, seed)).map_err(|e| e.to_string())?;
    Ok(Preview {
        kind: kind.name(),
        level_index,
        level,
        fps: clip.video.fps.as_f64(),
        original: tracks(&clip),
        distorted: tracks(&out),
        seconds_in: clip.duration_seconds(),
        seconds_out: out.duration_seconds(),
    })
}

/// FAD, FVD and FAVD for every audio-shift level over `n_clips` six-second clips.
pub fn shift_sweep(n_clips: usize, seed: u64) -> Result<Vec<SweepRow>, String> {
    if !(2..=32).contains(&n_clips) {
        return Err("between 2 and 32 clips".into());
    }
    let clips: Vec<ClipBundle> = (0..n_clips)
        .map(|i| demo_clip(&format!("s{i}"), seed.wrapping_add(i as u64), 6.0))
        .collect();
    let mut rows = distortion_sweep(
        &clips,
        &SyntheticExtractor::small(),
        WINDOW_SECONDS,
        &[DistortionKind::AudioShift],
        seed,
    )
    .map_err(|e| e.to_string())?;
    rows.sort_by(|a, b| a.level.total_cmp(&b.level));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
}

pub fn bin_of(score: f64) -> Bin {
    let k = bin_score(score);
    Bin {
        bin: k,
        lower: bin_upper_edge(k - 1),
        upper: bin_upper_edge(k),
    }
}

pub fn n_bins() -> usize {
    N_BINS
}
