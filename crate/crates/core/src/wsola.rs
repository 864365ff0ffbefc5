//! Waveform-similarity overlap-add time stretching.
//!
//! Changes playback rate without resampling, so pitch is kept. Frames of
//! 30 ms are laid down every 15 ms in the output; each frame is read from the
//! input near its nominal position, shifted by up to 10 ms to line up best with
//! the natural continuation of the previous frame.

const WINDOW_SECONDS: f64 = 0.030;
const SEEK_SECONDS: f64 = 0.010;

/// Stretches `input` so that it plays `rate` times faster (`rate > 1` shortens).
pub fn time_stretch(input: &[i16], sample_rate: u32, rate: f64) -> Vec<i16> {
    assert!(rate > 0.0, "stretch rate must be positive");
    let out_len = (input.len() as f64 / rate).round() as usize;
    let win = ((WINDOW_SECONDS * sample_rate as f64).round() as usize).max(4) & !1;
    let hop = win / 2;
    let seek = (SEEK_SECONDS * sample_rate as f64).round() as isize;
    if input.len() < win || out_len == 0 {
        return nearest_resample(input, out_len);
    }

    let x: Vec<f32> = input.iter().map(|&s| s as f32).collect();
    let window: Vec<f32> = (0..win)
        .map(|n| 0.5 - 0.5 * (std::f32::consts::TAU * n as f32 / win as f32).cos())
        .collect();
    let sample = |i: isize| -> f32 {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };

    let max_start = (x.len() - win) as isize;
    let mut acc = vec![0f32; out_len + win];
    let mut norm = vec![0f32; out_len + win];
    let mut prev_start: isize = 0;
    let mut k = 0usize;
    while k * hop < out_len {
        let nominal = (k as f64 * hop as f64 * rate).round() as isize;
        let start = if k == 0 {
            0
        } else {
            let natural = prev_start + hop as isize;
            let lo = (nominal - seek).max(0);
            let hi = (nominal + seek).min(max_start).max(lo);
            let mut best = lo;
            let mut best_score = f32::NEG_INFINITY;
            for cand in lo..=hi {
                let score: f32 = (0..hop as isize)
                    .map(|i| sample(cand + i) * sample(natural + i))
                    .sum();
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        let base = k * hop;
        for i in 0..win {
            acc[base + i] += sample(start + i as isize) * window[i];
            norm[base + i] += window[i];
        }
        prev_start = start;
        k += 1;
    }

    acc.truncate(out_len);
    acc.iter()
        .zip(&norm)
        .map(|(&a, &w)| {
            let v = if w > 1e-3 { a / w } else { a };
            v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
        })
        .collect()
}

fn nearest_resample(input: &[i16], out_len: usize) -> Vec<i16> {
    if input.is_empty() {
        return vec![0; out_len];
    }
    (0..out_len)
        .map(|i| input[((i as f64 * input.len() as f64 / out_len as f64) as usize).min(input.len() - 1)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, seconds: f64) -> Vec<i16> {
        (0..(seconds * sr as f64) as usize)
            .map(|i| (8000.0 * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin()) as i16)
            .collect()
    }

    fn zero_crossings(x: &[i16]) -> usize {
        x.windows(2).filter(|w| (w[0] < 0) != (w[1] < 0)).count()
    }

    #[test]
    fn output_length_follows_rate() {
        let x = tone(440.0, 16_000, 2.0);
        assert_eq!(time_stretch(&x, 16_000, 1.25).len(), 25_600);
        assert_eq!(time_stretch(&x, 16_000, 0.5).len(), 64_000);
    }

    #[test]
    fn pitch_is_preserved() {
        let sr = 16_000;
        let x = tone(440.0, sr, 2.0);
        for rate in [0.5, 0.75, 1.25, 1.75] {
            let y = time_stretch(&x, sr, rate);
            let f_in = zero_crossings(&x) as f64 / 2.0 / (x.len() as f64 / sr as f64);
            let f_out = zero_crossings(&y) as f64 / 2.0 / (y.len() as f64 / sr as f64);
            assert!((f_in - f_out).abs() / f_in < 0.03, "rate {rate}: {f_in} vs {f_out}");
        }
    }

    #[test]
    fn deterministic() {
        let x = tone(300.0, 8000, 1.0);
        assert_eq!(time_stretch(&x, 8000, 1.3), time_stretch(&x, 8000, 1.3));
    }

    #[test]
    fn short_input_falls_back() {
        assert_eq!(time_stretch(&[1, 2, 3, 4], 16_000, 2.0), vec![1, 3]);
        assert!(time_stretch(&[], 16_000, 2.0).is_empty());
    }
}
