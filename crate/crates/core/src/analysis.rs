//! Agreement statistics and metric-versus-human reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distort::DistortionKind;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("clip {0} lacks a score")]
    MissingScore(String),
    #[error("need at least 2 sets, got {0}")]
    TooFewSets(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("prediction and truth label counts differ: {0} vs {1}")]
    LabelMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Product-moment correlation. Fails when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::DegenerateInput("fewer than 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// A benchmark set: every video with one distortion kind at one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SetKey {
    pub kind: DistortionKind,
    /// 1-based catalog position.
    pub level_index: usize,
}

pub type ClipScores = BTreeMap<String, f64>;

fn paired_scores(
    metric: &ClipScores,
    human: &ClipScores,
    keys: &BTreeMap<String, SetKey>,
) -> Result<Vec<(SetKey, f64, f64)>, AnalysisError> {
    keys.iter()
        .map(|(clip, &key)| {
            let m = metric.get(clip).ok_or_else(|| AnalysisError::MissingScore(clip.clone()))?;
            let h = human.get(clip).ok_or_else(|| AnalysisError::MissingScore(clip.clone()))?;
            Ok((key, *m, *h))
        })
        .collect()
}

fn set_means(rows: &[(SetKey, f64, f64)]) -> BTreeMap<SetKey, (f64, f64, usize)> {
    let mut sums: BTreeMap<SetKey, (f64, f64, usize)> = BTreeMap::new();
    for &(k, m, h) in rows {
        let e = sums.entry(k).or_insert((0.0, 0.0, 0));
        e.0 += m;
        e.1 += h;
        e.2 += 1;
    }
    for e in sums.values_mut() {
        e.0 /= e.2 as f64;
        e.1 /= e.2 as f64;
    }
    sums
}

/// Pearson over per-set means and over individual clips, for every clip that
/// carries a set key.
pub fn set_level_correlation(
    metric: &ClipScores,
    human: &ClipScores,
    keys: &BTreeMap<String, SetKey>,
) -> Result<(f64, f64), AnalysisError> {
    let rows = paired_scores(metric, human, keys)?;
    let sets = set_means(&rows);
    if sets.len() < 2 {
        return Err(AnalysisError::TooFewSets(sets.len()));
    }
    let (sm, sh): (Vec<f64>, Vec<f64>) = sets.values().map(|&(m, h, _)| (m, h)).unzip();
    let (cm, ch): (Vec<f64>, Vec<f64>) = rows.iter().map(|&(_, m, h)| (m, h)).unzip();
    Ok((pearson(&sm, &sh)?, pearson(&cm, &ch)?))
}

/// Interval-metric Krippendorff's alpha. Units with fewer than two ratings
/// are unpairable and ignored; a pool of identical values gives 1.
pub fn krippendorff_alpha(units: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    let pairable: Vec<&Vec<f64>> = units.iter().filter(|u| u.len() >= 2).collect();
    if pairable.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!(
            "{} units with at least 2 ratings",
            pairable.len()
        )));
    }
    let mut observed = 0.0;
    for u in &pairable {
        let mut s = 0.0;
        for (i, a) in u.iter().enumerate() {
            for b in &u[i + 1..] {
                s += 2.0 * (a - b) * (a - b);
            }
        }
        observed += s / (u.len() - 1) as f64;
    }
    let pooled: Vec<f64> = pairable.iter().flat_map(|u| u.iter().copied()).collect();
    let n = pooled.len() as f64;
    // Sum over ordered pairs of (a - b)^2 = 2 n sum (x - mean)^2.
    let mean = pooled.iter().sum::<f64>() / n;
    let expected = 2.0 * n * pooled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

pub const N_BINS: usize = 21;

/// Upper edge of bin `k` (1-based) on the (0, 5] scale.
pub fn bin_upper_edge(k: usize) -> f64 {
    k as f64 * 5.0 / N_BINS as f64
}

/// Bin of a score on 21 equal (low, high] intervals over (0, 5]. Out-of-range
/// and NaN inputs clamp to the nearest end.
pub fn bin_score(score: f64) -> usize {
    if score.is_nan() || score <= 0.0 {
        return 1;
    }
    (1..=N_BINS).find(|&k| score <= bin_upper_edge(k)).unwrap_or(N_BINS)
}

/// Shift levels counted as perceptually in sync.
pub const SYNC_POSITIVE_SHIFTS: [f64; 4] = [0.045, 0.1, 0.125, -0.125];

pub fn is_sync_positive_shift(level: f64) -> bool {
    SYNC_POSITIVE_SHIFTS.iter().any(|&l| (l - level).abs() < 1e-9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix2x2 {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix2x2 {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> Result<f64, AnalysisError> {
        match self.total() {
            0 => Err(AnalysisError::DegenerateInput("empty confusion matrix".into())),
            t => Ok((self.tp + self.tn) as f64 / t as f64),
        }
    }
}

/// Counts predicted-positive against truly-positive labels.
pub fn binary_sync_eval(predicted: &[bool], truth: &[bool]) -> Result<(ConfusionMatrix2x2, f64), AnalysisError> {
    if predicted.len() != truth.len() {
        return Err(AnalysisError::LabelMismatch(predicted.len(), truth.len()));
    }
    let mut m = ConfusionMatrix2x2::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (t, p) {
            (true, true) => m.tp += 1,
            (true, false) => m.fn_ += 1,
            (false, true) => m.fp += 1,
            (false, false) => m.tn += 1,
        }
    }
    let acc = m.accuracy()?;
    Ok((m, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub key: SetKey,
    pub metric_mean: f64,
    pub human_mean: f64,
    pub n_clips: usize,
}

#[derive(Debug)]
pub struct DistortionReport {
    pub rows: Vec<ReportRow>,
    /// Pearson over each kind's level means.
    pub per_kind: BTreeMap<DistortionKind, Result<f64, AnalysisError>>,
}

pub fn per_distortion_report(
    metric: &ClipScores,
    human: &ClipScores,
    keys: &BTreeMap<String, SetKey>,
) -> Result<DistortionReport, AnalysisError> {
    let sets = set_means(&paired_scores(metric, human, keys)?);
    let rows: Vec<ReportRow> = sets
        .iter()
        .map(|(&key, &(m, h, n))| ReportRow {
            key,
            metric_mean: m,
            human_mean: h,
            n_clips: n,
        })
        .collect();
    let mut by_kind: BTreeMap<DistortionKind, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_kind.entry(r.key.kind).or_default();
        e.0.push(r.metric_mean);
        e.1.push(r.human_mean);
    }
    let per_kind = by_kind.into_iter().map(|(k, (m, h))| (k, pearson(&m, &h))).collect();
    Ok(DistortionReport { rows, per_kind })
}

pub fn write_report_csv(report: &DistortionReport, w: impl Write) -> Result<(), AnalysisError> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| AnalysisError::Io(e.into());
    out.write_record(["kind", "level_index", "metric_mean", "human_mean", "n_clips"]).map_err(io)?;
    for r in &report.rows {
        out.write_record([
            r.key.kind.name().to_string(),
            r.key.level_index.to_string(),
            r.metric_mean.to_string(),
            r.human_mean.to_string(),
            r.n_clips.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// One rated pair, reduced to the kinds and mean scores of its two slots.
/// `None` marks an undistorted slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    pub left_kind: Option<DistortionKind>,
    pub right_kind: Option<DistortionKind>,
    pub left_score: f64,
    pub right_score: f64,
}

/// |left - right| grouped by unordered pair of distinct kinds. Undistorted
/// slots, same-kind pairs and audio shifts are left out.
pub fn abs_diff_analysis(tasks: &[PairObservation]) -> BTreeMap<(DistortionKind, DistortionKind), Vec<f64>> {
    let mut out: BTreeMap<(DistortionKind, DistortionKind), Vec<f64>> = BTreeMap::new();
    for t in tasks {
        let (Some(a), Some(b)) = (t.left_kind, t.right_kind) else {
            continue;
        };
        if a == b || a == DistortionKind::AudioShift || b == DistortionKind::AudioShift {
            continue;
        }
        out.entry((a.min(b), a.max(b))).or_default().push((t.left_score - t.right_score).abs());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Coincidence-matrix form of alpha, written independently of the
    /// pairwise form above.
    fn alpha_oracle(units: &[Vec<f64>]) -> f64 {
        let mut values: Vec<f64> = units.iter().flatten().copied().collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let idx = |x: f64| values.iter().position(|&v| v == x).unwrap();
        let v = values.len();
        let mut o = vec![vec![0.0; v]; v];
        for u in units.iter().filter(|u| u.len() >= 2) {
            let m = u.len() as f64;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    if i != j {
                        o[idx(u[i])][idx(u[j])] += 1.0 / (m - 1.0);
                    }
                }
            }
        }
        let nc: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
        let n: f64 = nc.iter().sum();
        let (mut dobs, mut dexp) = (0.0, 0.0);
        for c in 0..v {
            for k in 0..v {
                let d2 = (values[c] - values[k]).powi(2);
                dobs += o[c][k] * d2;
                dexp += nc[c] * nc[k] * d2;
            }
        }
        1.0 - (n - 1.0) * dobs / dexp
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(AnalysisError::DegenerateInput(_))));
        assert!(matches!(pearson(&[1.0], &[1.0, 2.0]), Err(AnalysisError::LengthMismatch(1, 2))));
    }

    fn keyed(sets: &[(usize, &[f64], &[f64])]) -> (ClipScores, ClipScores, BTreeMap<String, SetKey>) {
        let (mut m, mut h, mut k) = (ClipScores::new(), ClipScores::new(), BTreeMap::new());
        for &(level, ms, hs) in sets {
            for (i, (a, b)) in ms.iter().zip(hs).enumerate() {
                let id = format!("l{level}_{i}");
                m.insert(id.clone(), *a);
                h.insert(id.clone(), *b);
                k.insert(
                    id,
                    SetKey {
                        kind: DistortionKind::AudioSpeedUp,
                        level_index: level,
                    },
                );
            }
        }
        (m, h, k)
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 10.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_level_examples() {
        let (m, h, k) = keyed(&[(1, &[0.5, 1.5], &[2.0, 2.0]), (2, &[2.0, 2.0], &[3.0, 5.0]), (3, &[3.0], &[5.0])]);
        let (set, _) = set_level_correlation(&m, &h, &k).unwrap();
        let oracle = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 5.0]).unwrap();
        assert!((set - oracle).abs() < 1e-12);
        assert!((set - 0.9820).abs() < 1e-4);

        let (m, h, k) = keyed(&[(1, &[1.0, 2.0], &[1.0, 2.0]), (2, &[4.0], &[4.0])]);
        assert_eq!(set_level_correlation(&m, &h, &k).unwrap(), (1.0, 1.0));
        let neg: ClipScores = h.iter().map(|(c, v)| (c.clone(), 6.0 - v)).collect();
        let (s, c) = set_level_correlation(&neg, &h, &k).unwrap();
        assert!((s + 1.0).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);

        let mut missing = m.clone();
        missing.remove("l1_0");
        assert!(matches!(set_level_correlation(&missing, &h, &k), Err(AnalysisError::MissingScore(_))));
        let (m, h, k) = keyed(&[(1, &[1.0, 2.0], &[1.0, 2.0])]);
        assert!(matches!(set_level_correlation(&m, &h, &k), Err(AnalysisError::TooFewSets(1))));
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(krippendorff_alpha(&[vec![3.0, 3.0, 3.0], vec![2.0, 2.0]]).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha(&[vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap(), 1.0);
        let units = vec![vec![1.0, 2.0], vec![4.0, 5.0]];
        let a = krippendorff_alpha(&units).unwrap();
        assert!((a - alpha_oracle(&units)).abs() < 1e-10);
        assert!((a - 0.85).abs() < 1e-12);
        let mixed = vec![vec![1.0, 2.0, 3.0], vec![4.0, 4.0], vec![5.0, 1.0, 5.0, 2.0], vec![3.0]];
        assert!((krippendorff_alpha(&mixed).unwrap() - alpha_oracle(&mixed)).abs() < 1e-10);
        assert!(krippendorff_alpha(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn bin_examples() {
        assert_eq!(bin_score(5.0), 21);
        assert_eq!(bin_score(0.1), 1);
        assert_eq!(bin_score(20.0 * 5.0 / 21.0), 20);
        assert_eq!(bin_score(4.77), 21);
        assert_eq!(bin_score(7.0), 21);
        assert_eq!(bin_score(-1.0), 1);
        assert_eq!(bin_score(f64::NAN), 1);
        assert!((bin_upper_edge(20) - 4.7619).abs() < 1e-4);
    }

    #[test]
    fn confusion_examples() {
        let m = ConfusionMatrix2x2 { tp: 39, fn_: 227, fp: 4, tn: 130 };
        assert!((m.accuracy().unwrap() - 0.4225).abs() < 1e-12);
        let m = ConfusionMatrix2x2 { tp: 92, fn_: 174, fp: 24, tn: 110 };
        assert!((m.accuracy().unwrap() - 0.505).abs() < 1e-12);
        let truth = [true, false, true, false];
        let (m, acc) = binary_sync_eval(&truth, &truth).unwrap();
        assert_eq!((m.tp, m.tn, acc), (2, 2, 1.0));
        assert!(matches!(binary_sync_eval(&[true], &[]), Err(AnalysisError::LabelMismatch(1, 0))));
        assert!(is_sync_positive_shift(-0.125) && !is_sync_positive_shift(0.25));
    }

    #[test]
    fn report_examples() {
        let mut m = ClipScores::new();
        let mut h = ClipScores::new();
        let mut keys = BTreeMap::new();
        for kind in [DistortionKind::IntermittentMute, DistortionKind::FragmentShuffle] {
            for level in 1..=10usize {
                for c in 0..3 {
                    let id = format!("{}_{level}_{c}", kind.name());
                    let human = 5.0 - 0.4 * level as f64 + 0.1 * c as f64;
                    h.insert(id.clone(), human);
                    m.insert(id.clone(), (human / 2.0).exp());
                    keys.insert(id, SetKey { kind, level_index: level });
                }
            }
        }
        let r = per_distortion_report(&m, &h, &keys).unwrap();
        assert_eq!(r.rows.len(), 20);
        assert!(r.per_kind.values().all(|p| *p.as_ref().unwrap() > 0.9));
        let perfect = per_distortion_report(&h, &h, &keys).unwrap();
        assert!(perfect.per_kind.values().all(|p| (p.as_ref().unwrap() - 1.0).abs() < 1e-12));
        let flat: ClipScores = h.keys().map(|c| (c.clone(), 3.0)).collect();
        let r = per_distortion_report(&flat, &h, &keys).unwrap();
        assert!(r.per_kind.values().all(|p| matches!(p, Err(AnalysisError::DegenerateInput(_)))));
        let mut buf = Vec::new();
        write_report_csv(&r, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("kind,level_index,metric_mean,human_mean,n_clips\nintermittent_mute,1,3,"));
    }

    #[test]
    fn abs_diff_examples() {
        use DistortionKind::*;
        let obs = |a, b, x, y| PairObservation {
            left_kind: Some(a),
            right_kind: Some(b),
            left_score: x,
            right_score: y,
        };
        let out = abs_diff_analysis(&[
            obs(FragmentShuffle, AudioSpeedUp, 2.0, 5.0),
            obs(AudioSpeedUp, FragmentShuffle, 4.0, 4.0),
            obs(AudioShift, AudioSpeedUp, 1.0, 5.0),
            obs(AvFlicker, AvFlicker, 1.0, 5.0),
        ]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[&(AudioSpeedUp, FragmentShuffle)], vec![3.0, 0.0]);

        let kinds = [AudioSpeedUp, VideoSpeedUp, IntermittentMute, RandomVideoGaps];
        let score = |k| if k == IntermittentMute { 1.0 } else { 4.0 };
        let mut tasks = Vec::new();
        for &a in &kinds {
            for &b in &kinds {
                tasks.push(obs(a, b, score(a), score(b)));
            }
        }
        let out = abs_diff_analysis(&tasks);
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        for (&(a, b), v) in &out {
            let involves_mute = a == IntermittentMute || b == IntermittentMute;
            assert_eq!(mean(v), if involves_mute { 3.0 } else { 0.0 });
        }
    }
}
