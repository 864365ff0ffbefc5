//! Benchmark data lifecycle: pair sampling, rating aggregation, disagreement
//! triage, outlier filtering and source-grouped splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distort::{BenchmarkManifest, DistortionKind, ManifestRow, Treatment};

/// Ratings per pair slot before a task counts as complete.
pub const REQUIRED_RATERS: usize = 3;
/// Ground-truth sources averaging at or below this are dropped with all derived videos.
pub const GROUND_TRUTH_MIN_MEAN: f64 = 3.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("score {0} outside 1..=5")]
    ScoreOutOfRange(u8),
    #[error("videos with fewer than {REQUIRED_RATERS} ratings: {0:?}")]
    InsufficientRatings(Vec<String>),
    #[error("video ids not in manifest: {0:?}")]
    UnknownVideoId(Vec<String>),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid split ratios {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("malformed record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Left,
    Right,
}

impl Slot {
    pub const BOTH: [Slot; 2] = [Slot::Left, Slot::Right];
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::Left => "left",
            Slot::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub task_id: String,
    pub slot: Slot,
    pub video_id: String,
    pub annotator_id: String,
    pub score: u8,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub revision: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DisagreementClass {
    Agreement,
    Disagreement,
    /// All scores differ and span at least 3 points; implies `Disagreement`.
    QaRequired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedScore {
    pub video_id: String,
    pub mean_score: f64,
    pub n_ratings: usize,
    pub disagreement_class: DisagreementClass,
}

/// All-distinct scores are a disagreement; a disagreement spanning 3 or more
/// points needs QA.
pub fn classify_disagreement(scores: &[u8]) -> DisagreementClass {
    let distinct: BTreeSet<u8> = scores.iter().copied().collect();
    if scores.len() < 2 || distinct.len() != scores.len() {
        return DisagreementClass::Agreement;
    }
    let range = distinct.last().unwrap() - distinct.first().unwrap();
    if range >= 3 {
        DisagreementClass::QaRequired
    } else {
        DisagreementClass::Disagreement
    }
}

/// The ratings of one (task, slot) that count: rounds older than the latest
/// round with `REQUIRED_RATERS` distinct annotators are superseded, and within
/// the remaining rounds each annotator's latest revision wins.
pub fn effective_ratings<'a>(group: &[&'a RatingRecord]) -> Vec<&'a RatingRecord> {
    let mut raters_per_rev: BTreeMap<u32, BTreeSet<&str>> = BTreeMap::new();
    for r in group {
        raters_per_rev.entry(r.revision).or_default().insert(&r.annotator_id);
    }
    let floor = raters_per_rev
        .iter()
        .rev()
        .find(|(_, a)| a.len() >= REQUIRED_RATERS)
        .map(|(&rev, _)| rev)
        .unwrap_or(0);
    let mut latest: BTreeMap<&str, &RatingRecord> = BTreeMap::new();
    for r in group.iter().filter(|r| r.revision >= floor) {
        match latest.get(r.annotator_id.as_str()) {
            Some(prev) if (prev.revision, prev.timestamp) >= (r.revision, r.timestamp) => {}
            _ => {
                latest.insert(&r.annotator_id, r);
            }
        }
    }
    latest.into_values().collect()
}

fn group_by_task_slot(records: &[RatingRecord]) -> BTreeMap<(&str, Slot), Vec<&RatingRecord>> {
    let mut groups: BTreeMap<(&str, Slot), Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.task_id, r.slot)).or_default().push(r);
    }
    groups
}

/// Video-level means over the effective ratings of every task the video
/// appeared in. The class is the worst class over its task slots.
pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<Vec<AggregatedScore>, DataError> {
    if let Some(r) = records.iter().find(|r| !(1..=5).contains(&r.score)) {
        return Err(DataError::ScoreOutOfRange(r.score));
    }
    struct Acc {
        sum: f64,
        n: usize,
        annotators: BTreeSet<String>,
        class: DisagreementClass,
    }
    let mut per_video: BTreeMap<String, Acc> = BTreeMap::new();
    for (_, group) in group_by_task_slot(records) {
        let eff = effective_ratings(&group);
        let scores: Vec<u8> = eff.iter().map(|r| r.score).collect();
        let class = classify_disagreement(&scores);
        for r in eff {
            let acc = per_video.entry(r.video_id.clone()).or_insert(Acc {
                sum: 0.0,
                n: 0,
                annotators: BTreeSet::new(),
                class: DisagreementClass::Agreement,
            });
            acc.sum += r.score as f64;
            acc.n += 1;
            acc.annotators.insert(r.annotator_id.clone());
            acc.class = acc.class.max(class);
        }
    }
    let short: Vec<String> = per_video
        .iter()
        .filter(|(_, a)| a.annotators.len() < REQUIRED_RATERS)
        .map(|(v, _)| v.clone())
        .collect();
    if !short.is_empty() {
        return Err(DataError::InsufficientRatings(short));
    }
    Ok(per_video
        .into_iter()
        .map(|(video_id, a)| AggregatedScore {
            video_id,
            mean_score: a.sum / a.n as f64,
            n_ratings: a.n,
            disagreement_class: a.class,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalReason {
    /// The source's undistorted video averaged at or below the threshold.
    WeakGroundTruth,
    /// A most-extreme-level distortion was still rated perfect.
    ExtremeRatedPerfect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<AggregatedScore>,
    pub removed: Vec<(String, RemovalReason)>,
}

/// Drops whole source groups whose ground truth averaged at most 3.5, and
/// maximum-level distortions that averaged 5.
pub fn filter_benchmark(scores: &[AggregatedScore], manifest: &BenchmarkManifest) -> Result<FilterOutcome, DataError> {
    let rows: BTreeMap<&str, &ManifestRow> = manifest.rows.iter().map(|r| (r.output_id.as_str(), r)).collect();
    let unknown: Vec<String> = scores
        .iter()
        .filter(|s| !rows.contains_key(s.video_id.as_str()))
        .map(|s| s.video_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(DataError::UnknownVideoId(unknown));
    }
    let weak_sources: BTreeSet<&str> = scores
        .iter()
        .filter(|s| rows[s.video_id.as_str()].is_ground_truth() && s.mean_score <= GROUND_TRUTH_MIN_MEAN)
        .map(|s| rows[s.video_id.as_str()].source_id.as_str())
        .collect();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for s in scores {
        let row = rows[s.video_id.as_str()];
        if weak_sources.contains(row.source_id.as_str()) {
            removed.push((s.video_id.clone(), RemovalReason::WeakGroundTruth));
            continue;
        }
        if let Treatment::Distorted(spec) = &row.treatment {
            if spec.level_index() == Some(10) && s.mean_score >= 5.0 - 1e-9 {
                removed.push((s.video_id.clone(), RemovalReason::ExtremeRatedPerfect));
                continue;
            }
        }
        kept.push(s.clone());
    }
    Ok(FilterOutcome { kept, removed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

pub type SplitAssignment = BTreeMap<String, Split>;

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Assigns whole groups to splits: round(r_train * G) groups to train,
/// round(r_dev * G) to dev and the rest to test, after a seeded shuffle.
pub fn grouped_split(videos: &[(String, String)], ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment, DataError> {
    if videos.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    let mut groups: Vec<&str> = videos.iter().map(|(_, g)| g.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let g = groups.len();
    let n_train = ((a * g as f64).round() as usize).min(g);
    let n_dev = ((b * g as f64).round() as usize).min(g - n_train);
    let group_split: BTreeMap<&str, Split> = groups
        .iter()
        .enumerate()
        .map(|(i, &grp)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            (grp, s)
        })
        .collect();
    Ok(videos.iter().map(|(v, grp)| (v.clone(), group_split[grp.as_str()])).collect())
}

pub fn write_splits(assign: &SplitAssignment, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["video_id", "split"]).map_err(csv_io)?;
    for (v, s) in assign {
        w.write_record([v.as_str(), &s.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_splits(path: impl AsRef<Path>) -> Result<SplitAssignment, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_io)?;
    let mut out = SplitAssignment::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_io)?;
        let bad = |reason: String| DataError::Malformed { line: i + 2, reason };
        let v = rec.get(0).ok_or_else(|| bad("missing video_id".into()))?;
        let s = rec.get(1).ok_or_else(|| bad("missing split".into()))?.parse().map_err(bad)?;
        out.insert(v.to_string(), s);
    }
    Ok(out)
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Io(e.into())
}

/// Cell of the sampling stratification: a (kind, level index) pair or the
/// ground-truth cell.
fn cell_of(row: &ManifestRow) -> (u8, usize) {
    match &row.treatment {
        Treatment::GroundTruth => (0, 0),
        Treatment::Distorted(spec) => (spec.kind.id(), spec.level_index().unwrap_or(0)),
    }
}

/// `k` pairs sampled with replacement. Each slot draws a stratification cell
/// uniformly and then a video uniformly within it; a pair never repeats one
/// video when the manifest has more than one.
pub fn sample_pairs(manifest: &BenchmarkManifest, k: usize, seed: u64) -> Result<Vec<(String, String)>, DataError> {
    if manifest.rows.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let mut cells: BTreeMap<(u8, usize), Vec<&str>> = BTreeMap::new();
    for r in &manifest.rows {
        cells.entry(cell_of(r)).or_default().push(&r.output_id);
    }
    let cells: Vec<Vec<&str>> = cells.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let c = &cells[rng.random_range(0..cells.len())];
        c[rng.random_range(0..c.len())]
    };
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let left = draw(&mut rng);
        let mut right = draw(&mut rng);
        while right == left && manifest.rows.len() > 1 {
            right = draw(&mut rng);
        }
        out.push((left.to_string(), right.to_string()));
    }
    Ok(out)
}

/// Append-only line-delimited JSON store of rating records.
#[derive(Debug, Clone)]
pub struct RatingsStore {
    path: PathBuf,
}

impl RatingsStore {
    pub fn open(path: impl Into<PathBuf>) -> RatingsStore {
        RatingsStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[RatingRecord]) -> Result<(), DataError> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        f.write_all(&buf)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<RatingRecord>, DataError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let f = std::io::BufReader::new(std::fs::File::open(&self.path)?);
        let mut out = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RatingRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Severity in [0, 1] of a distortion: shift magnitude over 2 s for shifts,
/// catalog position over 10 otherwise.
pub fn severity(kind: DistortionKind, level: f64) -> f64 {
    match kind {
        DistortionKind::AudioShift => level.abs().min(2.0) / 2.0,
        _ => kind.level_index(level).unwrap_or(10) as f64 / 10.0,
    }
}

/// Deterministic stand-in opinion score: 5 for ground truth, falling linearly
/// with severity to 1.
pub fn proxy_opinion_score(row: &ManifestRow) -> f64 {
    match &row.treatment {
        Treatment::GroundTruth => 5.0,
        Treatment::Distorted(spec) => 5.0 - 4.0 * severity(spec.kind, spec.level),
    }
}

/// Simulated ratings for sampled pairs: each of `REQUIRED_RATERS` annotators
/// (drawn from a pool of `pool` ids) rates both slots with the proxy score
/// plus integer noise in [-1, 1], clamped to 1..=5.
pub fn simulate_ratings(
    manifest: &BenchmarkManifest,
    pairs: &[(String, String)],
    pool: usize,
    seed: u64,
) -> Result<Vec<RatingRecord>, DataError> {
    let pool = pool.max(REQUIRED_RATERS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (t, (l, r)) in pairs.iter().enumerate() {
        let mut annotators: Vec<usize> = (0..pool).collect();
        annotators.shuffle(&mut rng);
        for &a in &annotators[..REQUIRED_RATERS] {
            for (slot, vid) in [(Slot::Left, l), (Slot::Right, r)] {
                let row = manifest.row(vid).ok_or_else(|| DataError::UnknownVideoId(vec![vid.clone()]))?;
                let noisy = proxy_opinion_score(row) + rng.random_range(-1i32..=1) as f64;
                out.push(RatingRecord {
                    task_id: format!("task{t:06}"),
                    slot,
                    video_id: vid.clone(),
                    annotator_id: format!("ann{a:03}"),
                    score: noisy.round().clamp(1.0, 5.0) as u8,
                    timestamp: t as u64,
                    revision: 0,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distort::{build_benchmark_manifest, DistortionSpec};

    fn rec(task: &str, slot: Slot, video: &str, ann: &str, score: u8, rev: u32) -> RatingRecord {
        RatingRecord {
            task_id: task.into(),
            slot,
            video_id: video.into(),
            annotator_id: ann.into(),
            score,
            timestamp: rev as u64,
            revision: rev,
        }
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_disagreement(&[1, 4, 5]), DisagreementClass::QaRequired);
        assert_eq!(classify_disagreement(&[3, 3, 3]), DisagreementClass::Agreement);
        assert_eq!(classify_disagreement(&[2, 3, 4]), DisagreementClass::Disagreement);
        assert_eq!(classify_disagreement(&[1, 1, 5]), DisagreementClass::Agreement);
    }

    #[test]
    fn aggregation_examples() {
        let r = vec![
            rec("t", Slot::Left, "v", "a", 4, 0),
            rec("t", Slot::Left, "v", "b", 4, 0),
            rec("t", Slot::Left, "v", "c", 5, 0),
        ];
        let s = aggregate_ratings(&r).unwrap();
        assert!((s[0].mean_score - 13.0 / 3.0).abs() < 1e-12);

        let mut two_tasks: Vec<RatingRecord> = ["a", "b", "c"].iter().map(|a| rec("t1", Slot::Left, "v", a, 5, 0)).collect();
        two_tasks.extend(["d", "e", "f"].iter().map(|a| rec("t2", Slot::Right, "v", a, 4, 0)));
        let s = aggregate_ratings(&two_tasks).unwrap();
        assert_eq!((s[0].mean_score, s[0].n_ratings), (4.5, 6));

        let mut revised = r.clone();
        revised.push(rec("t", Slot::Left, "v", "a", 1, 1));
        let s = aggregate_ratings(&revised).unwrap();
        assert!((s[0].mean_score - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[0].n_ratings, 3);
    }

    #[test]
    fn complete_qa_round_supersedes() {
        let mut r: Vec<RatingRecord> = [("a", 1), ("b", 4), ("c", 5)]
            .iter()
            .map(|&(a, s)| rec("t", Slot::Left, "v", a, s, 0))
            .collect();
        assert_eq!(aggregate_ratings(&r).unwrap()[0].disagreement_class, DisagreementClass::QaRequired);
        r.extend(["d", "e", "f"].iter().map(|a| rec("t", Slot::Left, "v", a, 4, 1)));
        let s = aggregate_ratings(&r).unwrap();
        assert_eq!((s[0].mean_score, s[0].n_ratings), (4.0, 3));
        assert_eq!(s[0].disagreement_class, DisagreementClass::Agreement);
    }

    #[test]
    fn insufficient_ratings_are_listed() {
        let r = vec![rec("t", Slot::Left, "v", "a", 4, 0), rec("t", Slot::Left, "v", "b", 4, 0)];
        match aggregate_ratings(&r) {
            Err(DataError::InsufficientRatings(v)) => assert_eq!(v, vec!["v".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            aggregate_ratings(&[rec("t", Slot::Left, "v", "a", 6, 0)]),
            Err(DataError::ScoreOutOfRange(6))
        ));
    }

    fn score(v: &str, m: f64) -> AggregatedScore {
        AggregatedScore {
            video_id: v.into(),
            mean_score: m,
            n_ratings: 3,
            disagreement_class: DisagreementClass::Agreement,
        }
    }

    #[test]
    fn filter_rules() {
        let m = build_benchmark_manifest(&["s1".into(), "s2".into()], 0).unwrap();
        let id = |src: &str, kind, level| crate::distort::output_id(src, Some(&DistortionSpec::new(kind, level, 0)));
        let scores = vec![
            score("s1__gt", 3.4),
            score(&id("s1", DistortionKind::AudioShift, 0.5), 2.0),
            score("s2__gt", 4.8),
            score(&id("s2", DistortionKind::AudioSpeedUp, 0.75), 5.0),
            score(&id("s2", DistortionKind::AudioSpeedUp, 0.2), 5.0),
        ];
        let out = filter_benchmark(&scores, &m).unwrap();
        let kept: Vec<&str> = out.kept.iter().map(|s| s.video_id.as_str()).collect();
        assert_eq!(kept, vec!["s2__gt", id("s2", DistortionKind::AudioSpeedUp, 0.2).as_str()]);
        assert_eq!(out.removed.len(), 3);
        assert_eq!(filter_benchmark(&out.kept, &m).unwrap().kept, out.kept);
        assert!(matches!(
            filter_benchmark(&[score("nope", 3.0)], &m),
            Err(DataError::UnknownVideoId(_))
        ));
    }

    #[test]
    fn split_counts_and_grouping() {
        let videos: Vec<(String, String)> = (0..20)
            .flat_map(|g| (0..5).map(move |k| (format!("g{g}_v{k}"), format!("g{g}"))))
            .collect();
        let a = grouped_split(&videos, DEFAULT_SPLIT_RATIOS, 9).unwrap();
        let mut per_split: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
        for (v, s) in &a {
            per_split.entry(*s).or_default().insert(v.split('_').next().unwrap().to_string());
        }
        let counts: Vec<usize> = [Split::Train, Split::Dev, Split::Test].iter().map(|s| per_split[s].len()).collect();
        assert_eq!(counts, vec![14, 3, 3]);
        assert_eq!(a, grouped_split(&videos, DEFAULT_SPLIT_RATIOS, 9).unwrap());
        assert!(grouped_split(&[], DEFAULT_SPLIT_RATIOS, 0).is_err());
        assert!(grouped_split(&videos, (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn pair_sampling() {
        let m = build_benchmark_manifest(&["a".into(), "b".into()], 0).unwrap();
        let one = sample_pairs(&m, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(m.row(&one[0].0).is_some() && m.row(&one[0].1).is_some());
        assert_eq!(sample_pairs(&m, 50, 4).unwrap(), sample_pairs(&m, 50, 4).unwrap());
        assert!(matches!(
            sample_pairs(&BenchmarkManifest { rows: vec![] }, 1, 0),
            Err(DataError::EmptyManifest)
        ));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = RatingsStore::open(dir.path().join("r.jsonl"));
        assert!(store.load().unwrap().is_empty());
        let a = rec("t", Slot::Left, "v", "a", 4, 0);
        let b = rec("t", Slot::Right, "w", "a", 2, 0);
        store.append(std::slice::from_ref(&a)).unwrap();
        store.append(std::slice::from_ref(&b)).unwrap();
        assert_eq!(store.load().unwrap(), vec![a, b]);
    }

    #[test]
    fn splits_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = SplitAssignment::new();
        a.insert("v1".into(), Split::Train);
        a.insert("v2".into(), Split::Test);
        let p = dir.path().join("splits.csv");
        write_splits(&a, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "video_id,split\nv1,train\nv2,test\n");
        assert_eq!(read_splits(&p).unwrap(), a);
    }

    #[test]
    fn proxy_scores_fall_with_severity() {
        let m = build_benchmark_manifest(&["a".into()], 0).unwrap();
        assert_eq!(proxy_opinion_score(m.row("a__gt").unwrap()), 5.0);
        for kind in [DistortionKind::IntermittentMute, DistortionKind::AudioShift] {
            let s: Vec<f64> = kind
                .levels()
                .iter()
                .map(|&l| severity(kind, l))
                .collect();
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let pairs = sample_pairs(&m, 10, 1).unwrap();
        let recs = simulate_ratings(&m, &pairs, 6, 2).unwrap();
        assert_eq!(recs.len(), 10 * 2 * REQUIRED_RATERS);
        assert!(aggregate_ratings(&recs).is_ok());
    }
}
