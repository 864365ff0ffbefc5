//! Operations shared by the subcommands and the pipeline. Each one reads
//! and writes files only; none of them depends on the run file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use avsync::analysis::{
    abs_diff_analysis, bin_score, bin_upper_edge, krippendorff_alpha, per_distortion_report, set_level_correlation,
    write_report_csv, ClipScores, PairObservation, SetKey, N_BINS,
};
use avsync::datakit::{
    aggregate_ratings, effective_ratings, filter_benchmark, grouped_split, sample_pairs, simulate_ratings, write_splits,
    RatingRecord, RatingsStore, Slot, Split, SplitAssignment, DEFAULT_SPLIT_RATIOS,
};
use avsync::distort::{build_benchmark_manifest, run_manifest, BenchmarkManifest, DistortionKind, ManifestRow};
use avsync::features::{embedding_file_name, read_embeddings, write_embeddings, EmbeddingSequence, Modality, SyntheticExtractor};
use avsync::frechet::{favd_score, MetricVariant};
use avsync::media::{load_bundle, save_bundle, ClipBundle};
use avsync::net::model::{sequences_to_mats, ModelConfig};
use avsync::net::train::{stage1_examples, train_stage1, train_stage2, Example, Init, TrainConfig, TrainReport};
use avsync::net::{predict_score, Checkpoint};
use avsync::synth::SynthConfig;

pub type Pair = (EmbeddingSequence, EmbeddingSequence);

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Removes a previous output so that a rerun starts from nothing.
pub fn clear(path: &Path) -> Result<()> {
    if path.is_dir() {
        std::fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    } else if path.exists() {
        std::fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

// ------------------------------------------------------------------ media

/// Writes `count` synthetic bundles named `clip000`, `clip001`, ...
pub fn synth_clips(out: &Path, count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<String>> {
    ensure_dir(out)?;
    let ids: Vec<String> = (0..count).map(|i| format!("clip{i:03}")).collect();
    ids.par_iter().enumerate().try_for_each(|(i, id)| {
        let clip = cfg.generate(id, seed.wrapping_add(i as u64));
        save_bundle(&clip, out.join(id)).with_context(|| format!("writing bundle {id}"))
    })?;
    Ok(ids)
}

/// Sorted names of the bundle directories under `dir`.
pub fn list_bundles(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.path().join("meta.json").is_file() || entry.path().join("audio.wav").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no clip bundles under {}", dir.display());
    }
    Ok(ids)
}

pub fn load_clips(dir: &Path, ids: &[String]) -> Result<Vec<ClipBundle>> {
    ids.par_iter()
        .map(|id| load_bundle(dir.join(id)).with_context(|| format!("loading bundle {id}")))
        .collect()
}

/// The benchmark grid restricted to `kinds` x `level_indices`; ground-truth
/// rows are always kept.
pub fn grid_manifest(sources: &[String], kinds: &[DistortionKind], level_indices: &[usize], seed: u64) -> Result<BenchmarkManifest> {
    let mut m = build_benchmark_manifest(sources, seed)?;
    m.rows.retain(|r| match r.spec() {
        None => true,
        Some(s) => kinds.contains(&s.kind) && s.level_index().is_some_and(|i| level_indices.contains(&i)),
    });
    Ok(m)
}

pub fn distort_grid(sources: &Path, out: &Path, manifest: &BenchmarkManifest, jobs: usize) -> Result<usize> {
    ensure_dir(out)?;
    Ok(run_manifest(manifest, sources, out, jobs)?)
}

// --------------------------------------------------------------- features

pub fn extract_all(videos: &Path, ids: &[String], out: &Path, extractor: &SyntheticExtractor, window: f64) -> Result<()> {
    ensure_dir(out)?;
    ids.par_iter().try_for_each(|id| {
        let clip = load_bundle(videos.join(id)).with_context(|| format!("loading bundle {id}"))?;
        let (a, v) = extractor.extract(&clip, window).with_context(|| format!("extracting {id}"))?;
        write_embeddings(&a, out.join(embedding_file_name(id, Modality::Audio)))?;
        write_embeddings(&v, out.join(embedding_file_name(id, Modality::Video)))?;
        Ok(())
    })
}

pub fn load_pair(features: &Path, id: &str) -> Result<Pair> {
    let read = |m| {
        let p = features.join(embedding_file_name(id, m));
        read_embeddings(&p).with_context(|| format!("reading {}", p.display()))
    };
    Ok((read(Modality::Audio)?, read(Modality::Video)?))
}

pub fn load_pairs(features: &Path, ids: &[String]) -> Result<Vec<Pair>> {
    ids.par_iter().map(|id| load_pair(features, id)).collect()
}

/// Clip ids with both embedding files present in `dir`.
pub fn list_feature_ids(dir: &Path) -> Result<Vec<String>> {
    let suffix = format!(".{}.emb", Modality::Audio);
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(&suffix) {
            if dir.join(embedding_file_name(id, Modality::Video)).is_file() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no embedding pairs under {}", dir.display());
    }
    Ok(ids)
}

// ------------------------------------------------------------------ FAVD

#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub key: SetKey,
    pub level: f64,
    pub fad: f64,
    pub fvd: f64,
    pub favd: f64,
}

/// Every distorted (kind, level) set against the ground-truth set.
pub fn favd_table(manifest: &BenchmarkManifest, features: &Path) -> Result<Vec<SetMetrics>> {
    let gt: Vec<String> = manifest.rows.iter().filter(|r| r.is_ground_truth()).map(|r| r.output_id.clone()).collect();
    let reference = load_pairs(features, &gt)?;
    let mut sets: BTreeMap<SetKey, (f64, Vec<String>)> = BTreeMap::new();
    for r in &manifest.rows {
        if let (Some(s), Some(key)) = (r.spec(), set_key(r)) {
            sets.entry(key).or_insert_with(|| (s.level, Vec::new())).1.push(r.output_id.clone());
        }
    }
    let sets: Vec<_> = sets.into_iter().collect();
    sets.par_iter()
        .map(|(key, (level, ids))| {
            let eval = load_pairs(features, ids)?;
            let score = |v| favd_score(&eval, &reference, v).with_context(|| format!("{} level {}", key.kind, key.level_index));
            Ok(SetMetrics {
                key: *key,
                level: *level,
                fad: score(MetricVariant::Fad)?,
                fvd: score(MetricVariant::Fvd)?,
                favd: score(MetricVariant::Favd)?,
            })
        })
        .collect()
}

pub fn write_favd_csv(rows: &[SetMetrics], path: &Path) -> Result<()> {
    parent_dir(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "level_index", "level", "fad", "fvd", "favd"])?;
    for r in rows {
        w.write_record([
            r.key.kind.name().to_string(),
            r.key.level_index.to_string(),
            r.level.to_string(),
            r.fad.to_string(),
            r.fvd.to_string(),
            r.favd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_favd_csv(path: &Path) -> Result<BTreeMap<SetKey, f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| anyhow!("{}: short row", path.display()));
        let kind: DistortionKind = field(0)?.parse().map_err(|e: String| anyhow!(e))?;
        out.insert(
            SetKey {
                kind,
                level_index: field(1)?.parse()?,
            },
            field(5)?.parse()?,
        );
    }
    Ok(out)
}

pub fn set_key(row: &ManifestRow) -> Option<SetKey> {
    let s = row.spec()?;
    Some(SetKey {
        kind: s.kind,
        level_index: s.level_index()?,
    })
}

pub fn set_keys(manifest: &BenchmarkManifest) -> BTreeMap<String, SetKey> {
    manifest.rows.iter().filter_map(|r| Some((r.output_id.clone(), set_key(r)?))).collect()
}

// ------------------------------------------------------------ annotation

pub struct AnnotationSummary {
    pub tasks: usize,
    pub ratings: usize,
    pub kept: usize,
    pub removed: usize,
}

/// Samples pairs, simulates three ratings per slot, aggregates, filters and
/// splits. Writes the files named in the arguments.
pub struct AnnotationPaths<'a> {
    pub tasks: &'a Path,
    pub ratings: &'a Path,
    pub aggregated: &'a Path,
    pub human: &'a Path,
    pub removed: &'a Path,
    pub splits: &'a Path,
}

pub fn simulate_annotation(
    manifest: &BenchmarkManifest,
    pairs: usize,
    pool: usize,
    seed: u64,
    out: &AnnotationPaths,
) -> Result<AnnotationSummary> {
    for p in [out.tasks, out.ratings, out.aggregated, out.human, out.removed, out.splits] {
        clear(p)?;
        parent_dir(p)?;
    }
    let sampled = sample_pairs(manifest, pairs, seed)?;
    avsync_annot::write_tasks(&avsync_annot::tasks_from_pairs(&sampled), out.tasks)?;
    let ratings = simulate_ratings(manifest, &sampled, pool, seed.wrapping_add(1))?;
    RatingsStore::open(out.ratings).append(&ratings)?;

    let aggregated = aggregate_ratings(&ratings)?;
    let mut w = csv::Writer::from_path(out.aggregated)?;
    w.write_record(["video_id", "mean_score", "n_ratings", "disagreement"])?;
    for a in &aggregated {
        w.write_record([
            a.video_id.clone(),
            a.mean_score.to_string(),
            a.n_ratings.to_string(),
            format!("{:?}", a.disagreement_class).to_lowercase(),
        ])?;
    }
    w.flush()?;

    let outcome = filter_benchmark(&aggregated, manifest)?;
    let human: ClipScores = outcome.kept.iter().map(|a| (a.video_id.clone(), a.mean_score)).collect();
    write_scores(&human, out.human)?;
    let mut w = csv::Writer::from_path(out.removed)?;
    w.write_record(["video_id", "reason"])?;
    for (v, reason) in &outcome.removed {
        w.write_record([v.clone(), format!("{reason:?}")])?;
    }
    w.flush()?;

    let groups: Vec<(String, String)> = outcome
        .kept
        .iter()
        .filter_map(|a| Some((a.video_id.clone(), manifest.row(&a.video_id)?.source_id.clone())))
        .collect();
    let splits = grouped_split(&groups, DEFAULT_SPLIT_RATIOS, seed)?;
    write_splits(&splits, out.splits)?;
    Ok(AnnotationSummary {
        tasks: sampled.len(),
        ratings: ratings.len(),
        kept: outcome.kept.len(),
        removed: outcome.removed.len(),
    })
}

/// Scores of every (task, slot) after superseded rounds are dropped.
fn slot_scores(records: &[RatingRecord]) -> BTreeMap<(String, Slot), (String, Vec<f64>)> {
    let mut groups: BTreeMap<(String, Slot), Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.task_id.clone(), r.slot)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, g)| {
            let eff = effective_ratings(&g);
            let video = g[0].video_id.clone();
            (k, (video, eff.iter().map(|r| r.score as f64).collect()))
        })
        .collect()
}

/// Agreement over rated slots, one unit per (task, slot).
pub fn ratings_alpha(records: &[RatingRecord]) -> Result<f64> {
    let units: Vec<Vec<f64>> = slot_scores(records).into_values().map(|(_, s)| s).collect();
    Ok(krippendorff_alpha(&units)?)
}

pub fn pair_observations(records: &[RatingRecord], manifest: &BenchmarkManifest) -> Vec<PairObservation> {
    let slots = slot_scores(records);
    // per task: (kind, mean score) of the left and right slot
    type Slots = [Option<(Option<DistortionKind>, f64)>; 2];
    let mut tasks: BTreeMap<&str, Slots> = BTreeMap::new();
    for ((task, slot), (video, scores)) in &slots {
        let Some(row) = manifest.row(video) else { continue };
        if scores.is_empty() {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let i = if *slot == Slot::Left { 0 } else { 1 };
        tasks.entry(task).or_default()[i] = Some((row.spec().map(|s| s.kind), mean));
    }
    tasks
        .into_values()
        .filter_map(|[l, r]| {
            let (l, r) = (l?, r?);
            Some(PairObservation {
                left_kind: l.0,
                right_kind: r.0,
                left_score: l.1,
                right_score: r.1,
            })
        })
        .collect()
}

pub fn write_absdiff_csv(records: &[RatingRecord], manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    parent_dir(path)?;
    let groups = abs_diff_analysis(&pair_observations(records, manifest));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind_a", "kind_b", "n_pairs", "mean_abs_diff"])?;
    for ((a, b), diffs) in &groups {
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        w.write_record([a.name().to_string(), b.name().to_string(), diffs.len().to_string(), mean.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- scores

/// CSV with header `video_id,score`.
pub fn write_scores(scores: &ClipScores, path: &Path) -> Result<()> {
    parent_dir(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "score"])?;
    for (v, s) in scores {
        w.write_record([v.clone(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ClipScores> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = ClipScores::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        match (rec.get(0), rec.get(1).map(str::parse::<f64>)) {
            (Some(v), Some(Ok(s))) => {
                out.insert(v.to_string(), s);
            }
            _ => bail!("{}: bad row {}", path.display(), i + 2),
        }
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<BenchmarkManifest> {
    BenchmarkManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    if !path.is_file() {
        bail!("no ratings file {}", path.display());
    }
    Ok(RatingsStore::open(path).load()?)
}

// -------------------------------------------------------------- training

pub fn train_contrastive(
    clips: &[ClipBundle],
    extractor: &SyntheticExtractor,
    model: &ModelConfig,
    cfg: &TrainConfig,
    window: f64,
) -> Result<(Checkpoint, TrainReport)> {
    let examples = stage1_examples(clips, extractor, window)?;
    Ok(train_stage1(&examples, model, cfg, Some(extractor.tag()), window)?)
}

/// Examples for every scored video present in `features`.
pub fn score_examples(features: &Path, human: &ClipScores, manifest: &BenchmarkManifest) -> Result<Vec<Example>> {
    let ids: Vec<&String> = human.keys().collect();
    ids.par_iter()
        .map(|id| {
            let row = manifest.row(id).ok_or_else(|| anyhow!("{id} is not in the manifest"))?;
            let (a, v) = load_pair(features, id)?;
            let (audio, video) = sequences_to_mats(&a, &v)?;
            Ok(Example {
                source_id: row.source_id.clone(),
                audio,
                video,
                target: human[*id],
            })
        })
        .collect()
}

pub fn train_scorer(examples: &[Example], init: Init, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    Ok(train_stage2(examples, init, cfg)?)
}

pub fn predict_all(ckpt: &Checkpoint, features: &Path, ids: &[String]) -> Result<ClipScores> {
    ids.par_iter()
        .map(|id| {
            let (a, v) = load_pair(features, id)?;
            Ok((id.clone(), predict_score(ckpt, &a, &v).with_context(|| format!("scoring {id}"))?))
        })
        .collect()
}

// -------------------------------------------------------------- analysis

pub fn restrict(scores: &ClipScores, splits: &SplitAssignment, want: Split) -> ClipScores {
    scores.iter().filter(|(v, _)| splits.get(*v) == Some(&want)).map(|(v, s)| (v.clone(), *s)).collect()
}

/// Pearson per set and per clip over clips carrying all of: a set key, a
/// metric score, a human score.
pub fn correlate(metric: &ClipScores, human: &ClipScores, manifest: &BenchmarkManifest) -> Result<(f64, f64)> {
    let keys: BTreeMap<String, SetKey> =
        set_keys(manifest).into_iter().filter(|(v, _)| metric.contains_key(v) && human.contains_key(v)).collect();
    Ok(set_level_correlation(metric, human, &keys)?)
}

pub fn write_report(metric: &ClipScores, human: &ClipScores, manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    parent_dir(path)?;
    let keys: BTreeMap<String, SetKey> =
        set_keys(manifest).into_iter().filter(|(v, _)| metric.contains_key(v) && human.contains_key(v)).collect();
    let report = per_distortion_report(metric, human, &keys)?;
    write_report_csv(&report, std::fs::File::create(path)?)?;
    Ok(())
}

/// Bin occupancy of each score column over the 21-bin scale.
pub fn write_bins_csv(columns: &[(&str, &ClipScores)], path: &Path) -> Result<()> {
    parent_dir(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["bin".to_string(), "upper_edge".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    let counts: Vec<[usize; N_BINS]> = columns
        .iter()
        .map(|(_, s)| {
            let mut c = [0; N_BINS];
            for &v in s.values() {
                c[bin_score(v) - 1] += 1;
            }
            c
        })
        .collect();
    for k in 1..=N_BINS {
        let mut rec = vec![k.to_string(), bin_upper_edge(k).to_string()];
        rec.extend(counts.iter().map(|c| c[k - 1].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson between set-level FAVD and mean human score per set.
pub fn favd_human_correlation(favd: &BTreeMap<SetKey, f64>, human: &ClipScores, manifest: &BenchmarkManifest) -> Result<f64> {
    let keys = set_keys(manifest);
    let mut sums: BTreeMap<SetKey, (f64, usize)> = BTreeMap::new();
    for (v, s) in human {
        if let Some(k) = keys.get(v) {
            let e = sums.entry(*k).or_default();
            e.0 += s;
            e.1 += 1;
        }
    }
    let (f, h): (Vec<f64>, Vec<f64>) =
        sums.iter().filter_map(|(k, (s, n))| Some((*favd.get(k)?, s / *n as f64))).unzip();
    Ok(avsync::analysis::pearson(&f, &h)?)
}

pub fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}
