//! Runs the stages of a validated run file in order. Every stage clears its
//! own outputs first and ends by writing `manifests/<stage>.json`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use avsync::analysis::ClipScores;
use avsync::datakit::{read_splits, Split};
use avsync::net::train::Init;
use avsync::net::Checkpoint;
use avsync::synth::SynthConfig;

use crate::config::{hex, layout, RunConfig, Stage2Init, WINDOW_SECONDS};
use crate::ops;

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct StageManifest<'a> {
    stage: &'a str,
    config_hash: &'a str,
    outputs: Vec<OutputEntry>,
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn write_stage_manifest(cfg: &RunConfig, stage: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let mut files = Vec::new();
    for o in outputs {
        collect_files(o, &mut files)?;
    }
    let entries = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).with_context(|| format!("hashing {}", f.display()))?;
            Ok(OutputEntry {
                path: ops::relative(f, &cfg.workdir).to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.workdir.join(layout::MANIFESTS);
    ops::ensure_dir(&dir)?;
    let path = dir.join(format!("{stage}.json"));
    let m = StageManifest {
        stage,
        config_hash: &cfg.hash,
        outputs: entries,
    };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn run(cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    ops::ensure_dir(&cfg.workdir)?;
    writeln!(log, "run {} config {}", cfg.workdir.display(), &cfg.hash[..12])?;
    for &stage in &cfg.stages {
        let outputs = match stage {
            "synth" => synth(cfg, log)?,
            "distort" => distort(cfg, log)?,
            "extract" => extract(cfg, log)?,
            "annotate" => annotate(cfg, log)?,
            "favd" => favd(cfg, log)?,
            "train" => train(cfg, log)?,
            "score" => score(cfg, log)?,
            "analyze" => analyze(cfg, log)?,
            other => unreachable!("unvalidated stage {other}"),
        };
        write_stage_manifest(cfg, stage, &outputs).with_context(|| format!("stage {stage}: manifest"))?;
    }
    Ok(())
}

fn path(cfg: &RunConfig, rel: &str) -> PathBuf {
    cfg.workdir.join(rel)
}

fn synth(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let s = &cfg.file.synth;
    let synth = SynthConfig {
        duration_seconds: s.duration_seconds,
        width: s.width,
        height: s.height,
        ..Default::default()
    };
    ops::clear(&cfg.sources)?;
    let ids = ops::synth_clips(&cfg.sources, s.count, &synth, cfg.file.seed)?;
    writeln!(log, "synth: {} clips", ids.len())?;
    Ok(vec![cfg.sources.clone()])
}

fn distort(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let ids = ops::list_bundles(&cfg.sources)?;
    let manifest = ops::grid_manifest(&ids, &cfg.kinds, &cfg.level_indices, cfg.file.seed)?;
    let (videos, mpath) = (path(cfg, layout::VIDEOS), path(cfg, layout::MANIFEST));
    ops::clear(&videos)?;
    let n = ops::distort_grid(&cfg.sources, &videos, &manifest, rayon::current_num_threads())?;
    manifest.write(&mpath)?;
    writeln!(log, "distort: {n} videos from {} sources", ids.len())?;
    Ok(vec![mpath, videos])
}

fn extract(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let ids: Vec<String> = manifest.rows.iter().map(|r| r.output_id.clone()).collect();
    let out = path(cfg, layout::FEATURES);
    ops::clear(&out)?;
    ops::extract_all(&path(cfg, layout::VIDEOS), &ids, &out, &cfg.preset.extractor, WINDOW_SECONDS)?;
    writeln!(log, "extract: {} clips with {}", ids.len(), cfg.preset.extractor.tag())?;
    Ok(vec![out])
}

fn annotate(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let files: Vec<PathBuf> = [layout::TASKS, layout::RATINGS, layout::AGGREGATED, layout::HUMAN, layout::REMOVED, layout::SPLITS]
        .iter()
        .map(|r| path(cfg, r))
        .collect();
    let paths = ops::AnnotationPaths {
        tasks: &files[0],
        ratings: &files[1],
        aggregated: &files[2],
        human: &files[3],
        removed: &files[4],
        splits: &files[5],
    };
    let a = &cfg.file.annotate;
    let s = ops::simulate_annotation(&manifest, a.pairs, a.pool, cfg.file.seed, &paths)?;
    writeln!(
        log,
        "annotate: {} tasks, {} ratings, {} videos kept, {} removed",
        s.tasks, s.ratings, s.kept, s.removed
    )?;
    Ok(files)
}

fn favd(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let rows = ops::favd_table(&manifest, &path(cfg, layout::FEATURES))?;
    let out = path(cfg, layout::FAVD);
    ops::write_favd_csv(&rows, &out)?;
    writeln!(log, "favd: {} sets", rows.len())?;
    Ok(vec![out])
}

fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let splits = read_splits(path(cfg, layout::SPLITS))?;
    let human = ops::read_scores(&path(cfg, layout::HUMAN))?;
    let fit: ClipScores = human
        .iter()
        .filter(|(v, _)| matches!(splits.get(*v), Some(Split::Train | Split::Dev)))
        .map(|(v, s)| (v.clone(), *s))
        .collect();
    let sources: Vec<String> = fit
        .keys()
        .filter_map(|v| Some(manifest.row(v)?.source_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let p = &cfg.preset;
    let clips = ops::load_clips(&cfg.sources, &sources)?;
    let (stage1, report1) = ops::train_contrastive(&clips, &p.extractor, &p.model, &p.stage1, WINDOW_SECONDS)?;
    let examples = ops::score_examples(&path(cfg, layout::FEATURES), &fit, &manifest)?;
    let init = match cfg.file.train.stage2_init {
        Stage2Init::Pretrained => Init::Pretrained(stage1.clone()),
        Stage2Init::Fresh => Init::Fresh(p.model.clone()),
    };
    let (stage2, report2) = ops::train_scorer(&examples, init, &p.stage2)?;
    let stage2 = Checkpoint {
        extractor: Some(p.extractor.tag()),
        ..stage2
    };

    let (c1, c2, logp) = (path(cfg, layout::STAGE1), path(cfg, layout::STAGE2), path(cfg, layout::TRAIN_LOG));
    ops::ensure_dir(c1.parent().expect("models dir"))?;
    stage1.save(&c1)?;
    stage2.save(&c2)?;
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "stage1": report1, "stage2": report2 }))?;
    text.push('\n');
    std::fs::write(&logp, text)?;
    writeln!(
        log,
        "train: stage 1 on {} sources (best epoch {}), stage 2 on {} videos (best epoch {})",
        sources.len(),
        report1.best_epoch,
        examples.len(),
        report2.best_epoch
    )?;
    Ok(vec![c1, c2, logp])
}

fn score(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let ckpt = Checkpoint::load(path(cfg, layout::STAGE2))?;
    let ids: Vec<String> = manifest.rows.iter().map(|r| r.output_id.clone()).collect();
    let scores = ops::predict_all(&ckpt, &path(cfg, layout::FEATURES), &ids)?;
    let out = path(cfg, layout::MODEL_SCORES);
    ops::write_scores(&scores, &out)?;
    writeln!(log, "score: {} videos", scores.len())?;
    Ok(vec![out])
}

fn cell(r: &Result<f64>, what: &str, log: &mut dyn Write) -> Result<String> {
    Ok(match r {
        Ok(v) => v.to_string(),
        Err(e) => {
            writeln!(log, "analyze: {what} undefined: {e:#}")?;
            String::new()
        }
    })
}

fn analyze(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = ops::read_manifest(&path(cfg, layout::MANIFEST))?;
    let human = ops::read_scores(&path(cfg, layout::HUMAN))?;
    let model = ops::read_scores(&path(cfg, layout::MODEL_SCORES))?;
    let splits = read_splits(path(cfg, layout::SPLITS))?;
    let favd = ops::read_favd_csv(&path(cfg, layout::FAVD))?;
    let ratings = ops::read_ratings(&path(cfg, layout::RATINGS))?;

    let dir = path(cfg, layout::ANALYSIS);
    ops::clear(&dir)?;
    ops::ensure_dir(&dir)?;

    let corr = dir.join("correlation.csv");
    let mut w = csv::Writer::from_path(&corr)?;
    w.write_record(["metric", "scope", "set_pcc", "clip_pcc"])?;
    for (scope, subset) in [("all", None), ("test", Some(Split::Test))] {
        let h = match subset {
            Some(s) => ops::restrict(&human, &splits, s),
            None => human.clone(),
        };
        let pair = ops::correlate(&model, &h, &manifest);
        let (set, clip) = match pair {
            Ok((s, c)) => (Ok(s), Ok(c)),
            Err(e) => (Err(anyhow::anyhow!("{e:#}")), Err(e)),
        };
        let what = format!("model/{scope}");
        w.write_record(["model", scope, &cell(&set, &what, log)?, &cell(&clip, &what, log)?])?;
    }
    let f = ops::favd_human_correlation(&favd, &human, &manifest);
    w.write_record(["favd", "all", &cell(&f, "favd/all", log)?, ""])?;
    w.flush()?;

    let report = dir.join("report.csv");
    ops::write_report(&model, &human, &manifest, &report)?;
    let bins = dir.join("bins.csv");
    let model_rated: ClipScores = model.iter().filter(|(v, _)| human.contains_key(*v)).map(|(v, s)| (v.clone(), *s)).collect();
    ops::write_bins_csv(&[("model", &model_rated), ("human", &human)], &bins)?;
    let absdiff = dir.join("absdiff.csv");
    ops::write_absdiff_csv(&ratings, &manifest, &absdiff)?;

    let agreement = dir.join("agreement.csv");
    let alpha = ops::ratings_alpha(&ratings);
    let mut w = csv::Writer::from_path(&agreement)?;
    w.write_record(["statistic", "value"])?;
    w.write_record(["krippendorff_alpha", &cell(&alpha, "alpha", log)?])?;
    w.write_record(["ratings", &ratings.len().to_string()])?;
    w.write_record(["scored_videos", &human.len().to_string()])?;
    w.flush()?;

    writeln!(log, "analyze: wrote {}", ops::relative(&dir, &cfg.workdir).display())?;
    Ok(vec![dir])
}
