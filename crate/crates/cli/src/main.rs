//! `avsync`: command-line access to every stage of the toolkit.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration (nothing was
//! written), 2 failure while running.

mod config;
mod ops;
mod pipeline;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use avsync::datakit::{sample_pairs, RatingsStore};
use avsync::distort::DistortionKind;
use avsync::features::SyntheticExtractor;
use avsync::frechet::{distortion_sweep, favd_score, write_sweep_csv, MetricVariant};
use avsync::net::train::Init;
use avsync::net::Checkpoint;
use avsync::synth::SynthConfig;

use config::{Preset, PresetName, RunConfig, WINDOW_SECONDS};

/// A problem found before any work started.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

#[derive(Parser)]
#[command(name = "avsync", version, about = "Audio-visual synchrony distortions, metrics and annotation")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Extractor, model and schedule preset.
    #[arg(long, global = true, value_enum, default_value_t = PresetName::Desk)]
    preset: PresetName,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clip bundles.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
    },
    /// Apply the distortion grid to every bundle in a directory.
    Distort {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the benchmark manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Write audio and video embeddings for every bundle in a directory.
    Extract {
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extractor tag; defaults to the preset's.
        #[arg(long)]
        extractor: Option<String>,
        #[arg(long, default_value_t = WINDOW_SECONDS)]
        window: f64,
    },
    /// Frechet distance between two embedding directories.
    Favd {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "favd")]
        variant: String,
    },
    /// FAD, FVD and FAVD of every (kind, level) set in a manifest.
    FavdGrid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distort clips in memory and score every level against the originals.
    Sweep {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Kind names or ids; all kinds when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long)]
        extractor: Option<String>,
    },
    /// Sample rating tasks from a manifest.
    Tasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate an annotation campaign, then aggregate, filter and split.
    Annotate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        pairs: usize,
        #[arg(long, default_value_t = 12)]
        pool: usize,
    },
    /// Train the scorer: stage 1 on bundles, stage 2 on rated embeddings.
    Train(TrainArgs),
    /// Score every embedding pair in a directory with a stage-2 checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlations, agreement, bins and reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        /// Directory with one bundle per video id.
        #[arg(long)]
        media: PathBuf,
        /// JSONL ratings file; created if missing, replayed if present.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Plain-text guidelines replacing the built-in text.
        #[arg(long)]
        guidelines: Option<PathBuf>,
        #[arg(long, default_value_t = avsync::datakit::REQUIRED_RATERS)]
        required: usize,
    },
    /// Run the stages listed in a TOML run file.
    Pipeline { run: PathBuf },
}

#[derive(Args)]
struct GridArgs {
    /// Kind names or ids; all kinds when omitted.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    /// 1-based level positions; all ten when omitted.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    out: PathBuf,
    /// Stage 1: directory of bundles.
    #[arg(long, required_if_eq("stage", "1"))]
    clips: Option<PathBuf>,
    /// Stage 2: embedding directory.
    #[arg(long, required_if_eq("stage", "2"))]
    features: Option<PathBuf>,
    /// Stage 2: `video_id,score` CSV.
    #[arg(long, required_if_eq("stage", "2"))]
    scores: Option<PathBuf>,
    /// Stage 2: manifest mapping videos to sources.
    #[arg(long, required_if_eq("stage", "2"))]
    manifest: Option<PathBuf>,
    /// Stage 2: stage-1 checkpoint to start from; fresh weights otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Set-level and clip-level Pearson between metric and human scores.
    Correlate {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Krippendorff's alpha over a ratings file.
    Alpha {
        #[arg(long)]
        ratings: PathBuf,
    },
    /// 21-bin histogram of one or more score files.
    Bins {
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per (kind, level) means of metric and human scores.
    Report {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean |left - right| per pair of distinct distortion kinds.
    Absdiff {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn need(p: &Path) -> Result<(), Invalid> {
    if p.exists() {
        Ok(())
    } else {
        Err(Invalid(format!("{} does not exist", p.display())))
    }
}

fn need_all(paths: &[&Path]) -> Result<(), Invalid> {
    paths.iter().try_for_each(|p| need(p))
}

fn parse_kinds(names: &[String]) -> Result<Vec<DistortionKind>, Invalid> {
    if names.is_empty() {
        return Ok(DistortionKind::ALL.to_vec());
    }
    names.iter().map(|k| k.parse().map_err(Invalid)).collect()
}

fn extractor(tag: &Option<String>, preset: &Preset) -> Result<SyntheticExtractor, Invalid> {
    match tag {
        Some(t) => t.parse().map_err(|e: avsync::features::FeatureError| Invalid(e.to_string())),
        None => Ok(preset.extractor.clone()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let preset = Preset::get(cli.preset);
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out,
            count,
            duration,
            width,
            height,
        } => {
            if count == 0 || duration <= 0.0 || width == 0 || height == 0 {
                return Err(Invalid("count, duration and geometry must be positive".into()).into());
            }
            let cfg = SynthConfig {
                duration_seconds: duration,
                width,
                height,
                ..Default::default()
            };
            let ids = ops::synth_clips(&out, count, &cfg, seed)?;
            println!("{} clips in {}", ids.len(), out.display());
        }
        Command::Distort {
            sources,
            out,
            manifest,
            grid,
        } => {
            need(&sources)?;
            let kinds = parse_kinds(&grid.kinds)?;
            let levels = if grid.levels.is_empty() { (1..=10).collect() } else { grid.levels };
            if levels.iter().any(|l| !(1..=10).contains(l)) {
                return Err(Invalid("levels are 1-based positions in 1..=10".into()).into());
            }
            let ids = ops::list_bundles(&sources)?;
            let m = ops::grid_manifest(&ids, &kinds, &levels, seed)?;
            let n = ops::distort_grid(&sources, &out, &m, rayon::current_num_threads())?;
            m.write(&manifest)?;
            println!("{n} videos in {}", out.display());
        }
        Command::Extract {
            videos,
            out,
            extractor: tag,
            window,
        } => {
            need(&videos)?;
            let ex = extractor(&tag, &preset)?;
            let ids = ops::list_bundles(&videos)?;
            ops::extract_all(&videos, &ids, &out, &ex, window)?;
            println!("{} clips embedded with {}", ids.len(), ex.tag());
        }
        Command::Favd {
            eval,
            reference,
            variant,
        } => {
            need_all(&[&eval, &reference])?;
            let v: MetricVariant = variant.parse().map_err(Invalid)?;
            let e = ops::load_pairs(&eval, &ops::list_feature_ids(&eval)?)?;
            let r = ops::load_pairs(&reference, &ops::list_feature_ids(&reference)?)?;
            println!("{}", favd_score(&e, &r, v)?);
        }
        Command::FavdGrid { manifest, features, out } => {
            need_all(&[&manifest, &features])?;
            let rows = ops::favd_table(&ops::read_manifest(&manifest)?, &features)?;
            ops::write_favd_csv(&rows, &out)?;
            println!("{} sets", rows.len());
        }
        Command::Sweep {
            clips,
            out,
            kinds,
            extractor: tag,
        } => {
            need(&clips)?;
            let kinds = parse_kinds(&kinds)?;
            let ex = extractor(&tag, &preset)?;
            let bundles = ops::load_clips(&clips, &ops::list_bundles(&clips)?)?;
            let rows = distortion_sweep(&bundles, &ex, WINDOW_SECONDS, &kinds, seed)?;
            write_sweep_csv(&rows, std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            println!("{} rows", rows.len());
        }
        Command::Tasks { manifest, pairs, out } => {
            need(&manifest)?;
            let sampled = sample_pairs(&ops::read_manifest(&manifest)?, pairs, seed)?;
            avsync_annot::write_tasks(&avsync_annot::tasks_from_pairs(&sampled), &out)?;
            println!("{} tasks", sampled.len());
        }
        Command::Annotate {
            manifest,
            out,
            pairs,
            pool,
        } => {
            need(&manifest)?;
            let m = ops::read_manifest(&manifest)?;
            let f = |n: &str| out.join(n);
            let (t, r, a, h, rm, s) = (
                f("tasks.csv"),
                f("ratings.jsonl"),
                f("aggregated.csv"),
                f("human.csv"),
                f("removed.csv"),
                f("splits.csv"),
            );
            let paths = ops::AnnotationPaths {
                tasks: &t,
                ratings: &r,
                aggregated: &a,
                human: &h,
                removed: &rm,
                splits: &s,
            };
            let sum = ops::simulate_annotation(&m, pairs, pool, seed, &paths)?;
            println!("{} tasks, {} ratings, {} kept, {} removed", sum.tasks, sum.ratings, sum.kept, sum.removed);
        }
        Command::Train(t) => train(t, &preset, seed)?,
        Command::Score {
            checkpoint,
            features,
            out,
        } => {
            need_all(&[&checkpoint, &features])?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scores = ops::predict_all(&ckpt, &features, &ops::list_feature_ids(&features)?)?;
            ops::write_scores(&scores, &out)?;
            println!("{} videos scored", scores.len());
        }
        Command::Analyze(a) => analyze(a)?,
        Command::Serve {
            tasks,
            media,
            store,
            addr,
            guidelines,
            required,
        } => {
            need_all(&[&tasks, &media])?;
            let text = match &guidelines {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Invalid(format!("{}: {e}", p.display())))?,
                None => avsync_annot::DEFAULT_GUIDELINES.to_string(),
            };
            let ledger = avsync_annot::Ledger::new(avsync_annot::read_tasks(&tasks)?, Some(RatingsStore::open(store)), required)?;
            let state = avsync_annot::AppState::new(ledger, media, text);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(avsync_annot::serve(state, addr))?;
        }
        Command::Pipeline { run } => {
            let cfg = RunConfig::load(&run)?;
            if let Some(j) = cfg.file.jobs {
                set_jobs(j)?;
            }
            pipeline::run(&cfg, &mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn train(t: TrainArgs, preset: &Preset, seed: u64) -> Result<()> {
    let window = WINDOW_SECONDS;
    if t.stage == 1 {
        let clips = t.clips.expect("required by clap");
        need(&clips)?;
        let cfg = avsync::net::TrainConfig {
            seed,
            epochs: t.epochs.unwrap_or(preset.stage1.epochs),
            ..preset.stage1.clone()
        };
        let bundles = ops::load_clips(&clips, &ops::list_bundles(&clips)?)?;
        let (ckpt, report) = ops::train_contrastive(&bundles, &preset.extractor, &preset.model, &cfg, window)?;
        ckpt.save(&t.out)?;
        println!("stage 1: best epoch {} of {}", report.best_epoch, report.epochs.len());
    } else {
        let (features, scores, manifest) = (
            t.features.expect("required by clap"),
            t.scores.expect("required by clap"),
            t.manifest.expect("required by clap"),
        );
        need_all(&[&features, &scores, &manifest])?;
        if let Some(p) = &t.init {
            need(p)?;
        }
        let cfg = avsync::net::TrainConfig {
            seed,
            epochs: t.epochs.unwrap_or(preset.stage2.epochs),
            ..preset.stage2.clone()
        };
        let examples = ops::score_examples(&features, &ops::read_scores(&scores)?, &ops::read_manifest(&manifest)?)?;
        let init = match &t.init {
            Some(p) => Init::Pretrained(Checkpoint::load(p)?),
            None => Init::Fresh(preset.model.clone()),
        };
        let (ckpt, report) = ops::train_scorer(&examples, init, &cfg)?;
        ckpt.save(&t.out)?;
        println!("stage 2: best epoch {} of {}", report.best_epoch, report.epochs.len());
    }
    Ok(())
}

fn analyze(a: AnalyzeCommand) -> Result<()> {
    match a {
        AnalyzeCommand::Correlate { metric, human, manifest } => {
            need_all(&[&metric, &human, &manifest])?;
            let (set, clip) =
                ops::correlate(&ops::read_scores(&metric)?, &ops::read_scores(&human)?, &ops::read_manifest(&manifest)?)?;
            println!("set_pcc {set}\nclip_pcc {clip}");
        }
        AnalyzeCommand::Alpha { ratings } => {
            need(&ratings)?;
            println!("{}", ops::ratings_alpha(&ops::read_ratings(&ratings)?)?);
        }
        AnalyzeCommand::Bins { scores, out } => {
            need_all(&scores.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            let loaded = scores.iter().map(|p| ops::read_scores(p)).collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = scores
                .iter()
                .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect();
            let cols: Vec<(&str, &_)> = names.iter().map(String::as_str).zip(loaded.iter()).collect();
            ops::write_bins_csv(&cols, &out)?;
        }
        AnalyzeCommand::Report {
            metric,
            human,
            manifest,
            out,
        } => {
            need_all(&[&metric, &human, &manifest])?;
            ops::write_report(&ops::read_scores(&metric)?, &ops::read_scores(&human)?, &ops::read_manifest(&manifest)?, &out)?;
        }
        AnalyzeCommand::Absdiff { ratings, manifest, out } => {
            need_all(&[&ratings, &manifest])?;
            ops::write_absdiff_csv(&ops::read_ratings(&ratings)?, &ops::read_manifest(&manifest)?, &out)?;
        }
    }
    Ok(())
}

fn set_jobs(jobs: usize) -> Result<(), Invalid> {
    if jobs == 0 {
        return Err(Invalid("--jobs must be positive".into()));
    }
    // Only the first call configures the pool; later ones are harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = set_jobs(j) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Invalid>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
