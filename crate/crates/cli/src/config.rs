//! Run files and presets. Everything is resolved and checked before any
//! stage touches the disk.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use avsync::distort::DistortionKind;
use avsync::features::SyntheticExtractor;
use avsync::net::model::ModelConfig;
use avsync::net::train::TrainConfig;

use crate::Invalid;

pub const WINDOW_SECONDS: f64 = 0.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    /// Small features and model; minutes on a laptop.
    Desk,
    /// Full-width features and model with the default schedules.
    Full,
}

/// Extractor, model and schedules implied by a preset.
#[derive(Debug, Clone)]
pub struct Preset {
    pub extractor: SyntheticExtractor,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Preset {
    pub fn get(name: PresetName) -> Preset {
        match name {
            PresetName::Desk => {
                let ex = SyntheticExtractor::desk();
                Preset {
                    model: ModelConfig {
                        embed_dim: 32,
                        heads: 4,
                        mlp_hidden: vec![32, 16, 1],
                        audio_in_dim: ex.audio_dim(),
                        video_in_dim: ex.video_dim,
                        ..Default::default()
                    },
                    stage1: TrainConfig {
                        batch_size: 32,
                        ..TrainConfig::stage1()
                    },
                    stage2: TrainConfig {
                        epochs: 200,
                        batch_size: 32,
                        lr: 1e-3,
                        plateau_patience: 30,
                        ..TrainConfig::stage2()
                    },
                    extractor: ex,
                }
            }
            PresetName::Full => Preset {
                extractor: SyntheticExtractor::default(),
                model: ModelConfig::default(),
                stage1: TrainConfig::stage1(),
                stage2: TrainConfig::stage2(),
            },
        }
    }
}

pub const STAGES: [&str; 8] = ["synth", "distort", "extract", "annotate", "favd", "train", "score", "analyze"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub duration_seconds: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            count: 8,
            duration_seconds: 10.0,
            width: 16,
            height: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortSection {
    /// Kind names or ids; empty means all nine.
    pub kinds: Vec<String>,
    /// 1-based catalog positions; empty means all ten.
    pub level_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateSection {
    pub pairs: usize,
    pub pool: usize,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection { pairs: 400, pool: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Init {
    Pretrained,
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage1_batch: Option<usize>,
    pub stage2_batch: Option<usize>,
    pub stage2_lr: Option<f64>,
    pub stage2_init: Stage2Init,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage1_epochs: None,
            stage2_epochs: None,
            stage1_batch: None,
            stage2_batch: None,
            stage2_lr: None,
            stage2_init: Stage2Init::Pretrained,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub self_layers: Option<usize>,
    pub mlp_hidden: Option<Vec<usize>>,
}

/// A run file as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub workdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: PresetName,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    /// Existing bundle directory to use instead of the synth stage.
    #[serde(default)]
    pub sources: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub distort: DistortSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
}

fn default_preset() -> PresetName {
    PresetName::Desk
}

fn default_stages() -> Vec<String> {
    STAGES.iter().map(|s| s.to_string()).collect()
}

/// A validated run: paths are absolute, kinds parsed, stages canonical.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub file: RunFile,
    pub workdir: PathBuf,
    pub sources: PathBuf,
    pub stages: Vec<&'static str>,
    pub kinds: Vec<DistortionKind>,
    pub level_indices: Vec<usize>,
    pub preset: Preset,
    pub hash: String,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, Invalid> {
    Err(Invalid(msg.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, Invalid> {
        let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        let file: RunFile = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::resolve(file, &base)
    }

    /// Relative paths in `file` are taken from `base`.
    pub fn resolve(file: RunFile, base: &Path) -> Result<RunConfig, Invalid> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let workdir = abs(&file.workdir);
        match workdir.parent() {
            Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => {
                return invalid(format!("workdir parent {} does not exist", parent.display()));
            }
            _ => {}
        }

        let mut stages = Vec::new();
        for s in &file.stages {
            match STAGES.iter().find(|c| *c == s) {
                Some(c) if stages.contains(c) => return invalid(format!("stage {s} listed twice")),
                Some(c) => stages.push(*c),
                None => return invalid(format!("unknown stage {s:?}; expected one of {STAGES:?}")),
            }
        }
        if stages.is_empty() {
            return invalid("no stages selected");
        }
        stages.sort_by_key(|s| STAGES.iter().position(|c| c == s));

        let sources = match &file.sources {
            Some(p) => {
                let p = abs(p);
                if stages.contains(&"synth") {
                    return invalid("`sources` and the synth stage are mutually exclusive");
                }
                if !p.is_dir() {
                    return invalid(format!("sources directory {} does not exist", p.display()));
                }
                p
            }
            None => workdir.join(layout::SOURCES),
        };

        let kinds = if file.distort.kinds.is_empty() {
            DistortionKind::ALL.to_vec()
        } else {
            file.distort
                .kinds
                .iter()
                .map(|k| DistortionKind::from_str(k).map_err(Invalid))
                .collect::<Result<Vec<_>, _>>()?
        };
        let level_indices = if file.distort.level_indices.is_empty() {
            (1..=10).collect()
        } else {
            file.distort.level_indices.clone()
        };
        if let Some(bad) = level_indices.iter().find(|&&i| !(1..=10).contains(&i)) {
            return invalid(format!("level index {bad} outside 1..=10"));
        }
        if file.synth.count < 2 || file.synth.duration_seconds < 2.0 * WINDOW_SECONDS {
            return invalid("synth needs at least 2 clips of at least two windows");
        }
        if file.annotate.pairs == 0 {
            return invalid("annotate.pairs must be positive");
        }
        if file.jobs == Some(0) {
            return invalid("jobs must be positive");
        }

        let mut preset = Preset::get(file.preset);
        let m = &file.model;
        let mc = &mut preset.model;
        mc.embed_dim = m.embed_dim.unwrap_or(mc.embed_dim);
        mc.heads = m.heads.unwrap_or(mc.heads);
        mc.layers = m.layers.unwrap_or(mc.layers);
        mc.self_layers = m.self_layers.unwrap_or(mc.self_layers);
        if let Some(h) = &m.mlp_hidden {
            mc.mlp_hidden = h.clone();
        }
        mc.validate().map_err(|e| Invalid(e.to_string()))?;
        let t = &file.train;
        let (s1, s2) = (&mut preset.stage1, &mut preset.stage2);
        s1.epochs = t.stage1_epochs.unwrap_or(s1.epochs);
        s1.batch_size = t.stage1_batch.unwrap_or(s1.batch_size);
        s2.epochs = t.stage2_epochs.unwrap_or(s2.epochs);
        s2.batch_size = t.stage2_batch.unwrap_or(s2.batch_size);
        s2.lr = t.stage2_lr.unwrap_or(s2.lr);
        s1.seed = file.seed;
        s2.seed = file.seed;
        s1.validate().map_err(|e| Invalid(e.to_string()))?;
        s2.validate().map_err(|e| Invalid(e.to_string()))?;

        let mut cfg = RunConfig {
            hash: String::new(),
            file,
            workdir,
            sources,
            stages,
            kinds,
            level_indices,
            preset,
        };
        cfg.check_inputs()?;
        cfg.hash = cfg.compute_hash();
        Ok(cfg)
    }

    /// Every input a selected stage reads must come from an earlier selected
    /// stage or already exist.
    fn check_inputs(&self) -> Result<(), Invalid> {
        for (i, stage) in self.stages.iter().enumerate() {
            for (producer, rel) in layout::inputs(stage) {
                if self.stages[..i].contains(&producer) {
                    continue;
                }
                let p = if producer == "synth" { self.sources.clone() } else { self.workdir.join(rel) };
                if !p.exists() {
                    return invalid(format!(
                        "stage {stage} needs {} (from stage {producer}), which does not exist",
                        p.display()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Content hash of the resolved settings; paths are excluded so that a
    /// moved run directory keeps its hash.
    fn compute_hash(&self) -> String {
        let mut f = self.file.clone();
        f.workdir = PathBuf::new();
        f.sources = f.sources.as_ref().map(|_| PathBuf::from("<external>"));
        f.jobs = None;
        let canon = serde_json::json!({
            "file": f,
            "kinds": self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "level_indices": self.level_indices,
            "extractor": self.preset.extractor.tag(),
            "model": self.preset.model,
            "stage1": self.preset.stage1,
            "stage2": self.preset.stage2,
        });
        hex(&Sha256::digest(canon.to_string().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed locations inside a run's working directory.
pub mod layout {
    pub const SOURCES: &str = "sources";
    pub const VIDEOS: &str = "videos";
    pub const MANIFEST: &str = "manifest.csv";
    pub const FEATURES: &str = "features";
    pub const TASKS: &str = "annotations/tasks.csv";
    pub const RATINGS: &str = "annotations/ratings.jsonl";
    pub const AGGREGATED: &str = "annotations/aggregated.csv";
    pub const HUMAN: &str = "annotations/human.csv";
    pub const REMOVED: &str = "annotations/removed.csv";
    pub const SPLITS: &str = "annotations/splits.csv";
    pub const FAVD: &str = "metrics/favd.csv";
    pub const STAGE1: &str = "models/stage1.ckpt";
    pub const STAGE2: &str = "models/stage2.ckpt";
    pub const TRAIN_LOG: &str = "models/train_log.json";
    pub const MODEL_SCORES: &str = "metrics/model_scores.csv";
    pub const ANALYSIS: &str = "analysis";
    pub const MANIFESTS: &str = "manifests";

    /// (producing stage, path) pairs a stage reads.
    pub fn inputs(stage: &str) -> Vec<(&'static str, &'static str)> {
        match stage {
            "distort" => vec![("synth", SOURCES)],
            "extract" => vec![("distort", VIDEOS), ("distort", MANIFEST)],
            "annotate" => vec![("distort", MANIFEST)],
            "favd" => vec![("distort", MANIFEST), ("extract", FEATURES)],
            "train" => vec![
                ("synth", SOURCES),
                ("distort", MANIFEST),
                ("extract", FEATURES),
                ("annotate", HUMAN),
                ("annotate", SPLITS),
            ],
            "score" => vec![("distort", MANIFEST), ("extract", FEATURES), ("train", STAGE2)],
            "analyze" => vec![
                ("distort", MANIFEST),
                ("annotate", RATINGS),
                ("annotate", HUMAN),
                ("annotate", SPLITS),
                ("favd", FAVD),
                ("score", MODEL_SCORES),
            ],
            _ => vec![],
        }
    }
}
