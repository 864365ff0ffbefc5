//! Training loops for both stages.
//!
//! Each example runs on its own tape. Batches are cut into fixed chunks whose
//! gradients are summed in order, so results do not depend on the number of
//! worker threads. Dropout masks are seeded from (run seed, epoch, example).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{ccc, ccc_loss, contrastive_loss, distance_grad};
use super::model::{InputNorm, Mode, Model, ModelConfig};
use super::optim::{Adam, PlateauMode, ReduceOnPlateau};
use super::tape::{Mat, Tape};
use super::NetError;
use crate::distort::{apply_distortion, DistortionKind, DistortionSpec};
use crate::features::SyntheticExtractor;
use crate::media::ClipBundle;

const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    /// Fraction of source clips held out for validation; 0 selects on training data.
    pub val_fraction: f64,
    /// Stage 1 only: repeat aligned examples so both labels are equally frequent per epoch.
    pub balance_classes: bool,
}

impl TrainConfig {
    pub fn stage1() -> TrainConfig {
        TrainConfig {
            stage: Stage::One,
            lr: 1e-3,
            batch_size: 128,
            epochs: 60,
            plateau_factor: 0.1,
            plateau_patience: 10,
            seed: 0,
            val_fraction: 0.2,
            balance_classes: true,
        }
    }

    pub fn stage2() -> TrainConfig {
        TrainConfig {
            stage: Stage::Two,
            lr: 1e-4,
            batch_size: 64,
            epochs: 20,
            plateau_factor: 0.1,
            plateau_patience: 3,
            seed: 0,
            val_fraction: 0.2,
            balance_classes: false,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidTrainConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau_factor must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One training example: a clip's two feature matrices and its target
/// (1 aligned / 0 misaligned in stage 1, an opinion score in stage 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source_id: String,
    pub audio: Mat,
    pub video: Mat,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation CCC in stage 2; mean misaligned minus mean aligned distance in stage 1.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_sources: Vec<String>,
    pub val_sources: Vec<String>,
}

pub enum Init {
    Fresh(ModelConfig),
    Pretrained(Checkpoint),
}

/// Splits source ids (not examples) into train and validation sets.
pub fn split_sources(examples: &[Example], val_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut sources: Vec<String> = examples.iter().map(|e| e.source_id.clone()).collect();
    sources.sort();
    sources.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sources.shuffle(&mut rng);
    let n_val = if val_fraction > 0.0 {
        ((sources.len() as f64 * val_fraction).round() as usize).clamp(1, sources.len().saturating_sub(1))
    } else {
        0
    };
    let val = sources.split_off(sources.len() - n_val);
    (sources, val)
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn add_into(acc: &mut [Mat], g: &[Option<Mat>], vars: &[usize]) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        if let Some(gm) = &g[v] {
            for (x, y) in a.data.iter_mut().zip(&gm.data) {
                *x += y;
            }
        }
    }
}

fn zero_grads(model: &Model) -> Vec<Mat> {
    model.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect()
}

/// Sums per-example gradients chunk by chunk; `seeds_for(position, example,
/// tape, graph)` maps an example's tape outputs to its seed gradients.
fn batch_gradient<F>(
    model: &Model,
    batch: &[(usize, u64)],
    examples: &[Example],
    with_head: bool,
    seeds_for: F,
) -> Result<Vec<Mat>, NetError>
where
    F: Fn(usize, usize, &Tape, &super::model::Graph) -> Vec<(usize, Mat)> + Sync,
{
    let partials: Vec<Result<Vec<Mat>, NetError>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = zero_grads(model);
            for (k, &(i, seed)) in chunk.iter().enumerate() {
                let ex = &examples[i];
                let mut tape = Tape::new();
                let g = model.forward_on_tape(&mut tape, &ex.audio, &ex.video, Mode::Train, seed, with_head)?;
                let seeds = seeds_for(c * CHUNK + k, i, &tape, &g);
                let grads = tape.backward(&seeds);
                add_into(&mut acc, &grads, &g.params);
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero_grads(model);
    for p in partials {
        for (t, g) in total.iter_mut().zip(p?) {
            for (x, y) in t.data.iter_mut().zip(&g.data) {
                *x += y;
            }
        }
    }
    Ok(total)
}

/// Eval-mode branch distances, in example order.
pub fn distances(model: &Model, examples: &[Example]) -> Result<Vec<f64>, NetError> {
    examples
        .par_iter()
        .map(|e| Ok(model.forward_mats(&e.audio, &e.video, Mode::Eval, 0)?.distance()))
        .collect()
}

/// Eval-mode raw scores, in example order.
pub fn scores(model: &Model, examples: &[Example]) -> Result<Vec<f64>, NetError> {
    examples
        .par_iter()
        .map(|e| Ok(model.forward_mats(&e.audio, &e.video, Mode::Eval, 0)?.score.expect("head ran")))
        .collect()
}

/// Contrastive loss and mean misaligned minus mean aligned distance. With
/// `balanced`, the loss averages the two per-label means instead of all pairs.
pub fn evaluate_stage1(model: &Model, examples: &[Example], balanced: bool) -> Result<(f64, f64), NetError> {
    let d = distances(model, examples)?;
    let pairs: Vec<(f64, u8)> = d.iter().zip(examples).map(|(&d, e)| (d, e.target as u8)).collect();
    let by_label = |y: u8| pairs.iter().copied().filter(|p| p.1 == y).collect::<Vec<_>>();
    let (pos, neg) = (by_label(1), by_label(0));
    let loss = if balanced && !pos.is_empty() && !neg.is_empty() {
        0.5 * (contrastive_loss(&pos, model.config.margin)?.0 + contrastive_loss(&neg, model.config.margin)?.0)
    } else {
        contrastive_loss(&pairs, model.config.margin)?.0
    };
    let mean = |v: &[(f64, u8)]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|p| p.0).sum::<f64>() / v.len() as f64
        }
    };
    Ok((loss, mean(&neg) - mean(&pos)))
}

/// `1 - CCC` and CCC of eval-mode scores against targets.
pub fn evaluate_stage2(model: &Model, examples: &[Example]) -> Result<(f64, f64), NetError> {
    let s = scores(model, examples)?;
    let t: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let c = ccc(&t, &s)?;
    Ok((1.0 - c, c))
}

struct Split<'a> {
    train: Vec<usize>,
    val: Vec<usize>,
    examples: &'a [Example],
    report: TrainReport,
}

fn make_split<'a>(examples: &'a [Example], cfg: &TrainConfig) -> Result<Split<'a>, NetError> {
    if examples.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let (train_src, val_src) = split_sources(examples, cfg.val_fraction, cfg.seed);
    let mut val_sorted = val_src.clone();
    val_sorted.sort();
    let in_val = |i: &usize| val_sorted.binary_search(&examples[*i].source_id).is_ok();
    let (val, train): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(in_val);
    Ok(Split {
        train,
        val,
        examples,
        report: TrainReport {
            epochs: Vec::new(),
            best_epoch: 0,
            train_sources: train_src,
            val_sources: val_src,
        },
    })
}

fn subset(examples: &[Example], idx: &[usize]) -> Vec<Example> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

/// Shuffled batches of `(example index, dropout seed)`; trailing batches of
/// one example are dropped because CCC needs two.
fn epoch_batches(train: &[usize], examples: &[Example], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<(usize, u64)>> {
    let mut order = train.to_vec();
    if cfg.balance_classes && cfg.stage == Stage::One {
        let pos: Vec<usize> = train.iter().copied().filter(|&i| examples[i].target == 1.0).collect();
        let neg = train.len() - pos.len();
        if !pos.is_empty() && neg > pos.len() {
            let extra = neg - pos.len();
            order.extend(pos.iter().cycle().take(extra));
        }
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1)));
    let n = order.len();
    order
        .chunks(cfg.batch_size)
        .enumerate()
        .filter(|(_, c)| c.len() >= 2 || n == 1)
        .map(|(b, c)| {
            c.iter()
                .enumerate()
                .map(|(k, &i)| (i, mix(cfg.seed, epoch as u64, (b * cfg.batch_size + k) as u64 + 2)))
                .collect()
        })
        .collect()
}

/// Contrastive pre-training on aligned (target 1) and misaligned (target 0) examples.
pub fn train_stage1(
    examples: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    extractor: Option<String>,
    window_seconds: f64,
) -> Result<(Checkpoint, TrainReport), NetError> {
    cfg.validate()?;
    let split = make_split(examples, cfg)?;
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    model.norm = InputNorm::fit(split.train.iter().map(|&i| (&examples[i].audio, &examples[i].video)));
    let monitor: Vec<Example> = subset(examples, if split.val.is_empty() { &split.train } else { &split.val });
    run_loop(model, split, cfg, &monitor, PlateauMode::Min, extractor, window_seconds, |model, batch, ex| {
        let margin = model.config.margin;
        let n = batch.len() as f64;
        let losses = std::sync::Mutex::new(BTreeMap::new());
        let grads = batch_gradient(model, batch, ex, false, |pos, i, tape, g| {
            let ha = &tape.value(g.h_audio).data;
            let hv = &tape.value(g.h_video).data;
            let (d, dd) = distance_grad(ha, hv);
            let y = ex[i].target as u8;
            let (l, coef) = if y == 1 {
                (d * d, d / n)
            } else {
                let gap = (margin - d).max(0.0);
                (gap * gap, -gap / n)
            };
            losses.lock().unwrap().insert(pos, l);
            let ga: Vec<f64> = dd.iter().map(|v| v * coef).collect();
            let gv: Vec<f64> = ga.iter().map(|v| -v).collect();
            vec![
                (g.h_audio, Mat::from_vec(1, ga.len(), ga)),
                (g.h_video, Mat::from_vec(1, gv.len(), gv)),
            ]
        })?;
        let loss = losses.into_inner().unwrap().values().sum::<f64>() / (2.0 * n);
        Ok((loss, grads))
    })
}

/// Score fine-tuning minimizing `1 - CCC` per batch.
pub fn train_stage2(examples: &[Example], init: Init, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport), NetError> {
    cfg.validate()?;
    let split = make_split(examples, cfg)?;
    let t0 = split.train.first().map(|&i| examples[i].target);
    if split.train.iter().all(|&i| Some(examples[i].target) == t0) {
        return Err(NetError::DegenerateBatch("every training target is identical".into()));
    }
    let (model, extractor, window) = match init {
        Init::Fresh(mc) => {
            let mut m = Model::new(mc, cfg.seed)?;
            m.norm = InputNorm::fit(split.train.iter().map(|&i| (&examples[i].audio, &examples[i].video)));
            (m, None, 0.96)
        }
        Init::Pretrained(ck) => {
            if ck.stage != 1 && ck.stage != 2 {
                return Err(NetError::CheckpointStageMismatch {
                    expected: 1,
                    actual: ck.stage,
                });
            }
            (ck.model, ck.extractor, ck.window_seconds)
        }
    };
    let monitor: Vec<Example> = subset(examples, if split.val.is_empty() { &split.train } else { &split.val });
    run_loop(model, split, cfg, &monitor, PlateauMode::Max, extractor, window, |model, batch, ex| {
        // Scores under the same dropout masks the gradient pass will use.
        let preds: Vec<f64> = batch
            .par_iter()
            .map(|&(i, seed)| {
                let e = &ex[i];
                Ok(model.forward_mats(&e.audio, &e.video, Mode::Train, seed)?.score.expect("head ran"))
            })
            .collect::<Result<_, NetError>>()?;
        let truth: Vec<f64> = batch.iter().map(|&(i, _)| ex[i].target).collect();
        let (loss, dpred) = ccc_loss(&truth, &preds)?;
        let grads = batch_gradient(model, batch, ex, true, |pos, _, _, g| {
            vec![(g.score.expect("head ran"), Mat::from_vec(1, 1, vec![dpred[pos]]))]
        })?;
        Ok((loss, grads))
    })
}

#[allow(clippy::too_many_arguments)]
fn run_loop<F>(
    mut model: Model,
    mut split: Split,
    cfg: &TrainConfig,
    monitor: &[Example],
    mode: PlateauMode,
    extractor: Option<String>,
    window_seconds: f64,
    step: F,
) -> Result<(Checkpoint, TrainReport), NetError>
where
    F: Fn(&Model, &[(usize, u64)], &[Example]) -> Result<(f64, Vec<Mat>), NetError>,
{
    let stage_no = match cfg.stage {
        Stage::One => 1,
        Stage::Two => 2,
    };
    let with_head = stage_no == 2;
    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut sched = ReduceOnPlateau::new(mode, cfg.plateau_factor, cfg.plateau_patience);
    let mut lr = cfg.lr;
    let evaluate = |m: &Model| -> Result<(f64, f64), NetError> {
        if with_head {
            evaluate_stage2(m, monitor)
        } else {
            evaluate_stage1(m, monitor, cfg.balance_classes)
        }
    };
    let selection = |loss: f64, metric: f64| if with_head { metric } else { -loss };

    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&split.train, split.examples, cfg, epoch);
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = step(&model, batch, split.examples)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(NetError::NonFiniteLoss {
                    epoch,
                    last_finite: best.map(|b| Box::new(b.1)),
                });
            }
            total += loss;
            opt.lr = lr;
            opt.step(&mut model.params, &grads);
        }
        let (val_loss, val_metric) = evaluate(&model)?;
        if !val_loss.is_finite() {
            return Err(NetError::NonFiniteLoss {
                epoch,
                last_finite: best.map(|b| Box::new(b.1)),
            });
        }
        split.report.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: total / batches.len().max(1) as f64,
            val_loss,
            val_metric,
        });
        let key = selection(val_loss, val_metric);
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            split.report.best_epoch = epoch;
            best = Some((key, Checkpoint::new(stage_no, model.clone(), extractor.clone(), window_seconds)));
        }
        lr = sched.observe(if with_head { val_metric } else { val_loss }, lr);
    }
    let ckpt = match best {
        Some((_, c)) => c,
        None => Checkpoint::new(stage_no, model, extractor, window_seconds),
    };
    Ok((ckpt, split.report))
}

/// Extracts one clip into a training example credited to `source_id`.
pub fn clip_example(
    source_id: &str,
    clip: &ClipBundle,
    extractor: &SyntheticExtractor,
    window_seconds: f64,
    target: f64,
) -> Result<Example, crate::frechet::FrechetError> {
    let (a, v) = extractor.extract(clip, window_seconds)?;
    let (audio, video) = super::model::sequences_to_mats(&a, &v).expect("extractor yields matched windows");
    Ok(Example {
        source_id: source_id.to_string(),
        audio,
        video,
        target,
    })
}

fn shifted(clip: &ClipBundle, level: f64) -> Result<ClipBundle, crate::frechet::FrechetError> {
    Ok(apply_distortion(clip, &DistortionSpec::new(DistortionKind::AudioShift, level, 0))?)
}

/// Aligned and audio-shifted examples for contrastive pre-training: for each
/// clip, the original (target 1) and one copy per shift level (target 0).
pub fn stage1_examples(
    clips: &[ClipBundle],
    extractor: &SyntheticExtractor,
    window_seconds: f64,
) -> Result<Vec<Example>, crate::frechet::FrechetError> {
    let per_clip: Vec<Vec<Example>> = clips
        .par_iter()
        .map(|clip| {
            let id = &clip.clip_id;
            let mut out = vec![clip_example(id, clip, extractor, window_seconds, 1.0)?];
            for &level in DistortionKind::AudioShift.levels() {
                out.push(clip_example(id, &shifted(clip, level)?, extractor, window_seconds, 0.0)?);
            }
            Ok(out)
        })
        .collect::<Result<_, crate::frechet::FrechetError>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Proxy-labelled examples for score fine-tuning: clip `i` contributes its
/// original (score 5) and one audio shift at catalog level `i mod 10`, scored
/// by [`proxy_opinion_score`](crate::datakit::proxy_opinion_score)'s rule.
pub fn stage2_examples(
    clips: &[ClipBundle],
    extractor: &SyntheticExtractor,
    window_seconds: f64,
) -> Result<Vec<Example>, crate::frechet::FrechetError> {
    let levels = DistortionKind::AudioShift.levels();
    let per_clip: Vec<Vec<Example>> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let id = &clip.clip_id;
            let level = levels[i % levels.len()];
            let target = 5.0 - 4.0 * crate::datakit::severity(DistortionKind::AudioShift, level);
            Ok(vec![
                clip_example(id, clip, extractor, window_seconds, 5.0)?,
                clip_example(id, &shifted(clip, level)?, extractor, window_seconds, target)?,
            ])
        })
        .collect::<Result<_, crate::frechet::FrechetError>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}
