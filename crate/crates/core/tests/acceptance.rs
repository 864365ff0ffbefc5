//! Acceptance gate. Each criterion reports one PASS/FAIL line with its
//! measurement and its runtime against the budget.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avsync::analysis::{
    bin_score, bin_upper_edge, binary_sync_eval, krippendorff_alpha, spearman, ConfusionMatrix2x2, N_BINS,
};
use avsync::datakit::{
    classify_disagreement, filter_benchmark, grouped_split, AggregatedScore, DisagreementClass, RemovalReason,
    DEFAULT_SPLIT_RATIOS,
};
use avsync::distort::{apply_distortion, build_benchmark_manifest, output_id, DistortionKind, DistortionSpec};
use avsync::features::SyntheticExtractor;
use avsync::frechet::{distortion_sweep, frechet_distance, GaussianStats};
use avsync::media::{encode_wav, encode_y4m, ClipBundle};
use avsync::net::loss::{ccc_loss, contrastive_loss, distance_grad};
use avsync::net::model::{Mode, Model, ModelConfig};
use avsync::net::tape::{Mat, Tape};
use avsync::net::train::{
    distances, evaluate_stage2, stage1_examples, stage2_examples, train_stage1, train_stage2, Init, TrainConfig,
};
use avsync::net::predict_score;
use avsync::synth::SynthConfig;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- arithmetic

fn binary_sync_accuracy() -> Outcome {
    let left = ConfusionMatrix2x2 { tp: 39, fn_: 227, fp: 4, tn: 130 }.accuracy().map_err(|e| e.to_string())?;
    let right = ConfusionMatrix2x2 { tp: 92, fn_: 174, fp: 24, tn: 110 }.accuracy().map_err(|e| e.to_string())?;
    let truth: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
    let (_, all) = binary_sync_eval(&truth, &truth).map_err(|e| e.to_string())?;
    check(
        left == 0.4225 && right == 0.505 && all == 1.0,
        format!("accuracies {left} / {right}, all-correct {all}"),
    )
}

fn bin_edges() -> Outcome {
    let width = 5.0 / N_BINS as f64;
    let mut bad = Vec::new();
    for k in 1..=N_BINS {
        let edge = bin_upper_edge(k);
        let below = edge - 1e-9;
        let above = edge + 1e-9;
        if bin_score(edge) != k || bin_score(below) != k || (k < N_BINS && bin_score(above) != k + 1) {
            bad.push(k);
        }
    }
    let top_ok = bin_score(5.0) == 21 && (bin_upper_edge(20) - 4.76).abs() < 5e-3 && bin_score(4.7619) == 20;
    check(
        bad.is_empty() && top_ok && (width - 0.238).abs() < 5e-4,
        format!("width {width:.4}, top bin ({:.4}, 5], bad edges {bad:?}", bin_upper_edge(20)),
    )
}

// ---------------------------------------------------------------- Frechet

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn oracle_frechet(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let (ea, va) = jacobi_eigen(&a.sigma);
    let root = &va * DMatrix::from_diagonal(&DVector::from_iterator(ea.len(), ea.iter().map(|e| e.max(0.0).sqrt()))) * va.transpose();
    let inner = &root * &b.sigma * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let (ei, _) = jacobi_eigen(&inner);
    let cross: f64 = ei.iter().map(|e| e.max(0.0).sqrt()).sum();
    (&a.mu - &b.mu).norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross
}

fn random_stats(rng: &mut ChaCha8Rng, d: usize, diagonal: bool) -> GaussianStats {
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    let sigma = if diagonal {
        DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.random_range(0.01..4.0)))
    } else {
        let a = DMatrix::from_fn(d, d + 2, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() / (d + 2) as f64 + DMatrix::identity(d, d) * 1e-3
    };
    GaussianStats { mu, sigma, n_windows: 100 }
}

fn frechet_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_diag, mut worst_dense, mut worst_sym, mut worst_self) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let (a, b) = (random_stats(&mut rng, d, true), random_stats(&mut rng, d, true));
        let closed: f64 = (0..d)
            .map(|i| {
                let (sa, sb) = (a.sigma[(i, i)], b.sigma[(i, i)]);
                (a.mu[i] - b.mu[i]).powi(2) + sa + sb - 2.0 * (sa * sb).sqrt()
            })
            .sum();
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        worst_diag = worst_diag.max((got - closed).abs());
        worst_sym = worst_sym.max((got - frechet_distance(&b, &a).map_err(|e| e.to_string())?).abs());
        worst_self = worst_self.max(frechet_distance(&a, &a).map_err(|e| e.to_string())?.abs());
    }
    for _ in 0..20 {
        let d = rng.random_range(2..=24);
        let (a, b) = (random_stats(&mut rng, d, false), random_stats(&mut rng, d, false));
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        worst_dense = worst_dense.max((got - oracle_frechet(&a, &b)).abs());
        worst_sym = worst_sym.max((got - frechet_distance(&b, &a).map_err(|e| e.to_string())?).abs());
        worst_self = worst_self.max(frechet_distance(&a, &a).map_err(|e| e.to_string())?.abs());
    }
    check(
        worst_diag <= 1e-6 && worst_dense <= 1e-6 && worst_sym <= 1e-8 && worst_self <= 1e-8,
        format!("max err diagonal {worst_diag:.2e}, dense {worst_dense:.2e}, asymmetry {worst_sym:.2e}, self {worst_self:.2e}"),
    )
}

// --------------------------------------------------------------- gradients

struct GradCase {
    config: ModelConfig,
    windows: usize,
}

fn grad_cases() -> Vec<GradCase> {
    let mk = |e, h, l, s, k, ad, vd, w| GradCase {
        config: ModelConfig {
            embed_dim: e,
            heads: h,
            layers: l,
            self_layers: s,
            conv_kernel: k,
            audio_in_dim: ad,
            video_in_dim: vd,
            mlp_hidden: vec![e, e / 2, 1],
            ..Default::default()
        },
        windows: w,
    };
    vec![
        mk(8, 2, 3, 1, 1, 8, 10, 3),
        mk(12, 3, 3, 2, 3, 5, 7, 6),
        mk(16, 4, 4, 2, 3, 6, 9, 4),
        mk(24, 3, 5, 1, 1, 10, 12, 5),
        mk(32, 4, 6, 1, 1, 32, 16, 6),
    ]
}

/// Contrastive loss over branch distances plus 1 - CCC over head scores, for
/// three examples with fixed dropout seeds.
fn composite_loss(model: &Model, inputs: &[(Mat, Mat)], labels: &[u8], targets: &[f64]) -> f64 {
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for (i, (a, v)) in inputs.iter().enumerate() {
        let out = model.forward_mats(a, v, Mode::Train, 77 + i as u64).unwrap();
        pairs.push((out.distance(), labels[i]));
        scores.push(out.score.unwrap());
    }
    contrastive_loss(&pairs, model.config.margin).unwrap().0 + ccc_loss(targets, &scores).unwrap().0
}

fn analytic_grads(model: &Model, inputs: &[(Mat, Mat)], labels: &[u8], targets: &[f64]) -> Vec<Mat> {
    let mut tapes = Vec::new();
    for (i, (a, v)) in inputs.iter().enumerate() {
        let mut tape = Tape::new();
        let g = model.forward_on_tape(&mut tape, a, v, Mode::Train, 77 + i as u64, true).unwrap();
        tapes.push((tape, g));
    }
    let hs: Vec<(Vec<f64>, Vec<f64>)> = tapes
        .iter()
        .map(|(t, g)| (t.value(g.h_audio).data.clone(), t.value(g.h_video).data.clone()))
        .collect();
    let pairs: Vec<(f64, u8)> = hs.iter().zip(labels).map(|((a, v), &y)| (distance_grad(a, v).0, y)).collect();
    let (_, dd) = contrastive_loss(&pairs, model.config.margin).unwrap();
    let scores: Vec<f64> = tapes.iter().map(|(t, g)| t.value(g.score.unwrap()).data[0]).collect();
    let (_, ds) = ccc_loss(targets, &scores).unwrap();
    let mut total: Vec<Mat> = model.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    for (i, (tape, g)) in tapes.iter().enumerate() {
        let (_, unit) = distance_grad(&hs[i].0, &hs[i].1);
        let ga: Vec<f64> = unit.iter().map(|u| u * dd[i]).collect();
        let gv: Vec<f64> = ga.iter().map(|x| -x).collect();
        let n = ga.len();
        let grads = tape.backward(&[
            (g.h_audio, Mat::from_vec(1, n, ga)),
            (g.h_video, Mat::from_vec(1, n, gv)),
            (g.score.unwrap(), Mat::from_vec(1, 1, vec![ds[i]])),
        ]);
        for (t, &p) in total.iter_mut().zip(&g.params) {
            if let Some(gm) = &grads[p] {
                for (x, y) in t.data.iter_mut().zip(&gm.data) {
                    *x += y;
                }
            }
        }
    }
    total
}

fn scalar_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Below this norm a finite difference at h = 1e-5 is rounding noise.
const FD_RESOLUTION: f64 = 1e-8;

/// Norm-wise relative error, or `None` when both gradients are below the
/// difference resolution. Attention key biases land there: softmax ignores a
/// per-row shift, so their gradient is identically zero.
fn rel_err(a: &[f64], b: &[f64]) -> Option<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    (scale >= FD_RESOLUTION).then(|| diff / scale)
}

fn gradient_suite() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();

    // Losses alone.
    let d = [0.3, 0.7, 1.4, 0.9, 0.05];
    let labels = [1u8, 0, 0, 1, 0];
    let f = |x: &[f64]| contrastive_loss(&x.iter().copied().zip(labels).collect::<Vec<_>>(), 1.0).unwrap().0;
    let an = contrastive_loss(&d.iter().copied().zip(labels).collect::<Vec<_>>(), 1.0).unwrap().1;
    let e = rel_err(&an, &scalar_fd(f, &d, h)).unwrap_or(f64::INFINITY);
    if e > worst {
        (worst, worst_at) = (e, "contrastive".into());
    }
    let truth = [1.0, 2.5, 3.0, 4.5, 2.0];
    let pred = [1.2, 2.0, 3.3, 3.9, 2.8];
    let an = ccc_loss(&truth, &pred).unwrap().1;
    let e = rel_err(&an, &scalar_fd(|x| ccc_loss(&truth, x).unwrap().0, &pred, h)).unwrap_or(f64::INFINITY);
    if e > worst {
        (worst, worst_at) = (e, "ccc".into());
    }

    // Full forward pass, every parameter tensor, sampled entries.
    let (mut groups, mut zero_groups) = (0, 0);
    for (ci, case) in grad_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(ci as u64);
        let model = Model::new(case.config.clone(), 100 + ci as u64).map_err(|e| e.to_string())?;
        let rand_mat = |rng: &mut ChaCha8Rng, r, c| Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let inputs: Vec<(Mat, Mat)> = (0..3)
            .map(|_| {
                (
                    rand_mat(&mut rng, case.windows, case.config.audio_in_dim),
                    rand_mat(&mut rng, case.windows, case.config.video_in_dim),
                )
            })
            .collect();
        let labels = [1u8, 0, 0];
        let targets = [5.0, 2.0, 3.5];
        let grads = analytic_grads(&model, &inputs, &labels, &targets);
        for (p, g) in grads.iter().enumerate() {
            let n = g.data.len();
            let picks: Vec<usize> = if n <= 8 { (0..n).collect() } else { (0..8).map(|_| rng.random_range(0..n)).collect() };
            let mut an = Vec::new();
            let mut num = Vec::new();
            for &k in &picks {
                let mut plus = model.clone();
                plus.params[p].data[k] += h;
                let mut minus = model.clone();
                minus.params[p].data[k] -= h;
                num.push((composite_loss(&plus, &inputs, &labels, &targets) - composite_loss(&minus, &inputs, &labels, &targets)) / (2.0 * h));
                an.push(g.data[k]);
            }
            groups += 1;
            let Some(e) = rel_err(&an, &num) else {
                zero_groups += 1;
                continue;
            };
            if e > worst {
                worst = e;
                worst_at = format!("config {ci} {}", model.names[p]);
            }
        }
    }
    check(
        worst < 1e-4,
        format!(
            "{groups} parameter groups over 5 configs ({zero_groups} with zero gradient below {FD_RESOLUTION:e}) + 2 losses, worst rel err {worst:.2e} ({worst_at})"
        ),
    )
}

// ------------------------------------------------------------ desk scale

fn desk_clips(prefix: &str, seeds: impl Iterator<Item = u64>) -> Vec<ClipBundle> {
    let cfg = SynthConfig { width: 16, height: 16, ..Default::default() };
    seeds.map(|s| cfg.generate(&format!("{prefix}{s:04}"), s)).collect()
}

fn fig2_sweep() -> Outcome {
    let clips = desk_clips("c", 0..16);
    let ex = SyntheticExtractor::small();
    let rows = distortion_sweep(&clips, &ex, 0.96, &[DistortionKind::AudioShift], 7).map_err(|e| e.to_string())?;
    let mag: Vec<f64> = rows.iter().map(|r| r.level.abs()).collect();
    let favd: Vec<f64> = rows.iter().map(|r| r.favd).collect();
    let fad: Vec<f64> = rows.iter().map(|r| r.fad).collect();
    let range = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let rho = spearman(&mag, &favd).map_err(|e| e.to_string())?;
    check(
        rho >= 0.9 && range(&fad) < range(&favd),
        format!("spearman(|shift|, FAVD) = {rho:.3}; FAD range {:.3} vs FAVD range {:.3}", range(&fad), range(&favd)),
    )
}

fn desk_model(ex: &SyntheticExtractor) -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        heads: 4,
        audio_in_dim: ex.audio_dim(),
        video_in_dim: ex.video_dim,
        mlp_hidden: vec![32, 16, 1],
        ..Default::default()
    }
}

fn stage1() -> Outcome {
    let ex = SyntheticExtractor::desk();
    let clips = desk_clips("c", 0..32);
    let examples = stage1_examples(&clips, &ex, 0.96).map_err(|e| e.to_string())?;
    let mc = desk_model(&ex);
    let tc = TrainConfig { batch_size: 32, ..TrainConfig::stage1() };
    let (ckpt, report) = train_stage1(&examples, &mc, &tc, Some(ex.tag()), 0.96).map_err(|e| e.to_string())?;
    let val: Vec<_> = examples.iter().filter(|e| report.val_sources.contains(&e.source_id)).cloned().collect();
    let d = distances(&ckpt.model, &val).map_err(|e| e.to_string())?;
    let mean = |label: f64| {
        let v: Vec<f64> = d.iter().zip(&val).filter(|(_, e)| e.target == label).map(|(d, _)| *d).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (aligned, shifted) = (mean(1.0), mean(0.0));
    let gap = shifted - aligned;
    check(
        gap >= 0.5 * mc.margin,
        format!(
            "validation ({} sources): misaligned {shifted:.3} - aligned {aligned:.3} = {gap:.3} (need >= {:.2})",
            report.val_sources.len(),
            0.5 * mc.margin
        ),
    )
}

fn stage2() -> Outcome {
    let ex = SyntheticExtractor::desk();
    let train = stage2_examples(&desk_clips("t", 100..116), &ex, 0.96).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 32,
        lr: 1e-3,
        plateau_patience: 30,
        val_fraction: 0.0,
        ..TrainConfig::stage2()
    };
    let (ckpt, _) = train_stage2(&train, Init::Fresh(desk_model(&ex)), &tc).map_err(|e| e.to_string())?;
    let (_, ccc) = evaluate_stage2(&ckpt.model, &train).map_err(|e| e.to_string())?;
    let held_out = desk_clips("h", 1000..1040);
    let mut wins = 0;
    for clip in &held_out {
        let shifted = apply_distortion(clip, &DistortionSpec::new(DistortionKind::AudioShift, 2.0, 0)).map_err(|e| e.to_string())?;
        let (a, v) = ex.extract(clip, 0.96).map_err(|e| e.to_string())?;
        let (a2, v2) = ex.extract(&shifted, 0.96).map_err(|e| e.to_string())?;
        let good = predict_score(&ckpt, &a, &v).map_err(|e| e.to_string())?;
        let bad = predict_score(&ckpt, &a2, &v2).map_err(|e| e.to_string())?;
        wins += (good > bad) as usize;
    }
    let frac = wins as f64 / held_out.len() as f64;
    check(
        ccc >= 0.95 && frac >= 0.8,
        format!("train CCC {ccc:.4} on {} clips; held-out ranking {wins}/{}", train.len(), held_out.len()),
    )
}

// ------------------------------------------------------------ distortions

fn encoded(c: &ClipBundle) -> Vec<u8> {
    let mut b = encode_wav(&c.audio);
    b.extend(encode_y4m(&c.video).expect("synthetic video encodes"));
    b
}

fn distortion_grid() -> Outcome {
    let clips = desk_clips("g", 0..4);
    let mut mismatched = Vec::new();
    let mut off_duration = Vec::new();
    let mut outputs = 0;
    for clip in &clips {
        let period = clip.video.frame_period();
        let din = clip.video.duration_seconds();
        for kind in DistortionKind::ALL {
            for &level in kind.levels() {
                let spec = DistortionSpec::new(kind, level, 31);
                let a = apply_distortion(clip, &spec).map_err(|e| e.to_string())?;
                let b = apply_distortion(clip, &spec).map_err(|e| e.to_string())?;
                outputs += 1;
                if encoded(&a) != encoded(&b) {
                    mismatched.push(format!("{}@{level}", kind.name()));
                }
                let expect = match kind {
                    DistortionKind::AudioSpeedUp | DistortionKind::VideoSpeedUp => din / (1.0 + level),
                    _ => din,
                };
                let (da, dv) = (a.audio.duration_seconds(), a.video.duration_seconds());
                let tol = period + 1e-9;
                if (dv - expect).abs() > tol || (da - expect).abs() > tol || (da - dv).abs() > tol {
                    off_duration.push(format!("{}@{level}: audio {da:.3} video {dv:.3} expected {expect:.3}", kind.name()));
                }
            }
        }
    }
    check(
        mismatched.is_empty() && off_duration.is_empty(),
        format!("{outputs} outputs; non-deterministic {mismatched:?}; duration violations {off_duration:?}"),
    )
}

// ---------------------------------------------------------------- datakit

fn datakit_rules() -> Outcome {
    let mut wrong = Vec::new();
    for a in 1..=5u8 {
        for b in 1..=5u8 {
            for c in 1..=5u8 {
                let distinct = a != b && b != c && a != c;
                let spread = a.max(b).max(c) - a.min(b).min(c);
                let expect = match (distinct, spread >= 3) {
                    (false, _) => DisagreementClass::Agreement,
                    (true, false) => DisagreementClass::Disagreement,
                    (true, true) => DisagreementClass::QaRequired,
                };
                if classify_disagreement(&[a, b, c]) != expect {
                    wrong.push((a, b, c));
                }
            }
        }
    }
    let example_ok = classify_disagreement(&[1, 4, 5]) == DisagreementClass::QaRequired;

    let sources: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let manifest = build_benchmark_manifest(&sources, 0).map_err(|e| e.to_string())?;
    let score = |v: String, m: f64| AggregatedScore {
        video_id: v,
        mean_score: m,
        n_ratings: 3,
        disagreement_class: DisagreementClass::Agreement,
    };
    let vid = |s: &str, k: DistortionKind, i: usize| output_id(s, Some(&DistortionSpec::new(k, k.levels()[i], 0)));
    let scores = vec![
        score("s0__gt".into(), 3.5),
        score(vid("s0", DistortionKind::FragmentShuffle, 2), 3.0),
        score("s1__gt".into(), 3.6),
        score(vid("s1", DistortionKind::AvFlicker, 9), 5.0),
        score(vid("s1", DistortionKind::AvFlicker, 8), 5.0),
        score(vid("s2", DistortionKind::AudioShift, 9), 5.0),
        score(vid("s2", DistortionKind::AudioShift, 0), 5.0),
        score("s3__gt".into(), 4.9),
    ];
    let out = filter_benchmark(&scores, &manifest).map_err(|e| e.to_string())?;
    let removed: BTreeMap<String, RemovalReason> = out.removed.iter().cloned().collect();
    let expected_removed: BTreeMap<String, RemovalReason> = [
        ("s0__gt".to_string(), RemovalReason::WeakGroundTruth),
        (vid("s0", DistortionKind::FragmentShuffle, 2), RemovalReason::WeakGroundTruth),
        (vid("s1", DistortionKind::AvFlicker, 9), RemovalReason::ExtremeRatedPerfect),
        (vid("s2", DistortionKind::AudioShift, 9), RemovalReason::ExtremeRatedPerfect),
    ]
    .into_iter()
    .collect();
    let idempotent = filter_benchmark(&out.kept, &manifest).map_err(|e| e.to_string())?.kept == out.kept;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut straddles = 0;
    for trial in 0..50 {
        let groups = rng.random_range(1..40);
        let videos: Vec<(String, String)> = (0..groups)
            .flat_map(|g| (0..rng.random_range(1..6)).map(move |k| (format!("g{g}v{k}"), format!("g{g}"))))
            .collect();
        let split = grouped_split(&videos, DEFAULT_SPLIT_RATIOS, trial).map_err(|e| e.to_string())?;
        let mut seen = BTreeMap::new();
        for (v, g) in &videos {
            if *seen.entry(g.clone()).or_insert(split[v]) != split[v] {
                straddles += 1;
            }
        }
    }
    check(
        wrong.is_empty() && example_ok && removed == expected_removed && idempotent && straddles == 0,
        format!(
            "125 triples, {} misclassified; filter removed {} (expected {}), idempotent {idempotent}; {straddles} straddling groups over 50 splits",
            wrong.len(),
            removed.len(),
            expected_removed.len()
        ),
    )
}

/// Coincidence-matrix alpha written independently of the library's
/// pairwise form.
fn alpha_oracle(units: &[Vec<f64>]) -> f64 {
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let v = values.len();
    let idx = |x: f64| values.iter().position(|&y| y == x).unwrap();
    let mut o = vec![vec![0.0; v]; v];
    for u in units.iter().filter(|u| u.len() >= 2) {
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    o[idx(u[i])][idx(u[j])] += 1.0 / (u.len() - 1) as f64;
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
    if dexp == 0.0 {
        return 1.0;
    }
    1.0 - (n - 1.0) * dobs / dexp
}

fn krippendorff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut fixtures: Vec<Vec<Vec<f64>>> = vec![
        vec![vec![3.0, 3.0, 3.0], vec![1.0, 1.0, 1.0], vec![5.0, 5.0]],
        vec![vec![1.0, 1.0], vec![5.0, 5.0]],
        vec![vec![1.0, 2.0], vec![4.0, 5.0]],
    ];
    for _ in 0..22 {
        let units = rng.random_range(2..30);
        fixtures.push(
            (0..units)
                .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(1..=5) as f64).collect())
                .collect(),
        );
    }
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for f in &fixtures {
        if f.iter().filter(|u| u.len() >= 2).count() < 2 {
            continue;
        }
        let a = krippendorff_alpha(f).map_err(|e| e.to_string())?;
        worst = worst.max((a - alpha_oracle(f)).abs());
        evaluated += 1;
    }
    let perfect = krippendorff_alpha(&fixtures[0]).map_err(|e| e.to_string())?;
    check(
        evaluated >= 20 && worst <= 1e-10 && perfect == 1.0,
        format!("{evaluated} fixtures, max |alpha - oracle| = {worst:.2e}, perfect agreement -> {perfect}"),
    )
}

// ------------------------------------------------------------------ runner

fn main() {
    type Criterion = (&'static str, u64, fn() -> Outcome);
    let criteria: Vec<Criterion> = vec![
        ("binary-sync-accuracy", 1, binary_sync_accuracy),
        ("bin-edges", 1, bin_edges),
        ("frechet-oracles", 10, frechet_oracles),
        ("gradient-suite", 120, gradient_suite),
        ("favd-shift-sweep", 300, fig2_sweep),
        ("stage1-contrastive-gap", 600, stage1),
        ("stage2-fit-and-ranking", 600, stage2),
        ("distortion-determinism-duration", 120, distortion_grid),
        ("datakit-rules", 10, datakit_rules),
        ("krippendorff-dual", 5, krippendorff),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<_> = criteria
        .into_iter()
        .filter(|(name, ..)| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str())))
        .collect();
    // Sequential, so each runtime is measured without contention; every
    // criterion parallelizes internally.
    let mut failed = 0;
    for &(name, budget, f) in &selected {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if took <= Duration::from_secs(budget) => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over runtime budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("acceptance {status} {name} [{:.1}s / {budget}s] {detail}", took.as_secs_f64());
    }
    println!("acceptance summary: {} passed, {failed} failed", selected.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
