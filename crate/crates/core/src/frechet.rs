//! Gaussian fits over pooled embedding windows and the Fréchet distance
//! between them.
//!
//! The distance between N(mu_a, S_a) and N(mu_b, S_b) is
//! `|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr sqrt(R S_b R)` with `R = S_a^(1/2)`,
//! which equals the usual `tr sqrt(S_a S_b)` form but only ever takes square
//! roots of symmetric PSD matrices.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distort::{apply_distortion, DistortError, DistortionKind, DistortionSpec};
use crate::features::{EmbeddingSequence, FeatureError, SyntheticExtractor};
use crate::media::ClipBundle;

/// Relative tolerance below which a negative eigenvalue counts as rounding noise.
const NEG_EIG_TOL: f64 = 1e-10;
const EIG_EPS: f64 = 1e-14;
const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum FrechetError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("need at least 2 pooled windows, got {0}")]
    InsufficientWindows(usize),
    #[error("eigensolver did not converge on a {0}x{0} matrix")]
    NumericalFailure(usize),
    #[error("empty evaluation or reference set")]
    EmptySet,
    #[error(transparent)]
    Distort(#[from] DistortError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricVariant {
    /// Audio rows only.
    Fad,
    /// Video rows only.
    Fvd,
    /// Per-window concatenation of audio and video rows.
    Favd,
}

impl MetricVariant {
    pub const ALL: [MetricVariant; 3] = [MetricVariant::Fad, MetricVariant::Fvd, MetricVariant::Favd];
}

impl fmt::Display for MetricVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricVariant::Fad => "fad",
            MetricVariant::Fvd => "fvd",
            MetricVariant::Favd => "favd",
        })
    }
}

impl FromStr for MetricVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fad" => Ok(MetricVariant::Fad),
            "fvd" => Ok(MetricVariant::Fvd),
            "favd" => Ok(MetricVariant::Favd),
            _ => Err(format!("unknown metric variant {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n_windows: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Mean and population covariance of the rows of an `n x d` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FrechetError> {
        let n = rows.len();
        if n < 2 {
            return Err(FrechetError::InsufficientWindows(n));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(FrechetError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        let mut mu = DVector::zeros(d);
        for r in rows {
            for (m, &v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        mu /= n as f64;
        let mut centered = DMatrix::zeros(n, d);
        for (i, r) in rows.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = r[j] - mu[j];
            }
        }
        let mut sigma = centered.transpose() * &centered;
        sigma /= n as f64;
        symmetrize(&mut sigma);
        Ok(GaussianStats { mu, sigma, n_windows: n })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Rows of one clip for a variant, widened to f64.
fn variant_rows(
    audio: &EmbeddingSequence,
    video: &EmbeddingSequence,
    variant: MetricVariant,
) -> Result<Vec<Vec<f64>>, FrechetError> {
    let widen = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    match variant {
        MetricVariant::Fad => Ok((0..audio.n_windows()).map(|i| widen(audio.row(i))).collect()),
        MetricVariant::Fvd => Ok((0..video.n_windows()).map(|i| widen(video.row(i))).collect()),
        MetricVariant::Favd => {
            if audio.n_windows() != video.n_windows() {
                return Err(FrechetError::DimensionMismatch {
                    expected: audio.n_windows(),
                    actual: video.n_windows(),
                });
            }
            Ok((0..audio.n_windows())
                .map(|i| {
                    let mut r = widen(audio.row(i));
                    r.extend(video.row(i).iter().map(|&v| v as f64));
                    r
                })
                .collect())
        }
    }
}

/// Fits one Gaussian over all windows of all clips in `set`.
pub fn fit_gaussian(
    set: &[(EmbeddingSequence, EmbeddingSequence)],
    variant: MetricVariant,
) -> Result<GaussianStats, FrechetError> {
    let mut rows = Vec::new();
    for (a, v) in set {
        rows.extend(variant_rows(a, v, variant)?);
    }
    GaussianStats::from_rows(&rows)
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, FrechetError> {
    let d = m.nrows();
    SymmetricEigen::try_new(m, EIG_EPS, EIG_MAX_ITER).ok_or(FrechetError::NumericalFailure(d))
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, FrechetError> {
    let e = eigen(m.clone())?;
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut out = &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Adds `1e-6 * tr(S)/D` to the diagonal when `S` has an eigenvalue below
/// rounding tolerance.
fn regularize(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, FrechetError> {
    let d = sigma.nrows();
    let trace = sigma.trace();
    let min_eig = eigen(sigma.clone())?.eigenvalues.min();
    if min_eig < -NEG_EIG_TOL * trace.abs().max(1.0) {
        let ridge = 1e-6 * trace / d as f64;
        Ok(sigma + DMatrix::identity(d, d) * ridge)
    } else {
        Ok(sigma.clone())
    }
}

/// The trace term with an explicit diagonal ridge on both covariances.
pub fn frechet_distance_ridge(a: &GaussianStats, b: &GaussianStats, ridge: f64) -> Result<f64, FrechetError> {
    if a.dim() != b.dim() {
        return Err(FrechetError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let d = a.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let sa = &a.sigma + &eye * ridge;
    let sb = &b.sigma + &eye * ridge;
    trace_form(&a.mu, &sa, &b.mu, &sb)
}

pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, FrechetError> {
    if a.dim() != b.dim() {
        return Err(FrechetError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let sa = regularize(&a.sigma)?;
    let sb = regularize(&b.sigma)?;
    trace_form(&a.mu, &sa, &b.mu, &sb)
}

fn trace_form(
    mu_a: &DVector<f64>,
    sa: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    sb: &DMatrix<f64>,
) -> Result<f64, FrechetError> {
    let mean_term = (mu_a - mu_b).norm_squared();
    let root_a = psd_sqrt(sa)?;
    let mut inner = &root_a * sb * &root_a;
    symmetrize(&mut inner);
    let cross: f64 = eigen(inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Distance from the evaluation set's Gaussian to the reference set's.
pub fn favd_score(
    eval_set: &[(EmbeddingSequence, EmbeddingSequence)],
    reference_set: &[(EmbeddingSequence, EmbeddingSequence)],
    variant: MetricVariant,
) -> Result<f64, FrechetError> {
    if eval_set.is_empty() || reference_set.is_empty() {
        return Err(FrechetError::EmptySet);
    }
    frechet_distance(&fit_gaussian(eval_set, variant)?, &fit_gaussian(reference_set, variant)?)
}

/// One row of a distortion sweep: all three metrics for one (kind, level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: DistortionKind,
    pub level: f64,
    pub fad: f64,
    pub fvd: f64,
    pub favd: f64,
}

/// Scores every (kind, level) cell of `kinds` against the undistorted clips.
/// Stochastic distortions use `seed` mixed with the clip index.
pub fn distortion_sweep(
    clips: &[ClipBundle],
    extractor: &SyntheticExtractor,
    window_seconds: f64,
    kinds: &[DistortionKind],
    seed: u64,
) -> Result<Vec<SweepRow>, FrechetError> {
    let reference = clips
        .par_iter()
        .map(|c| extractor.extract(c, window_seconds))
        .collect::<Result<Vec<_>, _>>()?;
    let ref_stats: Vec<GaussianStats> = MetricVariant::ALL
        .iter()
        .map(|&v| fit_gaussian(&reference, v))
        .collect::<Result<_, _>>()?;

    let cells: Vec<(DistortionKind, f64)> = kinds
        .iter()
        .flat_map(|&k| k.levels().iter().map(move |&l| (k, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(kind, level)| {
            let eval = clips
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let spec = DistortionSpec::new(kind, level, seed.wrapping_add(i as u64));
                    let out = apply_distortion(c, &spec)?;
                    Ok(extractor.extract(&out, window_seconds)?)
                })
                .collect::<Result<Vec<_>, FrechetError>>()?;
            let mut scores = [0.0; 3];
            for (slot, (&v, r)) in scores.iter_mut().zip(MetricVariant::ALL.iter().zip(&ref_stats)) {
                *slot = frechet_distance(&fit_gaussian(&eval, v)?, r)?;
            }
            Ok(SweepRow {
                kind,
                level,
                fad: scores[0],
                fvd: scores[1],
                favd: scores[2],
            })
        })
        .collect()
}

/// CSV with header `kind,level,fad,fvd,favd`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), FrechetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "level", "fad", "fvd", "favd"])
        .map_err(|e| FrechetError::Io(e.into()))?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.level.to_string(),
            r.fad.to_string(),
            r.fvd.to_string(),
            r.favd.to_string(),
        ])
        .map_err(|e| FrechetError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
