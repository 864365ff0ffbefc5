//! Self-describing checkpoint files.
//!
//! Layout: the magic line `AVSYNC-CKPT 1`, one JSON header line (stage, model
//! config, feature provenance, tensor index), then every tensor as row-major
//! little-endian f32 in index order. Input normalization statistics travel as
//! ordinary tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BranchOutputs, InputNorm, Mode, Model, ModelConfig};
use super::tape::Mat;
use super::NetError;
use crate::features::EmbeddingSequence;

const MAGIC: &str = "AVSYNC-CKPT 1";
const NORM_NAMES: [&str; 4] = [
    "input_norm.audio_mean",
    "input_norm.audio_std",
    "input_norm.video_mean",
    "input_norm.video_std",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// 1 after contrastive pre-training, 2 after score fine-tuning.
    pub stage: u8,
    pub model: Model,
    /// Extractor tag of the features the model was trained on, if known.
    pub extractor: Option<String>,
    pub window_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: u8,
    config: ModelConfig,
    extractor: Option<String>,
    window_seconds: f64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Wraps a model, rounding its values to f32 so that the in-memory
    /// checkpoint and its serialized form score identically.
    pub fn new(stage: u8, mut model: Model, extractor: Option<String>, window_seconds: f64) -> Checkpoint {
        model.round_to_f32();
        Checkpoint {
            stage,
            model,
            extractor,
            window_seconds,
        }
    }

    fn norm_tensors(&self) -> [Mat; 4] {
        let n = &self.model.norm;
        let row = |v: &Vec<f64>| Mat::from_vec(1, v.len(), v.clone());
        [row(&n.audio_mean), row(&n.audio_std), row(&n.video_mean), row(&n.video_std)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let norm = self.norm_tensors();
        let tensors: Vec<(&str, &Mat)> = self
            .model
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.model.params)
            .chain(NORM_NAMES.iter().copied().zip(norm.iter()))
            .collect();
        let header = Header {
            stage: self.stage,
            config: self.model.config.clone(),
            extractor: self.extractor.clone(),
            window_seconds: self.window_seconds,
            tensors: tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.to_string(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let mut out = format!("{MAGIC}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        for (_, m) in &tensors {
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, NetError> {
        let bad = |m: String| NetError::CheckpointFormat(m);
        let first = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line".into()))?;
        if &bytes[..first] != MAGIC.as_bytes() {
            return Err(bad("bad magic".into()));
        }
        let rest = &bytes[first + 1..];
        let second = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&rest[..second]).map_err(|e| bad(e.to_string()))?;
        let mut payload = &rest[second + 1..];
        let mut named = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let len = t.rows * t.cols * 4;
            if payload.len() < len {
                return Err(bad(format!("payload ends inside tensor {}", t.name)));
            }
            let data = payload[..len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            named.push((t.name.clone(), Mat::from_vec(t.rows, t.cols, data)));
            payload = &payload[len..];
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        if named.len() < NORM_NAMES.len() {
            return Err(bad("missing normalization tensors".into()));
        }
        let norm_part = named.split_off(named.len() - NORM_NAMES.len());
        let mut norm_vals = Vec::with_capacity(4);
        for ((name, m), want) in norm_part.into_iter().zip(NORM_NAMES) {
            if name != want {
                return Err(bad(format!("expected {want}, found {name}")));
            }
            norm_vals.push(m.data);
        }
        let video_std = norm_vals.pop().unwrap();
        let video_mean = norm_vals.pop().unwrap();
        let audio_std = norm_vals.pop().unwrap();
        let audio_mean = norm_vals.pop().unwrap();
        let norm = InputNorm {
            audio_mean,
            audio_std,
            video_mean,
            video_std,
        };
        Ok(Checkpoint {
            stage: header.stage,
            model: Model::from_parts(header.config, named, norm)?,
            extractor: header.extractor,
            window_seconds: header.window_seconds,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, NetError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// Eval-mode score clamped to [1, 5]; requires a fine-tuned checkpoint.
pub fn predict_score(ckpt: &Checkpoint, audio: &EmbeddingSequence, video: &EmbeddingSequence) -> Result<f64, NetError> {
    if ckpt.stage != 2 {
        return Err(NetError::CheckpointStageMismatch {
            expected: 2,
            actual: ckpt.stage,
        });
    }
    let out: BranchOutputs = ckpt.model.forward(audio, video, Mode::Eval, 0)?;
    Ok(out.score.expect("head runs in forward").clamp(1.0, 5.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;

    fn seq(m: Modality, d: usize, n: usize, k: f32) -> EmbeddingSequence {
        EmbeddingSequence {
            clip_id: "c".into(),
            modality: m,
            window_seconds: 0.96,
            extractor: "t".into(),
            dim: d,
            rows: (0..n * d).map(|i| ((i as f32) * k).sin()).collect(),
        }
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            self_layers: 1,
            mlp_hidden: vec![6, 4, 1],
            audio_in_dim: 3,
            video_in_dim: 5,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_scores_bit_exactly() {
        let mut model = Model::new(cfg(), 11).unwrap();
        model.norm.audio_mean = vec![0.1, 0.2, 0.3];
        let ckpt = Checkpoint::new(2, model, Some("synthetic-desk".into()), 0.96);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let (a, v) = (seq(Modality::Audio, 3, 4, 0.7), seq(Modality::Video, 5, 4, 0.3));
        let s1 = predict_score(&ckpt, &a, &v).unwrap();
        let s2 = predict_score(&back, &a, &v).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert!((1.0..=5.0).contains(&s1));
    }

    #[test]
    fn stage_one_cannot_score() {
        let ckpt = Checkpoint::new(1, Model::new(cfg(), 0).unwrap(), None, 0.96);
        let (a, v) = (seq(Modality::Audio, 3, 4, 0.7), seq(Modality::Video, 5, 4, 0.3));
        assert!(matches!(
            predict_score(&ckpt, &a, &v),
            Err(NetError::CheckpointStageMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::new(2, Model::new(cfg(), 0).unwrap(), None, 0.96).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE\n{}\n").is_err());
    }
}
