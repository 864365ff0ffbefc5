//! Cross-modal transformer scorer.
//!
//! Each branch embeds its own modality, attends to the other modality through
//! a stack of cross-modal blocks (queries from its own stream, keys and values
//! from the other), refines the result with self-attention blocks and pools it
//! over time. The pooled branch vectors are compared directly during
//! contrastive pre-training and fed through an MLP to a scalar score during
//! fine-tuning. All blocks are pre-norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use super::NetError;
use crate::features::EmbeddingSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    /// Cross-modal blocks per branch.
    pub layers: usize,
    /// Self-attention blocks per branch.
    pub self_layers: usize,
    pub attention_dropout: f64,
    pub relu_dropout: f64,
    pub embed_dropout: f64,
    pub residual_dropout: f64,
    pub margin: f64,
    /// Widths of the score head; the last entry must be 1.
    pub mlp_hidden: Vec<usize>,
    pub audio_in_dim: usize,
    pub video_in_dim: usize,
    /// Temporal kernel of the input projections (odd).
    pub conv_kernel: usize,
    /// When false only the self-attention branches exist.
    pub cross_modal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            heads: 8,
            layers: 3,
            self_layers: 3,
            attention_dropout: 0.1,
            relu_dropout: 0.1,
            embed_dropout: 0.25,
            residual_dropout: 0.1,
            margin: 1.0,
            mlp_hidden: vec![128, 64, 1],
            audio_in_dim: 128,
            video_in_dim: 1024,
            conv_kernel: 1,
            cross_modal: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be a positive multiple of heads");
        }
        for p in [
            self.attention_dropout,
            self.relu_dropout,
            self.embed_dropout,
            self.residual_dropout,
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return bad("margin must be positive");
        }
        if self.mlp_hidden.last() != Some(&1) || self.mlp_hidden.contains(&0) {
            return bad("mlp_hidden must be non-zero widths ending in 1");
        }
        if self.audio_in_dim == 0 || self.video_in_dim == 0 {
            return bad("input dims must be positive");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        Ok(())
    }

    fn projects_audio(&self) -> bool {
        self.audio_in_dim != self.embed_dim || self.conv_kernel != 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-clip outputs: pooled branch vectors and, when the head ran, the raw score.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub h_audio: Vec<f64>,
    pub h_video: Vec<f64>,
    pub score: Option<f64>,
}

impl BranchOutputs {
    pub fn distance(&self) -> f64 {
        self.h_audio
            .iter()
            .zip(&self.h_video)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-feature standardization applied before the projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
    pub video_mean: Vec<f64>,
    pub video_std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(audio_dim: usize, video_dim: usize) -> InputNorm {
        InputNorm {
            audio_mean: vec![0.0; audio_dim],
            audio_std: vec![1.0; audio_dim],
            video_mean: vec![0.0; video_dim],
            video_std: vec![1.0; video_dim],
        }
    }

    /// Column statistics over the stacked rows of all inputs; zero-variance
    /// columns keep a unit scale.
    pub fn fit<'a>(pairs: impl IntoIterator<Item = (&'a Mat, &'a Mat)>) -> InputNorm {
        fn stats(mats: &[&Mat]) -> (Vec<f64>, Vec<f64>) {
            let cols = mats[0].cols;
            let n: usize = mats.iter().map(|m| m.rows).sum();
            let mut mean = vec![0.0; cols];
            for m in mats {
                for r in 0..m.rows {
                    for (a, v) in mean.iter_mut().zip(m.row(r)) {
                        *a += v;
                    }
                }
            }
            mean.iter_mut().for_each(|a| *a /= n as f64);
            let mut var = vec![0.0; cols];
            for m in mats {
                for r in 0..m.rows {
                    for ((a, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
            }
            let std = var
                .iter()
                .map(|v| {
                    let s = (v / n as f64).sqrt();
                    if s > 1e-8 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, std)
        }
        let (a, v): (Vec<&Mat>, Vec<&Mat>) = pairs.into_iter().unzip();
        let (audio_mean, audio_std) = stats(&a);
        let (video_mean, video_std) = stats(&v);
        InputNorm {
            audio_mean,
            audio_std,
            video_mean,
            video_std,
        }
    }

    fn round_to_f32(&mut self) {
        for v in [
            &mut self.audio_mean,
            &mut self.audio_std,
            &mut self.video_mean,
            &mut self.video_std,
        ] {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln_q: Norm,
    /// Separate normalization of the key/value stream in cross-modal blocks.
    ln_kv: Option<Norm>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Stack {
    blocks: Vec<Block>,
    ln_out: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    audio_proj: Option<Linear>,
    video_proj: Linear,
    cross_audio: Option<Stack>,
    cross_video: Option<Stack>,
    self_audio: Stack,
    self_video: Stack,
    head: Vec<Linear>,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Mat>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, m: Mat) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    /// Xavier-uniform weights, zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        Linear {
            w: self.push(format!("{name}.weight"), Mat::from_vec(fan_in, fan_out, data)),
            b: self.push(format!("{name}.bias"), Mat::zeros(1, fan_out)),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            b: self.push(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    fn block(&mut self, name: &str, e: usize, cross: bool) -> Block {
        Block {
            ln_q: self.norm(&format!("{name}.ln_q"), e),
            ln_kv: cross.then(|| self.norm(&format!("{name}.ln_kv"), e)),
            q: self.linear(&format!("{name}.attn.q"), e, e),
            k: self.linear(&format!("{name}.attn.k"), e, e),
            v: self.linear(&format!("{name}.attn.v"), e, e),
            o: self.linear(&format!("{name}.attn.o"), e, e),
            ln_ff: self.norm(&format!("{name}.ln_ff"), e),
            ff1: self.linear(&format!("{name}.ff1"), e, 4 * e),
            ff2: self.linear(&format!("{name}.ff2"), 4 * e, e),
        }
    }

    fn stack(&mut self, name: &str, e: usize, n: usize, cross: bool) -> Stack {
        Stack {
            blocks: (0..n).map(|i| self.block(&format!("{name}.{i}"), e, cross)).collect(),
            ln_out: self.norm(&format!("{name}.ln_out"), e),
        }
    }
}

fn build_layout(cfg: &ModelConfig, b: &mut Builder) -> Layout {
    let e = cfg.embed_dim;
    let k = cfg.conv_kernel;
    let audio_proj = cfg
        .projects_audio()
        .then(|| b.linear("audio_proj", k * cfg.audio_in_dim, e));
    let video_proj = b.linear("video_proj", k * cfg.video_in_dim, e);
    let (cross_audio, cross_video) = if cfg.cross_modal {
        (
            Some(b.stack("cross_audio", e, cfg.layers, true)),
            Some(b.stack("cross_video", e, cfg.layers, true)),
        )
    } else {
        (None, None)
    };
    let self_audio = b.stack("self_audio", e, cfg.self_layers, false);
    let self_video = b.stack("self_video", e, cfg.self_layers, false);
    let mut head = Vec::new();
    let mut fan_in = 2 * e;
    for (i, &w) in cfg.mlp_hidden.iter().enumerate() {
        head.push(b.linear(&format!("head.{i}"), fan_in, w));
        fan_in = w;
    }
    Layout {
        audio_proj,
        video_proj,
        cross_audio,
        cross_video,
        self_audio,
        self_video,
        head,
    }
}

/// Parameters plus the layout that gives them meaning.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Mat>,
    pub norm: InputNorm,
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params && self.norm == other.norm
    }
}

/// Tape handles of one forward pass.
pub struct Graph {
    /// One leaf per parameter tensor, in `Model::params` order.
    pub params: Vec<Var>,
    pub h_audio: Var,
    pub h_video: Var,
    pub score: Option<Var>,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a [Var],
    mode: Mode,
    rng: ChaCha8Rng,
    layer: usize,
}

impl Ctx<'_> {
    fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let n = self.tape.value(x).data.len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.tape.mul_const(x, mask)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let y = self.tape.matmul(x, self.params[l.w]);
        self.tape.add_row(y, self.params[l.b])
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        self.tape.layer_norm(x, self.params[n.g], self.params[n.b])
    }

    fn attention(&mut self, xq: Var, xkv: Var, blk: &Block, cfg: &ModelConfig) -> Var {
        let q = self.linear(xq, blk.q);
        let k = self.linear(xkv, blk.k);
        let v = self.linear(xkv, blk.v);
        let dh = cfg.embed_dim / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let s = self.tape.matmul_nt(qh, kh);
            let s = self.tape.scale(s, scale);
            let p = self.tape.softmax_rows(s);
            let p = self.dropout(p, cfg.attention_dropout);
            heads.push(self.tape.matmul(p, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)
        };
        self.linear(cat, blk.o)
    }

    fn block(&mut self, x: Var, kv: Option<Var>, blk: &Block, cfg: &ModelConfig) -> Result<Var, NetError> {
        let xq = self.norm(x, blk.ln_q);
        let xkv = match (kv, blk.ln_kv) {
            (Some(kv), Some(n)) => self.norm(kv, n),
            _ => xq,
        };
        let a = self.attention(xq, xkv, blk, cfg);
        let a = self.dropout(a, cfg.residual_dropout);
        let x = self.tape.add(x, a);
        let f = self.norm(x, blk.ln_ff);
        let f = self.linear(f, blk.ff1);
        let f = self.tape.relu(f);
        let f = self.dropout(f, cfg.relu_dropout);
        let f = self.linear(f, blk.ff2);
        let f = self.dropout(f, cfg.residual_dropout);
        let out = self.tape.add(x, f);
        self.check(out)?;
        Ok(out)
    }

    fn stack(&mut self, x: Var, kv: Option<Var>, s: &Stack, cfg: &ModelConfig) -> Result<Var, NetError> {
        let mut h = x;
        for blk in &s.blocks {
            h = self.block(h, kv, blk, cfg)?;
        }
        Ok(self.norm(h, s.ln_out))
    }

    fn check(&mut self, v: Var) -> Result<(), NetError> {
        let layer = self.layer;
        self.layer += 1;
        if self.tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(NetError::NonFiniteActivation { layer })
        }
    }
}

/// Sinusoidal position table, `n x e`.
pub fn positional_table(n: usize, e: usize) -> Mat {
    let mut m = Mat::zeros(n, e);
    for t in 0..n {
        for i in 0..e {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / e as f64);
            let angle = t as f64 * freq;
            m.data[t * e + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Stacks each row with its temporal neighbours, zero-padded at the ends.
fn unfold(x: &Mat, k: usize) -> Mat {
    if k == 1 {
        return x.clone();
    }
    let half = (k / 2) as isize;
    let mut out = Mat::zeros(x.rows, k * x.cols);
    for t in 0..x.rows {
        for j in 0..k {
            let src = t as isize + j as isize - half;
            if src >= 0 && (src as usize) < x.rows {
                let dst = t * k * x.cols + j * x.cols;
                out.data[dst..dst + x.cols].copy_from_slice(x.row(src as usize));
            }
        }
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let layout = build_layout(&config, &mut b);
        let (names, params) = (b.names, b.tensors);
        let norm = InputNorm::identity(config.audio_in_dim, config.video_in_dim);
        Ok(Model {
            config,
            names,
            params,
            norm,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Mat)>, norm: InputNorm) -> Result<Model, NetError> {
        let mut model = Model::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(NetError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, m)) in named.into_iter().enumerate() {
            if name != model.names[i] || m.shape() != model.params[i].shape() {
                return Err(NetError::ShapeMismatch(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    m.shape()
                )));
            }
            model.params[i] = m;
        }
        if norm.audio_mean.len() != model.config.audio_in_dim || norm.video_mean.len() != model.config.video_in_dim {
            return Err(NetError::ShapeMismatch("input normalization dims".into()));
        }
        model.norm = norm;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|m| m.data.len()).sum()
    }

    /// Rounds every stored value to the nearest f32 so that a saved
    /// checkpoint reloads to exactly this model.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.params {
            m.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        self.norm.round_to_f32();
    }

    fn prepare(&self, audio: &Mat, video: &Mat) -> Result<(Mat, Mat), NetError> {
        let cfg = &self.config;
        if audio.cols != cfg.audio_in_dim || video.cols != cfg.video_in_dim {
            return Err(NetError::ShapeMismatch(format!(
                "inputs {}x{} / {}x{} do not match dims {} / {}",
                audio.rows, audio.cols, video.rows, video.cols, cfg.audio_in_dim, cfg.video_in_dim
            )));
        }
        if audio.rows != video.rows || audio.rows == 0 {
            return Err(NetError::ShapeMismatch(format!(
                "window counts differ or are zero: {} vs {}",
                audio.rows, video.rows
            )));
        }
        let standardize = |m: &Mat, mean: &[f64], std: &[f64]| {
            let mut out = m.clone();
            for chunk in out.data.chunks_exact_mut(m.cols) {
                for ((x, mu), s) in chunk.iter_mut().zip(mean).zip(std) {
                    *x = (*x - mu) / s;
                }
            }
            out
        };
        let a = standardize(audio, &self.norm.audio_mean, &self.norm.audio_std);
        let v = standardize(video, &self.norm.video_mean, &self.norm.video_std);
        Ok((unfold(&a, cfg.conv_kernel), unfold(&v, cfg.conv_kernel)))
    }

    /// Records a full forward pass. The score head runs only when `with_head`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        audio: &Mat,
        video: &Mat,
        mode: Mode,
        seed: u64,
        with_head: bool,
    ) -> Result<Graph, NetError> {
        let (a_in, v_in) = self.prepare(audio, video)?;
        let cfg = &self.config;
        let params: Vec<Var> = self.params.iter().map(|m| tape.leaf(m.clone())).collect();
        let lay = &self.layout;
        let n = audio.rows;
        let mut cx = Ctx {
            tape,
            params: &params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            layer: 0,
        };

        let a0 = cx.tape.leaf(a_in);
        let v0 = cx.tape.leaf(v_in);
        let a = match lay.audio_proj {
            Some(l) => cx.linear(a0, l),
            None => a0,
        };
        let v = cx.linear(v0, lay.video_proj);
        let pos = cx.tape.leaf(positional_table(n, cfg.embed_dim));
        let a = cx.tape.add(a, pos);
        let v = cx.tape.add(v, pos);
        let a = cx.dropout(a, cfg.embed_dropout);
        let v = cx.dropout(v, cfg.embed_dropout);

        let (a_mid, v_mid) = match (&lay.cross_audio, &lay.cross_video) {
            (Some(ca), Some(cv)) => {
                let am = cx.stack(a, Some(v), ca, cfg)?;
                let vm = cx.stack(v, Some(a), cv, cfg)?;
                (am, vm)
            }
            _ => (a, v),
        };
        let a_out = cx.stack(a_mid, None, &lay.self_audio, cfg)?;
        let v_out = cx.stack(v_mid, None, &lay.self_video, cfg)?;
        let h_audio = cx.tape.mean_rows(a_out);
        let h_video = cx.tape.mean_rows(v_out);

        let score = if with_head {
            let mut h = cx.tape.concat_cols(&[h_audio, h_video]);
            for (i, &l) in lay.head.iter().enumerate() {
                h = cx.linear(h, l);
                if i + 1 < lay.head.len() {
                    h = cx.tape.relu(h);
                }
            }
            cx.check(h)?;
            Some(h)
        } else {
            None
        };
        Ok(Graph {
            params,
            h_audio,
            h_video,
            score,
        })
    }

    pub fn forward_mats(&self, audio: &Mat, video: &Mat, mode: Mode, seed: u64) -> Result<BranchOutputs, NetError> {
        let mut tape = Tape::new();
        let g = self.forward_on_tape(&mut tape, audio, video, mode, seed, true)?;
        Ok(BranchOutputs {
            h_audio: tape.value(g.h_audio).data.clone(),
            h_video: tape.value(g.h_video).data.clone(),
            score: g.score.map(|s| tape.value(s).data[0]),
        })
    }

    pub fn forward(
        &self,
        audio: &EmbeddingSequence,
        video: &EmbeddingSequence,
        mode: Mode,
        seed: u64,
    ) -> Result<BranchOutputs, NetError> {
        let (a, v) = sequences_to_mats(audio, video)?;
        self.forward_mats(&a, &v, mode, seed)
    }
}

/// Widens a matched pair of embedding sequences to f64 matrices.
pub fn sequences_to_mats(audio: &EmbeddingSequence, video: &EmbeddingSequence) -> Result<(Mat, Mat), NetError> {
    if audio.n_windows() != video.n_windows() {
        return Err(NetError::ShapeMismatch(format!(
            "audio has {} windows, video {}",
            audio.n_windows(),
            video.n_windows()
        )));
    }
    let widen = |s: &EmbeddingSequence| Mat::from_vec(s.n_windows(), s.dim, s.rows.iter().map(|&v| v as f64).collect());
    Ok((widen(audio), widen(video)))
}
