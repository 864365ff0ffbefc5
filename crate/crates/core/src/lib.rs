//! Audio-visual synchrony toolkit: media bundles, synchrony distortions,
//! per-window embeddings, Fréchet AV metrics, a learned cross-modal scorer,
//! benchmark data handling and correlation analyses.

pub mod analysis;
pub mod datakit;
pub mod distort;
pub mod features;
pub mod frechet;
pub mod media;
pub mod net;
pub mod synth;
pub mod wsola;
