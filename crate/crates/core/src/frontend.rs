//! Chunk-local acoustic front-end: overlapping sample windows followed by a
//! two-layer pointwise network. Every frame's window is sliced from its own
//! chunk only (the chunk tail is zero-padded to window length), so a chunk's
//! frames never depend on neighboring chunks' samples.

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndConfig {
    pub sample_rate: usize,
    pub frame_window: usize,
    pub frame_hop: usize,
    pub d_model: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        // 25 ms windows, 20 ms hop at 16 kHz.
        FrontEndConfig { sample_rate: 16000, frame_window: 400, frame_hop: 320, d_model: 64 }
    }
}

impl FrontEndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_hop == 0 || self.frame_window < self.frame_hop {
            return Err(Error::Config(format!(
                "frame_window {} must be >= frame_hop {} > 0",
                self.frame_window, self.frame_hop
            )));
        }
        Ok(())
    }

    /// Frames produced by a chunk of `n_samples` (must be a hop multiple).
    pub fn frames_in_chunk(&self, n_samples: usize) -> Result<usize> {
        if n_samples == 0 || n_samples % self.frame_hop != 0 {
            return Err(Error::Config(format!(
                "chunk of {n_samples} samples is not a positive multiple of hop {}",
                self.frame_hop
            )));
        }
        Ok(n_samples / self.frame_hop)
    }

    pub fn chunk_samples(&self, chunk_frames: usize) -> usize {
        chunk_frames * self.frame_hop
    }
}

#[derive(Clone)]
pub struct FrontEndParams<T: Scalar> {
    pub w1: Tensor<T>, // [frame_window × d_model]
    pub b1: Tensor<T>,
    pub w2: Tensor<T>, // [d_model × d_model]
    pub b2: Tensor<T>,
}

/// Window matrix for one chunk: row f = samples[f·hop .. f·hop+window],
/// zero-padded where the window runs past the chunk end.
pub fn window_matrix<T: Scalar>(samples: &[T], cfg: &FrontEndConfig) -> Result<Tensor<T>> {
    let frames = cfg.frames_in_chunk(samples.len())?;
    let w = cfg.frame_window;
    let mut data = vec![T::zero(); frames * w];
    for f in 0..frames {
        let start = f * cfg.frame_hop;
        let take = (samples.len() - start).min(w);
        data[f * w..f * w + take].copy_from_slice(&samples[start..start + take]);
    }
    Tensor::new(vec![frames, w], data)
}

/// Front-end over one chunk of raw samples.
pub fn frontend_chunk<T: Scalar>(
    params: &FrontEndParams<T>,
    samples: &[T],
    cfg: &FrontEndConfig,
) -> Result<Tensor<T>> {
    let windows = window_matrix(samples, cfg)?;
    let h = ops::add_bias(&ops::matmul(&windows, &params.w1)?, &params.b1)?;
    let h = ops::gelu(&h);
    ops::add_bias(&ops::matmul(&h, &params.w2)?, &params.b2)
}

/// Offline front-end: split samples at chunk boundaries of `chunk_frames`
/// (chunk = chunk_frames · hop samples; trailing remainder zero-padded to a
/// hop boundary), run each chunk independently, concatenate.
pub fn frontend_offline<T: Scalar>(
    params: &FrontEndParams<T>,
    samples: &[T],
    chunk_frames: usize,
    cfg: &FrontEndConfig,
) -> Result<Tensor<T>> {
    let mut padded;
    let samples = if samples.len() % cfg.frame_hop == 0 {
        samples
    } else {
        padded = samples.to_vec();
        padded.resize(samples.len().div_ceil(cfg.frame_hop) * cfg.frame_hop, T::zero());
        &padded
    };
    if samples.is_empty() {
        return Err(Error::Empty("front-end samples"));
    }
    let chunk_samples = cfg.chunk_samples(chunk_frames);
    let mut parts = Vec::new();
    for chunk in samples.chunks(chunk_samples) {
        parts.push(frontend_chunk(params, chunk, cfg)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    ops::concat_rows(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params(rng: &mut impl Rng, cfg: &FrontEndConfig) -> FrontEndParams<f64> {
        let d = cfg.d_model;
        let w = cfg.frame_window;
        let mk = |rng: &mut dyn rand::RngCore, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()
        };
        FrontEndParams {
            w1: mk(rng, vec![w, d]),
            b1: mk(rng, vec![d]),
            w2: mk(rng, vec![d, d]),
            b2: mk(rng, vec![d]),
        }
    }

    fn small_cfg() -> FrontEndConfig {
        FrontEndConfig { sample_rate: 16000, frame_window: 400, frame_hop: 320, d_model: 8 }
    }

    #[test]
    fn frame_count_arithmetic() {
        let cfg = small_cfg();
        assert_eq!(cfg.frames_in_chunk(640).unwrap(), 2);
        assert!(cfg.frames_in_chunk(500).is_err());
        assert!(cfg.frames_in_chunk(0).is_err());
    }

    #[test]
    fn zero_samples_give_constant_frames() {
        let cfg = small_cfg();
        let mut rng = crate::rng::Streams::from_root(21).stream("fe");
        let p = params(&mut rng, &cfg);
        let out = frontend_chunk(&p, &vec![0.0f64; 320 * 4], &cfg).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        for f in 1..4 {
            assert_eq!(out.row(f), out.row(0));
        }
    }

    #[test]
    fn chunk_locality() {
        // Perturbing chunk 1's samples leaves chunk 0 and chunk 2 frames
        // bit-identical.
        let cfg = small_cfg();
        let mut rng = crate::rng::Streams::from_root(22).stream("fe");
        let p = params(&mut rng, &cfg);
        let chunk_frames = 3;
        let n = cfg.chunk_samples(chunk_frames) * 3;
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut bumped = base.clone();
        let c1 = cfg.chunk_samples(chunk_frames);
        bumped[c1 + 7] += 0.3;
        let a = frontend_offline(&p, &base, chunk_frames, &cfg).unwrap();
        let b = frontend_offline(&p, &bumped, chunk_frames, &cfg).unwrap();
        for f in 0..chunk_frames {
            assert_eq!(a.row(f), b.row(f), "chunk 0 frame {f}");
            assert_eq!(a.row(2 * chunk_frames + f), b.row(2 * chunk_frames + f), "chunk 2 frame {f}");
        }
        assert_ne!(a.row(chunk_frames), b.row(chunk_frames));
    }

    #[test]
    fn offline_concat_equals_per_chunk_calls() {
        let cfg = small_cfg();
        let mut rng = crate::rng::Streams::from_root(23).stream("fe");
        let p = params(&mut rng, &cfg);
        let chunk_frames = 2;
        let cs = cfg.chunk_samples(chunk_frames);
        let samples: Vec<f64> = (0..cs * 2 + 320).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let whole = frontend_offline(&p, &samples, chunk_frames, &cfg).unwrap();
        let c0 = frontend_chunk(&p, &samples[..cs], &cfg).unwrap();
        let c1 = frontend_chunk(&p, &samples[cs..2 * cs], &cfg).unwrap();
        let c2 = frontend_chunk(&p, &samples[2 * cs..], &cfg).unwrap();
        let glued = ops::concat_rows(&[&c0, &c1, &c2]).unwrap();
        assert_eq!(whole, glued);
    }

    #[test]
    fn remainder_padded_to_hop_boundary() {
        let cfg = small_cfg();
        let mut rng = crate::rng::Streams::from_root(24).stream("fe");
        let p = params(&mut rng, &cfg);
        let samples: Vec<f64> = (0..100).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let out = frontend_offline(&p, &samples, 4, &cfg).unwrap();
        assert_eq!(out.shape()[0], 1);
        let mut padded = samples;
        padded.resize(320, 0.0);
        let direct = frontend_chunk(&p, &padded, &cfg).unwrap();
        assert_eq!(out, direct);
    }
}
