//! Deterministic synthetic ASR task. Each token id owns a fixed unit-norm
//! template vector; an utterance repeats each token's template for a fixed
//! number of frames and adds Gaussian noise. At the default noise level the
//! task is solvable by nearest-template lookup, which bounds what a trained
//! model should reach.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::tensor::{Scalar, Tensor};
use crate::transducer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    /// Vocabulary size including blank; usable token ids are 1..vocab_size.
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Seeds the template vectors; utterance draws use a separate seed so
    /// train/dev/test splits share templates.
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            vocab_size: 17,
            frames_per_token: 2,
            feature_dim: 16,
            noise_std: 0.1,
            min_tokens: 3,
            max_tokens: 8,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.frames_per_token == 0 {
            return Err(Error::Config("frames_per_token must be >= 1".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token count range [{}, {}] invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance<T: Scalar> {
    pub utterance_id: String,
    pub frames: Tensor<T>,
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Unit-norm template vectors; index k-1 belongs to token id k.
pub fn templates<T: Scalar>(cfg: &SyntheticTaskConfig) -> Vec<Tensor<T>> {
    let mut rng = Streams::from_root(cfg.seed).stream("templates");
    (1..cfg.vocab_size)
        .map(|_| {
            let raw: Vec<f64> =
                (0..cfg.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            Tensor::new(
                vec![1, cfg.feature_dim],
                raw.iter().map(|&x| T::from_f64(x / norm)).collect(),
            )
            .expect("template shape")
        })
        .collect()
}

/// Vocabulary whose unit ids line up with the synthetic token ids.
pub fn synthetic_vocab(cfg: &SyntheticTaskConfig) -> Vocab {
    Vocab::from_units((1..cfg.vocab_size).map(|k| format!("t{k}"))).expect("distinct units")
}

/// Generate `n_utts` utterances. Templates come from `cfg.seed`; token
/// draws and noise come from `seed`, so the same call is reproducible and
/// different splits can share templates.
pub fn gen_synthetic<T: Scalar>(
    cfg: &SyntheticTaskConfig,
    n_utts: usize,
    seed: u64,
) -> Result<Vec<SyntheticUtterance<T>>> {
    cfg.validate()?;
    let tpl = templates::<T>(cfg);
    let mut rng = Streams::from_root(seed).stream("synthetic");
    let mut out = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let u = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..cfg.vocab_size)).collect();
        let mut data = Vec::with_capacity(u * cfg.frames_per_token * cfg.feature_dim);
        for &tok in &tokens {
            for _ in 0..cfg.frames_per_token {
                for &base in tpl[tok - 1].data() {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(base + T::from_f64(cfg.noise_std * noise));
                }
            }
        }
        let frames = Tensor::new(vec![u * cfg.frames_per_token, cfg.feature_dim], data)?;
        let text = tokens.iter().map(|k| format!("t{k}")).collect::<Vec<_>>().join(" ");
        out.push(SyntheticUtterance { utterance_id: format!("synth-{i:05}"), frames, tokens, text });
    }
    Ok(out)
}

/// Token id (1-based) of the nearest template to `frame`.
pub fn nearest_template<T: Scalar>(tpl: &[Tensor<T>], frame: &[T]) -> usize {
    let mut best = 1;
    let mut best_d = f64::INFINITY;
    for (i, t) in tpl.iter().enumerate() {
        let d: f64 = t
            .data()
            .iter()
            .zip(frame)
            .map(|(&a, &b)| {
                let diff = (a - b).to_f64_val();
                diff * diff
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = i + 1;
        }
    }
    best
}

/// Audio rendering for front-end tests: token k becomes a pure tone held
/// for `frames_per_token` hops of `hop` samples.
pub fn render_audio<T: Scalar>(
    tokens: &[usize],
    frames_per_token: usize,
    hop: usize,
    sample_rate: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens.len() * frames_per_token * hop);
    for &tok in tokens {
        let freq = 300.0 + 150.0 * tok as f64;
        for n in 0..frames_per_token * hop {
            let t = n as f64 / sample_rate as f64;
            out.push(T::from_f64(0.5 * (2.0 * std::f64::consts::PI * freq * t).sin()));
        }
    }
    out
}
