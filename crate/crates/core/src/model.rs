//! Full model assembly: audio front-end or feature projection, chunked
//! encoder, predictor, and joiner, with deterministic initialization, a
//! canonical parameter naming scheme, and the traced training forward.

use rand::Rng;

use crate::encoder::{
    self, encode_offline_traced, AttnParams, DropoutMasks, EncoderConfig, EncoderParams,
    LayerLeaves, LayerParams,
};
use crate::error::{Error, Result};
use crate::frontend::{window_matrix, FrontEndConfig, FrontEndParams};
use crate::mask::{LeftContext, MaskSpec};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{ops, Scalar, Tensor};
use crate::transducer::{
    joiner_traced, predictor_forward_traced, rnnt_loss, JoinerConfig, JoinerLeaves,
    JoinerParams, PredictorConfig, PredictorLeaves, PredictorParams, Vocab,
};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontEndConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub joiner: JoinerConfig,
    /// Width of precomputed feature inputs (the path that bypasses the
    /// audio front-end through a learned projection).
    pub feature_dim: usize,
    pub vocab: Vocab,
    /// Records that the training objective is the exact lattice
    /// log-likelihood rather than a pruned approximation.
    pub exact_loss: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.predictor.validate()?;
        if self.frontend.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "front-end d_model {} != encoder d_model {}",
                self.frontend.d_model, self.encoder.d_model
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.vocab.size() < 2 {
            return Err(Error::Config("vocab needs at least one non-blank unit".into()));
        }
        if !self.exact_loss {
            return Err(Error::Config("only the exact lattice objective is implemented".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub input_w: Tensor<T>,
    pub input_b: Tensor<T>,
    pub frontend: FrontEndParams<T>,
    pub encoder: EncoderParams<T>,
    pub predictor: PredictorParams<T>,
    pub joiner: JoinerParams<T>,
}

fn xavier<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => (n, n),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: weights are drawn in the canonical
    /// visit order from `rng`, biases start at zero, norm gains at one.
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Model<T>> {
        cfg.validate()?;
        let d = cfg.encoder.d_model;
        let f = cfg.encoder.d_ffn;
        let w = cfg.frontend.frame_window;
        let e = cfg.predictor.embed_dim;
        let k = cfg.predictor.kernel;
        let j = cfg.joiner.joint_dim;
        let v = cfg.vocab.size();

        let input_w = xavier(vec![cfg.feature_dim, d], rng);
        let input_b = Tensor::zeros(vec![d]);
        let frontend = FrontEndParams {
            w1: xavier(vec![w, d], rng),
            b1: Tensor::zeros(vec![d]),
            w2: xavier(vec![d, d], rng),
            b2: Tensor::zeros(vec![d]),
        };
        let layers = (0..cfg.encoder.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                attn: AttnParams {
                    wq: xavier(vec![d, d], rng),
                    bq: Tensor::zeros(vec![d]),
                    wk: xavier(vec![d, d], rng),
                    bk: Tensor::zeros(vec![d]),
                    wv: xavier(vec![d, d], rng),
                    bv: Tensor::zeros(vec![d]),
                    wo: xavier(vec![d, d], rng),
                    bo: Tensor::zeros(vec![d]),
                },
                ln2_gain: Tensor::full(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
                ffn_w1: xavier(vec![d, f], rng),
                ffn_b1: Tensor::zeros(vec![f]),
                ffn_w2: xavier(vec![f, d], rng),
                ffn_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        let encoder = EncoderParams { cfg: cfg.encoder, layers };
        let predictor = PredictorParams {
            embed: xavier(vec![v, e], rng),
            conv_w: xavier(vec![k, e, e], rng),
            conv_b: Tensor::zeros(vec![e]),
        };
        let joiner = JoinerParams {
            enc_proj: xavier(vec![d, j], rng),
            pred_proj: xavier(vec![e, j], rng),
            joint_b: Tensor::zeros(vec![j]),
            out_w: xavier(vec![j, v], rng),
            out_b: Tensor::zeros(vec![v]),
        };
        Ok(Model { cfg, input_w, input_b, frontend, encoder, predictor, joiner })
    }

    /// Visit every parameter as (hierarchical name, tensor) in the canonical
    /// order shared by `init`, `visit_mut`, and `ModelLeaves::named`.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f("input_proj.w", &self.input_w);
        f("input_proj.b", &self.input_b);
        f("frontend.w1", &self.frontend.w1);
        f("frontend.b1", &self.frontend.b1);
        f("frontend.w2", &self.frontend.w2);
        f("frontend.b2", &self.frontend.b2);
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            f(&format!("{p}.ln1.gain"), &l.ln1_gain);
            f(&format!("{p}.ln1.bias"), &l.ln1_bias);
            f(&format!("{p}.attn.wq"), &l.attn.wq);
            f(&format!("{p}.attn.bq"), &l.attn.bq);
            f(&format!("{p}.attn.wk"), &l.attn.wk);
            f(&format!("{p}.attn.bk"), &l.attn.bk);
            f(&format!("{p}.attn.wv"), &l.attn.wv);
            f(&format!("{p}.attn.bv"), &l.attn.bv);
            f(&format!("{p}.attn.wo"), &l.attn.wo);
            f(&format!("{p}.attn.bo"), &l.attn.bo);
            f(&format!("{p}.ln2.gain"), &l.ln2_gain);
            f(&format!("{p}.ln2.bias"), &l.ln2_bias);
            f(&format!("{p}.ffn.w1"), &l.ffn_w1);
            f(&format!("{p}.ffn.b1"), &l.ffn_b1);
            f(&format!("{p}.ffn.w2"), &l.ffn_w2);
            f(&format!("{p}.ffn.b2"), &l.ffn_b2);
        }
        f("predictor.embed", &self.predictor.embed);
        f("predictor.conv_w", &self.predictor.conv_w);
        f("predictor.conv_b", &self.predictor.conv_b);
        f("joiner.enc_proj", &self.joiner.enc_proj);
        f("joiner.pred_proj", &self.joiner.pred_proj);
        f("joiner.joint_b", &self.joiner.joint_b);
        f("joiner.out_w", &self.joiner.out_w);
        f("joiner.out_b", &self.joiner.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f("input_proj.w", &mut self.input_w);
        f("input_proj.b", &mut self.input_b);
        f("frontend.w1", &mut self.frontend.w1);
        f("frontend.b1", &mut self.frontend.b1);
        f("frontend.w2", &mut self.frontend.w2);
        f("frontend.b2", &mut self.frontend.b2);
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            let p = format!("encoder.layer{i}");
            f(&format!("{p}.ln1.gain"), &mut l.ln1_gain);
            f(&format!("{p}.ln1.bias"), &mut l.ln1_bias);
            f(&format!("{p}.attn.wq"), &mut l.attn.wq);
            f(&format!("{p}.attn.bq"), &mut l.attn.bq);
            f(&format!("{p}.attn.wk"), &mut l.attn.wk);
            f(&format!("{p}.attn.bk"), &mut l.attn.bk);
            f(&format!("{p}.attn.wv"), &mut l.attn.wv);
            f(&format!("{p}.attn.bv"), &mut l.attn.bv);
            f(&format!("{p}.attn.wo"), &mut l.attn.wo);
            f(&format!("{p}.attn.bo"), &mut l.attn.bo);
            f(&format!("{p}.ln2.gain"), &mut l.ln2_gain);
            f(&format!("{p}.ln2.bias"), &mut l.ln2_bias);
            f(&format!("{p}.ffn.w1"), &mut l.ffn_w1);
            f(&format!("{p}.ffn.b1"), &mut l.ffn_b1);
            f(&format!("{p}.ffn.w2"), &mut l.ffn_w2);
            f(&format!("{p}.ffn.b2"), &mut l.ffn_b2);
        }
        f("predictor.embed", &mut self.predictor.embed);
        f("predictor.conv_w", &mut self.predictor.conv_w);
        f("predictor.conv_b", &mut self.predictor.conv_b);
        f("joiner.enc_proj", &mut self.joiner.enc_proj);
        f("joiner.pred_proj", &mut self.joiner.pred_proj);
        f("joiner.joint_b", &mut self.joiner.joint_b);
        f("joiner.out_w", &mut self.joiner.out_w);
        f("joiner.out_b", &mut self.joiner.out_b);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Replace parameters from (name, tensor) pairs; every name must match
    /// an existing parameter of identical shape, and every parameter must be
    /// covered.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut wanted = std::collections::BTreeMap::new();
        self.visit(&mut |name, t| {
            wanted.insert(name.to_string(), t.shape().to_vec());
        });
        for (name, t) in tensors {
            match wanted.remove(name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "unknown tensor name '{name}' for this architecture"
                    )))
                }
                Some(shape) if shape != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((missing, _)) = wanted.into_iter().next() {
            return Err(Error::Checkpoint(format!("tensor '{missing}' missing from checkpoint")));
        }
        self.visit_mut(&mut |name, slot| {
            let (_, t) = tensors.iter().find(|(n, _)| n == name).expect("coverage checked");
            *slot = t.clone();
        });
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Feature rows into encoder space.
    pub fn project_features(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add_bias(&ops::matmul(feats, &self.input_w)?, &self.input_b)
    }

    /// Offline encode of a feature matrix under `spec`.
    pub fn encode_features_offline(&self, feats: &Tensor<T>, spec: &MaskSpec) -> Result<Tensor<T>> {
        encoder::encode_offline(&self.encoder, &self.project_features(feats)?, spec)
    }
}

/// Tape handles for every parameter, in canonical order.
pub struct ModelLeaves {
    pub input_w: NodeId,
    pub input_b: NodeId,
    pub frontend_w1: NodeId,
    pub frontend_b1: NodeId,
    pub frontend_w2: NodeId,
    pub frontend_b2: NodeId,
    pub encoder: Vec<LayerLeaves>,
    pub predictor: PredictorLeaves,
    pub joiner: JoinerLeaves,
}

impl ModelLeaves {
    pub fn new<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>) -> ModelLeaves {
        ModelLeaves {
            input_w: tape.param(model.input_w.clone()),
            input_b: tape.param(model.input_b.clone()),
            frontend_w1: tape.param(model.frontend.w1.clone()),
            frontend_b1: tape.param(model.frontend.b1.clone()),
            frontend_w2: tape.param(model.frontend.w2.clone()),
            frontend_b2: tape.param(model.frontend.b2.clone()),
            encoder: model.encoder.leaves(tape),
            predictor: model.predictor.leaves(tape),
            joiner: model.joiner.leaves(tape),
        }
    }

    /// (name, node) pairs in the same order as `Model::visit`.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![
            ("input_proj.w".to_string(), self.input_w),
            ("input_proj.b".to_string(), self.input_b),
            ("frontend.w1".to_string(), self.frontend_w1),
            ("frontend.b1".to_string(), self.frontend_b1),
            ("frontend.w2".to_string(), self.frontend_w2),
            ("frontend.b2".to_string(), self.frontend_b2),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            out.push((format!("{p}.ln1.gain"), l.ln1_gain));
            out.push((format!("{p}.ln1.bias"), l.ln1_bias));
            out.push((format!("{p}.attn.wq"), l.attn.wq));
            out.push((format!("{p}.attn.bq"), l.attn.bq));
            out.push((format!("{p}.attn.wk"), l.attn.wk));
            out.push((format!("{p}.attn.bk"), l.attn.bk));
            out.push((format!("{p}.attn.wv"), l.attn.wv));
            out.push((format!("{p}.attn.bv"), l.attn.bv));
            out.push((format!("{p}.attn.wo"), l.attn.wo));
            out.push((format!("{p}.attn.bo"), l.attn.bo));
            out.push((format!("{p}.ln2.gain"), l.ln2_gain));
            out.push((format!("{p}.ln2.bias"), l.ln2_bias));
            out.push((format!("{p}.ffn.w1"), l.ffn_w1));
            out.push((format!("{p}.ffn.b1"), l.ffn_b1));
            out.push((format!("{p}.ffn.w2"), l.ffn_w2));
            out.push((format!("{p}.ffn.b2"), l.ffn_b2));
        }
        out.push(("predictor.embed".to_string(), self.predictor.embed));
        out.push(("predictor.conv_w".to_string(), self.predictor.conv_w));
        out.push(("predictor.conv_b".to_string(), self.predictor.conv_b));
        out.push(("joiner.enc_proj".to_string(), self.joiner.enc_proj));
        out.push(("joiner.pred_proj".to_string(), self.joiner.pred_proj));
        out.push(("joiner.joint_b".to_string(), self.joiner.joint_b));
        out.push(("joiner.out_w".to_string(), self.joiner.out_w));
        out.push(("joiner.out_b".to_string(), self.joiner.out_b));
        out
    }
}

/// One training example: either precomputed feature rows or raw audio.
#[derive(Debug, Clone)]
pub enum TrainInput<T: Scalar> {
    Features(Tensor<T>),
    Audio(Vec<T>),
}

/// Mask governing one training forward: `Some(c)` chunks the utterance at
/// `c` frames with full left context (the streaming-simulation objective);
/// `None` is ordinary full attention.
pub fn training_spec(chunk_frames: Option<usize>, total_frames: usize) -> Result<MaskSpec> {
    match chunk_frames {
        Some(c) => MaskSpec::new(c, LeftContext::Full, 0, total_frames),
        None => MaskSpec::new(total_frames.max(1), LeftContext::Chunks(0), 0, total_frames),
    }
}

/// Inverted-dropout masks for one utterance, drawn in a fixed order
/// (layer-ascending, attention mask then feed-forward mask, row-major).
pub fn make_dropout_masks<T: Scalar>(
    cfg: &EncoderConfig,
    t: usize,
    rng: &mut impl Rng,
) -> Option<DropoutMasks<T>> {
    if cfg.dropout == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - cfg.dropout);
    let mut draw = |t: usize, d: usize| {
        let data = (0..t * d)
            .map(|_| {
                if rng.gen::<f64>() < cfg.dropout {
                    T::zero()
                } else {
                    T::from_f64(keep)
                }
            })
            .collect();
        Tensor::new(vec![t, d], data).expect("mask shape")
    };
    let per_layer = (0..cfg.n_layers)
        .map(|_| (draw(t, cfg.d_model), draw(t, cfg.d_model)))
        .collect();
    Some(DropoutMasks { per_layer })
}

/// Traced front-end over raw audio, chunked identically to
/// `frontend_offline`: returns the frame node [F x d_model].
fn frontend_traced<T: Scalar>(
    tape: &mut Tape<T>,
    leaves: &ModelLeaves,
    cfg: &FrontEndConfig,
    samples: &[T],
    chunk_frames: usize,
) -> Result<NodeId> {
    let hop = cfg.frame_hop;
    let mut padded;
    let samples = if samples.is_empty() {
        return Err(Error::Empty("audio"));
    } else if samples.len() % hop == 0 {
        samples
    } else {
        padded = samples.to_vec();
        padded.resize(samples.len().div_ceil(hop) * hop, T::zero());
        &padded
    };
    let per_chunk = cfg.chunk_samples(chunk_frames);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let end = (start + per_chunk).min(samples.len());
        let windows = tape.constant(window_matrix(&samples[start..end], cfg)?);
        let h0 = tape.matmul(windows, leaves.frontend_w1)?;
        let h1 = tape.add_bias(h0, leaves.frontend_b1)?;
        let hg = tape.gelu(h1);
        let o0 = tape.matmul(hg, leaves.frontend_w2)?;
        parts.push(tape.add_bias(o0, leaves.frontend_b2)?);
        start = end;
    }
    tape.concat_rows(&parts)
}

/// Traced loss for one utterance. Builds the full differentiable graph:
/// input adaptation, masked encoder, predictor, joiner, and the exact
/// lattice loss (attached via its analytic gradient). Returns the scalar
/// loss node and the nll value.
pub fn loss_forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    leaves: &ModelLeaves,
    input: &TrainInput<T>,
    tokens: &[usize],
    chunk_frames: Option<usize>,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<(NodeId, T)> {
    let frames = match input {
        TrainInput::Features(feats) => {
            let f = tape.constant(feats.clone());
            let p = tape.matmul(f, leaves.input_w)?;
            tape.add_bias(p, leaves.input_b)?
        }
        TrainInput::Audio(samples) => {
            // Front-end chunking must match the mask chunking so that the
            // trained behavior equals the streaming pipeline's.
            let t_guess = samples.len().div_ceil(model.cfg.frontend.frame_hop);
            let c = chunk_frames.unwrap_or(t_guess.max(1));
            frontend_traced(tape, leaves, &model.cfg.frontend, samples, c)?
        }
    };
    let t = tape.value(frames).shape()[0];
    let spec = training_spec(chunk_frames, t)?;
    let dropout = match dropout_rng {
        Some(mut rng) => make_dropout_masks(&model.cfg.encoder, t, &mut rng),
        None => None,
    };
    let enc = encode_offline_traced(
        tape,
        &model.cfg.encoder,
        &leaves.encoder,
        frames,
        &spec,
        dropout.as_ref(),
    )?;
    let pred =
        predictor_forward_traced(tape, &leaves.predictor, model.cfg.predictor.embed_dim, tokens)?;
    let logits2d = joiner_traced(tape, &leaves.joiner, enc, pred)?;
    let v = model.cfg.vocab.size();
    let logits = tape.reshape(logits2d, vec![t, tokens.len() + 1, v])?;
    let (nll, grad) = rnnt_loss(tape.value(logits), tokens)?;
    let loss = tape.saved_grad(logits, nll, grad)?;
    Ok((loss, nll))
}
