//! Greedy and beam transducer decoding, plus the streaming session that
//! couples pushed audio to incremental encoder state and a carried beam.
//!
//! Search is frame-synchronous. Within one frame a hypothesis is either
//! "open" (may still emit labels at this frame) or "closed" (consumed the
//! frame's blank). Hypotheses with identical token sequences in the same
//! phase are the same lattice node and merge by logaddexp; an open and a
//! closed hypothesis with the same tokens are different nodes and never
//! merge. Width 1 reproduces greedy decoding exactly, including ties,
//! because candidates are ranked by a stable descending sort over an
//! insertion order of blank first, then labels ascending.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::frontend;
use crate::mask::MaskGeometry;
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::transducer::{
    joint_step, log_softmax_row, logaddexp, predictor_step, step_context, PredictorParams, BLANK,
};

#[derive(Debug, Clone)]
pub struct Hypothesis<T: Scalar> {
    pub tokens: Vec<usize>,
    /// Sum of chosen branch log-probs; not bounded above by 0 in general
    /// but non-increasing as blanks and labels are consumed.
    pub log_prob: T,
    /// Predictor output row for the current context; always equal to
    /// `predictor_step` over the last min(len, kernel) tokens.
    pred_row: Tensor<T>,
}

impl<T: Scalar> Hypothesis<T> {
    pub fn empty(pred: &PredictorParams<T>) -> Result<Hypothesis<T>> {
        Ok(Hypothesis { tokens: Vec::new(), log_prob: T::zero(), pred_row: predictor_step(pred, &[])? })
    }

    /// Last min(len, kernel) tokens: the state the predictor row encodes.
    pub fn context(&self, kernel: usize) -> &[usize] {
        step_context(&self.tokens, kernel)
    }

    fn extend(&self, tok: usize, lp: T, pred: &PredictorParams<T>) -> Result<Hypothesis<T>> {
        let mut tokens = self.tokens.clone();
        tokens.push(tok);
        let kernel = pred.conv_w.shape()[0];
        let pred_row = predictor_step(pred, step_context(&tokens, kernel))?;
        Ok(Hypothesis { tokens, log_prob: self.log_prob + lp, pred_row })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Attention geometry the encoder decodes under; the total-frame count
    /// is supplied by the utterance.
    pub mask: MaskGeometry,
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 4, mask: MaskGeometry::default(), max_symbols_per_frame: 8 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
        }
        Ok(())
    }
}

/// One phase's candidate pool with logaddexp merging of duplicate token
/// sequences. Insertion order is preserved so the later stable sort breaks
/// score ties toward earlier insertion.
struct Pool<T: Scalar> {
    items: Vec<Hypothesis<T>>,
    index: HashMap<Vec<usize>, usize>,
}

impl<T: Scalar> Pool<T> {
    fn new() -> Self {
        Pool { items: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, h: Hypothesis<T>) {
        match self.index.get(&h.tokens) {
            Some(&i) => {
                let merged = logaddexp(self.items[i].log_prob, h.log_prob);
                self.items[i].log_prob = merged;
            }
            None => {
                self.index.insert(h.tokens.clone(), self.items.len());
                self.items.push(h);
            }
        }
    }
}

fn sort_desc<T: Scalar>(items: &mut [Hypothesis<T>]) {
    items.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(std::cmp::Ordering::Equal));
}

/// Advance a beam of closed hypotheses across one encoder frame. Every
/// symbol step offers each open hypothesis its blank closure and all label
/// extensions; the frozen closed set competes in the same pruning so the
/// beam always holds the best `width` states regardless of phase. Open
/// hypotheses surviving `max_symbols` label emissions are force-closed
/// without a blank score, which bounds the step count.
fn beam_step_frame<T: Scalar>(
    model: &Model<T>,
    enc_row: &Tensor<T>,
    beam: Vec<Hypothesis<T>>,
    width: usize,
    max_symbols: usize,
) -> Result<Vec<Hypothesis<T>>> {
    let mut open = beam;
    let mut closed: Vec<Hypothesis<T>> = Vec::new();
    for _ in 0..max_symbols {
        if open.is_empty() {
            break;
        }
        let mut closed_pool = Pool::new();
        let mut open_pool = Pool::new();
        for h in closed.drain(..) {
            closed_pool.push(h);
        }
        for h in &open {
            let logits = joint_step(&model.joiner, enc_row, &h.pred_row)?;
            let lp = log_softmax_row(&logits);
            closed_pool.push(Hypothesis {
                tokens: h.tokens.clone(),
                log_prob: h.log_prob + lp[BLANK],
                pred_row: h.pred_row.clone(),
            });
            for (tok, &l) in lp.iter().enumerate().skip(1) {
                open_pool.push(h.extend(tok, l, &model.predictor)?);
            }
        }
        // Prune closed and open together: tag, sort, keep top `width`.
        let mut tagged: Vec<(bool, Hypothesis<T>)> = Vec::new();
        tagged.extend(closed_pool.items.into_iter().map(|h| (true, h)));
        tagged.extend(open_pool.items.into_iter().map(|h| (false, h)));
        tagged.sort_by(|a, b| {
            b.1.log_prob.partial_cmp(&a.1.log_prob).unwrap_or(std::cmp::Ordering::Equal)
        });
        tagged.truncate(width);
        open = Vec::new();
        for (is_closed, h) in tagged {
            if is_closed {
                closed.push(h);
            } else {
                open.push(h);
            }
        }
    }
    // Symbol cap reached: remaining open hypotheses advance without a
    // blank score.
    let mut final_pool = Pool::new();
    for h in closed {
        final_pool.push(h);
    }
    for h in open {
        final_pool.push(h);
    }
    let mut out = final_pool.items;
    sort_desc(&mut out);
    out.truncate(width);
    Ok(out)
}

/// Frame-synchronous beam search over precomputed encoder frames. Returns
/// up to `beam_width` hypotheses, best first, duplicates merged.
pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    enc: &Tensor<T>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<T>>> {
    cfg.validate()?;
    let (t_len, _) = enc.dims2()?;
    let mut beam = vec![Hypothesis::empty(&model.predictor)?];
    for t in 0..t_len {
        let d = enc.shape()[1];
        let row = Tensor::new(vec![1, d], enc.row(t).to_vec())?;
        beam = beam_step_frame(model, &row, beam, cfg.beam_width, cfg.max_symbols_per_frame)?;
    }
    Ok(beam)
}

/// Greedy decoding: per frame, repeatedly take the first argmax of the
/// joint distribution, emitting labels until blank wins or the per-frame
/// symbol cap is reached. Equals `beam_search` with width 1.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    enc: &Tensor<T>,
    max_symbols_per_frame: usize,
) -> Result<Hypothesis<T>> {
    let (t_len, d) = enc.dims2()?;
    let mut hyp = Hypothesis::empty(&model.predictor)?;
    for t in 0..t_len {
        let row = Tensor::new(vec![1, d], enc.row(t).to_vec())?;
        for _ in 0..max_symbols_per_frame {
            let logits = joint_step(&model.joiner, &row, &hyp.pred_row)?;
            let lp = log_softmax_row(&logits);
            let mut best = 0;
            for (k, &l) in lp.iter().enumerate() {
                if l > lp[best] {
                    best = k;
                }
            }
            if best == BLANK {
                hyp.log_prob = hyp.log_prob + lp[BLANK];
                break;
            }
            hyp = hyp.extend(best, lp[best], &model.predictor)?;
        }
        // Cap exhaustion advances the frame without a blank score, matching
        // the beam's force-close.
    }
    Ok(hyp)
}

/// Offline decode of a feature matrix under the configured mask.
pub fn decode_offline<T: Scalar>(
    model: &Model<T>,
    feats: &Tensor<T>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<T>>> {
    let (t, _) = feats.dims2()?;
    let spec = cfg.mask.with_total(t)?;
    let enc = model.encode_features_offline(feats, &spec)?;
    beam_search(model, &enc, cfg)
}

/// Offline decode of raw audio: front-end at the mask's chunk boundaries,
/// then the same masked forward as `decode_offline`.
pub fn decode_offline_audio<T: Scalar>(
    model: &Model<T>,
    samples: &[T],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<T>>> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let t = samples.len().div_ceil(model.cfg.frontend.frame_hop);
    let spec = cfg.mask.with_total(t)?;
    let feats = crate::frontend::frontend_offline(
        &model.frontend,
        samples,
        spec.chunk_frames,
        &model.cfg.frontend,
    )?;
    let enc = crate::encoder::encode_offline(&model.encoder, &feats, &spec)?;
    beam_search(model, &enc, cfg)
}

/// Post-stream accounting: what the encoder actually attended and cached.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamReport {
    pub chunks: usize,
    pub frames: usize,
    pub per_chunk_attended: Vec<usize>,
    pub attended_keys_total: usize,
    pub peak_cache_frames: usize,
}

enum PushKind {
    Unset,
    Samples,
    Frames,
}

/// One logical audio stream: buffers pushed input, runs the front-end and
/// incremental encoder per complete chunk, and carries the beam across
/// chunks. Partial results are the best current hypothesis and may be
/// revised between pushes when beam_width > 1; only the finalized result
/// is stable.
pub struct Session<'m, T: Scalar> {
    model: &'m Model<T>,
    cfg: DecodeConfig,
    state: crate::encoder::StreamState<T>,
    beam: Vec<Hypothesis<T>>,
    sample_buf: Vec<T>,
    frame_buf: Vec<T>,
    kind: PushKind,
    finalized: bool,
}

/// Open a streaming session; the beam starts at the single empty
/// hypothesis and the encoder cache is empty.
pub fn stream_open<'m, T: Scalar>(model: &'m Model<T>, cfg: DecodeConfig) -> Result<Session<'m, T>> {
    cfg.validate()?;
    cfg.mask.with_total(cfg.mask.chunk_frames)?;
    Ok(Session {
        model,
        cfg,
        state: crate::encoder::encoder_open_stream(&model.cfg.encoder, cfg.mask),
        beam: vec![Hypothesis::empty(&model.predictor)?],
        sample_buf: Vec::new(),
        frame_buf: Vec::new(),
        kind: PushKind::Unset,
        finalized: false,
    })
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn frames_emitted(&self) -> usize {
        self.state.frames_emitted()
    }

    /// Current best hypothesis. Before any push this is the empty one.
    pub fn best(&self) -> &Hypothesis<T> {
        &self.beam[0]
    }

    pub fn n_best(&self) -> &[Hypothesis<T>] {
        &self.beam
    }

    fn encode_and_extend(&mut self, chunk_frames: Tensor<T>) -> Result<()> {
        let enc = crate::encoder::encoder_push_chunk(&self.model.encoder, &mut self.state, &chunk_frames)?;
        let (n, d) = enc.dims2()?;
        let mut beam = std::mem::take(&mut self.beam);
        for t in 0..n {
            let row = Tensor::new(vec![1, d], enc.row(t).to_vec())?;
            beam = beam_step_frame(
                self.model,
                &row,
                beam,
                self.cfg.beam_width,
                self.cfg.max_symbols_per_frame,
            )?;
        }
        self.beam = beam;
        Ok(())
    }

    fn set_kind(&mut self, want: PushKind) -> Result<()> {
        match (&self.kind, &want) {
            (PushKind::Unset, _) => {
                self.kind = want;
                Ok(())
            }
            (PushKind::Samples, PushKind::Samples) | (PushKind::Frames, PushKind::Frames) => Ok(()),
            _ => Err(Error::Config("cannot mix raw-sample and feature pushes in one session".into())),
        }
    }

    /// Push raw audio samples. Complete chunks (chunk_frames x hop samples)
    /// are processed immediately; the remainder waits for more input. Push
    /// granularity never affects the result, only the mask geometry does.
    pub fn push(&mut self, samples: &[T]) -> Result<&Hypothesis<T>> {
        if self.finalized {
            return Err(Error::StreamFinalized);
        }
        self.set_kind(PushKind::Samples)?;
        self.sample_buf.extend_from_slice(samples);
        let fe = &self.model.cfg.frontend;
        let chunk_samples = fe.chunk_samples(self.cfg.mask.chunk_frames);
        while self.sample_buf.len() >= chunk_samples {
            let rest = self.sample_buf.split_off(chunk_samples);
            let chunk = std::mem::replace(&mut self.sample_buf, rest);
            let frames = frontend::frontend_chunk(&self.model.frontend, &chunk, fe)?;
            self.encode_and_extend(frames)?;
        }
        Ok(self.best())
    }

    /// Push precomputed feature rows (row-major, feature_dim wide).
    pub fn push_features(&mut self, feats: &Tensor<T>) -> Result<&Hypothesis<T>> {
        if self.finalized {
            return Err(Error::StreamFinalized);
        }
        self.set_kind(PushKind::Frames)?;
        let (_, d) = feats.dims2()?;
        if d != self.model.cfg.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "push_features",
                detail: format!("feature dim {d}, model expects {}", self.model.cfg.feature_dim),
            });
        }
        self.frame_buf.extend_from_slice(feats.data());
        let c = self.cfg.mask.chunk_frames;
        while self.frame_buf.len() >= c * d {
            let rest = self.frame_buf.split_off(c * d);
            let chunk = std::mem::replace(&mut self.frame_buf, rest);
            let feats = Tensor::new(vec![c, d], chunk)?;
            let proj = self.model.project_features(&feats)?;
            self.encode_and_extend(proj)?;
        }
        Ok(self.best())
    }

    /// Flush the trailing partial chunk (audio zero-padded to a hop
    /// boundary), close the stream, and return the final n-best plus the
    /// cost report. Second call errors.
    pub fn finalize(&mut self) -> Result<(Vec<Hypothesis<T>>, StreamReport)> {
        if self.finalized {
            return Err(Error::StreamFinalized);
        }
        if !self.sample_buf.is_empty() {
            let fe = self.model.cfg.frontend;
            let mut tail = std::mem::take(&mut self.sample_buf);
            let padded = tail.len().div_ceil(fe.frame_hop) * fe.frame_hop;
            tail.resize(padded, T::zero());
            let frames = frontend::frontend_chunk(&self.model.frontend, &tail, &fe)?;
            self.encode_and_extend(frames)?;
        }
        if !self.frame_buf.is_empty() {
            let d = self.model.cfg.feature_dim;
            let tail = std::mem::take(&mut self.frame_buf);
            let feats = Tensor::new(vec![tail.len() / d, d], tail)?;
            let proj = self.model.project_features(&feats)?;
            self.encode_and_extend(proj)?;
        }
        self.state.close();
        self.finalized = true;
        let per_chunk = self.state.per_chunk_attended().to_vec();
        let report = StreamReport {
            chunks: per_chunk.len(),
            frames: self.state.frames_emitted(),
            attended_keys_total: per_chunk.iter().sum(),
            per_chunk_attended: per_chunk,
            peak_cache_frames: self.state.peak_cache_frames(),
        };
        Ok((self.beam.clone(), report))
    }
}

/// Streaming decode of a whole feature matrix in one pass; equals
/// `decode_offline` under the same geometry.
pub fn decode_streaming_features<T: Scalar>(
    model: &Model<T>,
    feats: &Tensor<T>,
    cfg: &DecodeConfig,
) -> Result<(Vec<Hypothesis<T>>, StreamReport)> {
    let mut session = stream_open(model, *cfg)?;
    session.push_features(feats)?;
    session.finalize()
}
