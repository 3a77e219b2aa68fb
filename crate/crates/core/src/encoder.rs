//! Pre-norm transformer encoder with chunked self-attention, in two
//! interchangeable forms: a one-shot masked forward over the whole utterance
//! and an incremental form that processes one chunk per push against a
//! key/value cache. Both call the same kernels with the same accumulation
//! order, so for any mask spec the streaming outputs reproduce the offline
//! ones (bitwise in practice; tests pin 1e-5 f32 / 1e-10 f64).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::{build_mask, LeftContext, MaskGeometry, MaskSpec};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{ops, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Training-time dropout rate; inference always runs with dropout off.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { n_layers: 2, n_heads: 4, d_model: 64, d_ffn: 128, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone)]
pub struct AttnParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Clone)]
pub struct LayerParams<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub attn: AttnParams<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

#[derive(Clone)]
pub struct EncoderParams<T: Scalar> {
    pub cfg: EncoderConfig,
    pub layers: Vec<LayerParams<T>>,
}

/// Sinusoidal positional encoding rows for absolute frame positions
/// `offset..offset+len`. Each entry depends only on its absolute position,
/// so offline and per-chunk computation produce identical rows. Values are
/// computed in f64 and cast once, for the same reason.
pub fn positional_encoding<T: Scalar>(offset: usize, len: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d_model);
    for p in 0..len {
        let pos = (offset + p) as f64;
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let rate = 10_000f64.powf(2.0 * pair / d_model as f64);
            let angle = pos / rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64(v));
        }
    }
    Tensor::new(vec![len, d_model], data).expect("shape arithmetic")
}

/// Multi-head attention for queries `q` against keys/values `k`/`v`
/// (all post-projection, full width), with an optional mask over the key
/// axis. `None` means every query row may attend every key row, which is the
/// streaming case: the gathered key set is exactly the allowed set shared by
/// all queries of the chunk.
fn attend<T: Scalar>(
    cfg: &EncoderConfig,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&crate::mask::BoolMask>,
) -> Result<Tensor<T>> {
    let dh = cfg.d_head();
    let inv = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = ops::slice_cols(q, h * dh, dh)?;
        let kh = ops::slice_cols(k, h * dh, dh)?;
        let vh = ops::slice_cols(v, h * dh, dh)?;
        let scores = ops::scale(&ops::matmul_nt(&qh, &kh)?, inv);
        let probs = match mask {
            Some(m) => ops::masked_softmax(&scores, m)?,
            None => ops::softmax(&scores)?,
        };
        heads.push(ops::matmul(&probs, &vh)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    ops::concat_cols(&refs)
}

fn layer_forward<T: Scalar>(
    cfg: &EncoderConfig,
    layer: &LayerParams<T>,
    x: &Tensor<T>,
    mask: &crate::mask::BoolMask,
) -> Result<Tensor<T>> {
    let ln1 = ops::layer_norm(x, &layer.ln1_gain, &layer.ln1_bias)?;
    let q = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wq)?, &layer.attn.bq)?;
    let k = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wk)?, &layer.attn.bk)?;
    let v = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wv)?, &layer.attn.bv)?;
    let ctx = attend(cfg, &q, &k, &v, Some(mask))?;
    let attn_out = ops::add_bias(&ops::matmul(&ctx, &layer.attn.wo)?, &layer.attn.bo)?;
    let x = ops::add(x, &attn_out)?;
    let ln2 = ops::layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias)?;
    let h = ops::gelu(&ops::add_bias(&ops::matmul(&ln2, &layer.ffn_w1)?, &layer.ffn_b1)?);
    let ffn_out = ops::add_bias(&ops::matmul(&h, &layer.ffn_w2)?, &layer.ffn_b2)?;
    ops::add(&x, &ffn_out)
}

/// Whole-utterance masked forward. With `spec` = full attention this is a
/// plain transformer; with a chunked spec it computes exactly what the
/// incremental path computes. No final norm: an empty stack is the identity
/// plus positional encoding.
pub fn encode_offline<T: Scalar>(
    params: &EncoderParams<T>,
    frames: &Tensor<T>,
    spec: &MaskSpec,
) -> Result<Tensor<T>> {
    let (t, d) = frames.dims2()?;
    if t != spec.total_frames {
        return Err(Error::ShapeMismatch {
            op: "encode_offline",
            detail: format!("frames {t} vs spec total {}", spec.total_frames),
        });
    }
    let mask = build_mask(spec);
    let mut x = ops::add(frames, &positional_encoding(0, t, d))?;
    for layer in &params.layers {
        x = layer_forward(&params.cfg, layer, &x, &mask)?;
    }
    Ok(x)
}

struct ChunkKV<T: Scalar> {
    start: usize,
    k: Tensor<T>,
    v: Tensor<T>,
}

struct LayerCache<T: Scalar> {
    sink_k: Option<Tensor<T>>,
    sink_v: Option<Tensor<T>>,
    chunks: VecDeque<ChunkKV<T>>,
}

/// Incremental encoder state: per-layer sink and recent-chunk key/value
/// caches plus the global frame counter.
pub struct StreamState<T: Scalar> {
    geometry: MaskGeometry,
    layers: Vec<LayerCache<T>>,
    frames_emitted: usize,
    chunks_pushed: usize,
    closed: bool,
    peak_cache_frames: usize,
    per_chunk_attended: Vec<usize>,
}

impl<T: Scalar> StreamState<T> {
    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    pub fn geometry(&self) -> &MaskGeometry {
        &self.geometry
    }

    /// Frames currently cached across sink and chunk stores (one layer's
    /// worth; all layers cache the same counts). Overlap between the sink
    /// store and retained chunks is counted per store, since both copies
    /// occupy memory.
    pub fn cache_frames(&self) -> usize {
        let layer = match self.layers.first() {
            Some(l) => l,
            None => return 0,
        };
        let sinks = layer.sink_k.as_ref().map_or(0, |k| k.shape()[0]);
        let retained: usize = layer.chunks.iter().map(|c| c.k.shape()[0]).sum();
        sinks + retained
    }

    pub fn peak_cache_frames(&self) -> usize {
        self.peak_cache_frames
    }

    /// Distinct key positions attended by each pushed chunk, in push order.
    pub fn per_chunk_attended(&self) -> &[usize] {
        &self.per_chunk_attended
    }

    pub fn close(&mut self) {
        self.closed = true;
    }
}

pub fn encoder_open_stream<T: Scalar>(cfg: &EncoderConfig, geometry: MaskGeometry) -> StreamState<T> {
    let layers = (0..cfg.n_layers)
        .map(|_| LayerCache { sink_k: None, sink_v: None, chunks: VecDeque::new() })
        .collect();
    StreamState {
        geometry,
        layers,
        frames_emitted: 0,
        chunks_pushed: 0,
        closed: false,
        peak_cache_frames: 0,
        per_chunk_attended: Vec::new(),
    }
}

/// Encode one chunk of frames against the cache. The chunk must be exactly
/// `chunk_frames` long except for the final push, which may be shorter and
/// seals the stream.
pub fn encoder_push_chunk<T: Scalar>(
    params: &EncoderParams<T>,
    state: &mut StreamState<T>,
    chunk: &Tensor<T>,
) -> Result<Tensor<T>> {
    if state.closed {
        return Err(Error::StreamFinalized);
    }
    let (c, d) = chunk.dims2()?;
    let cfrm = state.geometry.chunk_frames;
    if c > cfrm {
        return Err(Error::OversizeChunk { got: c, chunk_frames: cfrm });
    }
    let n = state.chunks_pushed;
    let left = match state.geometry.left_context {
        LeftContext::Full => n,
        LeftContext::Chunks(l) => l.min(n),
    };
    let window_lo = (n - left) * cfrm;
    let s = state.geometry.sink_frames;

    let mut x = ops::add(chunk, &positional_encoding(state.frames_emitted, c, d))?;
    let mut attended_recorded = false;
    for (li, layer) in params.layers.iter().enumerate() {
        let cache = &mut state.layers[li];
        let ln1 = ops::layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias)?;
        let q = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wq)?, &layer.attn.bq)?;
        let k_cur = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wk)?, &layer.attn.bk)?;
        let v_cur = ops::add_bias(&ops::matmul(&ln1, &layer.attn.wv)?, &layer.attn.bv)?;

        // Gather the allowed key set in ascending global-frame order:
        // cached sinks, then retained chunk frames past the sink boundary,
        // then the current chunk. The sink store never holds frames the
        // deque would re-contribute below `bound`, so the union is disjoint.
        let sinks_have = cache.sink_k.as_ref().map_or(0, |t| t.shape()[0]);
        let bound = window_lo.max(sinks_have);
        let mut k_parts: Vec<Tensor<T>> = Vec::new();
        let mut v_parts: Vec<Tensor<T>> = Vec::new();
        if let (Some(sk), Some(sv)) = (&cache.sink_k, &cache.sink_v) {
            k_parts.push(sk.clone());
            v_parts.push(sv.clone());
        }
        for blk in &cache.chunks {
            let rows = blk.k.shape()[0];
            let end = blk.start + rows;
            if end <= bound {
                continue;
            }
            let from = bound.saturating_sub(blk.start);
            if from == 0 {
                k_parts.push(blk.k.clone());
                v_parts.push(blk.v.clone());
            } else {
                k_parts.push(slice_rows(&blk.k, from, rows - from)?);
                v_parts.push(slice_rows(&blk.v, from, rows - from)?);
            }
        }
        k_parts.push(k_cur.clone());
        v_parts.push(v_cur.clone());
        let k_refs: Vec<&Tensor<T>> = k_parts.iter().collect();
        let v_refs: Vec<&Tensor<T>> = v_parts.iter().collect();
        let k_all = ops::concat_rows(&k_refs)?;
        let v_all = ops::concat_rows(&v_refs)?;
        if !attended_recorded {
            state.per_chunk_attended.push(k_all.shape()[0]);
            attended_recorded = true;
        }

        let ctx = attend(&params.cfg, &q, &k_all, &v_all, None)?;
        let attn_out = ops::add_bias(&ops::matmul(&ctx, &layer.attn.wo)?, &layer.attn.bo)?;
        x = ops::add(&x, &attn_out)?;
        let ln2 = ops::layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias)?;
        let h = ops::gelu(&ops::add_bias(&ops::matmul(&ln2, &layer.ffn_w1)?, &layer.ffn_b1)?);
        let ffn_out = ops::add_bias(&ops::matmul(&h, &layer.ffn_w2)?, &layer.ffn_b2)?;
        x = ops::add(&x, &ffn_out)?;

        // Cache maintenance: capture any sink frames this chunk contributes,
        // append the chunk block, evict beyond the retention window.
        if sinks_have < s {
            let take = (s - sinks_have).min(c);
            if take > 0 {
                let new_k = slice_rows(&k_cur, 0, take)?;
                let new_v = slice_rows(&v_cur, 0, take)?;
                cache.sink_k = Some(match &cache.sink_k {
                    Some(old) => ops::concat_rows(&[old, &new_k])?,
                    None => new_k,
                });
                cache.sink_v = Some(match &cache.sink_v {
                    Some(old) => ops::concat_rows(&[old, &new_v])?,
                    None => new_v,
                });
            }
        }
        cache.chunks.push_back(ChunkKV { start: state.frames_emitted, k: k_cur, v: v_cur });
        let keep = match state.geometry.left_context {
            LeftContext::Full => usize::MAX,
            LeftContext::Chunks(l) => l,
        };
        while cache.chunks.len() > keep {
            cache.chunks.pop_front();
        }
    }

    state.frames_emitted += c;
    state.chunks_pushed += 1;
    if c < cfrm {
        state.closed = true;
    }
    let now = state.cache_frames();
    if now > state.peak_cache_frames {
        state.peak_cache_frames = now;
    }
    Ok(x)
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = t.dims2()?;
    if start + len > r {
        return Err(Error::ShapeMismatch {
            op: "slice_rows",
            detail: format!("rows [{start}, {}) out of {r}", start + len),
        });
    }
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
}

/// Run the incremental path over a full frame matrix, splitting at the
/// spec's chunk boundaries, and concatenate outputs. Test/offline harness
/// for the push API.
pub fn encode_streaming<T: Scalar>(
    params: &EncoderParams<T>,
    frames: &Tensor<T>,
    spec: &MaskSpec,
) -> Result<Tensor<T>> {
    let (t, d) = frames.dims2()?;
    let mut state = encoder_open_stream::<T>(&params.cfg, spec.geometry());
    let mut outs = Vec::new();
    let c = spec.chunk_frames;
    let mut start = 0;
    while start < t {
        let len = c.min(t - start);
        let chunk = Tensor::new(vec![len, d], frames.data()[start * d..(start + len) * d].to_vec())?;
        outs.push(encoder_push_chunk(params, &mut state, &chunk)?);
        start += len;
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    ops::concat_rows(&refs)
}

// ---------------------------------------------------------------------------
// Traced (training) forward. Mirrors encode_offline op for op; the tape
// wraps the same kernels, so traced values match the raw path bitwise.

pub struct AttnLeaves {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub struct LayerLeaves {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub attn: AttnLeaves,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
}

/// Per-sublayer inverted-dropout masks for one traced forward; `None` runs
/// the deterministic inference graph.
pub struct DropoutMasks<T: Scalar> {
    pub per_layer: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<LayerLeaves> {
        self.layers
            .iter()
            .map(|l| LayerLeaves {
                ln1_gain: tape.param(l.ln1_gain.clone()),
                ln1_bias: tape.param(l.ln1_bias.clone()),
                attn: AttnLeaves {
                    wq: tape.param(l.attn.wq.clone()),
                    bq: tape.param(l.attn.bq.clone()),
                    wk: tape.param(l.attn.wk.clone()),
                    bk: tape.param(l.attn.bk.clone()),
                    wv: tape.param(l.attn.wv.clone()),
                    bv: tape.param(l.attn.bv.clone()),
                    wo: tape.param(l.attn.wo.clone()),
                    bo: tape.param(l.attn.bo.clone()),
                },
                ln2_gain: tape.param(l.ln2_gain.clone()),
                ln2_bias: tape.param(l.ln2_bias.clone()),
                ffn_w1: tape.param(l.ffn_w1.clone()),
                ffn_b1: tape.param(l.ffn_b1.clone()),
                ffn_w2: tape.param(l.ffn_w2.clone()),
                ffn_b2: tape.param(l.ffn_b2.clone()),
            })
            .collect()
    }
}

pub fn encode_offline_traced<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    leaves: &[LayerLeaves],
    frames: NodeId,
    spec: &MaskSpec,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<NodeId> {
    let (t, d) = tape.value(frames).dims2()?;
    if t != spec.total_frames {
        return Err(Error::ShapeMismatch {
            op: "encode_offline_traced",
            detail: format!("frames {t} vs spec total {}", spec.total_frames),
        });
    }
    let mask = build_mask(spec);
    let dh = cfg.d_head();
    let inv = T::from_f64(1.0 / (dh as f64).sqrt());
    let pos = tape.constant(positional_encoding(0, t, d));
    let mut x = tape.add(frames, pos)?;
    for (li, layer) in leaves.iter().enumerate() {
        let ln1 = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q0 = tape.matmul(ln1, layer.attn.wq)?;
        let q = tape.add_bias(q0, layer.attn.bq)?;
        let k0 = tape.matmul(ln1, layer.attn.wk)?;
        let k = tape.add_bias(k0, layer.attn.bk)?;
        let v0 = tape.matmul(ln1, layer.attn.wv)?;
        let v = tape.add_bias(v0, layer.attn.bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores0 = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores0, inv);
            let probs = tape.masked_softmax(scores, &mask)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let o0 = tape.matmul(ctx, layer.attn.wo)?;
        let mut attn_out = tape.add_bias(o0, layer.attn.bo)?;
        if let Some(dm) = dropout {
            let m = tape.constant(dm.per_layer[li].0.clone());
            attn_out = tape.mul(attn_out, m)?;
        }
        x = tape.add(x, attn_out)?;
        let ln2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let h0 = tape.matmul(ln2, layer.ffn_w1)?;
        let h1 = tape.add_bias(h0, layer.ffn_b1)?;
        let hg = tape.gelu(h1);
        let f0 = tape.matmul(hg, layer.ffn_w2)?;
        let mut ffn_out = tape.add_bias(f0, layer.ffn_b2)?;
        if let Some(dm) = dropout {
            let m = tape.constant(dm.per_layer[li].1.clone());
            ffn_out = tape.mul(ffn_out, m)?;
        }
        x = tape.add(x, ffn_out)?;
    }
    Ok(x)
}
