//! Chunk/left-context/sink attention geometry.
//!
//! A [`MaskSpec`] fully describes one attention pattern: frames are grouped
//! into chunks of `chunk_frames`, every frame attends bidirectionally within
//! its own chunk, backwards over up to `left_context` previous chunks, and to
//! the first `sink_frames` frames of the utterance. [`allowed`] is the
//! pure set-membership definition; every mask builder is tested against it.

use crate::error::{Error, Result};
use rand::Rng;

/// How many previous chunks stay attendable (and cached) during streaming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftContext {
    Chunks(usize),
    Full,
}

impl LeftContext {
    /// Concrete chunk count, saturated to cover all of `total_frames`.
    pub fn resolve(self, chunk_frames: usize, total_frames: usize) -> usize {
        match self {
            LeftContext::Chunks(l) => l,
            LeftContext::Full => total_frames.div_ceil(chunk_frames),
        }
    }
}

/// Chunk size, left-context budget, and sink-frame count: the complete
/// description of one attention geometry, independent of utterance length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MaskGeometry {
    pub chunk_frames: usize,
    pub left_context: LeftContext,
    pub sink_frames: usize,
}

impl Default for MaskGeometry {
    fn default() -> Self {
        MaskGeometry { chunk_frames: 16, left_context: LeftContext::Chunks(1), sink_frames: 0 }
    }
}

impl MaskGeometry {
    pub fn new(chunk_frames: usize, left_context: LeftContext, sink_frames: usize) -> Result<Self> {
        if chunk_frames == 0 {
            return Err(Error::InvalidMaskSpec("chunk_frames must be >= 1".into()));
        }
        Ok(MaskGeometry { chunk_frames, left_context, sink_frames })
    }

    /// Full attention: one chunk spanning the whole utterance.
    pub fn full_attention(total_frames: usize) -> Self {
        MaskGeometry {
            chunk_frames: total_frames.max(1),
            left_context: LeftContext::Full,
            sink_frames: 0,
        }
    }

    /// Bind the geometry to a concrete utterance length.
    pub fn with_total(self, total_frames: usize) -> Result<MaskSpec> {
        MaskSpec::new(self.chunk_frames, self.left_context, self.sink_frames, total_frames)
    }
}

/// A [`MaskGeometry`] bound to a concrete utterance length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub chunk_frames: usize,
    pub left_context: LeftContext,
    pub sink_frames: usize,
    pub total_frames: usize,
}

impl MaskSpec {
    pub fn new(
        chunk_frames: usize,
        left_context: LeftContext,
        sink_frames: usize,
        total_frames: usize,
    ) -> Result<Self> {
        if chunk_frames == 0 {
            return Err(Error::InvalidMaskSpec("chunk_frames must be >= 1".into()));
        }
        if total_frames == 0 {
            return Err(Error::InvalidMaskSpec("total_frames must be >= 1".into()));
        }
        Ok(MaskSpec { chunk_frames, left_context, sink_frames, total_frames })
    }

    pub fn geometry(&self) -> MaskGeometry {
        MaskGeometry {
            chunk_frames: self.chunk_frames,
            left_context: self.left_context,
            sink_frames: self.sink_frames,
        }
    }

    /// Number of chunks in the utterance; the last one may be partial.
    pub fn n_chunks(&self) -> usize {
        self.total_frames.div_ceil(self.chunk_frames)
    }

    /// Left-context budget as a concrete chunk count.
    pub fn left_chunks(&self) -> usize {
        self.left_context.resolve(self.chunk_frames, self.total_frames)
    }

    /// Frames of chunk `n` as a half-open global range.
    pub fn chunk_range(&self, n: usize) -> std::ops::Range<usize> {
        let start = n * self.chunk_frames;
        let end = ((n + 1) * self.chunk_frames).min(self.total_frames);
        start..end
    }
}

/// Chunk ordinal of frame `i`: floor(i / C).
pub fn chunk_index(i: usize, chunk_frames: usize) -> usize {
    i / chunk_frames
}

/// Whether query frame `i` may attend key frame `j` under `spec`.
///
/// This is the oracle definition: same chunk, one of the last L chunks,
/// or a sink frame (j < S) in the query's chunk or earlier. The chunk bound
/// on sinks keeps the pattern streamable: when S spills past the current
/// chunk's end, the spilled frames do not exist yet at the time the chunk is
/// processed, so no query may depend on them. Sink frames are ordinary
/// frames as queries.
pub fn allowed(spec: &MaskSpec, i: usize, j: usize) -> bool {
    debug_assert!(i < spec.total_frames && j < spec.total_frames);
    let ci = chunk_index(i, spec.chunk_frames);
    let cj = chunk_index(j, spec.chunk_frames);
    if cj == ci {
        return true;
    }
    let l = spec.left_chunks();
    if cj < ci && ci - cj <= l {
        return true;
    }
    j < spec.sink_frames && cj < ci
}

/// T×T allowance matrix; entry (i, j) = true means query frame i may attend
/// key frame j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    t: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn all_true(t: usize) -> Self {
        BoolMask { t, bits: vec![true; t * t] }
    }

    pub fn from_fn(t: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                bits[i * t + j] = f(i, j);
            }
        }
        BoolMask { t, bits }
    }

    pub fn size(&self) -> usize {
        self.t
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.t + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.t..(i + 1) * self.t]
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

/// Materialize the T×T mask for `spec`. Equals [`allowed`] elementwise;
/// the final partial chunk is a smaller chunk with full within-chunk attention.
pub fn build_mask(spec: &MaskSpec) -> BoolMask {
    let t = spec.total_frames;
    let c = spec.chunk_frames;
    let l = spec.left_chunks();
    let s = spec.sink_frames;
    let mut bits = vec![false; t * t];
    for i in 0..t {
        let ci = i / c;
        let lo = ci.saturating_sub(l) * c;
        let hi = ((ci + 1) * c).min(t);
        let row = &mut bits[i * t..(i + 1) * t];
        for slot in row[lo..hi].iter_mut() {
            *slot = true;
        }
        // Sinks reach at most to the end of the query's own chunk: frames
        // past it have not been produced when this chunk is processed.
        let sink_hi = s.min(hi);
        for slot in row[..sink_hi].iter_mut() {
            *slot = true;
        }
    }
    BoolMask { t, bits }
}

/// Number of distinct key positions attendable from queries in chunk `n`:
/// |{j : n-L <= chunk(j) <= n} ∪ {j < S, chunk(j) <= n}|.
pub fn attended_count(spec: &MaskSpec, n: usize) -> Result<usize> {
    if n >= spec.n_chunks() {
        return Err(Error::ChunkOutOfRange { n, total_frames: spec.total_frames });
    }
    let c = spec.chunk_frames;
    let window_lo = n.saturating_sub(spec.left_chunks()) * c;
    let window_hi = ((n + 1) * c).min(spec.total_frames);
    let window = window_hi - window_lo;
    // Sinks visible from chunk n stop at its end (nothing later exists yet).
    let sinks = spec.sink_frames.min(window_hi);
    // Sink region overlaps the chunk window when S extends past its start.
    let overlap = sinks.saturating_sub(window_lo).min(window);
    Ok(window + sinks - overlap)
}

/// One uniform draw from `choices`; one draw per training batch.
pub fn sample_chunk_size(rng: &mut impl Rng, choices: &[usize]) -> Result<usize> {
    if choices.is_empty() {
        return Err(Error::Empty("chunk size choices"));
    }
    let idx = rng.gen_range(0..choices.len());
    Ok(choices[idx])
}

/// Chunk sizes used throughout training unless configured otherwise.
pub const DEFAULT_CHUNK_CHOICES: [usize; 4] = [16, 32, 64, 128];
