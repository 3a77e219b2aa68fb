//! Word error rate and streaming compute accounting.

use crate::error::{Error, Result};
use crate::mask::{attended_count, MaskSpec};

/// Milliseconds of audio per encoder frame (front-end hop).
pub const HOP_MS: usize = 20;

pub fn frames_to_ms(frames: usize) -> usize {
    frames * HOP_MS
}

/// Corpus-pooled edit-distance counts: wer = (S + I + D) / n_ref_words.
/// May exceed 1 when hypotheses insert heavily.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref_words: usize,
    pub wer: f64,
}

fn normalize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Per-utterance minimum-edit alignment with unit costs. On cost ties the
/// backtrace prefers substitution over insertion over deletion, which pins
/// the count split deterministically.
fn align_counts(r: &[String], h: &[String]) -> (usize, usize, usize) {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i;
    }
    for j in 0..=m {
        d[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[at(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]);
            let ins = d[at(i, j - 1)] + 1;
            let del = d[at(i - 1, j)] + 1;
            d[at(i, j)] = sub.min(ins).min(del);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[at(i, j)];
        if i > 0 && j > 0 && cur == d[at(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                s += 1;
            }
            i -= 1;
            j -= 1;
        } else if j > 0 && cur == d[at(i, j - 1)] + 1 {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    (s, ins, del)
}

/// Corpus WER over aligned reference/hypothesis lists. Normalization is
/// lowercasing plus whitespace tokenization, nothing else.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::WerLengthMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    let (mut s, mut i, mut d, mut n_ref) = (0, 0, 0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let rw = normalize(r.as_ref());
        let hw = normalize(h.as_ref());
        let (us, ui, ud) = align_counts(&rw, &hw);
        s += us;
        i += ui;
        d += ud;
        n_ref += rw.len();
    }
    let errors = s + i + d;
    let wer = if n_ref > 0 {
        errors as f64 / n_ref as f64
    } else if errors == 0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(WerReport { substitutions: s, insertions: i, deletions: d, n_ref_words: n_ref, wer })
}

/// Static compute/memory accounting for one utterance under a mask.
/// `per_chunk_attended` are distinct key positions per chunk and match the
/// streaming encoder's measured counts exactly; `attended_query_key_pairs`
/// weights each chunk by its query rows (T^2 for single-chunk full
/// attention). Peak cache replicates the KV store's accounting, where sink
/// copies of retained frames count once per store.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub per_chunk_attended: Vec<usize>,
    pub total_attended_keys: usize,
    pub attended_query_key_pairs: usize,
    pub peak_cache_frames: usize,
    pub chunk_ms: usize,
}

pub fn cost_report(spec: &MaskSpec) -> Result<CostReport> {
    let c = spec.chunk_frames;
    let t = spec.total_frames;
    let n_chunks = spec.n_chunks();
    let mut per_chunk = Vec::with_capacity(n_chunks);
    let mut pairs = 0usize;
    let mut peak = 0usize;
    for n in 0..n_chunks {
        let keys = attended_count(spec, n)?;
        let rows = ((n + 1) * c).min(t) - n * c;
        per_chunk.push(keys);
        pairs += rows * keys;

        // Cache state after push n: sink frames captured so far, plus the
        // last `left` chunk blocks retained for the next chunk's window.
        let frames_after = ((n + 1) * c).min(t);
        let sinks = spec.sink_frames.min(frames_after);
        let keep = spec.left_context.resolve(c, t).min(n + 1);
        let oldest_kept = (n + 1 - keep) * c;
        let retained = frames_after - oldest_kept.min(frames_after);
        peak = peak.max(sinks + retained);
    }
    Ok(CostReport {
        total_attended_keys: per_chunk.iter().sum(),
        per_chunk_attended: per_chunk,
        attended_query_key_pairs: pairs,
        peak_cache_frames: peak,
        chunk_ms: frames_to_ms(c),
    })
}
