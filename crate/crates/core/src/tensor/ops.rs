//! Raw forward kernels. The tape wraps these for gradients; streaming
//! inference calls them directly. Both paths must produce identical numbers,
//! so every kernel accumulates over its reduction axis in increasing index
//! order regardless of how the operands were sliced or gathered.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::mask::BoolMask;

/// Additive penalty for disallowed attention scores. Large enough that the
/// shifted exponential underflows to exactly 0.0 in both f32 and f64, small
/// enough that -inf arithmetic (and NaN from inf - inf) never appears.
pub const MASK_PENALTY: f64 = -1e9;

/// Standard matrix product: a[m×k] · b[k×n].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner extents {ka} vs {kb}"),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data()[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data()[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// a[m×k] · b[n×k]ᵀ, i.e. rows of `b` are the keys.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("inner extents {ka} vs {kb}"),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data()[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &b.data()[j * kb..(j + 1) * kb];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// a[k×m]ᵀ · b[k×n]; used by matmul gradients.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ka, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            detail: format!("inner extents {ka} vs {kb}"),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for k in 0..ka {
        let arow = &a.data()[k * m..(k + 1) * m];
        let brow = &b.data()[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bkj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

/// Broadcast-add `bias[c]` over the last axis of `a[..., c]`.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *a.shape().last().ok_or(Error::ShapeMismatch {
        op: "add_bias",
        detail: "0-d input".into(),
    })?;
    if bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            detail: format!("bias {:?} vs last axis {c}", bias.shape()),
        });
    }
    let mut data = a.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        for (x, &b) in row.iter_mut().zip(bias.data()) {
            *x = *x + b;
        }
    }
    Tensor::new(a.shape().to_vec(), data)
}

pub fn tanh<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.tanh())
}

/// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub fn ln<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.ln())
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &x in a.data() {
        acc = acc + x;
    }
    Tensor::scalar(acc)
}

/// Softmax of one score row over its allowed positions. Disallowed positions
/// receive the additive [`MASK_PENALTY`] before normalization, which drives
/// their exponential to exactly 0.0; they are then explicitly zeroed so the
/// postcondition holds even if a score were extreme enough to survive.
pub fn softmax_row_masked<T: Scalar>(scores: &[T], allow: &[bool], row: usize) -> Result<Vec<T>> {
    assert_eq!(scores.len(), allow.len(), "softmax row/mask length");
    if !allow.iter().any(|&a| a) {
        return Err(Error::FullyMaskedRow { row });
    }
    let penalty = T::from_f64(MASK_PENALTY);
    let mut max = T::neg_infinity();
    for (&s, &a) in scores.iter().zip(allow) {
        let adj = if a { s } else { s + penalty };
        if adj > max {
            max = adj;
        }
    }
    let mut out = Vec::with_capacity(scores.len());
    let mut denom = T::zero();
    for (&s, &a) in scores.iter().zip(allow) {
        let adj = if a { s } else { s + penalty };
        let e = (adj - max).exp();
        denom = denom + e;
        out.push(e);
    }
    for (p, &a) in out.iter_mut().zip(allow) {
        *p = if a { *p / denom } else { T::zero() };
    }
    Ok(out)
}

/// Softmax over the last axis with no mask.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *scores.shape().last().expect("softmax on 0-d");
    let allow = vec![true; c];
    let mut data = Vec::with_capacity(scores.numel());
    for (r, row) in scores.data().chunks_exact(c).enumerate() {
        data.extend(softmax_row_masked(row, &allow, r)?);
    }
    Tensor::new(scores.shape().to_vec(), data)
}

/// Masked softmax over the last axis of `scores[..., T, T]`. Row i of each
/// trailing T×T matrix is normalized over `mask.row(i)`.
pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, mask: &BoolMask) -> Result<Tensor<T>> {
    let nd = scores.ndim();
    if nd < 2 {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            detail: format!("need >= 2 dims, got {:?}", scores.shape()),
        });
    }
    let t = mask.size();
    let rows = scores.shape()[nd - 2];
    let cols = scores.shape()[nd - 1];
    if rows != t || cols != t {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            detail: format!("trailing dims {rows}x{cols} vs mask {t}x{t}"),
        });
    }
    let mut data = Vec::with_capacity(scores.numel());
    for (r, row) in scores.data().chunks_exact(t).enumerate() {
        data.extend(softmax_row_masked(row, mask.row(r % t), r % t)?);
    }
    Tensor::new(scores.shape().to_vec(), data)
}

/// Per-vector normalization over the last axis d: zero mean, unit variance
/// (biased), epsilon 1e-5 inside the root, then affine gain/bias.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().expect("layer_norm on 0-d");
    if d < 2 {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("last axis must be >= 2, got {d}"),
        });
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("gain {:?} bias {:?} vs d {d}", gain.shape(), bias.shape()),
        });
    }
    let eps = T::from_f64(1e-5);
    let dn = T::from_f64(d as f64);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        for (j, &v) in row.iter().enumerate() {
            data.push((v - mean) * inv * gain.data()[j] + bias.data()[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Strictly causal 1-D convolution: out[t] depends on x[t-k+1..=t], with
/// out-of-range taps reading zero. Kernel layout is [k × d_in × d_out] and
/// tap k-1 multiplies the current frame.
pub fn conv1d_causal<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (t_len, d_in) = x.dims2()?;
    let kshape = kernel.shape();
    if kshape.len() != 3 || kshape[1] != d_in {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("kernel {:?} vs input d_in {d_in}", kshape),
        });
    }
    let (k, d_out) = (kshape[0], kshape[2]);
    let mut out = vec![T::zero(); t_len * d_out];
    for t in 0..t_len {
        let orow = &mut out[t * d_out..(t + 1) * d_out];
        for tap in 0..k {
            let src = t as isize - (k as isize - 1) + tap as isize;
            if src < 0 {
                continue;
            }
            let xrow = &x.data()[src as usize * d_in..(src as usize + 1) * d_in];
            let kslab = &kernel.data()[tap * d_in * d_out..(tap + 1) * d_in * d_out];
            for (i, &xv) in xrow.iter().enumerate() {
                let krow = &kslab[i * d_out..(i + 1) * d_out];
                for (o, &w) in orow.iter_mut().zip(krow) {
                    *o = *o + xv * w;
                }
            }
        }
    }
    Tensor::new(vec![t_len, d_out], out)
}

/// Gather rows of `table[v×e]` at `ids`.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, e) = table.dims2()?;
    let mut data = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                detail: format!("id {id} out of vocab {v}"),
            });
        }
        data.extend_from_slice(&table.data()[id * e..(id + 1) * e]);
    }
    Tensor::new(vec![ids.len(), e], data)
}

/// Outer sum over the time and label axes: out[t·U1+u] = a[t] + b[u].
/// This is the transducer lattice combination of encoder and predictor rows.
pub fn lattice_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (t_len, ha) = a.dims2()?;
    let (u_len, hb) = b.dims2()?;
    if ha != hb {
        return Err(Error::ShapeMismatch {
            op: "lattice_add",
            detail: format!("widths {ha} vs {hb}"),
        });
    }
    let mut data = Vec::with_capacity(t_len * u_len * ha);
    for t in 0..t_len {
        let arow = &a.data()[t * ha..(t + 1) * ha];
        for u in 0..u_len {
            let brow = &b.data()[u * ha..(u + 1) * ha];
            data.extend(arow.iter().zip(brow).map(|(&x, &y)| x + y));
        }
    }
    Tensor::new(vec![t_len * u_len, ha], data)
}

/// Columns [start, start+len) of a 2-D tensor.
pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if start + len > c {
        return Err(Error::ShapeMismatch {
            op: "slice_cols",
            detail: format!("cols [{start}, {}) out of {c}", start + len),
        });
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&a.data()[i * c + start..i * c + start + len]);
    }
    Tensor::new(vec![r, len], data)
}

/// Concatenate 2-D tensors with equal row counts along the column axis.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Empty("concat_cols parts"));
    }
    let r = parts[0].dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pr != r {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {r} vs {pr}"),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![r, total], data)
}

/// Concatenate 2-D tensors with equal column counts along the row axis.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Empty("concat_rows parts"));
    }
    let c = parts[0].dims2()?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("col counts {c} vs {pc}"),
            });
        }
        rows += pr;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, c], data)
}
