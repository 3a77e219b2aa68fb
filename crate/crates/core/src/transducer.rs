//! Transducer head: stateless predictor (embedding plus one causal 1-D
//! convolution), additive joiner, and the exact sequence negative
//! log-likelihood with analytic gradients, cross-checked by a brute-force
//! alignment enumerator.

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{ops, Scalar, Tensor};

/// Dense token inventory. Id 0 is the blank label; it never appears in
/// reference transcripts or predictor inputs.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    units: Vec<String>,
}

pub const BLANK: usize = 0;

impl Vocab {
    /// Build from the non-blank units; blank is prepended at id 0.
    pub fn from_units(units: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut all = vec!["<blk>".to_string()];
        for u in units {
            if u.is_empty() {
                return Err(Error::Config("empty vocab unit".into()));
            }
            if all.contains(&u) {
                return Err(Error::Config(format!("duplicate vocab unit '{u}'")));
            }
            all.push(u);
        }
        Ok(Vocab { units: all })
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit)
    }

    /// Whitespace-tokenized encoding; the caller normalizes case upstream.
    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Config(format!("unknown token '{w}'"))))
            .collect()
    }

    pub fn decode_words(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == BLANK {
                return Err(Error::Config("blank id in transcript".into()));
            }
            words.push(
                self.token(id)
                    .ok_or_else(|| Error::Config(format!("token id {id} out of vocab")))?,
            );
        }
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    /// Convolution width: output row u reads tokens max(0, u-k)..u-1.
    pub kernel: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { embed_dim: 32, kernel: 2 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::Config("predictor kernel must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinerConfig {
    pub joint_dim: usize,
}

impl Default for JoinerConfig {
    fn default() -> Self {
        JoinerConfig { joint_dim: 64 }
    }
}

#[derive(Clone)]
pub struct PredictorParams<T: Scalar> {
    /// [V x embed_dim]; row 0 (blank) exists but is never gathered.
    pub embed: Tensor<T>,
    /// [kernel x embed_dim x embed_dim]
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
}

#[derive(Clone)]
pub struct JoinerParams<T: Scalar> {
    pub enc_proj: Tensor<T>,
    pub pred_proj: Tensor<T>,
    pub joint_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

fn check_no_blank(tokens: &[usize]) -> Result<()> {
    if let Some(pos) = tokens.iter().position(|&t| t == BLANK) {
        return Err(Error::BlankInInput { pos });
    }
    Ok(())
}

/// Embedding rows for lattice positions 0..=U: position 0 is the all-zero
/// start state, position u >= 1 is the embedding of token u-1.
fn embed_with_start<T: Scalar>(params: &PredictorParams<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let e = params.embed.shape()[1];
    let start = Tensor::zeros(vec![1, e]);
    if tokens.is_empty() {
        return Ok(start);
    }
    let emb = ops::embedding(&params.embed, tokens)?;
    ops::concat_rows(&[&start, &emb])
}

/// All predictor rows for a token sequence: [U+1 x embed_dim]. Row u is a
/// function of exactly tokens max(0, u-k)..u-1.
pub fn predictor_forward<T: Scalar>(
    params: &PredictorParams<T>,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    check_no_blank(tokens)?;
    let emb = embed_with_start(params, tokens)?;
    let conv = ops::conv1d_causal(&emb, &params.conv_w)?;
    ops::add_bias(&conv, &params.conv_b)
}

/// The single predictor row for the position after `context`, which must be
/// the last min(u, k) emitted tokens. Recomputes the same convolution taps
/// the full forward uses, so the row equals `predictor_forward` row u
/// bitwise.
pub fn predictor_step<T: Scalar>(
    params: &PredictorParams<T>,
    context: &[usize],
) -> Result<Tensor<T>> {
    check_no_blank(context)?;
    let k = params.conv_w.shape()[0];
    let e = params.embed.shape()[1];
    debug_assert!(context.len() <= k, "context longer than kernel width");
    let window = if context.len() < k {
        // Near the sequence start the zero start-state row is still in view.
        let start = Tensor::zeros(vec![1, e]);
        if context.is_empty() {
            start
        } else {
            ops::concat_rows(&[&start, &ops::embedding(&params.embed, context)?])?
        }
    } else {
        ops::embedding(&params.embed, context)?
    };
    let conv = ops::conv1d_causal(&window, &params.conv_w)?;
    let last = window.shape()[0] - 1;
    let mut row = conv.row(last).to_vec();
    for (r, &b) in row.iter_mut().zip(params.conv_b.data()) {
        *r = *r + b;
    }
    Tensor::new(vec![1, e], row)
}

/// Context slice for `predictor_step` given the full emitted history.
pub fn step_context(tokens: &[usize], kernel: usize) -> &[usize] {
    &tokens[tokens.len().saturating_sub(kernel)..]
}

/// Joint logits over the full decode lattice: [T x U+1 x V].
/// logits[t][u] = out_w . tanh(enc[t] . enc_proj + pred[u] . pred_proj
/// + joint_b) + out_b.
pub fn joiner<T: Scalar>(
    params: &JoinerParams<T>,
    enc: &Tensor<T>,
    pred: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (t_len, _) = enc.dims2()?;
    let (u1, _) = pred.dims2()?;
    let a = ops::matmul(enc, &params.enc_proj)?;
    let b = ops::matmul(pred, &params.pred_proj)?;
    let lat = ops::add_bias(&ops::lattice_add(&a, &b)?, &params.joint_b)?;
    let h = ops::tanh(&lat);
    let logits = ops::add_bias(&ops::matmul(&h, &params.out_w)?, &params.out_b)?;
    let v = logits.shape()[1];
    logits.reshape(vec![t_len, u1, v])
}

/// One lattice entry from single encoder and predictor rows; equals the
/// corresponding `joiner` entry bitwise.
pub fn joint_step<T: Scalar>(
    params: &JoinerParams<T>,
    enc_row: &Tensor<T>,
    pred_row: &Tensor<T>,
) -> Result<Vec<T>> {
    let a = ops::matmul(enc_row, &params.enc_proj)?;
    let b = ops::matmul(pred_row, &params.pred_proj)?;
    let lat = ops::add_bias(&ops::add(&a, &b)?, &params.joint_b)?;
    let h = ops::tanh(&lat);
    let logits = ops::add_bias(&ops::matmul(&h, &params.out_w)?, &params.out_b)?;
    Ok(logits.data().to_vec())
}

/// Stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut max = T::neg_infinity();
    for &s in row {
        if s > max {
            max = s;
        }
    }
    let mut denom = T::zero();
    for &s in row {
        denom = denom + (s - max).exp();
    }
    let lse = max + denom.ln();
    row.iter().map(|&s| s - lse).collect()
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let v = *logits.shape().last().expect("log_softmax on 0-d");
    let mut data = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(v) {
        data.extend(log_softmax_row(row));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
}

pub fn logaddexp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = if a > b { a } else { b };
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_lattice_shape<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> Result<(usize, usize, usize)> {
    if logits.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            op: "rnnt_loss",
            detail: format!("expected [T, U+1, V] logits, got {:?}", logits.shape()),
        });
    }
    let (t_len, u1, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if u1 != target.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "rnnt_loss",
            detail: format!("lattice U+1 = {u1} vs target length {}", target.len()),
        });
    }
    check_no_blank(target)?;
    if let Some(&bad) = target.iter().find(|&&y| y >= v) {
        return Err(Error::ShapeMismatch {
            op: "rnnt_loss",
            detail: format!("target id {bad} out of vocab {v}"),
        });
    }
    Ok((t_len, u1, v))
}

/// Exact transducer negative log-likelihood and its gradient with respect
/// to the logits.
///
/// Forward values follow the standard lattice recursion
/// `alpha(t,u) = logaddexp(alpha(t-1,u) + lp(blank|t-1,u),
/// alpha(t,u-1) + lp(y_u|t,u-1))` with
/// `nll = -(alpha(T-1,U) + lp(blank|T-1,U))`. The gradient combines the
/// matching backward recursion with the softmax Jacobian: at each node,
/// `d nll / d logit_k = p_k * occupancy - emission_posterior_k`, which sums
/// to zero over the vocabulary at every reachable node.
pub fn rnnt_loss<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> Result<(T, Tensor<T>)> {
    let (t_len, u1, v) = check_lattice_shape(logits, target)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite { context: "rnnt_loss logits".into() });
    }
    let lp = log_softmax(logits);
    let at = |t: usize, u: usize, k: usize| lp.data()[(t * u1 + u) * v + k];
    let ninf = T::neg_infinity();

    let mut alpha = vec![ninf; t_len * u1];
    alpha[0] = T::zero();
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank =
                if t > 0 { alpha[(t - 1) * u1 + u] + at(t - 1, u, BLANK) } else { ninf };
            let from_label =
                if u > 0 { alpha[t * u1 + u - 1] + at(t, u - 1, target[u - 1]) } else { ninf };
            alpha[t * u1 + u] = logaddexp(from_blank, from_label);
        }
    }
    let log_p = alpha[(t_len - 1) * u1 + (u1 - 1)] + at(t_len - 1, u1 - 1, BLANK);
    let nll = -log_p;

    // beta(t,u): log-probability of completing the target from node (t,u),
    // including the final blank exit at (T-1,U).
    let mut beta = vec![ninf; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            let via_blank = if t + 1 < t_len {
                at(t, u, BLANK) + beta[(t + 1) * u1 + u]
            } else if u == u1 - 1 {
                at(t, u, BLANK)
            } else {
                ninf
            };
            let via_label = if u + 1 < u1 {
                at(t, u, target[u]) + beta[t * u1 + u + 1]
            } else {
                ninf
            };
            beta[t * u1 + u] = logaddexp(via_blank, via_label);
        }
    }

    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            if a == ninf {
                continue;
            }
            let occupancy = (a + beta[t * u1 + u] - log_p).exp();
            if occupancy == T::zero() {
                continue;
            }
            let e_blank = if t + 1 < t_len {
                (a + at(t, u, BLANK) + beta[(t + 1) * u1 + u] - log_p).exp()
            } else if u == u1 - 1 {
                (a + at(t, u, BLANK) - log_p).exp()
            } else {
                T::zero()
            };
            let e_label = if u + 1 < u1 {
                (a + at(t, u, target[u]) + beta[t * u1 + u + 1] - log_p).exp()
            } else {
                T::zero()
            };
            let out = &mut grad.data_mut()[(t * u1 + u) * v..(t * u1 + u + 1) * v];
            for (k, g) in out.iter_mut().enumerate() {
                let p = at(t, u, k).exp();
                let mut val = p * occupancy;
                if k == BLANK {
                    val = val - e_blank;
                }
                if u + 1 < u1 && k == target[u] {
                    val = val - e_label;
                }
                *g = val;
            }
        }
    }
    Ok((nll, grad))
}

/// Brute-force reference for [`rnnt_loss`]: log-sum-exp over every complete
/// monotonic alignment. Returns the nll and the number of blank/label
/// interleavings enumerated (valid or not), which is C(T+U, U).
pub fn rnnt_loss_bruteforce<T: Scalar>(
    logits: &Tensor<T>,
    target: &[usize],
) -> Result<(T, usize)> {
    let (t_len, u1, v) = check_lattice_shape(logits, target)?;
    let u_len = u1 - 1;
    if t_len > 8 || u_len > 6 {
        return Err(Error::BruteForceTooLarge { t: t_len, u: u_len });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite { context: "rnnt_loss_bruteforce logits".into() });
    }
    let lp = log_softmax(logits);
    let at = |t: usize, u: usize, k: usize| lp.data()[(t * u1 + u) * v + k];

    // Walk all interleavings of t_len blank moves and u_len label moves;
    // a label move at t == t_len falls off the time axis and invalidates
    // the path.
    let mut path_lps: Vec<T> = Vec::new();
    let mut enumerated = 0usize;
    let total_moves = t_len + u_len;
    fn walk<T: Scalar>(
        moves_left: usize,
        labels_left: usize,
        t: usize,
        u: usize,
        acc: T,
        t_len: usize,
        target: &[usize],
        at: &dyn Fn(usize, usize, usize) -> T,
        out: &mut Vec<T>,
        enumerated: &mut usize,
    ) {
        if moves_left == 0 {
            *enumerated += 1;
            out.push(acc);
            return;
        }
        let blanks_left = moves_left - labels_left;
        if blanks_left > 0 {
            walk(
                moves_left - 1,
                labels_left,
                t + 1,
                u,
                acc + at(t, u, BLANK),
                t_len,
                target,
                at,
                out,
                enumerated,
            );
        }
        if labels_left > 0 {
            if t == t_len {
                // Count the dead subtree: every interleaving of the
                // remaining moves is enumerated but contributes nothing.
                *enumerated += binomial(moves_left - 1, labels_left - 1);
            } else {
                walk(
                    moves_left - 1,
                    labels_left - 1,
                    t,
                    u + 1,
                    acc + at(t, u, target[u]),
                    t_len,
                    target,
                    at,
                    out,
                    enumerated,
                );
            }
        }
    }
    walk(
        total_moves,
        u_len,
        0,
        0,
        T::zero(),
        t_len,
        target,
        &at,
        &mut path_lps,
        &mut enumerated,
    );
    debug_assert_eq!(enumerated, binomial(total_moves, u_len));

    let mut max = T::neg_infinity();
    for &x in &path_lps {
        if x > max {
            max = x;
        }
    }
    let mut denom = T::zero();
    for &x in &path_lps {
        denom = denom + (x - max).exp();
    }
    Ok((-(max + denom.ln()), enumerated))
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

// ---------------------------------------------------------------------------
// Traced variants for training. Same kernels as the raw path.

pub struct PredictorLeaves {
    pub embed: NodeId,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
}

pub struct JoinerLeaves {
    pub enc_proj: NodeId,
    pub pred_proj: NodeId,
    pub joint_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn leaves(&self, tape: &mut Tape<T>) -> PredictorLeaves {
        PredictorLeaves {
            embed: tape.param(self.embed.clone()),
            conv_w: tape.param(self.conv_w.clone()),
            conv_b: tape.param(self.conv_b.clone()),
        }
    }
}

impl<T: Scalar> JoinerParams<T> {
    pub fn leaves(&self, tape: &mut Tape<T>) -> JoinerLeaves {
        JoinerLeaves {
            enc_proj: tape.param(self.enc_proj.clone()),
            pred_proj: tape.param(self.pred_proj.clone()),
            joint_b: tape.param(self.joint_b.clone()),
            out_w: tape.param(self.out_w.clone()),
            out_b: tape.param(self.out_b.clone()),
        }
    }
}

pub fn predictor_forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    leaves: &PredictorLeaves,
    embed_dim: usize,
    tokens: &[usize],
) -> Result<NodeId> {
    check_no_blank(tokens)?;
    let start = tape.constant(Tensor::zeros(vec![1, embed_dim]));
    let emb = if tokens.is_empty() {
        start
    } else {
        let rows = tape.embedding(leaves.embed, tokens)?;
        tape.concat_rows(&[start, rows])?
    };
    let conv = tape.conv1d_causal(emb, leaves.conv_w)?;
    tape.add_bias(conv, leaves.conv_b)
}

/// Traced joiner over the full lattice; output is [T*(U+1) x V], reshaped
/// by the caller when a 3-D view is needed.
pub fn joiner_traced<T: Scalar>(
    tape: &mut Tape<T>,
    leaves: &JoinerLeaves,
    enc: NodeId,
    pred: NodeId,
) -> Result<NodeId> {
    let a = tape.matmul(enc, leaves.enc_proj)?;
    let b = tape.matmul(pred, leaves.pred_proj)?;
    let lat0 = tape.lattice_add(a, b)?;
    let lat = tape.add_bias(lat0, leaves.joint_b)?;
    let h = tape.tanh(lat);
    let o = tape.matmul(h, leaves.out_w)?;
    tape.add_bias(o, leaves.out_b)
}
