//! Connectionist temporal classification.
//!
//! Log posteriors are `T×C` matrices whose column 0 is the blank. The loss
//! runs the blank-interleaved forward recursion in log space; its gradient
//! comes from the matching backward recursion rather than from
//! differentiating through the lattice.

use crate::labels::{TokenId, BLANK};
use crate::numcore::kernels::{log_add, log_sum_exp};
use crate::numcore::{Graph, NumError, Tensor, Var};

/// Largest instance [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_LABELS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    #[error("log posteriors must be a T×C matrix with T ≥ 1 and C ≥ 2, got {0:?}")]
    Shape(Vec<usize>),
    #[error("target token {token} outside the {classes}-class posterior")]
    TokenOutOfRange { token: TokenId, classes: usize },
    #[error("target contains the blank token")]
    BlankInTarget,
    #[error("brute force limited to T ≤ {BRUTE_FORCE_MAX_FRAMES} and {BRUTE_FORCE_MAX_LABELS} labels, got T={frames}, labels={labels}")]
    TooLarge { frames: usize, labels: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcLossResult {
    /// `-ln P(target | posteriors)`; `+inf` when no alignment fits.
    pub neg_log_prob: f64,
    /// `T×C` log occupation probabilities: ln P(frame t emits class k | target).
    pub posterior: Tensor,
    /// d(neg_log_prob)/d(log posteriors); all zero when unachievable.
    pub grad: Tensor,
    pub achievable: bool,
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(frames: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != BLANK {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}

/// Minimum number of frames any alignment of `target` needs.
pub fn min_frames(target: &[TokenId]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

pub fn is_achievable(frames: usize, target: &[TokenId]) -> bool {
    frames >= min_frames(target)
}

fn check(log_post: &Tensor, target: &[TokenId]) -> Result<(usize, usize), CtcError> {
    let shape = log_post.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(CtcError::Shape(shape.to_vec()));
    }
    let (t, c) = (shape[0], shape[1]);
    for &tok in target {
        if tok == BLANK {
            return Err(CtcError::BlankInTarget);
        }
        if tok >= c {
            return Err(CtcError::TokenOutOfRange {
                token: tok,
                classes: c,
            });
        }
    }
    Ok((t, c))
}

fn extended(target: &[TokenId]) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &tok in target {
        ext.push(tok);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered directly from `s - 2`.
fn can_skip(ext: &[TokenId], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables: `alpha[t][s]` = ln P(prefix frames 0..=t end in state s).
fn forward(lp: &Tensor, ext: &[TokenId]) -> Vec<Vec<f64>> {
    let (t_len, l) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; l]; t_len];
    alpha[0][0] = lp.at(0, ext[0]);
    if l > 1 {
        alpha[0][1] = lp.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..l {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == f64::NEG_INFINITY {
                a
            } else {
                a + lp.at(t, ext[s])
            };
        }
    }
    alpha
}

/// Backward variables excluding the current frame:
/// `beta[t][s]` = ln P(frames t+1.. complete the target | state s at t).
fn backward(lp: &Tensor, ext: &[TokenId]) -> Vec<Vec<f64>> {
    let (t_len, l) = (lp.rows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; l]; t_len];
    beta[t_len - 1][l - 1] = 0.0;
    if l > 1 {
        beta[t_len - 1][l - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..l {
            let mut b = f64::NEG_INFINITY;
            for next in s..(s + 3).min(l) {
                let allowed = next == s || next == s + 1 || can_skip(ext, next);
                let bn = beta[t + 1][next];
                if allowed && bn != f64::NEG_INFINITY {
                    b = log_add(b, bn + lp.at(t + 1, ext[next]));
                }
            }
            beta[t][s] = b;
        }
    }
    beta
}

/// Exact CTC negative log-likelihood with its gradient.
pub fn ctc_loss(log_post: &Tensor, target: &[TokenId]) -> Result<CtcLossResult, CtcError> {
    let (t_len, c) = check(log_post, target)?;
    let neg_inf = Tensor::filled(&[t_len, c], f64::NEG_INFINITY);
    if !is_achievable(t_len, target) {
        return Ok(CtcLossResult {
            neg_log_prob: f64::INFINITY,
            posterior: neg_inf,
            grad: Tensor::zeros(&[t_len, c]),
            achievable: false,
        });
    }
    let ext = extended(target);
    let l = ext.len();
    let alpha = forward(log_post, &ext);
    let beta = backward(log_post, &ext);
    let mut log_p = alpha[t_len - 1][l - 1];
    if l > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][l - 2]);
    }
    if log_p == f64::NEG_INFINITY {
        // every alignment passes through a zero-probability frame
        return Ok(CtcLossResult {
            neg_log_prob: f64::INFINITY,
            posterior: neg_inf,
            grad: Tensor::zeros(&[t_len, c]),
            achievable: true,
        });
    }
    let mut posterior = neg_inf;
    let mut grad = Tensor::zeros(&[t_len, c]);
    for t in 0..t_len {
        for s in 0..l {
            let (a, b) = (alpha[t][s], beta[t][s]);
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let idx = t * c + ext[s];
            let cell = &mut posterior.data_mut()[idx];
            *cell = log_add(*cell, a + b - log_p);
        }
        for k in 0..c {
            let idx = t * c + k;
            grad.data_mut()[idx] = -posterior.data()[idx].exp();
        }
    }
    Ok(CtcLossResult {
        neg_log_prob: -log_p,
        posterior,
        grad,
        achievable: true,
    })
}

/// Enumerates every frame sequence and sums those that collapse to `target`.
/// Independent of the recursions in [`ctc_loss`]; used as its oracle.
pub fn ctc_brute_force(log_post: &Tensor, target: &[TokenId]) -> Result<f64, CtcError> {
    let (t_len, c) = check(log_post, target)?;
    if t_len > BRUTE_FORCE_MAX_FRAMES || c - 1 > BRUTE_FORCE_MAX_LABELS {
        return Err(CtcError::TooLarge {
            frames: t_len,
            labels: c - 1,
        });
    }
    let total = c.pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    for code in 0..total {
        let mut rest = code;
        for slot in path.iter_mut() {
            *slot = rest % c;
            rest /= c;
        }
        if collapse(&path) == target {
            terms.push(
                path.iter()
                    .enumerate()
                    .map(|(t, &k)| log_post.at(t, k))
                    .sum(),
            );
        }
    }
    Ok(-log_sum_exp(&terms))
}

/// Best-path decoding: per-frame argmax (lowest id on ties), then collapse.
pub fn ctc_greedy_decode(log_post: &Tensor) -> Vec<TokenId> {
    let path: Vec<TokenId> = (0..log_post.rows())
        .map(|t| {
            let row = log_post.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Adds the CTC loss of `target` under the `T×C` log posteriors held by
/// `log_post` to the graph. Returns `None` (and no node) when the target
/// cannot be aligned, so callers can drop the term.
pub fn ctc_loss_node(
    g: &mut Graph<'_>,
    log_post: Var,
    target: &[TokenId],
) -> Result<Option<Var>, CtcError> {
    let lp = g.tensor(log_post);
    let res = ctc_loss(&lp, target)?;
    if !res.neg_log_prob.is_finite() {
        return Ok(None);
    }
    let node = g.external(res.neg_log_prob, vec![log_post], vec![res.grad.into_data()])?;
    Ok(Some(node))
}
