//! Training objectives over tape variables. Every loss returns a `1 x 1`
//! node; call [`Tape::backward`] on it for gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::signal::PseudoLabel;

/// Probability clamp used by [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// `ceil(len / 16)`, at least 1.
pub fn default_k(len: usize) -> usize {
    len.div_ceil(16).max(1)
}

/// Indices of the `k` largest values; ties resolved towards the lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

fn topk_term(tape: &mut Tape, logits_per_video: &[Var], k: usize, abnormal: bool) -> Result<Var> {
    let which = if abnormal { "abnormal" } else { "normal" };
    if logits_per_video.is_empty() {
        return Err(Error::invalid(format!("top-k {which} term needs at least one video")));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut per_video = Vec::with_capacity(logits_per_video.len());
    for (i, &logits) in logits_per_video.iter().enumerate() {
        let len = tape.value(logits).len();
        if k > len {
            return Err(Error::invalid(format!("k = {k} exceeds length {len} of {which} video {i}")));
        }
        let idx = topk_indices(tape.value(logits), k);
        let picked = tape.gather(logits, &idx)?;
        let signed = if abnormal { picked } else { tape.scale(picked, -1.0) };
        let ls = tape.log_sigmoid(signed);
        per_video.push(tape.sum(ls));
    }
    let stacked = tape.concat_rows(&per_video)?;
    let total = tape.sum(stacked);
    let n = logits_per_video.len() as f64;
    Ok(tape.scale(total, -1.0 / (n * k as f64)))
}

/// `-(1/N) Σ_videos (1/k) Σ_{top-k logits} ln σ(x)` over abnormal videos.
pub fn topk_abnormal_term(tape: &mut Tape, logits_per_video: &[Var], k: usize) -> Result<Var> {
    topk_term(tape, logits_per_video, k, true)
}

/// `-(1/N) Σ_videos (1/k) Σ_{top-k logits} ln(1 - σ(x))` over normal videos.
pub fn topk_normal_term(tape: &mut Tape, logits_per_video: &[Var], k: usize) -> Result<Var> {
    topk_term(tape, logits_per_video, k, false)
}

/// Mean binary cross-entropy of probabilities against pseudo-labels,
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(tape: &mut Tape, probs: Var, targets: &PseudoLabel) -> Result<Var> {
    tape.bce(probs, targets.targets(), BCE_EPS)
}

/// `topk_normal_term(normal_logits, k) + bce(abn_probs, pseudo)`.
pub fn tgs_loss(
    tape: &mut Tape,
    abn_probs: Var,
    pseudo: &PseudoLabel,
    normal_logits: &[Var],
    k: usize,
) -> Result<Var> {
    let norm = topk_normal_term(tape, normal_logits, k)?;
    let fit = bce(tape, abn_probs, pseudo)?;
    tape.add(norm, fit)
}

fn flat_neighbours(tape: &mut Tape, scores: Var) -> Result<(Var, Var)> {
    let (r, c) = tape.dims(scores);
    let len = r * c;
    if len < 2 {
        return Err(Error::invalid("smoothness needs at least two snippets"));
    }
    if r == 1 {
        Ok((tape.slice_cols(scores, 0, c - 1)?, tape.slice_cols(scores, 1, c - 1)?))
    } else if c == 1 {
        Ok((tape.slice_rows(scores, 0, r - 1)?, tape.slice_rows(scores, 1, r - 1)?))
    } else {
        Err(Error::shape("smoothness", format!("expected a vector, got {r}x{c}")))
    }
}

/// `Σ_t (s_t - s_{t+1})²`, unweighted.
pub fn smoothness(tape: &mut Tape, scores: Var) -> Result<Var> {
    let (a, b) = flat_neighbours(tape, scores)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// `Σ_t s_t`, unweighted.
pub fn sparsity(tape: &mut Tape, scores: Var) -> Var {
    tape.sum(scores)
}

/// Coefficients applied to [`smoothness`] and [`sparsity`] during MIL training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerWeights {
    pub smoothness: f64,
    pub sparsity: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            smoothness: 8e-4,
            sparsity: 8e-3,
        }
    }
}
