use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{resample_to_fixed, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `B` videos resampled to `D` snippets: the first `B/2` normal, the rest
/// abnormal.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, D, d_feat]`.
    pub features: Tensor,
    pub abnormal: Vec<bool>,
    pub class_ids: Vec<Option<usize>>,
}

/// Draws `n` indices from `pool` by walking freshly shuffled copies of it.
fn cycle_draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut perm = pool.to_vec();
        perm.shuffle(rng);
        let take = (n - out.len()).min(perm.len());
        out.extend_from_slice(&perm[..take]);
    }
    out
}

/// One epoch of balanced batches as indices into `abnormal`.
///
/// The epoch holds `ceil(max(N_abn, N_norm) / (B/2))` batches, so the larger
/// polarity is seen about once and the smaller one is cycled. Each batch
/// lists its `B/2` normal indices first.
pub fn batch_plan<R: Rng + ?Sized>(abnormal: &[bool], batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::invalid(format!("batch size {batch_size} must be even and positive")));
    }
    let half = batch_size / 2;
    let norm: Vec<usize> = (0..abnormal.len()).filter(|&i| !abnormal[i]).collect();
    let abn: Vec<usize> = (0..abnormal.len()).filter(|&i| abnormal[i]).collect();
    if norm.is_empty() || abn.is_empty() {
        return Err(Error::invalid(format!(
            "batching needs both polarities, got {} normal and {} abnormal videos",
            norm.len(),
            abn.len()
        )));
    }
    let n_batches = norm.len().max(abn.len()).div_ceil(half);
    let norm_draw = cycle_draw(&norm, n_batches * half, rng);
    let abn_draw = cycle_draw(&abn, n_batches * half, rng);
    Ok((0..n_batches)
        .map(|b| {
            let mut idx = norm_draw[b * half..(b + 1) * half].to_vec();
            idx.extend_from_slice(&abn_draw[b * half..(b + 1) * half]);
            idx
        })
        .collect())
}

/// One epoch of resampled batches, shuffled deterministically from `seed`.
pub fn make_batches(records: &[VideoRecord], batch_size: usize, d: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flags: Vec<bool> = records.iter().map(|r| r.abnormal).collect();
    let plan = batch_plan(&flags, batch_size, &mut rng)?;
    let d_feat = records[0].features.cols();
    plan.into_iter()
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * d * d_feat);
            for &i in &idx {
                data.extend_from_slice(resample_to_fixed(&records[i].features, d)?.data());
            }
            Ok(Batch {
                ids: idx.iter().map(|&i| records[i].id.clone()).collect(),
                features: Tensor::new(vec![idx.len(), d, d_feat], data)?,
                abnormal: idx.iter().map(|&i| records[i].abnormal).collect(),
                class_ids: idx.iter().map(|&i| records[i].class_id).collect(),
            })
        })
        .collect()
}
