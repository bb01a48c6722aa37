//! Snippet-level ranking metrics. All snippets of the evaluated videos are
//! concatenated before scoring (micro averaging).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VideoRecord};
use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("NaN score at position {i}")));
    }
    let mut pos = 0u64;
    for &l in labels {
        match l {
            0 => {}
            1 => pos += 1,
            _ => return Err(Error::invalid(format!("label {l} is not binary"))),
        }
    }
    Ok((pos, labels.len() as u64 - pos))
}

/// Ascending by score, so tied scores form contiguous runs.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {p} positive and {n} negative"
        )));
    }
    let idx = order(scores);
    // twice the Mann-Whitney U, kept integral so complementary labelings
    // sum to exactly 2PN
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        twice_u += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        i = j;
    }
    let total = 2 * p as u128 * n as u128;
    // evaluate the smaller side and mirror, so auc(l) + auc(1 - l) == 1
    if 2 * twice_u <= total {
        Ok(twice_u as f64 / total as f64)
    } else {
        Ok(1.0 - (total - twice_u) as f64 / total as f64)
    }
}

/// `Σ_k (R_k - R_{k-1}) P_k` over the ranking sorted by descending score,
/// ties broken by ascending index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0u64;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

fn gt(r: &VideoRecord) -> Result<&[u8]> {
    r.snippet_gt
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("{} has no snippet ground truth", r.id)))
}

fn gather<'a, I>(pairs: I) -> Result<(Vec<f64>, Vec<u8>)>
where
    I: IntoIterator<Item = (&'a VideoRecord, &'a Vec<f64>)>,
{
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (r, sc) in pairs {
        let g = gt(r)?;
        if g.len() != sc.len() {
            return Err(Error::shape(
                "metrics",
                format!("{}: {} scores for {} snippets", r.id, sc.len(), g.len()),
            ));
        }
        s.extend_from_slice(sc);
        l.extend_from_slice(g);
    }
    Ok((s, l))
}

fn paired<'a>(records: &'a [VideoRecord], scores: &'a [Vec<f64>]) -> Result<impl Iterator<Item = (&'a VideoRecord, &'a Vec<f64>)>> {
    if records.len() != scores.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} score series for {} videos", scores.len(), records.len()),
        ));
    }
    Ok(records.iter().zip(scores))
}

/// AUC and AP restricted to abnormal videos holding both normal and
/// anomalous snippets.
pub fn abnormal_only(records: &[VideoRecord], scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mut kept = Vec::new();
    for (r, s) in paired(records, scores)? {
        if r.abnormal {
            let g = gt(r)?;
            if g.contains(&0) && g.contains(&1) {
                kept.push((r, s));
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::UndefinedMetric(
            "no abnormal video with both normal and anomalous snippets".into(),
        ));
    }
    let (s, l) = gather(kept)?;
    Ok((roc_auc(&s, &l)?, average_precision(&s, &l)?))
}

/// AUC over each class's abnormal videos pooled with every normal video.
/// Classes without abnormal videos are left out.
pub fn per_class_auc(records: &[VideoRecord], scores: &[Vec<f64>]) -> Result<BTreeMap<usize, f64>> {
    let pairs: Vec<_> = paired(records, scores)?.collect();
    let mut classes: Vec<usize> = pairs.iter().filter_map(|(r, _)| r.class_id.filter(|_| r.abnormal)).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = BTreeMap::new();
    for c in classes {
        let subset = pairs
            .iter()
            .copied()
            .filter(|(r, _)| !r.abnormal || r.class_id == Some(c));
        let (s, l) = gather(subset)?;
        out.insert(c, roc_auc(&s, &l)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub ap: f64,
    pub auc_a: f64,
    pub ap_a: f64,
    /// Keyed by class name.
    pub per_class_auc: BTreeMap<String, f64>,
}

/// All metrics for one score series per test record.
pub fn evaluate(ds: &Dataset, scores: &[Vec<f64>]) -> Result<EvalResult> {
    let (s, l) = gather(paired(&ds.records, scores)?)?;
    let (auc_a, ap_a) = abnormal_only(&ds.records, scores)?;
    let per_class = per_class_auc(&ds.records, scores)?
        .into_iter()
        .map(|(c, v)| {
            let name = ds.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            (name, v)
        })
        .collect();
    Ok(EvalResult {
        auc: roc_auc(&s, &l)?,
        ap: average_precision(&s, &l)?,
        auc_a,
        ap_a,
        per_class_auc: per_class,
    })
}

/// `metric,value` rows; per-class entries appear as `auc/<class>`.
pub fn write_eval_csv<W: Write>(mut w: W, r: &EvalResult) -> Result<()> {
    writeln!(w, "metric,value")?;
    for (k, v) in [("auc", r.auc), ("ap", r.ap), ("auc_a", r.auc_a), ("ap_a", r.ap_a)] {
        writeln!(w, "{k},{v}")?;
    }
    for (c, v) in &r.per_class_auc {
        writeln!(w, "auc/{c},{v}")?;
    }
    Ok(())
}
