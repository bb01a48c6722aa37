//! Temporal Gaussian splatting: peaks in a per-snippet score series become
//! Gaussian kernels, which are rendered into dense pseudo-labels.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the window a peak must dominate.
const PEAK_RADIUS: usize = 2;

/// Per-snippet abnormal scores, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    values: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("score series must hold at least one snippet"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| v.is_nan()) {
            return Err(Error::invalid(format!("NaN score at snippet {i} ({v})")));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("score {v} at snippet {i} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub position: usize,
    pub score: f64,
    /// Strictly increasing steps leading into the peak.
    pub v1: usize,
    /// Strictly decreasing steps leaving the peak.
    pub v2: usize,
    pub width: usize,
    /// Sample standard deviation of the scores within `position ± width`,
    /// floored at the configured minimum.
    pub sigma: f64,
}

impl Peak {
    pub fn window(&self, len: usize) -> (usize, usize) {
        (
            self.position.saturating_sub(self.width),
            (self.position + self.width).min(len.saturating_sub(1)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub support: Vec<bool>,
    pub peak: Peak,
}

impl GaussianKernel {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// Rendered per-snippet targets in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    targets: Vec<f64>,
}

impl PseudoLabel {
    pub fn zeros(len: usize) -> Self {
        Self {
            targets: vec![0.0; len],
        }
    }

    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = targets.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("target {v} at snippet {i} outside [0, 1]")));
        }
        Ok(Self { targets })
    }

    /// Joins several label sequences end to end.
    pub fn concat(parts: &[PseudoLabel]) -> Self {
        Self {
            targets: parts.iter().flat_map(|p| p.targets.iter().copied()).collect(),
        }
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn into_targets(self) -> Vec<f64> {
        self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Element-wise clamp of the summed kernels to `[0, 1]`.
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Gaussian multiplied by the binary support mask.
    #[default]
    Truncated,
    /// Gaussian over the whole series, ignoring the mask.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplatConfig {
    pub prominence_threshold: f64,
    pub sigma_floor: f64,
    pub clamp_mode: ClampMode,
    pub tail_mode: TailMode,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            prominence_threshold: 0.2,
            sigma_floor: 0.5,
            clamp_mode: ClampMode::Clamp,
            tail_mode: TailMode::Truncated,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prominence_threshold > 0.0 && self.prominence_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "prominence_threshold {} outside (0, 1)",
                self.prominence_threshold
            )));
        }
        if !(self.sigma_floor > 0.0) || !self.sigma_floor.is_finite() {
            return Err(Error::invalid(format!("sigma_floor {} must be positive", self.sigma_floor)));
        }
        Ok(())
    }
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Interior snippets that strictly dominate the two neighbours on each side
/// and rise at least `prominence_threshold` above the window minimum.
/// Returned in ascending position order.
pub fn detect_peaks(scores: &ScoreSeries, cfg: &SplatConfig) -> Result<Vec<Peak>> {
    cfg.validate()?;
    let s = scores.values();
    let n = s.len();
    if n < 2 * PEAK_RADIUS + 1 {
        return Ok(Vec::new());
    }
    let mut peaks = Vec::new();
    for t in PEAK_RADIUS..n - PEAK_RADIUS {
        let window = &s[t - PEAK_RADIUS..=t + PEAK_RADIUS];
        let dominates = window
            .iter()
            .enumerate()
            .all(|(i, v)| i == PEAK_RADIUS || *v < s[t]);
        if !dominates {
            continue;
        }
        let floor = window.iter().copied().fold(f64::INFINITY, f64::min);
        if s[t] - floor < cfg.prominence_threshold {
            continue;
        }
        let v1 = (1..=t).take_while(|j| s[t - j] < s[t - j + 1]).count();
        let v2 = (1..n - t).take_while(|j| s[t + j] < s[t + j - 1]).count();
        let width = v1.min(v2);
        let sigma = sample_std(&s[t - width..=t + width]).max(cfg.sigma_floor);
        peaks.push(Peak {
            position: t,
            score: s[t],
            v1,
            v2,
            width,
            sigma,
        });
    }
    Ok(peaks)
}

/// Binary support: the peak itself plus every snippet within the width whose
/// score is at least `score(peak) - sigma`.
pub fn init_kernel(scores: &ScoreSeries, peak: &Peak) -> Result<GaussianKernel> {
    let s = scores.values();
    if peak.position >= s.len() {
        return Err(Error::invalid(format!(
            "peak position {} outside series of length {}",
            peak.position,
            s.len()
        )));
    }
    let p = peak.position;
    let (lo, hi) = (p.saturating_sub(peak.width), p + peak.width);
    let thresh = s[p] - peak.sigma;
    let support = s
        .iter()
        .enumerate()
        .map(|(t, v)| t == p || (t >= lo && t <= hi && *v >= thresh))
        .collect();
    Ok(GaussianKernel {
        support,
        peak: peak.clone(),
    })
}

/// `f(t) = G(t) · exp(-(t - P)² / (2σ²))`; with [`TailMode::Full`] the mask is
/// treated as all ones.
pub fn splat_kernel(kernel: &GaussianKernel, len: usize, tail: TailMode) -> Result<Vec<f64>> {
    if kernel.len() != len {
        return Err(Error::invalid(format!(
            "kernel length {} != series length {len}",
            kernel.len()
        )));
    }
    let p = kernel.peak.position as f64;
    let two_var = 2.0 * kernel.peak.sigma * kernel.peak.sigma;
    Ok(kernel
        .support
        .iter()
        .enumerate()
        .map(|(t, g)| {
            let on = match tail {
                TailMode::Truncated => *g,
                TailMode::Full => true,
            };
            if on {
                let d = t as f64 - p;
                (-(d * d) / two_var).exp()
            } else {
                0.0
            }
        })
        .collect())
}

pub fn render_pseudo_labels(kernels: &[GaussianKernel], len: usize, cfg: &SplatConfig) -> Result<PseudoLabel> {
    let mut acc = vec![0.0; len];
    for k in kernels {
        for (a, f) in acc.iter_mut().zip(splat_kernel(k, len, cfg.tail_mode)?) {
            *a += f;
        }
    }
    match cfg.clamp_mode {
        ClampMode::Clamp => acc.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
    }
    Ok(PseudoLabel { targets: acc })
}

/// Peaks → kernels → splats → clamped pseudo-labels.
pub fn make_targets(scores: &ScoreSeries, cfg: &SplatConfig) -> Result<PseudoLabel> {
    let kernels = detect_peaks(scores, cfg)?
        .iter()
        .map(|p| init_kernel(scores, p))
        .collect::<Result<Vec<_>>>()?;
    render_pseudo_labels(&kernels, scores.len(), cfg)
}

fn read_column<R: BufRead>(reader: R, header: &str) -> Result<Vec<f64>> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::invalid("empty CSV"))?;
    if first.trim() != header {
        return Err(Error::invalid(format!("expected CSV header `{header}`, got `{}`", first.trim())));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::invalid(format!("line {}: cannot parse `{line}`", i + 2)))?;
        out.push(v);
    }
    Ok(out)
}

/// Reads a single-column CSV with header `score`.
pub fn read_scores_csv<R: BufRead>(reader: R) -> Result<ScoreSeries> {
    ScoreSeries::new(read_column(reader, "score")?)
}

pub fn write_scores_csv<W: Write>(mut w: W, scores: &ScoreSeries) -> Result<()> {
    writeln!(w, "score")?;
    for v in scores.values() {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

/// Single-column CSV with header `pseudo_label`.
pub fn write_pseudo_labels_csv<W: Write>(mut w: W, labels: &PseudoLabel) -> Result<()> {
    writeln!(w, "pseudo_label")?;
    for v in labels.targets() {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

pub fn read_pseudo_labels_csv<R: BufRead>(reader: R) -> Result<PseudoLabel> {
    PseudoLabel::new(read_column(reader, "pseudo_label")?)
}
