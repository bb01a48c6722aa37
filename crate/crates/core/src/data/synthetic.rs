//! Synthetic feature streams with planted class-specific anomaly windows.
//!
//! Every snippet is isotropic Gaussian noise (optionally AR(1) in time) plus a slow sinusoidal drift
//! along a random per-video direction. Abnormal videos add their class
//! signature (a fixed unit vector, mutually orthogonal across classes when
//! `d_feat` allows) inside one to three windows, with an amplitude that
//! ramps up and back down across each window.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Relative signature amplitude at the edges of an anomaly window; the
/// amplitude rises to 1 at the centre.
const RAMP_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    /// Abnormal videos per class, before the train/test split.
    pub videos_per_class: usize,
    pub normal_videos: usize,
    /// Inclusive snippet-count range.
    pub t_range: [usize; 2],
    pub d_feat: usize,
    /// Inclusive anomaly window length range, in snippets.
    pub anomaly_window_range: [usize; 2],
    pub signature_strength: f64,
    pub noise_scale: f64,
    /// Lag-one correlation of the per-dimension noise; 0 gives white noise.
    pub noise_correlation: f64,
    /// Amplitude of the per-video drift, relative to `noise_scale`.
    pub drift_scale: f64,
    pub multi_event_prob: f64,
    /// Share of each class (and of the normal videos) held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            videos_per_class: 12,
            normal_videos: 60,
            t_range: [32, 96],
            d_feat: 16,
            anomaly_window_range: [4, 12],
            signature_strength: 6.0,
            noise_scale: 1.0,
            noise_correlation: 0.0,
            drift_scale: 0.5,
            multi_event_prob: 0.3,
            test_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("videos_per_class", self.videos_per_class),
            ("normal_videos", self.normal_videos),
            ("d_feat", self.d_feat),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        let [t_lo, t_hi] = self.t_range;
        let [w_lo, w_hi] = self.anomaly_window_range;
        if t_lo == 0 || t_lo > t_hi {
            return Err(Error::invalid(format!("bad snippet range {:?}", self.t_range)));
        }
        if w_lo == 0 || w_lo > w_hi {
            return Err(Error::invalid(format!("bad window range {:?}", self.anomaly_window_range)));
        }
        if w_hi > t_lo {
            return Err(Error::invalid(format!(
                "anomaly windows up to {w_hi} snippets do not fit videos of {t_lo}"
            )));
        }
        for (name, p) in [
            ("multi_event_prob", self.multi_event_prob),
            ("noise_correlation", self.noise_correlation),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("signature_strength", self.signature_strength),
            ("noise_scale", self.noise_scale),
            ("drift_scale", self.drift_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generator seeded from `SHA-256(seed || tag)`, so every video draws from
/// its own stream regardless of generation order.
pub fn video_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit class signatures. Gram-Schmidt keeps them orthogonal for the first
/// `d_feat` classes; any further classes are merely normalised.
pub fn class_signatures(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = video_rng(cfg.seed, "signatures");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    for c in 0..cfg.n_classes {
        let mut v = gaussian_vec(&mut rng, cfg.d_feat);
        if c < cfg.d_feat {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        unit(&mut v);
        out.push(v);
    }
    out
}

/// Non-overlapping windows with at least one clear snippet between them.
fn place_windows<R: Rng>(rng: &mut R, t: usize, cfg: &SyntheticConfig) -> Vec<(usize, usize)> {
    let mut n = 1;
    if rng.gen::<f64>() < cfg.multi_event_prob {
        n = if rng.gen_bool(0.5) { 2 } else { 3 };
    }
    let [w_lo, w_hi] = cfg.anomaly_window_range;
    let mut windows: Vec<(usize, usize)> = Vec::with_capacity(n);
    for _ in 0..n {
        // bounded retries; a crowded video simply keeps fewer windows
        for _ in 0..32 {
            let len = rng.gen_range(w_lo..=w_hi);
            let start = rng.gen_range(0..=t - len);
            let clear = windows
                .iter()
                .all(|&(s, l)| start > s + l || start + len < s);
            if clear {
                windows.push((start, len));
                break;
            }
        }
    }
    windows.sort_unstable();
    windows
}

fn make_video(
    cfg: &SyntheticConfig,
    signatures: &[Vec<f64>],
    id: String,
    class_id: Option<usize>,
    keep_gt: bool,
) -> VideoRecord {
    let mut rng = video_rng(cfg.seed, &id);
    let d = cfg.d_feat;
    let t = rng.gen_range(cfg.t_range[0]..=cfg.t_range[1]);

    let mut drift_dir = gaussian_vec(&mut rng, d);
    unit(&mut drift_dir);
    let period = rng.gen_range(0.5..2.0) * t as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let drift_amp = cfg.drift_scale * cfg.noise_scale;

    // stationary AR(1): unit marginal variance at every step
    let rho = cfg.noise_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = gaussian_vec(&mut rng, d);
    let mut data = Vec::with_capacity(t * d);
    for step in 0..t {
        if step > 0 {
            for n in noise.iter_mut() {
                *n = rho * *n + innovation * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let drift = drift_amp * (2.0 * PI * step as f64 / period + phase).sin();
        for (&n, &dir) in noise.iter().zip(&drift_dir) {
            data.push(cfg.noise_scale * n + drift * dir);
        }
    }

    let mut gt = vec![0u8; t];
    if let Some(c) = class_id {
        for (start, len) in place_windows(&mut rng, t, cfg) {
            let gain = cfg.signature_strength * rng.gen_range(0.8..1.2);
            for i in 0..len {
                let amp = gain * (RAMP_FLOOR + (1.0 - RAMP_FLOOR) * (PI * (i as f64 + 0.5) / len as f64).sin());
                let row = &mut data[(start + i) * d..(start + i + 1) * d];
                row.iter_mut().zip(&signatures[c]).for_each(|(x, s)| *x += amp * s);
                gt[start + i] = 1;
            }
        }
    }

    // stored as 32-bit floats, so round here for a lossless round trip
    data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    VideoRecord {
        id,
        features: Tensor::new(vec![t, d], data).expect("sized above"),
        abnormal: class_id.is_some(),
        class_id,
        snippet_gt: keep_gt.then_some(gt),
    }
}

fn n_test(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Generates train and test splits. Train records carry only video-level
/// labels; test records also carry snippet ground truth.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let signatures = class_signatures(cfg);
    let mut train = Vec::new();
    let mut test = Vec::new();

    let mut emit = |prefix: &str, n: usize, class_id: Option<usize>| {
        let held = n_test(n, cfg.test_fraction);
        for i in 0..n {
            let is_test = i >= n - held;
            let split = if is_test { "test" } else { "train" };
            let id = format!("{split}/{prefix}{i:04}");
            let rec = make_video(cfg, &signatures, id, class_id, is_test);
            if is_test {
                test.push(rec);
            } else {
                train.push(rec);
            }
        }
    };
    emit("normal/", cfg.normal_videos, None);
    for c in 0..cfg.n_classes {
        emit(&format!("class{c}/"), cfg.videos_per_class, Some(c));
    }

    let wrap = |records| Dataset {
        class_names: cfg.class_names(),
        d_feat: cfg.d_feat,
        records,
    };
    Ok(SyntheticSplit {
        train: wrap(train),
        test: wrap(test),
    })
}
