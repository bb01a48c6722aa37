//! Scoring a trained bundle on a test split, and whole generate-train-evaluate
//! runs for one seed.

use gsmoe::data::{generate_synthetic, Dataset, SyntheticSplit};
use gsmoe::metrics::{evaluate, EvalResult};
use gsmoe::model::{ModelBundle, TaskEncoder};
use gsmoe::train::{run_pipeline, PipelineState};
use gsmoe::Result;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Per-video score series at every stage a bundle provides.
#[derive(Debug, Clone, Default)]
pub struct StageScores {
    pub encoder: Vec<Vec<f64>>,
    pub experts_max: Option<Vec<Vec<f64>>>,
    pub fused: Option<Vec<Vec<f64>>>,
}

impl StageScores {
    /// The most complete stage available.
    pub fn final_scores(&self) -> &[Vec<f64>] {
        self.fused
            .as_deref()
            .or(self.experts_max.as_deref())
            .unwrap_or(&self.encoder)
    }
}

pub fn score_dataset(bundle: &ModelBundle, ds: &Dataset, mask: Option<usize>) -> Result<StageScores> {
    let mut out = StageScores::default();
    let mut experts = Vec::new();
    let mut fused = Vec::new();
    for r in &ds.records {
        let s = bundle.score_masked(&r.features, mask)?;
        if !bundle.experts.is_empty() {
            experts.push(s.experts_max());
        }
        if let Some(f) = s.fused {
            fused.push(f);
        }
        out.encoder.push(s.encoder);
    }
    out.experts_max = (!bundle.experts.is_empty()).then_some(experts);
    out.fused = bundle.fuser.is_some().then_some(fused);
    Ok(out)
}

pub fn encoder_scores(encoder: &TaskEncoder, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.records.iter().map(|r| encoder.infer(&r.features).map(|(_, s)| s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// Headline numbers: the most complete stage.
    #[serde(flatten)]
    pub headline: EvalResult,
    pub mil_encoder: Option<EvalResult>,
    pub encoder: EvalResult,
    pub experts_max: Option<EvalResult>,
    pub fused: Option<EvalResult>,
}

pub fn stage_metrics(scores: &StageScores, mil: Option<&[Vec<f64>]>, test: &Dataset) -> Result<StageMetrics> {
    let opt = |s: Option<&[Vec<f64>]>| s.map(|s| evaluate(test, s)).transpose();
    Ok(StageMetrics {
        headline: evaluate(test, scores.final_scores())?,
        mil_encoder: opt(mil)?,
        encoder: evaluate(test, &scores.encoder)?,
        experts_max: opt(scores.experts_max.as_deref())?,
        fused: opt(scores.fused.as_deref())?,
    })
}

/// One complete generate, train and evaluate run.
pub struct SeedRun {
    pub split: SyntheticSplit,
    pub state: PipelineState,
    pub metrics: StageMetrics,
}

pub fn run_seed(cfg: &RunConfig) -> Result<SeedRun> {
    let split = generate_synthetic(&cfg.data)?;
    let state = run_pipeline(&split.train, &cfg.train)?;
    let scores = score_dataset(&state.bundle, &split.test, None)?;
    let mil = encoder_scores(&state.mil_encoder, &split.test)?;
    let metrics = stage_metrics(&scores, Some(&mil), &split.test)?;
    Ok(SeedRun { split, state, metrics })
}

/// `cfg` with both generator and training seeds advanced by `offset`.
pub fn with_seed_offset(cfg: &RunConfig, offset: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.data.seed = cfg.data.seed + offset;
    c.train.seed = cfg.train.seed + offset;
    c
}
