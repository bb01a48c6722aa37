//! Weakly labelled video records: synthetic generation, resampling to a
//! fixed snippet count, balanced batching, and on-disk storage.

mod batch;
pub mod container;
mod resample;
mod synthetic;

use std::io::Write;

pub use batch::{batch_plan, make_batches, Batch};
pub use container::{load_container, save_container};
pub use resample::resample_to_fixed;
pub use synthetic::{class_signatures, generate_synthetic, video_rng, SyntheticConfig, SyntheticSplit};

use crate::error::Result;
use crate::nn::Tensor;

/// One video: a `T x d_feat` feature matrix with a video-level label.
/// Snippet ground truth is only carried by evaluation records.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Tensor,
    pub abnormal: bool,
    pub class_id: Option<usize>,
    pub snippet_gt: Option<Vec<u8>>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub d_feat: usize,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn abnormal(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(|r| r.abnormal)
    }

    pub fn normal(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(|r| !r.abnormal)
    }
}

/// Writes `video_id,snippet,label` rows for every record carrying ground truth.
pub fn write_ground_truth_csv<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    writeln!(w, "video_id,snippet,label")?;
    for r in &ds.records {
        if let Some(gt) = &r.snippet_gt {
            for (t, g) in gt.iter().enumerate() {
                writeln!(w, "{},{t},{g}", r.id)?;
            }
        }
    }
    Ok(())
}
