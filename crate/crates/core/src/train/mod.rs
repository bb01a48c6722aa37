//! Three-stage training: task encoder (MIL, then splatting fine-tune),
//! per-class or per-cluster experts on frozen task features, and a fusion
//! model on frozen expert scores.
//!
//! Every stage runs the same loop. Each epoch draws balanced batches, and
//! during the first `warmup_epochs` of a phase either only the normal-video
//! top-k term or the full MIL objective is optimised. Splatting phases regenerate pseudo-labels from the
//! trained component's own scores once at the start of every epoch.

mod kmeans;
mod optim;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeans, MAX_ITERS as KMEANS_MAX_ITERS, TOLERANCE as KMEANS_TOLERANCE};
pub use optim::{AdamW, AdamWConfig};

use crate::data::{batch_plan, resample_to_fixed, video_rng, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::losses::{self, default_k, RegularizerWeights};
use crate::model::{stack_scores, Expert, Fuser, Fusion, Gate, ModelBundle, ModelConfig, SoftMoe, TaskEncoder};
use crate::nn::gradcheck::Parameterized;
use crate::nn::{ParamSet, Tape, Tensor, Var};
use crate::signal::{detect_peaks, make_targets, PseudoLabel, ScoreSeries, SplatConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    #[default]
    Class,
    Cluster,
}

/// What the warm-up epochs of each phase optimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarmupObjective {
    #[default]
    TopkNorm,
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_mil: usize,
    pub epochs_tgs: usize,
    pub epochs_experts: usize,
    pub epochs_gate: usize,
    /// Leading epochs of each phase trained on `warmup_objective`.
    pub warmup_epochs: usize,
    pub warmup_objective: WarmupObjective,
    pub batch_size: usize,
    /// Snippets per training video after resampling.
    pub snippets: usize,
    /// Top-k size; `ceil(snippets / 16)` when unset.
    pub k: Option<usize>,
    pub optimizer: AdamWConfig,
    pub regularizers: RegularizerWeights,
    pub splat: SplatConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub expert_mode: ExpertMode,
    /// Cluster count in cluster mode; the number of classes when unset.
    pub n_clusters: Option<usize>,
    pub fusion: Fusion,
    pub use_task_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_mil: 20,
            epochs_tgs: 10,
            epochs_experts: 15,
            epochs_gate: 15,
            warmup_epochs: 1,
            warmup_objective: WarmupObjective::Mil,
            batch_size: 16,
            snippets: 50,
            k: None,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            regularizers: RegularizerWeights::default(),
            splat: SplatConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            expert_mode: ExpertMode::Class,
            n_clusters: None,
            fusion: Fusion::Gate,
            use_task_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("epochs_mil", self.epochs_mil),
            ("epochs_tgs", self.epochs_tgs),
            ("epochs_experts", self.epochs_experts),
            ("epochs_gate", self.epochs_gate),
        ] {
            if e == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::invalid(format!("batch_size {} must be even and at least 2", self.batch_size)));
        }
        if self.snippets < 2 {
            return Err(Error::invalid("snippets must be at least 2"));
        }
        let k = self.top_k();
        if k == 0 || k > self.snippets {
            return Err(Error::invalid(format!("k = {k} must lie in 1..={}", self.snippets)));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and weight decay non-negative"));
        }
        self.splat.validate()
    }

    pub fn top_k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.snippets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub warmup: bool,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Mean of each loss term, plus `peaks_per_video` in splatting phases.
    pub terms: BTreeMap<String, f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn stage(&self, name: &str) -> impl Iterator<Item = &EpochLog> {
        let name = name.to_string();
        self.epochs.iter().filter(move |e| e.stage == name)
    }
}

impl Parameterized for Fuser {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![self.params()]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![self.params_mut()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Mil,
    Tgs,
}

struct Stage<'a> {
    name: String,
    epochs: usize,
    objective: Objective,
    abnormal: &'a [bool],
    rng: ChaCha8Rng,
}

fn sigmoid_values(tape: &Tape, logits: Var) -> Vec<f64> {
    tape.value(logits).iter().map(|&x| crate::nn::sigmoid_scalar(x)).collect()
}

/// Pseudo-labels and mean peak count for every abnormal item.
fn refresh_targets<M, F>(model: &M, abnormal: &[bool], splat: &SplatConfig, forward: &F) -> Result<(Vec<Option<PseudoLabel>>, f64)>
where
    F: Fn(&M, &mut Tape, usize) -> Result<Var>,
{
    let mut out = Vec::with_capacity(abnormal.len());
    let (mut peaks, mut n) = (0usize, 0usize);
    for (i, &abn) in abnormal.iter().enumerate() {
        if !abn {
            out.push(None);
            continue;
        }
        let mut tape = Tape::new();
        let logits = forward(model, &mut tape, i)?;
        let scores = ScoreSeries::new(sigmoid_values(&tape, logits))?;
        peaks += detect_peaks(&scores, splat)?.len();
        n += 1;
        out.push(Some(make_targets(&scores, splat)?));
    }
    Ok((out, peaks as f64 / n.max(1) as f64))
}

fn run_stage<M, F>(mut stage: Stage<'_>, model: &mut M, cfg: &TrainConfig, log: &mut TrainLog, forward: F) -> Result<()>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape, usize) -> Result<Var>,
{
    let k = cfg.top_k();
    let mut opt = AdamW::new(cfg.optimizer, model.param_sets()[0]);
    for epoch in 0..stage.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let objective = match (warmup, cfg.warmup_objective) {
            (false, _) => Some(stage.objective),
            (true, WarmupObjective::TopkNorm) => None,
            (true, WarmupObjective::Mil) => Some(Objective::Mil),
        };
        let targets = if objective == Some(Objective::Tgs) {
            let (t, peaks) = refresh_targets(model, stage.abnormal, &cfg.splat, &forward)?;
            terms.insert("peaks_per_video".into(), peaks);
            Some(t)
        } else {
            None
        };
        let plan = batch_plan(stage.abnormal, cfg.batch_size, &mut stage.rng)?;
        let skipped_before = opt.skipped();
        let mut total = 0.0;
        for batch in &plan {
            let mut tape = Tape::new();
            let mut normal = Vec::new();
            let mut abnormal = Vec::new();
            for &i in batch {
                let logits = forward(model, &mut tape, i)?;
                if stage.abnormal[i] {
                    abnormal.push((i, logits));
                } else {
                    normal.push(logits);
                }
            }
            let mut parts: Vec<(&str, Var)> = vec![("topk_norm", losses::topk_normal_term(&mut tape, &normal, k)?)];
            if let Some(objective) = objective {
                let abn_logits: Vec<Var> = abnormal.iter().map(|(_, v)| *v).collect();
                match objective {
                    Objective::Mil => {
                        parts.push(("topk_abn", losses::topk_abnormal_term(&mut tape, &abn_logits, k)?));
                        let w = cfg.regularizers;
                        let mut smooth = Vec::new();
                        let mut sparse = Vec::new();
                        for &l in &abn_logits {
                            let s = tape.sigmoid(l);
                            smooth.push(losses::smoothness(&mut tape, s)?);
                            sparse.push(losses::sparsity(&mut tape, s));
                        }
                        let scale = 1.0 / abn_logits.len() as f64;
                        let sm = tape.concat_rows(&smooth)?;
                        let sm = tape.sum(sm);
                        parts.push(("smoothness", tape.scale(sm, w.smoothness * scale)));
                        let sp = tape.concat_rows(&sparse)?;
                        let sp = tape.sum(sp);
                        parts.push(("sparsity", tape.scale(sp, w.sparsity * scale)));
                    }
                    Objective::Tgs => {
                        let all = targets.as_ref().expect("refreshed for splatting epochs");
                        let labels: Vec<PseudoLabel> = abnormal
                            .iter()
                            .map(|(i, _)| all[*i].clone().expect("abnormal item"))
                            .collect();
                        let probs: Vec<Var> = abn_logits.iter().map(|&l| tape.sigmoid(l)).collect();
                        let probs = tape.concat_rows(&probs)?;
                        parts.push(("bce", losses::bce(&mut tape, probs, &PseudoLabel::concat(&labels))?));
                    }
                }
            }
            let mut loss = parts[0].1;
            for &(_, v) in &parts[1..] {
                loss = tape.add(loss, v)?;
            }
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.name.clone(),
                    epoch,
                    detail: format!("loss became {value}"),
                });
            }
            total += value;
            for (name, v) in &parts {
                *terms.entry((*name).to_string()).or_default() += tape.scalar(*v) / plan.len() as f64;
            }
            let params = model.param_sets_mut().pop().expect("one parameter set");
            params.zero_grad();
            tape.backward_into(loss, &mut [&mut *params])?;
            opt.step(params);
        }
        log.epochs.push(EpochLog {
            stage: stage.name.clone(),
            epoch,
            warmup,
            loss: total / plan.len() as f64,
            terms,
            skipped_steps: opt.skipped() - skipped_before,
        });
    }
    Ok(())
}

/// Training videos resampled to the configured snippet count.
pub fn resample_all(records: &[VideoRecord], snippets: usize) -> Result<Vec<Tensor>> {
    records.iter().map(|r| resample_to_fixed(&r.features, snippets)).collect()
}

/// Encoder snapshots after the MIL phase and after splatting fine-tuning.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub mil: TaskEncoder,
    pub encoder: TaskEncoder,
}

pub fn train_task_encoder(train: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<EncoderStage> {
    cfg.validate()?;
    let inputs = resample_all(&train.records, cfg.snippets)?;
    let abnormal: Vec<bool> = train.records.iter().map(|r| r.abnormal).collect();
    let mut encoder = TaskEncoder::new(train.d_feat, &cfg.model, &mut video_rng(cfg.seed, "init/encoder"))?;
    let forward = |m: &TaskEncoder, tape: &mut Tape, i: usize| {
        let x = tape.input(&inputs[i]);
        Ok(m.forward(tape, x)?.logits)
    };
    let stage = |name: &str, epochs, objective| Stage {
        name: name.to_string(),
        epochs,
        objective,
        abnormal: &abnormal,
        rng: video_rng(cfg.seed, &format!("batches/{name}")),
    };
    run_stage(stage("encoder_mil", cfg.epochs_mil, Objective::Mil), &mut encoder, cfg, log, forward)?;
    let mil = encoder.clone();
    run_stage(stage("encoder_tgs", cfg.epochs_tgs, Objective::Tgs), &mut encoder, cfg, log, forward)?;
    Ok(EncoderStage { mil, encoder })
}

/// Which abnormal training videos each expert is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAssignment {
    pub names: Vec<String>,
    /// Indices into the training records, abnormal videos only.
    pub groups: Vec<Vec<usize>>,
}

pub fn class_assignment(train: &Dataset) -> ExpertAssignment {
    let groups = (0..train.n_classes())
        .map(|c| {
            (0..train.records.len())
                .filter(|&i| train.records[i].abnormal && train.records[i].class_id == Some(c))
                .collect()
        })
        .collect();
    ExpertAssignment {
        names: train.class_names.clone(),
        groups,
    }
}

/// Mean task-aware feature of each video.
pub fn mean_task_features(encoder: &TaskEncoder, records: &[&VideoRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            let (task, _) = encoder.infer(&r.features)?;
            let (t, d) = (task.rows(), task.cols());
            let mut mean = vec![0.0; d];
            for row in 0..t {
                mean.iter_mut().zip(task.row(row)).for_each(|(m, v)| *m += v / t as f64);
            }
            Ok(mean)
        })
        .collect()
}

/// K-means over the mean task-aware features of the given videos.
pub fn cluster_videos(encoder: &TaskEncoder, records: &[&VideoRecord], k: usize, seed: u64) -> Result<Vec<usize>> {
    let points = mean_task_features(encoder, records)?;
    Ok(kmeans(&points, k, &mut video_rng(seed, "kmeans"))?.assignments)
}

pub fn cluster_assignment(encoder: &TaskEncoder, train: &Dataset, k: usize, seed: u64) -> Result<ExpertAssignment> {
    let idx: Vec<usize> = (0..train.records.len()).filter(|&i| train.records[i].abnormal).collect();
    let records: Vec<&VideoRecord> = idx.iter().map(|&i| &train.records[i]).collect();
    let labels = cluster_videos(encoder, &records, k, seed)?;
    let mut groups = vec![Vec::new(); k];
    for (&i, &c) in idx.iter().zip(&labels) {
        groups[c].push(i);
    }
    Ok(ExpertAssignment {
        names: (0..k).map(|c| format!("cluster{c}")).collect(),
        groups,
    })
}

/// The assignment implied by `cfg.expert_mode`.
pub fn expert_assignment(encoder: &TaskEncoder, train: &Dataset, cfg: &TrainConfig) -> Result<ExpertAssignment> {
    match cfg.expert_mode {
        ExpertMode::Class => Ok(class_assignment(train)),
        ExpertMode::Cluster => {
            let k = cfg.n_clusters.unwrap_or(train.n_classes());
            cluster_assignment(encoder, train, k, cfg.seed)
        }
    }
}

/// Frozen task features of every training video at the training length.
pub fn task_features(encoder: &TaskEncoder, train: &Dataset, snippets: usize) -> Result<Vec<Tensor>> {
    resample_all(&train.records, snippets)?
        .iter()
        .map(|x| encoder.infer(x).map(|(t, _)| t))
        .collect()
}

/// Trains one expert per non-empty group on that group's abnormal videos
/// plus every normal video. Empty groups are skipped with a warning.
pub fn train_experts(
    encoder: &TaskEncoder,
    train: &Dataset,
    assignment: &ExpertAssignment,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(Vec<Expert>, Vec<String>)> {
    cfg.validate()?;
    let task = task_features(encoder, train, cfg.snippets)?;
    let normal: Vec<usize> = (0..train.records.len()).filter(|&i| !train.records[i].abnormal).collect();
    let mut experts = Vec::new();
    let mut names = Vec::new();
    for (name, group) in assignment.names.iter().zip(&assignment.groups) {
        if group.is_empty() {
            log.warnings.push(format!("expert {name} skipped: no abnormal training videos"));
            continue;
        }
        let items: Vec<usize> = normal.iter().chain(group).copied().collect();
        let abnormal: Vec<bool> = items.iter().map(|&i| train.records[i].abnormal).collect();
        let mut expert = Expert::new(&cfg.model, &mut video_rng(cfg.seed, &format!("init/expert/{name}")))?;
        let stage_name = format!("expert/{name}");
        let stage = Stage {
            rng: video_rng(cfg.seed, &format!("batches/{stage_name}")),
            name: stage_name,
            epochs: cfg.epochs_experts,
            objective: Objective::Tgs,
            abnormal: &abnormal,
        };
        run_stage(stage, &mut expert, cfg, log, |m: &Expert, tape: &mut Tape, j: usize| {
            let x = tape.input(&task[items[j]]);
            m.forward(tape, x)
        })?;
        experts.push(expert);
        names.push(name.clone());
    }
    if experts.is_empty() {
        return Err(Error::invalid("no expert could be trained"));
    }
    Ok((experts, names))
}

/// Trains the gate (or soft-MoE) on frozen expert scores and task features.
pub fn train_fuser(encoder: &TaskEncoder, experts: &[Expert], train: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Fuser> {
    cfg.validate()?;
    let task = task_features(encoder, train, cfg.snippets)?;
    let scores = task
        .iter()
        .map(|t| {
            let per = experts.iter().map(|e| e.infer(t)).collect::<Result<Vec<_>>>()?;
            stack_scores(&per)
        })
        .collect::<Result<Vec<_>>>()?;
    let abnormal: Vec<bool> = train.records.iter().map(|r| r.abnormal).collect();
    let init = &mut video_rng(cfg.seed, "init/fuser");
    let mut fuser = match cfg.fusion {
        Fusion::Gate => Fuser::Gate(Gate::new(experts.len(), &cfg.model, cfg.use_task_features, init)?),
        Fusion::SoftMoe => Fuser::SoftMoe(SoftMoe::new(experts.len(), &cfg.model, init)?),
    };
    let stage = Stage {
        name: "gate".into(),
        epochs: cfg.epochs_gate,
        objective: Objective::Tgs,
        abnormal: &abnormal,
        rng: video_rng(cfg.seed, "batches/gate"),
    };
    run_stage(stage, &mut fuser, cfg, log, |m: &Fuser, tape: &mut Tape, i: usize| {
        let s = tape.input(&scores[i]);
        let t = tape.input(&task[i]);
        m.forward(tape, s, t)
    })?;
    Ok(fuser)
}

/// Result of a full three-stage run.
#[derive(Debug, Clone)]
pub struct PipelineState {
    /// Encoder as it stood after the MIL phase, kept for ablations.
    pub mil_encoder: TaskEncoder,
    pub bundle: ModelBundle,
    pub log: TrainLog,
}

/// Stages two and three on top of an already trained encoder.
pub fn train_from_encoder(encoder: TaskEncoder, train: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<ModelBundle> {
    let assignment = expert_assignment(&encoder, train, cfg)?;
    let (experts, expert_names) = train_experts(&encoder, train, &assignment, cfg, log)?;
    let fuser = train_fuser(&encoder, &experts, train, cfg, log)?;
    Ok(ModelBundle {
        config: cfg.model.clone(),
        encoder,
        experts,
        expert_names,
        fuser: Some(fuser),
    })
}

pub fn run_pipeline(train: &Dataset, cfg: &TrainConfig) -> Result<PipelineState> {
    let mut log = TrainLog::default();
    let stage_one = train_task_encoder(train, cfg, &mut log)?;
    let bundle = train_from_encoder(stage_one.encoder, train, cfg, &mut log)?;
    Ok(PipelineState {
        mil_encoder: stage_one.mil,
        bundle,
        log,
    })
}
