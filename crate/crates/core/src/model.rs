//! Task encoder, per-class experts, the cross-attention gate and the
//! soft-MoE alternative. Each component owns its own [`ParamSet`]; forward
//! passes take `T x width` inputs and return `T x 1` pre-sigmoid logits.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::container::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::nn::gradcheck::Parameterized;
use crate::nn::{Linear, MultiHeadAttention, ParamSet, ScoreMlp, Tape, Tensor, TransformerBlock, Var};

/// Constant substituted for a masked expert's scores.
pub const MASK_VALUE: f64 = 0.5;

/// Denominator guard in the soft-MoE weighting.
pub const SOFT_MOE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the task-aware features.
    pub d_model: usize,
    pub encoder_heads: usize,
    pub expert_heads: usize,
    /// Heads of the gate's transformer block, which runs at twice the width.
    pub gate_heads: usize,
    pub cross_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            encoder_heads: 2,
            expert_heads: 2,
            gate_heads: 4,
            cross_heads: 2,
        }
    }
}

fn check_width(tape: &Tape, x: Var, want: usize, op: &'static str) -> Result<()> {
    let (_, c) = tape.dims(x);
    if c != want {
        return Err(Error::shape(op, format!("input width {c}, expected {want}")));
    }
    Ok(())
}

/// Runs `f` on a fresh tape and returns the sigmoid of the resulting logits.
fn probabilities(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let logits = f(&mut tape)?;
    Ok(tape.value(logits).iter().map(|&x| crate::nn::sigmoid_scalar(x)).collect())
}

/// Stage-one encoder: projection, one transformer block, linear score head.
#[derive(Debug, Clone)]
pub struct TaskEncoder {
    pub params: ParamSet,
    input: Linear,
    block: TransformerBlock,
    head: Linear,
}

pub struct EncoderOutput {
    /// `T x d` task-aware features.
    pub task_logits: Var,
    /// `T x 1` score logits.
    pub logits: Var,
}

impl TaskEncoder {
    pub fn new<R: Rng + ?Sized>(d_feat: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let input = Linear::new(&mut params, "input", d_feat, cfg.d_model, rng);
        let block = TransformerBlock::new(&mut params, "block", cfg.d_model, cfg.encoder_heads, rng)?;
        let head = Linear::new(&mut params, "head", cfg.d_model, 1, rng);
        Ok(Self {
            params,
            input,
            block,
            head,
        })
    }

    pub fn d_feat(&self) -> usize {
        self.input.in_dim
    }

    pub fn d_model(&self) -> usize {
        self.input.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<EncoderOutput> {
        check_width(tape, features, self.d_feat(), "task_encoder")?;
        let h = self.input.forward(tape, &self.params, features)?;
        let task_logits = self.block.forward(tape, &self.params, h)?;
        let logits = self.head.forward(tape, &self.params, task_logits)?;
        Ok(EncoderOutput { task_logits, logits })
    }

    /// Task-aware features and per-snippet scores in `(0, 1)`.
    pub fn infer(&self, features: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.input(features);
        let out = self.forward(&mut tape, x)?;
        let scores = tape.value(out.logits).iter().map(|&v| crate::nn::sigmoid_scalar(v)).collect();
        Ok((tape.to_tensor(out.task_logits), scores))
    }
}

/// Transformer block plus narrowing score MLP over the task-aware features.
#[derive(Debug, Clone)]
pub struct Expert {
    pub params: ParamSet,
    block: TransformerBlock,
    head: ScoreMlp,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let block = TransformerBlock::new(&mut params, "block", d, cfg.expert_heads, rng)?;
        let head = ScoreMlp::new(&mut params, "head", d, d, 1, rng);
        Ok(Self { params, block, head })
    }

    pub fn forward(&self, tape: &mut Tape, task_logits: Var) -> Result<Var> {
        check_width(tape, task_logits, self.block.dim(), "expert")?;
        let h = self.block.forward(tape, &self.params, task_logits)?;
        self.head.forward(tape, &self.params, h)
    }

    pub fn infer(&self, task_logits: &Tensor) -> Result<Vec<f64>> {
        probabilities(|tape| {
            let x = tape.input(task_logits);
            self.forward(tape, x)
        })
    }

    /// Zeroes the final layer's weights, leaving `sigmoid(bias)` everywhere.
    pub fn zero_last_weights(&mut self) {
        let w = self.head.last().weight;
        self.params.get_mut(w).data_mut().fill(0.0);
    }
}

/// Fuses expert scores with task-aware features.
///
/// Expert scores are projected to width `d`. One attention direction uses
/// the task features as queries and keys over the projected scores as
/// values; the other swaps the roles. The two `T x d` outputs are
/// concatenated and passed through a transformer block and a score MLP.
#[derive(Debug, Clone)]
pub struct Gate {
    pub params: ParamSet,
    project: Linear,
    task_to_scores: MultiHeadAttention,
    scores_to_task: MultiHeadAttention,
    block: TransformerBlock,
    head: ScoreMlp,
    /// When false the projected scores stand in for the task features.
    pub use_task_features: bool,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(n_experts: usize, cfg: &ModelConfig, use_task_features: bool, rng: &mut R) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::invalid("gate needs at least one expert"));
        }
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let project = Linear::new(&mut params, "project", n_experts, d, rng);
        let task_to_scores = MultiHeadAttention::new(&mut params, "cross_task", d, cfg.cross_heads, rng)?;
        let scores_to_task = MultiHeadAttention::new(&mut params, "cross_scores", d, cfg.cross_heads, rng)?;
        let block = TransformerBlock::new(&mut params, "block", 2 * d, cfg.gate_heads, rng)?;
        let head = ScoreMlp::new(&mut params, "head", 2 * d, d, 1, rng);
        Ok(Self {
            params,
            project,
            task_to_scores,
            scores_to_task,
            block,
            head,
            use_task_features,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.project.in_dim
    }

    pub fn forward(&self, tape: &mut Tape, expert_scores: Var, task_logits: Var) -> Result<Var> {
        check_width(tape, expert_scores, self.n_experts(), "gate")?;
        check_width(tape, task_logits, self.project.out_dim, "gate")?;
        if tape.dims(expert_scores).0 != tape.dims(task_logits).0 {
            return Err(Error::shape("gate", "expert scores and task features differ in length"));
        }
        let ps = &self.params;
        let proj = self.project.forward(tape, ps, expert_scores)?;
        let task = if self.use_task_features { task_logits } else { proj };
        let (a, _) = self.task_to_scores.forward_qkv(tape, ps, task, task, proj)?;
        let (b, _) = self.scores_to_task.forward_qkv(tape, ps, proj, proj, task)?;
        let joined = tape.concat_cols(&[a, b])?;
        let h = self.block.forward(tape, ps, joined)?;
        self.head.forward(tape, ps, h)
    }

    pub fn infer(&self, expert_scores: &Tensor, task_logits: &Tensor) -> Result<Vec<f64>> {
        probabilities(|tape| {
            let s = tape.input(expert_scores);
            let t = tape.input(task_logits);
            self.forward(tape, s, t)
        })
    }
}

/// Per-class scores from the task features, averaged with the expert
/// scores as weights.
#[derive(Debug, Clone)]
pub struct SoftMoe {
    pub params: ParamSet,
    input: Linear,
    block: TransformerBlock,
    head: ScoreMlp,
}

impl SoftMoe {
    pub fn new<R: Rng + ?Sized>(n_experts: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::invalid("soft-MoE needs at least one expert"));
        }
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let input = Linear::new(&mut params, "input", d, d, rng);
        let block = TransformerBlock::new(&mut params, "block", d, cfg.expert_heads, rng)?;
        let head = ScoreMlp::new(&mut params, "head", d, d, n_experts, rng);
        Ok(Self { params, input, block, head })
    }

    pub fn n_experts(&self) -> usize {
        self.head.last().out_dim
    }

    /// `T x 1` probabilities `Σ_c p_c e_c / (Σ_c e_c + eps)`.
    pub fn forward_probs(&self, tape: &mut Tape, expert_scores: Var, task_logits: Var) -> Result<Var> {
        check_width(tape, expert_scores, self.n_experts(), "soft_moe")?;
        check_width(tape, task_logits, self.input.in_dim, "soft_moe")?;
        let ps = &self.params;
        let h = self.input.forward(tape, ps, task_logits)?;
        let h = self.block.forward(tape, ps, h)?;
        let class_logits = self.head.forward(tape, ps, h)?;
        let class_probs = tape.sigmoid(class_logits);
        let weighted = tape.mul(class_probs, expert_scores)?;
        let num = tape.row_sum(weighted);
        let den = tape.row_sum(expert_scores);
        let den = tape.add_scalar(den, SOFT_MOE_EPS);
        tape.div(num, den)
    }

    /// Logits `ln p - ln(1 - p)` of [`SoftMoe::forward_probs`], for use with
    /// the logit-based losses.
    pub fn forward(&self, tape: &mut Tape, expert_scores: Var, task_logits: Var) -> Result<Var> {
        let p = self.forward_probs(tape, expert_scores, task_logits)?;
        let lp = tape.ln(p);
        let q = tape.scale(p, -1.0);
        let q = tape.add_scalar(q, 1.0);
        let lq = tape.ln(q);
        tape.sub(lp, lq)
    }

    pub fn infer(&self, expert_scores: &Tensor, task_logits: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.input(expert_scores);
        let t = tape.input(task_logits);
        let p = self.forward_probs(&mut tape, s, t)?;
        Ok(tape.value(p).to_vec())
    }
}

macro_rules! parameterized {
    ($($t:ty),*) => {$(
        impl Parameterized for $t {
            fn param_sets(&self) -> Vec<&ParamSet> {
                vec![&self.params]
            }

            fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
                vec![&mut self.params]
            }
        }
    )*};
}

parameterized!(TaskEncoder, Expert, Gate, SoftMoe);

/// Replaces column `index` of a `T x N` score matrix with [`MASK_VALUE`].
pub fn mask_expert(expert_scores: &Tensor, index: usize) -> Result<Tensor> {
    let n = expert_scores.cols();
    if index >= n {
        return Err(Error::invalid(format!("expert {index} out of range for {n} experts")));
    }
    let mut out = expert_scores.clone();
    let data = out.data_mut();
    for r in 0..expert_scores.rows() {
        data[r * n + index] = MASK_VALUE;
    }
    Ok(out)
}

/// Stacks per-expert score series into a `T x N` matrix.
pub fn stack_scores(per_expert: &[Vec<f64>]) -> Result<Tensor> {
    let n = per_expert.len();
    let t = per_expert.first().map_or(0, Vec::len);
    if per_expert.iter().any(|s| s.len() != t) {
        return Err(Error::shape("stack_scores", "expert score series differ in length"));
    }
    let mut data = Vec::with_capacity(t * n);
    for r in 0..t {
        data.extend(per_expert.iter().map(|s| s[r]));
    }
    Tensor::new(vec![t, n], data)
}

/// How expert scores are fused into the final score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Gate,
    SoftMoe,
}

#[derive(Debug, Clone)]
pub enum Fuser {
    Gate(Gate),
    SoftMoe(SoftMoe),
}

impl Fuser {
    pub fn params(&self) -> &ParamSet {
        match self {
            Fuser::Gate(g) => &g.params,
            Fuser::SoftMoe(s) => &s.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Fuser::Gate(g) => &mut g.params,
            Fuser::SoftMoe(s) => &mut s.params,
        }
    }

    pub fn forward(&self, tape: &mut Tape, expert_scores: Var, task_logits: Var) -> Result<Var> {
        match self {
            Fuser::Gate(g) => g.forward(tape, expert_scores, task_logits),
            Fuser::SoftMoe(s) => s.forward(tape, expert_scores, task_logits),
        }
    }

    pub fn infer(&self, expert_scores: &Tensor, task_logits: &Tensor) -> Result<Vec<f64>> {
        match self {
            Fuser::Gate(g) => g.infer(expert_scores, task_logits),
            Fuser::SoftMoe(s) => s.infer(expert_scores, task_logits),
        }
    }
}

/// Scores of one video at every stage of the model.
#[derive(Debug, Clone)]
pub struct VideoScores {
    pub encoder: Vec<f64>,
    /// `T x N`.
    pub experts: Tensor,
    pub fused: Option<Vec<f64>>,
}

impl VideoScores {
    /// Per-snippet maximum over experts.
    pub fn experts_max(&self) -> Vec<f64> {
        (0..self.experts.rows())
            .map(|r| self.experts.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Everything needed to score a video, plus the names of the experts.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: TaskEncoder,
    pub experts: Vec<Expert>,
    pub expert_names: Vec<String>,
    pub fuser: Option<Fuser>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    config: ModelConfig,
    d_feat: usize,
    n_experts: usize,
    expert_names: Vec<String>,
    fusion: Option<Fusion>,
    use_task_features: bool,
}

impl ModelBundle {
    pub fn score(&self, features: &Tensor) -> Result<VideoScores> {
        self.score_masked(features, None)
    }

    /// Scores a video with expert `mask` (if any) replaced by [`MASK_VALUE`]
    /// before fusion.
    pub fn score_masked(&self, features: &Tensor, mask: Option<usize>) -> Result<VideoScores> {
        let (task, encoder) = self.encoder.infer(features)?;
        let per_expert = self
            .experts
            .iter()
            .map(|e| e.infer(&task))
            .collect::<Result<Vec<_>>>()?;
        let mut experts = if per_expert.is_empty() {
            Tensor::zeros(vec![features.rows(), 0])
        } else {
            stack_scores(&per_expert)?
        };
        if let Some(i) = mask {
            experts = mask_expert(&experts, i)?;
        }
        let fused = match &self.fuser {
            Some(f) => Some(f.infer(&experts, &task)?),
            None => None,
        };
        Ok(VideoScores { encoder, experts, fused })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut sections: Vec<(String, &ParamSet)> = vec![("encoder".into(), &self.encoder.params)];
        for (i, e) in self.experts.iter().enumerate() {
            sections.push((format!("expert{i}"), &e.params));
        }
        if let Some(f) = &self.fuser {
            sections.push(("fuser".into(), f.params()));
        }
        sections
            .into_iter()
            .flat_map(|(prefix, ps)| ps.iter().map(move |(name, t)| (format!("{prefix}/{name}"), t)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (fusion, use_task_features) = match &self.fuser {
            Some(Fuser::Gate(g)) => (Some(Fusion::Gate), g.use_task_features),
            Some(Fuser::SoftMoe(_)) => (Some(Fusion::SoftMoe), true),
            None => (None, true),
        };
        let meta = BundleMeta {
            config: self.config.clone(),
            d_feat: self.encoder.d_feat(),
            n_experts: self.experts.len(),
            expert_names: self.expert_names.clone(),
            fusion,
            use_task_features,
        };
        save_tensors(path, serde_json::to_value(meta)?, &self.named_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, tensors) = load_tensors(path)?;
        let meta: BundleMeta = serde_json::from_value(meta)
            .map_err(|e| crate::error::ContainerError::Header(format!("checkpoint metadata: {e}")))?;
        // architecture is rebuilt with throwaway values, then overwritten
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let cfg = &meta.config;
        let mut encoder = TaskEncoder::new(meta.d_feat, cfg, &mut rng)?;
        let mut experts = (0..meta.n_experts)
            .map(|_| Expert::new(cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut fuser = match meta.fusion {
            Some(Fusion::Gate) => Some(Fuser::Gate(Gate::new(meta.n_experts, cfg, meta.use_task_features, &mut rng)?)),
            Some(Fusion::SoftMoe) => Some(Fuser::SoftMoe(SoftMoe::new(meta.n_experts, cfg, &mut rng)?)),
            None => None,
        };

        let section = |prefix: &str| -> Vec<(&str, &Tensor)> {
            tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')).map(|r| (r, t)))
                .collect()
        };
        encoder.params.load_named(section("encoder"))?;
        for (i, e) in experts.iter_mut().enumerate() {
            e.params.load_named(section(&format!("expert{i}")))?;
        }
        if let Some(f) = &mut fuser {
            f.params_mut().load_named(section("fuser"))?;
        }
        let known = 1 + meta.n_experts + usize::from(fuser.is_some());
        let prefixes: std::collections::BTreeSet<&str> =
            tensors.iter().filter_map(|(n, _)| n.split('/').next()).collect();
        if prefixes.len() > known {
            return Err(Error::invalid(format!("checkpoint holds unexpected sections: {prefixes:?}")));
        }
        Ok(Self {
            config: meta.config,
            encoder,
            experts,
            expert_names: meta.expert_names,
            fuser,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small();
        let enc = TaskEncoder::new(3, &cfg, &mut rng).unwrap();
        let x = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
        let (task, s) = enc.infer(&x).unwrap();
        assert_eq!(task.shape(), &[5, 8]);
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        let ex = Expert::new(&cfg, &mut rng).unwrap();
        let es = ex.infer(&task).unwrap();
        let gate = Gate::new(1, &cfg, true, &mut rng).unwrap();
        let g = gate.infer(&stack_scores(&[es]).unwrap(), &task).unwrap();
        assert_eq!(g.len(), 5);
        assert!(enc.infer(&Tensor::zeros(vec![5, 4])).is_err());
    }

    #[test]
    fn zeroed_expert_is_sigmoid_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small();
        let mut ex = Expert::new(&cfg, &mut rng).unwrap();
        ex.zero_last_weights();
        let bias = ex.params.get(ex.head.last().bias).data()[0];
        let s = ex.infer(&Tensor::uniform(vec![4, 8], 1.0, &mut rng)).unwrap();
        for v in s {
            assert_eq!(v, crate::nn::sigmoid_scalar(bias));
        }
    }

    #[test]
    fn mask_replaces_one_column() {
        let s = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = mask_expert(&s, 1).unwrap();
        assert_eq!(m.data(), &[0.1, 0.5, 0.3, 0.5]);
        assert!(mask_expert(&s, 2).is_err());
    }
}
