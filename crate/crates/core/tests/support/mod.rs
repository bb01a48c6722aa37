//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance run.
#![allow(dead_code)]

use gsmoe::data::{Dataset, VideoRecord};
use gsmoe::losses::{self, RegularizerWeights};
use gsmoe::model::{Expert, Gate, ModelConfig, SoftMoe, TaskEncoder};
use gsmoe::nn::gradcheck::{gradcheck, Parameterized};
use gsmoe::nn::{LayerNorm, Linear, MultiHeadAttention, ParamSet, ScoreMlp, Tape, Tensor, TransformerBlock, Var};
use gsmoe::signal::PseudoLabel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- peaks

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePeak {
    pub position: usize,
    pub v1: usize,
    pub v2: usize,
    pub width: usize,
    pub sigma: f64,
}

/// Welford's running variance, sample normalisation.
fn welford_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    (m2 / (xs.len() - 1) as f64).sqrt()
}

/// Exhaustive five-window peak search.
pub fn brute_peaks(s: &[f64], threshold: f64, sigma_floor: f64) -> Vec<OraclePeak> {
    let n = s.len();
    let mut out = Vec::new();
    for t in 0..n {
        if t < 2 || t + 2 >= n {
            continue;
        }
        let mut strict_max = true;
        let mut lowest = s[t];
        for i in t - 2..=t + 2 {
            if i != t && s[i] >= s[t] {
                strict_max = false;
            }
            if s[i] < lowest {
                lowest = s[i];
            }
        }
        if !strict_max || s[t] - lowest < threshold {
            continue;
        }
        let mut v1 = 0;
        let mut j = t;
        while j > 0 && s[j - 1] < s[j] {
            v1 += 1;
            j -= 1;
        }
        let mut v2 = 0;
        let mut j = t;
        while j + 1 < n && s[j + 1] < s[j] {
            v2 += 1;
            j += 1;
        }
        let width = if v1 < v2 { v1 } else { v2 };
        let sigma = welford_std(&s[t - width..t + width + 1]).max(sigma_floor);
        out.push(OraclePeak {
            position: t,
            v1,
            v2,
            width,
            sigma,
        });
    }
    out
}

/// Scores in `[0, 1]` from one of three families: white noise, smooth bumps
/// with noise, and coarsely quantised values full of ties and plateaus.
pub fn random_series(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => (0..len).map(|_| rng.gen::<f64>()).collect(),
        1 => {
            let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..8))
                .map(|_| {
                    (
                        rng.gen_range(0.0..len as f64),
                        rng.gen_range(1.0..12.0),
                        rng.gen_range(0.1..0.9),
                    )
                })
                .collect();
            (0..len)
                .map(|t| {
                    let b: f64 = bumps
                        .iter()
                        .map(|(c, w, a)| a * (-((t as f64 - c) / w).powi(2)).exp())
                        .sum();
                    (0.05 + b + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
                })
                .collect()
        }
        _ => (0..len).map(|_| (rng.gen_range(0..11) as f64) / 10.0).collect(),
    }
}

// ---------------------------------------------------------------- metrics

/// Pairwise AUC: every positive against every negative, ties worth one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// AP from prefix counts of the ranking sorted by descending score, ties in
/// index order.
pub fn ap_prefix(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps equal scores in index order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut prefix = vec![0usize; order.len() + 1];
    for (k, &i) in order.iter().enumerate() {
        prefix[k + 1] = prefix[k] + labels[i] as usize;
    }
    let total = prefix[order.len()] as f64;
    let mut ap = 0.0;
    for k in 1..=order.len() {
        let recall_step = (prefix[k] - prefix[k - 1]) as f64 / total;
        let precision = prefix[k] as f64 / k as f64;
        ap += recall_step * precision;
    }
    ap
}

/// A labelled ranking instance with both classes present. Half the
/// instances draw scores from a small grid so ties are common.
pub fn random_ranking(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.gen_range(2..=max_n);
        let coarse = rng.gen_bool(0.5);
        let rate = rng.gen_range(0.05..0.6);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(rate))).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let base = if coarse {
                    rng.gen_range(0..8) as f64 / 8.0
                } else {
                    rng.gen::<f64>()
                };
                (base + 0.2 * l as f64).min(1.0)
            })
            .collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

// ---------------------------------------------------------------- datasets

/// Random dataset whose features are exactly representable in 32 bits.
pub fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let d_feat = rng.gen_range(1..6);
    let n_classes = rng.gen_range(1..4);
    let records = (0..rng.gen_range(1..12))
        .map(|i| {
            let t = rng.gen_range(1..20);
            let abnormal = rng.gen_bool(0.5);
            let data = (0..t * d_feat).map(|_| rng.gen_range(-50.0f32..50.0) as f64).collect();
            VideoRecord {
                id: format!("v{i}/{}", rng.gen::<u16>()),
                features: Tensor::new(vec![t, d_feat], data).unwrap(),
                abnormal,
                class_id: abnormal.then(|| rng.gen_range(0..n_classes)),
                snippet_gt: rng
                    .gen_bool(0.5)
                    .then(|| (0..t).map(|_| u8::from(abnormal && rng.gen_bool(0.3))).collect()),
            }
        })
        .collect();
    Dataset {
        class_names: (0..n_classes).map(|c| format!("c{c}")).collect(),
        d_feat,
        records,
    }
}

/// Bitwise dataset equality, so `-0.0` and `0.0` are told apart.
pub fn same_bits(a: &Dataset, b: &Dataset) -> bool {
    a.class_names == b.class_names
        && a.d_feat == b.d_feat
        && a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.id == y.id
                && x.abnormal == y.abnormal
                && x.class_id == y.class_id
                && x.snippet_gt == y.snippet_gt
                && x.features.shape() == y.features.shape()
                && x.features
                    .data()
                    .iter()
                    .zip(y.features.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

// ---------------------------------------------------------------- gradients

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradResult {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn grad_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    uniform(rng, rows, cols, scale).with_grad()
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> gsmoe::Result<Var> {
    let (r, c) = tape.dims(y);
    let w = tape.constant(r, c, w.data().to_vec())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        encoder_heads: 2,
        expert_heads: 2,
        gate_heads: 4,
        cross_heads: 2,
    }
}

/// Encoder, two experts and the gate as one differentiable chain.
struct Chain {
    encoder: TaskEncoder,
    experts: Vec<Expert>,
    gate: Gate,
}

impl Parameterized for Chain {
    fn param_sets(&self) -> Vec<&ParamSet> {
        let mut v = vec![&self.encoder.params];
        v.extend(self.experts.iter().map(|e| &e.params));
        v.push(&self.gate.params);
        v
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut v = vec![&mut self.encoder.params];
        v.extend(self.experts.iter_mut().map(|e| &mut e.params));
        v.push(&mut self.gate.params);
        v
    }
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> PseudoLabel {
    PseudoLabel::new((0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub type Case = fn(&mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport>;

fn case_topk_abnormal(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let inputs: Vec<Tensor> = (0..3).map(|_| grad_input(rng, 12, 1, 3.0)).collect();
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| losses::topk_abnormal_term(tape, v, 2))
}

fn case_topk_normal(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let inputs: Vec<Tensor> = (0..3).map(|_| grad_input(rng, 12, 1, 3.0)).collect();
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| losses::topk_normal_term(tape, v, 3))
}

fn case_bce(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let targets = random_targets(rng, 10);
    let inputs = [grad_input(rng, 10, 1, 3.0)];
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| {
        let p = tape.sigmoid(v[0]);
        losses::bce(tape, p, &targets)
    })
}

fn case_tgs(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let targets = random_targets(rng, 16);
    let inputs = [grad_input(rng, 16, 1, 3.0), grad_input(rng, 16, 1, 3.0), grad_input(rng, 16, 1, 3.0)];
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| {
        let p = tape.sigmoid(v[0]);
        losses::tgs_loss(tape, p, &targets, &v[1..], 1)
    })
}

fn case_mil(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let inputs: Vec<Tensor> = (0..4).map(|_| grad_input(rng, 16, 1, 3.0)).collect();
    let w = RegularizerWeights::default();
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| {
        let norm = losses::topk_normal_term(tape, &v[..2], 1)?;
        let abn = losses::topk_abnormal_term(tape, &v[2..], 1)?;
        let mut loss = tape.add(norm, abn)?;
        for &l in &v[2..] {
            let s = tape.sigmoid(l);
            let sm = losses::smoothness(tape, s)?;
            let sm = tape.scale(sm, w.smoothness);
            let sp = losses::sparsity(tape, s);
            let sp = tape.scale(sp, w.sparsity);
            loss = tape.add(loss, sm)?;
            loss = tape.add(loss, sp)?;
        }
        Ok(loss)
    })
}

fn case_smoothness(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let inputs = [grad_input(rng, 9, 1, 3.0)];
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| {
        let s = tape.sigmoid(v[0]);
        losses::smoothness(tape, s)
    })
}

fn case_sparsity(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let inputs = [grad_input(rng, 1, 9, 3.0)];
    gradcheck(&mut (), &inputs, GRAD_H, |_, tape, v| {
        let s = tape.sigmoid(v[0]);
        Ok(losses::sparsity(tape, s))
    })
}

fn case_linear(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let layer = Linear::new(&mut ps, "l", 5, 3, rng);
    let w = uniform(rng, 4, 3, 1.0);
    let inputs = [grad_input(rng, 4, 5, 1.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let y = layer.forward(tape, ps, v[0])?;
        project(tape, y, &w)
    })
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let layer = LayerNorm::new(&mut ps, "ln", 6);
    // move gain and bias off their identity initialisation
    for t in ps.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    let w = uniform(rng, 4, 6, 1.0);
    let inputs = [grad_input(rng, 4, 6, 2.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let y = layer.forward(tape, ps, v[0])?;
        project(tape, y, &w)
    })
}

fn case_self_attention(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 2, rng)?;
    let w = uniform(rng, 5, 8, 1.0);
    let inputs = [grad_input(rng, 5, 8, 1.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let y = mha.forward(tape, ps, v[0], v[0])?;
        project(tape, y, &w)
    })
}

fn case_cross_attention(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 4, rng)?;
    let w = uniform(rng, 3, 8, 1.0);
    let inputs = [grad_input(rng, 3, 8, 1.0), grad_input(rng, 5, 8, 1.0), grad_input(rng, 5, 8, 1.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let (y, _) = mha.forward_qkv(tape, ps, v[0], v[1], v[2])?;
        project(tape, y, &w)
    })
}

fn case_transformer_block(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let block = TransformerBlock::new(&mut ps, "block", 8, 2, rng)?;
    let w = uniform(rng, 5, 8, 1.0);
    let inputs = [grad_input(rng, 5, 8, 1.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let y = block.forward(tape, ps, v[0])?;
        project(tape, y, &w)
    })
}

fn case_score_mlp(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut ps = ParamSet::new();
    let mlp = ScoreMlp::new(&mut ps, "mlp", 16, 32, 2, rng);
    let w = uniform(rng, 4, 2, 1.0);
    let inputs = [grad_input(rng, 4, 16, 1.0)];
    gradcheck(&mut ps, &inputs, GRAD_H, |ps, tape, v| {
        let y = mlp.forward(tape, ps, v[0])?;
        project(tape, y, &w)
    })
}

fn case_task_encoder(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut enc = TaskEncoder::new(5, &tiny_config(), rng)?;
    let wt = uniform(rng, 6, 8, 1.0);
    let ws = uniform(rng, 6, 1, 1.0);
    let inputs = [grad_input(rng, 6, 5, 1.0)];
    gradcheck(&mut enc, &inputs, GRAD_H, |enc, tape, v| {
        let out = enc.forward(tape, v[0])?;
        let a = project(tape, out.task_logits, &wt)?;
        let b = project(tape, out.logits, &ws)?;
        tape.add(a, b)
    })
}

fn case_expert(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut expert = Expert::new(&tiny_config(), rng)?;
    let w = uniform(rng, 6, 1, 1.0);
    let inputs = [grad_input(rng, 6, 8, 1.0)];
    gradcheck(&mut expert, &inputs, GRAD_H, |e, tape, v| {
        let y = e.forward(tape, v[0])?;
        project(tape, y, &w)
    })
}

fn case_gate(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut gate = Gate::new(3, &tiny_config(), true, rng)?;
    let w = uniform(rng, 6, 1, 1.0);
    let scores = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(0.05..0.95)).collect())?.with_grad();
    let inputs = [scores, grad_input(rng, 6, 8, 1.0)];
    gradcheck(&mut gate, &inputs, GRAD_H, |g, tape, v| {
        let y = g.forward(tape, v[0], v[1])?;
        project(tape, y, &w)
    })
}

fn case_soft_moe(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let mut moe = SoftMoe::new(3, &tiny_config(), rng)?;
    let w = uniform(rng, 6, 1, 1.0);
    let scores = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(0.05..0.95)).collect())?.with_grad();
    let inputs = [scores, grad_input(rng, 6, 8, 1.0)];
    gradcheck(&mut moe, &inputs, GRAD_H, |m, tape, v| {
        let y = m.forward(tape, v[0], v[1])?;
        project(tape, y, &w)
    })
}

/// Features through encoder, two experts and the gate, into the splatting
/// objective with a normal-video top-k term.
fn case_chain(rng: &mut ChaCha8Rng) -> gsmoe::Result<gsmoe::nn::gradcheck::GradCheckReport> {
    let cfg = tiny_config();
    let mut chain = Chain {
        encoder: TaskEncoder::new(5, &cfg, rng)?,
        experts: vec![Expert::new(&cfg, rng)?, Expert::new(&cfg, rng)?],
        gate: Gate::new(2, &cfg, true, rng)?,
    };
    let targets = random_targets(rng, 6);
    let inputs = [grad_input(rng, 6, 5, 1.0), grad_input(rng, 6, 5, 1.0)];
    gradcheck(&mut chain, &inputs, GRAD_H, |c, tape, v| {
        let mut fused = Vec::new();
        for &x in v {
            let task = c.encoder.forward(tape, x)?.task_logits;
            let per_expert = c
                .experts
                .iter()
                .map(|e| {
                    let l = e.forward(tape, task)?;
                    Ok(tape.sigmoid(l))
                })
                .collect::<gsmoe::Result<Vec<_>>>()?;
            let scores = tape.concat_cols(&per_expert)?;
            fused.push(c.gate.forward(tape, scores, task)?);
        }
        let p = tape.sigmoid(fused[0]);
        losses::tgs_loss(tape, p, &targets, &fused[1..], 1)
    })
}

pub const GRADIENT_CASES: &[(&str, Case)] = &[
    ("loss/topk_abnormal", case_topk_abnormal),
    ("loss/topk_normal", case_topk_normal),
    ("loss/bce", case_bce),
    ("loss/tgs", case_tgs),
    ("loss/mil", case_mil),
    ("loss/smoothness", case_smoothness),
    ("loss/sparsity", case_sparsity),
    ("block/linear", case_linear),
    ("block/layer_norm", case_layer_norm),
    ("block/self_attention", case_self_attention),
    ("block/cross_attention", case_cross_attention),
    ("block/transformer", case_transformer_block),
    ("block/score_mlp", case_score_mlp),
    ("model/task_encoder", case_task_encoder),
    ("model/expert", case_expert),
    ("model/gate", case_gate),
    ("model/soft_moe", case_soft_moe),
];

/// The whole scoring chain; checked on fewer instantiations since every
/// perturbation reruns four networks on two videos.
pub const CHAIN_CASES: &[(&str, Case)] = &[("chain/encoder_experts_gate", case_chain)];

/// Runs every case on `instances` random instantiations.
pub fn gradient_suite(cases: &[(&'static str, Case)], instances: usize, seed: u64) -> Vec<GradResult> {
    use rand::SeedableRng;
    cases
        .iter()
        .enumerate()
        .map(|(c, &(name, case))| {
            let mut res = GradResult {
                name,
                instances,
                checked: 0,
                max_rel_err: 0.0,
                worst: String::new(),
            };
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 32) ^ i as u64);
                let r = case(&mut rng).unwrap_or_else(|e| panic!("{name} instance {i}: {e}"));
                res.checked += r.checked;
                if r.max_rel_err >= res.max_rel_err {
                    res.max_rel_err = r.max_rel_err;
                    res.worst = format!("instance {i}, {}", r.worst);
                }
            }
            res
        })
        .collect()
}
