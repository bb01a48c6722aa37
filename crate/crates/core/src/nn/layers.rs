//! Parameterized building blocks. Each layer only stores [`ParamId`]s; the
//! values live in the owning component's [`ParamSet`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{ParamId, ParamSet, Tensor};

/// Affine map `x·W + b` with `W: [in, out]`, `b: [1, out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, out) = tape.dims(w);
    if tape.dims(b) != (1, out) {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for weight {:?}", tape.dims(b), tape.dims(w)),
        ));
    }
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), Tensor::uniform(vec![in_dim, out_dim], bound, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::uniform(vec![1, out_dim], bound, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        linear(tape, x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(
            format!("{name}.gain"),
            Tensor::new(vec![1, dim], vec![1.0; dim]).expect("valid"),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![1, dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product attention over `heads` heads with separate query,
/// key, value and output projections. No positional information is added.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(ps, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(ps, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Attention with queries from `q_src` and keys/values from `kv_src`.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, q_src: Var, kv_src: Var) -> Result<Var> {
        self.forward_qkv(tape, ps, q_src, kv_src, kv_src).map(|(o, _)| o)
    }

    /// General form with independent key and value sources. Also returns the
    /// per-head attention weight matrices (`T_q x T_k`, rows sum to one).
    pub fn forward_qkv(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<(Var, Vec<Var>)> {
        for (what, v) in [("query", q_src), ("key", k_src), ("value", v_src)] {
            if tape.dims(v).1 != self.dim {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("{what} source width {} != {}", tape.dims(v).1, self.dim),
                ));
            }
        }
        if tape.dims(k_src).0 != tape.dims(v_src).0 {
            return Err(Error::shape("multi_head_attention", "key and value lengths differ"));
        }
        let q = self.query.forward(tape, ps, q_src)?;
        let k = self.key.forward(tape, ps, k_src)?;
        let v = self.value.forward(tape, ps, v_src)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.output.forward(tape, ps, joined)?, weights))
    }
}

/// Free-function form: `mha` applied with queries from `q_src` and
/// keys/values from `kv_src` (self-attention when they coincide).
pub fn multi_head_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    mha: &MultiHeadAttention,
    q_src: Var,
    kv_src: Var,
) -> Result<Var> {
    mha.forward(tape, ps, q_src, kv_src)
}

/// Pre-norm block: `x + attn(ln(x))`, then `+ mlp(ln(.))` with a
/// `d -> d/2 -> d` ReLU MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub pre_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub post_norm: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let hidden = (dim / 2).max(1);
        Ok(Self {
            pre_norm: LayerNorm::new(ps, &format!("{name}.pre_norm"), dim),
            attention: MultiHeadAttention::new(ps, &format!("{name}.attention"), dim, heads, rng)?,
            post_norm: LayerNorm::new(ps, &format!("{name}.post_norm"), dim),
            fc_in: Linear::new(ps, &format!("{name}.fc_in"), dim, hidden, rng),
            fc_out: Linear::new(ps, &format!("{name}.fc_out"), hidden, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.pre_norm.forward(tape, ps, x)?;
        let a = self.attention.forward(tape, ps, h, h)?;
        let x1 = tape.add(x, a)?;
        let h2 = self.post_norm.forward(tape, ps, x1)?;
        let m = self.fc_in.forward(tape, ps, h2)?;
        let m = tape.relu(m);
        let m = self.fc_out.forward(tape, ps, m)?;
        tape.add(x1, m)
    }
}

/// Four-layer head narrowing `in -> d/4 -> d/8 -> d/16 -> out` (each width at
/// least 1), GELU between the last two layers only. Emits pre-sigmoid logits.
#[derive(Debug, Clone)]
pub struct ScoreMlp {
    pub layers: Vec<Linear>,
}

impl ScoreMlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_dim: usize, width: usize, out_dim: usize, rng: &mut R) -> Self {
        let dims = [
            in_dim,
            (width / 4).max(1),
            (width / 8).max(1),
            (width / 16).max(1),
            out_dim,
        ];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("four layers")
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i + 1 == n {
                h = tape.gelu(h);
            }
            h = layer.forward(tape, ps, h)?;
        }
        Ok(h)
    }
}
