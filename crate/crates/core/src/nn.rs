//! Parameterized layers built on the tape: linear maps, layer norm,
//! multi-head self-attention and pre/post-norm transformer blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Param, Parameterized, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Weights ~ N(0, 1/in), zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_std(name, d_in, d_out, bias, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => tape.add_row(y, tape.param(b)),
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

/// Low-rank linear map `y = x·A·Bᵀ + b`, `A: [in, r]`, `B: [out, r]`.
/// Both factors train; there is no frozen base matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub down: Param,
    pub up: Param,
    pub bias: Param,
}

impl LoraLinear {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Self {
        // Scaled so that A·Bᵀ has the same entry variance as a dense 1/in init.
        let std = (1.0 / (d_in as f64 * rank as f64).sqrt()).sqrt();
        Self {
            down: Param::new(format!("{name}.lora_a"), Tensor::randn(&[d_in, rank], std, rng)),
            up: Param::new(format!("{name}.lora_b"), Tensor::randn(&[d_out, rank], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.tensor.shape()[1]
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, tape.param(&self.down))?;
        let y = tape.matmul_nt(h, tape.param(&self.up))?;
        tape.add_row(y, tape.param(&self.bias))
    }

    /// The composed `[in, out]` matrix `A·Bᵀ`.
    pub fn composed(&self) -> Tensor {
        let a = &self.down.tensor;
        let b = &self.up.tensor;
        let (d_in, r) = (a.shape()[0], a.shape()[1]);
        let d_out = b.shape()[0];
        let mut out = vec![0.0; d_in * d_out];
        for i in 0..d_in {
            for j in 0..d_out {
                out[i * d_out + j] = (0..r).map(|k| a.data()[i * r + k] * b.data()[j * r + k]).sum();
            }
        }
        Tensor::new(&[d_in, d_out], out).expect("composed shape")
    }
}

impl Parameterized for LoraLinear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.down);
        f(&self.up);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.down);
        f(&mut self.up);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(&self.gamma), tape.param(&self.beta), LN_EPS)
    }
}

impl Parameterized for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Bidirectional multi-head self-attention over a `[s, d]` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("{heads} attention heads do not divide width {d}")));
        }
        Ok(Self {
            heads,
            q: Linear::new(&format!("{name}.q"), d, d, true, rng),
            k: Linear::new(&format!("{name}.k"), d, d, true, rng),
            v: Linear::new(&format!("{name}.v"), d, d, true, rng),
            out: Linear::new(&format!("{name}.out"), d, d, true, rng),
        })
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }

    /// Also returns the `[s, s]` attention matrix of every head.
    pub fn forward_with_weights(&self, tape: &Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.q.d_in();
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape("attention input", &shape, &[d]));
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, lo, hi)?,
                    tape.slice_cols(k, lo, hi)?,
                    tape.slice_cols(v, lo, hi)?,
                )
            };
            let scores = tape.scale(tape.matmul_nt(qh, kh)?, scale);
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.out.forward(tape, merged)?, weights))
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Pre-norm (`x + f(LN(x))`) when true, post-norm (`LN(x + f(x))`) otherwise.
    pub layernorm_first: bool,
}

/// Transformer encoder block: self-attention then a QuickGELU MLP, each with
/// a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub config: BlockConfig,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, config: BlockConfig, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let d = config.width;
        Ok(Self {
            config,
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, config.heads, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            fc1: Linear::new(&format!("{name}.fc1"), d, config.ff_dim, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), config.ff_dim, d, true, rng),
        })
    }

    fn mlp(&self, tape: &Tape, x: Var) -> Result<Var> {
        let h = tape.quick_gelu(self.fc1.forward(tape, x)?);
        let h = tape.dropout(h, self.config.dropout)?;
        self.fc2.forward(tape, h)
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let p = self.config.dropout;
        if self.config.layernorm_first {
            let a = self.attn.forward(tape, self.ln1.forward(tape, x)?)?;
            let x = tape.add(x, tape.dropout(a, p)?)?;
            let m = self.mlp(tape, self.ln2.forward(tape, x)?)?;
            tape.add(x, tape.dropout(m, p)?)
        } else {
            let a = self.attn.forward(tape, x)?;
            let x = self.ln1.forward(tape, tape.add(x, tape.dropout(a, p)?)?)?;
            let m = self.mlp(tape, x)?;
            self.ln2.forward(tape, tape.add(x, tape.dropout(m, p)?)?)
        }
    }
}

impl Parameterized for TransformerBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new("a", 10, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = attn.forward(&tape, xv).unwrap();
        let expected = attn.out.forward(&tape, attn.v.forward(&tape, xv).unwrap()).unwrap();
        assert_eq!(&*tape.value(y), &*tape.value(expected));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = MultiHeadAttention::new("a", 8, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(&[5, 8], 1.0, &mut rng));
        let (_, weights) = attn.forward_with_weights(&tape, x).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            for row in tape.value(w).chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut attn = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        attn.set_requires_grad(true);
        let x0 = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let loss = |attn: &MultiHeadAttention, x: &Tensor| {
            let tape = Tape::new();
            let xv = tape.leaf(x);
            let y = attn.forward(&tape, xv).unwrap();
            let y = tape.mul(y, tape.leaf(&w)).unwrap();
            let l = tape.sum(y);
            (tape, l, xv)
        };
        let x_req = x0.clone().with_requires_grad(true);
        let (tape, l, xv) = loss(&attn, &x_req);
        let grads = tape.backward(l).unwrap();
        let h = 1e-5;
        // input gradient
        let gx = grads.get(xv).unwrap().to_vec();
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let (tp, lp, _) = loss(&attn, &p);
            let (tm, lm, _) = loss(&attn, &m);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let scale = fd.abs().max(gx[i].abs()).max(1e-7);
            assert!((fd - gx[i]).abs() / scale < 1e-5, "x[{i}] {fd} vs {}", gx[i]);
        }
        // query weight gradient
        let gq = grads.get(tape.param_var("a.q.weight").unwrap()).unwrap().to_vec();
        for i in 0..gq.len() {
            let mut p = attn.clone();
            p.q.weight.tensor.data_mut()[i] += h;
            let mut m = attn.clone();
            m.q.weight.tensor.data_mut()[i] -= h;
            let (tp, lp, _) = loss(&p, &x0);
            let (tm, lm, _) = loss(&m, &x0);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let scale = fd.abs().max(gq[i].abs()).max(1e-7);
            assert!((fd - gq[i]).abs() / scale < 1e-5, "wq[{i}] {fd} vs {}", gq[i]);
        }
    }

    #[test]
    fn lora_composed_rank_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lora = LoraLinear::new("l", 6, 5, 2, &mut rng);
        let tape = Tape::new();
        let eye: Vec<f64> = (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
        let x = tape.constant(&[6, 6], eye).unwrap();
        let y = lora.forward(&tape, x).unwrap();
        // Rows of the identity pick out rows of the composed matrix.
        let c = lora.composed();
        for (a, b) in tape.value(y).iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn post_norm_block_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BlockConfig {
            width: 8,
            heads: 2,
            ff_dim: 12,
            dropout: 0.1,
            layernorm_first: false,
        };
        let block = TransformerBlock::new("b", cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(&[3, 8], 1.0, &mut rng));
        let y = block.forward(&tape, x).unwrap();
        assert_eq!(tape.shape(y), vec![3, 8]);
        // post-norm output rows are normalized
        for row in tape.value(y).chunks(8) {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
