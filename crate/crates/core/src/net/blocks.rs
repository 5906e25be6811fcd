//! Attention and MLP building blocks on the tape.

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Tape, Var};

pub(crate) struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(binds: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: binds.get(&format!("{prefix}.weight"))?,
            bias: binds.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

pub(crate) struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

impl Norm {
    pub fn bind(binds: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Norm {
            gamma: binds.get(&format!("{prefix}.gamma"))?,
            beta: binds.get(&format!("{prefix}.beta"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

/// `[B, T, D]` to `[B, H, T, D / H]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, t, h * dh])
}

/// Scaled dot-product attention over already projected `q` `[B, Tq, D]`,
/// `k` and `v` `[B, Tk, D]`.
pub(crate) fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q)[2];
    if d % heads != 0 {
        return Err(Error::contract(format!("dimension {d} not divisible by {heads} heads")));
    }
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let ctx = tape.matmul(weights, v)?;
    merge_heads(tape, ctx)
}

pub(crate) struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn bind(binds: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(SelfAttention {
            qkv: Linear::bind(binds, &format!("{prefix}.qkv"))?,
            proj: Linear::bind(binds, &format!("{prefix}.proj"))?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(tape, x)?;
        let d = tape.shape(x)[2];
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, 2 * d)?;
        let v = tape.slice(qkv, 2, 2 * d, 3 * d)?;
        let ctx = attend(tape, q, k, v, self.heads)?;
        self.proj.forward(tape, ctx)
    }
}

pub(crate) struct CrossAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn bind(binds: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(CrossAttention {
            q: Linear::bind(binds, &format!("{prefix}.q"))?,
            kv: Linear::bind(binds, &format!("{prefix}.kv"))?,
            proj: Linear::bind(binds, &format!("{prefix}.proj"))?,
            heads,
        })
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward(&self, tape: &mut Tape, x: Var, context: Var) -> Result<Var> {
        let d = tape.shape(x)[2];
        let q = self.q.forward(tape, x)?;
        let kv = self.kv.forward(tape, context)?;
        let k = tape.slice(kv, 2, 0, d)?;
        let v = tape.slice(kv, 2, d, 2 * d)?;
        let ctx = attend(tape, q, k, v, self.heads)?;
        self.proj.forward(tape, ctx)
    }
}

pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn bind(binds: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::bind(binds, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(binds, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Pre-norm encoder block: self-attention then MLP, each residual.
pub(crate) struct EncoderBlock {
    norm1: Norm,
    attn: SelfAttention,
    norm2: Norm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn bind(binds: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: Norm::bind(binds, &format!("{prefix}.norm1"))?,
            attn: SelfAttention::bind(binds, &format!("{prefix}.attn"), heads)?,
            norm2: Norm::bind(binds, &format!("{prefix}.norm2"))?,
            mlp: Mlp::bind(binds, &format!("{prefix}.mlp"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.attn.forward(tape, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Decoder block for one stream: pre-norm self-attention, then
/// cross-attention to the other stream, then MLP.
pub(crate) struct DecoderStreamBlock {
    norm1: Norm,
    self_attn: SelfAttention,
    norm2: Norm,
    norm_context: Norm,
    cross_attn: CrossAttention,
    norm3: Norm,
    mlp: Mlp,
}

impl DecoderStreamBlock {
    pub fn bind(binds: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(DecoderStreamBlock {
            norm1: Norm::bind(binds, &format!("{prefix}.norm1"))?,
            self_attn: SelfAttention::bind(binds, &format!("{prefix}.self_attn"), heads)?,
            norm2: Norm::bind(binds, &format!("{prefix}.norm2"))?,
            norm_context: Norm::bind(binds, &format!("{prefix}.norm_context"))?,
            cross_attn: CrossAttention::bind(binds, &format!("{prefix}.cross_attn"), heads)?,
            norm3: Norm::bind(binds, &format!("{prefix}.norm3"))?,
            mlp: Mlp::bind(binds, &format!("{prefix}.mlp"))?,
        })
    }

    pub fn self_step(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.self_attn.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn cross_step(&self, tape: &mut Tape, x: Var, context: Var) -> Result<Var> {
        let q = self.norm2.forward(tape, x)?;
        let c = self.norm_context.forward(tape, context)?;
        let h = self.cross_attn.forward(tape, q, c)?;
        tape.add(x, h)
    }

    pub fn mlp_step(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm3.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }
}
