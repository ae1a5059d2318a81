use rand::Rng;

use super::{LayerNorm, Linear, Module, Param, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Full multi-head self-attention: every token, class token included,
/// attends to every token.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Element> MultiHeadSelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("dim {dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadSelfAttention {
            q: Linear::new(&format!("{name}.q"), dim, dim, rng),
            k: Linear::new(&format!("{name}.k"), dim, dim, rng),
            v: Linear::new(&format!("{name}.v"), dim, dim, rng),
            out: Linear::new(&format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_features()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn split_heads(&self, tape: &mut Tape<T>, x: Var, b: usize, n: usize) -> Result<Var> {
        let x = tape.reshape(x, &[b, n, self.heads, self.head_dim()])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// `x: [B, N, dim] → [B, N, dim]`, softmax(q·kᵀ/√head_dim)·v per head.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim() {
            return Err(Error::shape("mhsa", &shape, &[self.dim()]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let q = self.split_heads(tape, q, b, n)?;
        let k = self.split_heads(tape, k, b, n)?;
        let v = self.split_heads(tape, v, b, n)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, T::lit(1.0 / (self.head_dim() as f64).sqrt()));
        let attn = tape.softmax(scores, -1)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        self.out.forward(tape, ctx)
    }

    pub(crate) fn cast<U: Element>(&self) -> MultiHeadSelfAttention<U> {
        MultiHeadSelfAttention {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            out: self.out.cast(),
            heads: self.heads,
        }
    }
}

impl<T: Element> Module<T> for MultiHeadSelfAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Linear(dim → hidden) → GELU → Linear(hidden → dim).
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(&format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub(crate) fn cast<U: Element>(&self) -> FeedForward<U> {
        FeedForward {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Element> Module<T> for FeedForward<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Pre-norm Transformer block:
/// `x' = x + MHSA(LN(x))`, then `x'' = x' + FF(LN(x'))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadSelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, heads: usize, mlp_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attn: MultiHeadSelfAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, mlp_dim, rng),
        })
    }

    pub fn mhsa_block(&self, tape: &mut Tape<T>, x: &TokenSequence) -> Result<TokenSequence> {
        let h = self.norm1.forward(tape, x.tokens)?;
        let h = self.attn.forward(tape, h)?;
        Ok(x.with_tokens(tape.add(x.tokens, h)?))
    }

    pub fn ffn_block(&self, tape: &mut Tape<T>, x: &TokenSequence) -> Result<TokenSequence> {
        let h = self.norm2.forward(tape, x.tokens)?;
        let h = self.ffn.forward(tape, h)?;
        Ok(x.with_tokens(tape.add(x.tokens, h)?))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &TokenSequence) -> Result<TokenSequence> {
        let x = self.mhsa_block(tape, x)?;
        self.ffn_block(tape, &x)
    }

    pub(crate) fn cast<U: Element>(&self) -> TransformerBlock<U> {
        TransformerBlock {
            norm1: self.norm1.cast(),
            attn: self.attn.cast(),
            norm2: self.norm2.cast(),
            ffn: self.ffn.cast(),
        }
    }
}

impl<T: Element> Module<T> for TransformerBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}
