//! Layers of a pre-norm Vision Transformer.
//!
//! Layers own [`Param`]s and bind them onto a [`Tape`] on every forward
//! pass; gradients are read back by name after `backward`.

mod attention;
mod embed;
mod norm;
mod tokens;

pub use attention::{FeedForward, MultiHeadSelfAttention, TransformerBlock};
pub use embed::{permute_patches, PatchEmbed, TokenEmbedding};
pub use norm::{BatchNorm2d, LayerNorm};
pub use tokens::TokenSequence;

use rand::Rng;

use crate::error::Result;
use crate::rng::trunc_normal_tensor;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self::new(name, Tensor::zeros(shape.to_vec()), decay)
    }

    pub fn ones(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self::new(name, Tensor::ones(shape.to_vec()), decay)
    }

    pub fn trunc_normal<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], decay: bool, rng: &mut R) -> Self {
        Self::new(name, trunc_normal_tensor(rng, shape, INIT_STD), decay)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.named_leaf(&self.name, &self.value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds the tape gradient for this parameter, if it was bound.
    pub fn absorb_grad(&mut self, tape: &Tape<T>) {
        if let Some(g) = tape.named_grad(&self.name) {
            for (acc, &v) in self.grad.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Element>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            decay: self.decay,
        }
    }
}

/// Anything holding parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn absorb_grads(&mut self, tape: &Tape<T>) {
        self.visit_mut(&mut |p| p.absorb_grad(tape));
    }
}

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::trunc_normal(format!("{name}.weight"), &[d_out, d_in], true, rng),
            bias: Param::zeros(format!("{name}.bias"), &[d_out], false),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.linear(x, w, Some(b))
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub(crate) fn cast<U: Element>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
