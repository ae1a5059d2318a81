use super::{Mode, Module, Param};
use crate::error::Result;
use crate::tensor::{BnStats, Element, Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(format!("{name}.weight"), &[dim], false),
            beta: Param::zeros(format!("{name}.bias"), &[dim], false),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = self.gamma.bind(tape);
        let b = self.beta.bind(tape);
        tape.layernorm(x, g, b, T::lit(self.eps))
    }

    pub(crate) fn cast<U: Element>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Batch normalization over `[B, C, H, W]` feature maps.
///
/// Running statistics are buffers, not parameters: they are updated in
/// training mode as `r ← (1 − momentum)·r + momentum·batch`, with the
/// unbiased batch variance feeding `running_var`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    pub name: String,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::ones(format!("{name}.weight"), &[channels], false),
            beta: Param::zeros(format!("{name}.bias"), &[channels], false),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
            name: name.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = self.gamma.bind(tape);
        let b = self.beta.bind(tape);
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: self.running_mean.data().to_vec(),
                var: self.running_var.data().to_vec(),
            },
        };
        let out = tape.batchnorm2d(x, g, b, stats, T::lit(self.eps))?;
        if mode == Mode::Train {
            let shape = tape.shape(x);
            let n = shape[0] * shape[2] * shape[3];
            let unbias = T::of_usize(n) / T::of_usize(n - 1);
            let m = T::lit(self.momentum);
            let keep = T::one() - m;
            for (r, &bm) in self.running_mean.data_mut().iter_mut().zip(&out.mean) {
                *r = keep * *r + m * bm;
            }
            for (r, &bv) in self.running_var.data_mut().iter_mut().zip(&out.var) {
                *r = keep * *r + m * bv * unbias;
            }
        }
        Ok(out.out)
    }

    pub(crate) fn cast<U: Element>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
            name: self.name.clone(),
        }
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
