//! Depth-wise convolution shortcut over groups of Transformer blocks.
//!
//! A group of `N` blocks maps `x` to `x'` and the shortcut adds, per
//! configured kernel size, `to_1d(DWConv(BatchNorm(GELU(to_2d(x)))))`
//! computed from the group-entry activation `x`. The class token takes no
//! part in the branch: its residual slot is zero.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Mode, Module, Param, TokenSequence, TransformerBlock};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BypassKind {
    /// Plain block stack.
    None,
    /// Adds the raw group-entry patch tokens.
    Identity,
    /// Adds one depth-wise convolution residual per kernel size.
    Dwconv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BypassSpec {
    pub kind: BypassKind,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_group")]
    pub group_size: usize,
}

fn default_kernels() -> Vec<usize> {
    vec![3]
}

fn default_group() -> usize {
    1
}

impl Default for BypassSpec {
    fn default() -> Self {
        BypassSpec::none()
    }
}

impl BypassSpec {
    pub fn none() -> Self {
        BypassSpec {
            kind: BypassKind::None,
            kernel_sizes: default_kernels(),
            group_size: 1,
        }
    }

    pub fn identity(group_size: usize) -> Self {
        BypassSpec {
            kind: BypassKind::Identity,
            kernel_sizes: default_kernels(),
            group_size,
        }
    }

    pub fn dwconv(kernel_sizes: Vec<usize>, group_size: usize) -> Self {
        BypassSpec {
            kind: BypassKind::Dwconv,
            kernel_sizes,
            group_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::config("bypass.group_size", "must be at least 1"));
        }
        if self.kind == BypassKind::Dwconv {
            if self.kernel_sizes.is_empty() {
                return Err(Error::config("bypass.kernel_sizes", "dwconv needs at least one kernel"));
            }
            if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
                return Err(Error::config("bypass.kernel_sizes", format!("kernel {k} is not odd")));
            }
        }
        Ok(())
    }

    /// Kernel sizes of the active branches (empty unless `kind` is dwconv).
    pub fn active_kernels(&self) -> &[usize] {
        match self.kind {
            BypassKind::Dwconv => &self.kernel_sizes,
            _ => &[],
        }
    }

    /// Block index ranges of the groups. A trailing remainder shorter than
    /// `group_size` forms its own group.
    pub fn group_ranges(&self, depth: usize) -> Vec<Range<usize>> {
        let n = self.group_size.max(1);
        (0..depth).step_by(n).map(|s| s..(s + n).min(depth)).collect()
    }

    pub fn num_groups(&self, depth: usize) -> usize {
        depth.div_ceil(self.group_size.max(1))
    }
}

/// Extra parameters of the depth-wise branches: `dim·(k² + 1)` per branch,
/// plus `2·dim` BatchNorm affine parameters when `include_batchnorm`.
pub fn extra_params(spec: &BypassSpec, dim: usize, depth: usize, include_batchnorm: bool) -> usize {
    let per_group: usize = spec
        .active_kernels()
        .iter()
        .map(|&k| dim * (k * k + 1) + if include_batchnorm { 2 * dim } else { 0 })
        .sum();
    spec.num_groups(depth) * per_group
}

/// Extra multiply-accumulates of the depth-wise branches:
/// `dim·grid_h·grid_w·k²` per branch. Bias, BatchNorm and GELU are not counted.
pub fn extra_flops(spec: &BypassSpec, dim: usize, depth: usize, grid_h: usize, grid_w: usize) -> usize {
    let per_group: usize = spec
        .active_kernels()
        .iter()
        .map(|&k| dim * grid_h * grid_w * k * k)
        .sum();
    spec.num_groups(depth) * per_group
}

/// Patch tokens laid out as a `[batch, dim, grid_h, grid_w]` feature map.
/// The class token, if any, is carried alongside.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap2D {
    pub data: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub class_token: Option<Var>,
}

/// Token `i` of the row-major grid lands at `(i / grid_w, i % grid_w)`.
pub fn reshape_1d_to_2d<T: Element>(tape: &mut Tape<T>, x: &TokenSequence) -> Result<FeatureMap2D> {
    let shape = tape.shape(x.tokens).to_vec();
    if shape.len() != 3 || shape[1] != x.len() {
        return Err(Error::config(
            "grid",
            format!("{shape:?} does not hold {} tokens", x.len()),
        ));
    }
    let (b, d) = (shape[0], shape[2]);
    let class_token = x.class_token(tape)?;
    let patches = x.patches(tape)?;
    let chw = tape.permute(patches, &[0, 2, 1])?;
    let data = tape.reshape(chw, &[b, d, x.grid_h, x.grid_w])?;
    Ok(FeatureMap2D {
        data,
        grid_h: x.grid_h,
        grid_w: x.grid_w,
        class_token,
    })
}

/// Inverse of [`reshape_1d_to_2d`] on the patch tokens: `[batch, L, dim]`.
pub fn reshape_2d_to_1d<T: Element>(tape: &mut Tape<T>, map: &FeatureMap2D) -> Result<Var> {
    let shape = tape.shape(map.data).to_vec();
    if shape.len() != 4 || shape[2] != map.grid_h || shape[3] != map.grid_w {
        return Err(Error::shape("reshape_2d_to_1d", &shape, &[map.grid_h, map.grid_w]));
    }
    let flat = tape.reshape(map.data, &[shape[0], shape[1], map.grid_h * map.grid_w])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Re-inserts a zero class-token slot in front of patch residuals when `x` has a class token.
fn with_zero_class_slot<T: Element>(tape: &mut Tape<T>, x: &TokenSequence, patches: Var) -> Result<Var> {
    if !x.has_class_token {
        return Ok(patches);
    }
    let s = tape.shape(patches);
    let zero = tape.constant(Tensor::zeros(vec![s[0], 1, s[2]]));
    tape.concat(&[zero, patches], 1)
}

/// One `GELU → BatchNorm → DWConv` branch with a `k×k` filter per channel.
#[derive(Clone, Debug)]
pub struct DwBranch<T> {
    pub kernel_size: usize,
    pub bn: BatchNorm2d<T>,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> DwBranch<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, kernel_size: usize, rng: &mut R) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::config(
                "bypass.kernel_sizes",
                format!("kernel {kernel_size} is not odd"),
            ));
        }
        Ok(DwBranch {
            kernel_size,
            bn: BatchNorm2d::new(&format!("{name}.bn"), dim),
            weight: Param::trunc_normal(format!("{name}.weight"), &[dim, kernel_size, kernel_size], true, rng),
            bias: Param::zeros(format!("{name}.bias"), &[dim], false),
        })
    }

    /// Convolution parameters, BatchNorm excluded.
    pub fn conv_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Residual shaped like `x.tokens`, zero in the class-token slot.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &TokenSequence, mode: Mode) -> Result<Var> {
        let map = reshape_1d_to_2d(tape, x)?;
        let act = tape.gelu(map.data);
        let normed = self.bn.forward(tape, act, mode)?;
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        let conv = tape.depthwise_conv2d(normed, w, b)?;
        let tokens = reshape_2d_to_1d(tape, &FeatureMap2D { data: conv, ..map })?;
        with_zero_class_slot(tape, x, tokens)
    }

    pub(crate) fn cast<U: Element>(&self) -> DwBranch<U> {
        DwBranch {
            kernel_size: self.kernel_size,
            bn: self.bn.cast(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Element> Module<T> for DwBranch<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.bn.visit(f);
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_mut(f);
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Runs `blocks` on `x` and adds the shortcut selected by `kind`.
/// `branches` is only read for [`BypassKind::Dwconv`].
pub fn bypass_group_forward<T: Element>(
    tape: &mut Tape<T>,
    x: &TokenSequence,
    blocks: &[TransformerBlock<T>],
    kind: BypassKind,
    branches: &mut [DwBranch<T>],
    mode: Mode,
) -> Result<TokenSequence> {
    let mut h = *x;
    for block in blocks {
        h = block.forward(tape, &h)?;
    }
    let mut out = h.tokens;
    match kind {
        BypassKind::None => {}
        BypassKind::Identity => {
            let patches = x.patches(tape)?;
            let residual = with_zero_class_slot(tape, x, patches)?;
            out = tape.add(out, residual)?;
        }
        BypassKind::Dwconv => {
            for branch in branches.iter_mut() {
                let residual = branch.forward(tape, x, mode)?;
                out = tape.add(out, residual)?;
            }
        }
    }
    Ok(h.with_tokens(out))
}

#[cfg(test)]
mod tests;
