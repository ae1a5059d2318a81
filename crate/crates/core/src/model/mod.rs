//! Classifier assembly: patch embedding, class token and positional
//! embedding, Transformer blocks grouped under the configured bypass, final
//! LayerNorm and a linear head.

mod checkpoint;
mod complexity;

pub use checkpoint::{
    load_checkpoint, load_matching, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use complexity::{count_flops, count_params, ComplexityReport, FlopTerm};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bypass::{bypass_group_forward, BypassKind, BypassSpec, DwBranch};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mode, Module, Param, TokenEmbedding, TransformerBlock};
use crate::rng::stream;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClassToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub use_pos_embed: bool,
    #[serde(default = "yes")]
    pub use_class_token: bool,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default)]
    pub bypass: BypassSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}
fn yes() -> bool {
    true
}
fn default_pooling() -> Pooling {
    Pooling::ClassToken
}

impl ModelConfig {
    /// ViT-Tiny at 224×224, patch 16, with a 3×3 branch on every block.
    pub fn vit_tiny(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            num_classes,
            use_pos_embed: true,
            use_class_token: true,
            pooling: Pooling::ClassToken,
            bypass: BypassSpec::dwconv(vec![3], 1),
            seed: 0,
        }
    }

    /// ViT-Small at 224×224, patch 16, with a 3×3 branch on every block.
    pub fn vit_small(num_classes: usize) -> Self {
        ModelConfig {
            dim: 384,
            heads: 6,
            ..Self::vit_tiny(num_classes)
        }
    }

    /// Small 32×32 model for CPU training.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            dim: 64,
            depth: 4,
            heads: 2,
            num_classes: 10,
            ..Self::vit_tiny(10)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit_tiny" => Ok(Self::vit_tiny(10)),
            "vit_tiny_200" => Ok(Self::vit_tiny(200)),
            "vit_small" => Ok(Self::vit_small(10)),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(
                "preset",
                format!("unknown preset {other:?} (expected vit_tiny, vit_tiny_200, vit_small or desk)"),
            )),
        }
    }

    /// Parses either a bare model table or a run file with a `[model]` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let cfg: ModelConfig = match table.remove("model") {
            Some(model) => model.try_into()?,
            None => table.try_into()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "image size {} is not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if !self.use_class_token && self.pooling == Pooling::ClassToken {
            return Err(Error::config(
                "pooling",
                "class_token pooling requires use_class_token = true; use \"mean\"",
            ));
        }
        self.bypass.validate()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length seen by the blocks, class token included.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Same backbone without any shortcut.
    pub fn vanilla(&self) -> Self {
        ModelConfig {
            bypass: BypassSpec {
                kind: BypassKind::None,
                ..self.bypass.clone()
            },
            ..self.clone()
        }
    }
}

/// Blocks spanned by one shortcut and its branches.
#[derive(Clone, Debug)]
pub struct BypassGroup<T> {
    pub blocks: Range<usize>,
    pub branches: Vec<DwBranch<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embed: TokenEmbedding<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub groups: Vec<BypassGroup<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Element> Model<T> {
    /// Initializes all parameters from `config.seed`. Backbone and branch
    /// parameters draw from separate streams, so a model with and without
    /// bypass under the same seed share identical backbone weights.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = stream(c.seed, "backbone");
        let embed = TokenEmbedding::new(
            c.in_channels,
            c.patch_size,
            c.dim,
            c.num_patches(),
            c.use_class_token,
            c.use_pos_embed,
            &mut rng,
        );
        let blocks = (0..c.depth)
            .map(|i| TransformerBlock::new(&format!("blocks.{i}"), c.dim, c.heads, c.mlp_dim(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new("norm", c.dim);
        let head = Linear::new("head", c.dim, c.num_classes, &mut rng);

        let mut branch_rng = stream(c.seed, "bypass");
        let groups = c
            .bypass
            .group_ranges(c.depth)
            .into_iter()
            .enumerate()
            .map(|(g, blocks)| {
                let branches = c
                    .bypass
                    .active_kernels()
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| DwBranch::new(&format!("bypass.{g}.{j}"), c.dim, k, &mut branch_rng))
                    .collect::<Result<Vec<_>>>()?;
                Ok(BypassGroup { blocks, branches })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config: c.clone(),
            embed,
            blocks,
            groups,
            norm,
            head,
        })
    }

    /// `[B, C, H, W]` images to `[B, num_classes]` logits. Training mode
    /// normalizes branch BatchNorms with batch statistics and updates their
    /// running estimates.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(images);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "model input",
                s,
                &[
                    s.first().copied().unwrap_or(0),
                    c.in_channels,
                    c.image_size,
                    c.image_size,
                ],
            ));
        }
        let mut x = self.embed.forward(tape, images)?;
        let kind = self.config.bypass.kind;
        for g in &mut self.groups {
            x = bypass_group_forward(tape, &x, &self.blocks[g.blocks.clone()], kind, &mut g.branches, mode)?;
        }
        let normed = self.norm.forward(tape, x.tokens)?;
        let x = x.with_tokens(normed);
        let batch = tape.shape(normed)[0];
        let pooled = match self.config.pooling {
            Pooling::ClassToken => {
                let cls = x.class_token(tape)?.expect("validated: class token present");
                tape.reshape(cls, &[batch, self.config.dim])?
            }
            Pooling::Mean => {
                let patches = x.patches(tape)?;
                tape.mean(patches, 1)?
            }
        };
        self.head.forward(tape, pooled)
    }

    /// Eval-mode logits on a fresh tape.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    fn branches(&self) -> impl Iterator<Item = &DwBranch<T>> {
        self.groups.iter().flat_map(|g| g.branches.iter())
    }

    fn branches_mut(&mut self) -> impl Iterator<Item = &mut DwBranch<T>> {
        self.groups.iter_mut().flat_map(|g| g.branches.iter_mut())
    }

    /// Parameters of the depth-wise branches, `(convolution, batchnorm)`.
    pub fn branch_params(&self) -> (usize, usize) {
        self.branches()
            .fold((0, 0), |(c, b), br| (c + br.conv_params(), b + br.bn.num_params()))
    }

    /// Sets every branch convolution weight and bias to zero.
    pub fn zero_branches(&mut self) {
        for br in self.branches_mut() {
            br.weight.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            br.bias.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Non-trainable state (BatchNorm running statistics) by name.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.branches()
            .flat_map(|b| {
                [
                    (format!("{}.running_mean", b.bn.name), &b.bn.running_mean),
                    (format!("{}.running_var", b.bn.name), &b.bn.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.branches_mut()
            .flat_map(|b| {
                [
                    (format!("{}.running_mean", b.bn.name), &mut b.bn.running_mean),
                    (format!("{}.running_var", b.bn.name), &mut b.bn.running_var),
                ]
            })
            .collect()
    }

    /// Every parameter and buffer by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name.clone(), &p.value)));
        out.extend(self.buffers());
        out
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(TransformerBlock::cast).collect(),
            groups: self
                .groups
                .iter()
                .map(|g| BypassGroup {
                    blocks: g.blocks.clone(),
                    branches: g.branches.iter().map(DwBranch::cast).collect(),
                })
                .collect(),
            norm: self.norm.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.embed.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        for br in self.branches() {
            br.visit(f);
        }
        self.norm.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.embed.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        for g in &mut self.groups {
            for br in &mut g.branches {
                br.visit_mut(f);
            }
        }
        self.norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}
