use rand::Rng;

use super::{Linear, Module, Param, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Linear projection of non-overlapping `p×p` patches.
///
/// The projection weight is `[dim, C·p·p]` over patch vectors flattened in
/// `(channel, row, col)` order.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub proj: Linear<T>,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl<T: Element> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, patch_size: usize, dim: usize, rng: &mut R) -> Self {
        PatchEmbed {
            proj: Linear::new(&format!("{name}.proj"), in_channels * patch_size * patch_size, dim, rng),
            patch_size,
            in_channels,
        }
    }

    /// `[B, C, H, W] → [B, (H/p)(W/p), dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape("patch_embed", shape, &[self.in_channels]));
        }
        let patches = tape.patchify(images, self.patch_size)?;
        self.proj.forward(tape, patches)
    }

    pub(crate) fn cast<U: Element>(&self) -> PatchEmbed<U> {
        PatchEmbed {
            proj: self.proj.cast(),
            patch_size: self.patch_size,
            in_channels: self.in_channels,
        }
    }
}

/// Patch tokens, optional class token (prepended at index 0) and optional
/// learned positional embedding added to every token.
#[derive(Clone, Debug)]
pub struct TokenEmbedding<T> {
    pub patch: PatchEmbed<T>,
    pub class_token: Option<Param<T>>,
    pub pos_embed: Option<Param<T>>,
}

impl<T: Element> TokenEmbedding<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        patch_size: usize,
        dim: usize,
        num_patches: usize,
        class_token: bool,
        pos_embed: bool,
        rng: &mut R,
    ) -> Self {
        let patch = PatchEmbed::new("patch_embed", in_channels, patch_size, dim, rng);
        let class_token = class_token.then(|| Param::trunc_normal("cls_token", &[dim], false, rng));
        let tokens = num_patches + usize::from(class_token.is_some());
        let pos_embed = pos_embed.then(|| Param::trunc_normal("pos_embed", &[tokens, dim], false, rng));
        TokenEmbedding {
            patch,
            class_token,
            pos_embed,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<TokenSequence> {
        let shape = tape.shape(images).to_vec();
        let p = self.patch.patch_size;
        let (grid_h, grid_w) = (
            shape.get(2).copied().unwrap_or(0) / p.max(1),
            shape.get(3).copied().unwrap_or(0) / p.max(1),
        );
        let mut tokens = self.patch.forward(tape, images)?;
        if let Some(cls) = &self.class_token {
            let batch = shape[0];
            let dim = cls.len();
            let table = cls.bind(tape);
            let table = tape.reshape(table, &[1, dim])?;
            let rows = tape.embedding(table, &vec![0; batch])?;
            let rows = tape.reshape(rows, &[batch, 1, dim])?;
            tokens = tape.concat(&[rows, tokens], 1)?;
        }
        if let Some(pe) = &self.pos_embed {
            let pe = pe.bind(tape);
            tokens = tape.add(tokens, pe)?;
        }
        TokenSequence::new(tape, tokens, self.class_token.is_some(), grid_h, grid_w)
    }

    pub(crate) fn cast<U: Element>(&self) -> TokenEmbedding<U> {
        TokenEmbedding {
            patch: self.patch.cast(),
            class_token: self.class_token.as_ref().map(Param::cast),
            pos_embed: self.pos_embed.as_ref().map(Param::cast),
        }
    }
}

impl<T: Element> Module<T> for TokenEmbedding<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.patch.proj.visit(f);
        if let Some(c) = &self.class_token {
            f(c);
        }
        if let Some(p) = &self.pos_embed {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch.proj.visit_mut(f);
        if let Some(c) = &mut self.class_token {
            f(c);
        }
        if let Some(p) = &mut self.pos_embed {
            f(p);
        }
    }
}

/// Rearranges the `p×p` patches of every image: output patch `i` is input
/// patch `perm[i]` (row-major grid order).
pub fn permute_patches<T: Element>(images: &Tensor<T>, patch_size: usize, perm: &[usize]) -> Result<Tensor<T>> {
    let s = images.shape();
    let p = patch_size;
    if s.len() != 4 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(Error::config("patch_size", format!("{s:?} not divisible by {p}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let gw = w / p;
    if perm.len() != (h / p) * gw {
        return Err(Error::shape("permute_patches", s, &[perm.len()]));
    }
    let src = images.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for (dst, &from) in perm.iter().enumerate() {
                let (dy, dx) = (dst / gw * p, dst % gw * p);
                let (sy, sx) = (from / gw * p, from % gw * p);
                for r in 0..p {
                    let d0 = ((bi * c + ci) * h + dy + r) * w + dx;
                    let s0 = ((bi * c + ci) * h + sy + r) * w + sx;
                    out[d0..d0 + p].copy_from_slice(&src[s0..s0 + p]);
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
