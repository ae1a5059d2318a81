use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// A batch of patch tokens, optionally preceded by a class token.
///
/// `tokens` is `[batch, L(+1), dim]`; when present the class token sits at
/// index 0 and patch `i` of the row-major `grid_h × grid_w` grid follows at
/// index `i + 1`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub has_class_token: bool,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenSequence {
    pub fn new<T: Element>(
        tape: &Tape<T>,
        tokens: Var,
        has_class_token: bool,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let shape = tape.shape(tokens);
        let expected = grid_h * grid_w + usize::from(has_class_token);
        if shape.len() != 3 || shape[1] != expected {
            return Err(Error::config(
                "grid",
                format!(
                    "token tensor {shape:?} does not hold a {grid_h}x{grid_w} grid (class token: {has_class_token})"
                ),
            ));
        }
        Ok(TokenSequence {
            tokens,
            has_class_token,
            grid_h,
            grid_w,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.num_patches() + usize::from(self.has_class_token)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Same layout with a different tensor.
    pub fn with_tokens(&self, tokens: Var) -> Self {
        TokenSequence { tokens, ..*self }
    }

    /// `[batch, L, dim]` view of the patch tokens.
    pub fn patches<T: Element>(&self, tape: &mut Tape<T>) -> Result<Var> {
        if self.has_class_token {
            tape.narrow(self.tokens, 1, 1, self.num_patches())
        } else {
            Ok(self.tokens)
        }
    }

    /// `[batch, 1, dim]` class token, if present.
    pub fn class_token<T: Element>(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        if self.has_class_token {
            tape.narrow(self.tokens, 1, 0, 1).map(Some)
        } else {
            Ok(None)
        }
    }
}
