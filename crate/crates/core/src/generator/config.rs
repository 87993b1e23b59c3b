use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square single-channel images.
pub const IMAGE_SIDE: usize = 8;
/// Side length of a square patch.
pub const PATCH: usize = 2;
/// Pixels per token.
pub const PATCH_DIM: usize = PATCH * PATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub t_max: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, width: 64, tokens: 16, vocab: 8, t_max: 28 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.width == 0 {
            return bad("layers, heads and width must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 2 != 0 {
            return bad("width must be even for the sinusoidal embedding".into());
        }
        let side = (self.tokens as f64).sqrt().round() as usize;
        if side * side != self.tokens {
            return bad(format!("token count {} is not a perfect square", self.tokens));
        }
        if side * PATCH != IMAGE_SIDE {
            return bad(format!(
                "{} tokens of {PATCH}x{PATCH} patches do not tile an {IMAGE_SIDE}x{IMAGE_SIDE} image",
                self.tokens
            ));
        }
        if self.vocab == 0 || self.vocab > super::dataset::NUM_SHAPES {
            return bad(format!("vocab must be in 1..={}", super::dataset::NUM_SHAPES));
        }
        if self.t_max < 2 {
            return bad("t_max must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Tokens per side of the grid.
    pub fn grid(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    /// Class id used for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.vocab
    }

    pub fn tau(&self, t: usize) -> f64 {
        t as f64 / self.t_max as f64
    }
}
