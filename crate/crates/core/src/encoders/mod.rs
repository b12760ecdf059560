//! The two towers: a byte-level text encoder with ALiBi-biased attention and
//! a patch-based image encoder. Both end in a linear projection into the
//! same `d_out`-dimensional embedding space.

mod attention;
mod image;
mod text;

pub use attention::{alibi_slopes, attention_block, attention_forward};
pub(crate) use image::check_pixel_range;
pub use image::{encode_image, ImageEncoderParams, ImageVars};
pub use text::{encode_text, TextEncoderParams, TextVars, TokenBatch, PAD, VOCAB_SIZE};

use crate::error::{Error, Result};

/// Tower dimensions shared by both encoders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_out: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub image_size: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_out: 32,
            heads: 4,
            patch_size: 4,
            channels: 1,
            image_size: 16,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "heads",
                format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.d_out == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::invalid("encoder config", "zero-sized dimension"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(
                "image_size",
                format!("{} not divisible by patch size {}", self.image_size, self.patch_size),
            ));
        }
        Ok(())
    }
}
