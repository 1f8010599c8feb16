//! Toy diffusion UNets with attention taps.

mod layers;
mod unet;

use serde::{Deserialize, Serialize};

use crate::dataset::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use layers::{Attention, Conv, Init, Norm, ResBlock, NORM_EPS};
pub use unet::{Run, SiteInfo, SiteKind, UNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// One flag per level.
    pub attention_levels: Vec<bool>,
    /// Self-attention (and so a tap site) in the middle block.
    pub mid_attention: bool,
    pub cross_attention: bool,
    pub vocab_size: usize,
    pub embed_width: usize,
    pub groups: usize,
    pub head_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width: 8,
            channel_mults: vec![1, 2, 2],
            attention_levels: vec![false, true, true],
            mid_attention: true,
            cross_attention: true,
            vocab_size: VOCAB_SIZE,
            embed_width: 16,
            groups: 8,
            head_dim: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.len() < 2 {
            return bad(format!(
                "unet needs at least 2 levels, got {}",
                self.channel_mults.len()
            ));
        }
        if self.attention_levels.len() != self.channel_mults.len() {
            return bad(format!(
                "{} attention flags for {} levels",
                self.attention_levels.len(),
                self.channel_mults.len()
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 || self.channel_mults.contains(&0) {
            return bad("unet widths must be positive".into());
        }
        if self.groups == 0 || self.head_dim == 0 || self.embed_width == 0 || self.vocab_size == 0 {
            return bad("groups, head_dim, embed_width and vocab_size must be positive".into());
        }
        for m in &self.channel_mults {
            if (m * self.base_width) % self.groups != 0 {
                return bad(format!(
                    "width {} not divisible by {} groups",
                    m * self.base_width,
                    self.groups
                ));
            }
        }
        if self.base_width % 2 != 0 {
            return bad("base_width must be even for the timestep embedding".into());
        }
        Ok(())
    }

    pub fn temb_width(&self) -> usize {
        4 * self.base_width
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_width).collect()
    }
}

/// Conditioning text for the cross-attention: token triples or an already
/// embedded `(N, E, 3, 1)` context.
#[derive(Clone, Copy, Debug)]
pub enum Prompt<'a, S> {
    Tokens(&'a [[usize; 3]]),
    Embedded(&'a Tensor<S>),
}

/// Sinusoidal features: `dim/2` sines followed by `dim/2` cosines with
/// frequencies `10000^(-i/(dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "timestep embedding dim {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}
