//! Spatial broadcast decoder and mask compositing.

use rand::Rng;

use super::encoder::projected_position;
use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numeric::nn::{Conv2d, ConvSpec, Linear};
use crate::numeric::{Float, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub position: Linear,
    pub convs: Vec<Conv2d>,
    pub size: usize,
    pub image_channels: usize,
    pub dim: usize,
}

/// Per-slot decoder outputs for a batch of panels.
#[derive(Clone, Copy, Debug)]
pub struct Render {
    /// `[B, K, C_img, H·W]`.
    pub recons: Var,
    /// `[B, K, H·W]`.
    pub mask_logits: Var,
}

/// Softmax-composited reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[B, C_img, H·W]`.
    pub image: Var,
    /// `[B, K, H·W]`, summing to one over slots at every pixel.
    pub masks: Var,
}

impl Decoder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let (d, c) = (cfg.slot_dim, cfg.decoder_channels);
        let mut convs = Vec::with_capacity(cfg.decoder_layers + 1);
        let mut c_in = d;
        for i in 0..cfg.decoder_layers {
            let spec = ConvSpec { c_out: c, kernel: 5, stride: 1, pad: 2, relu: true };
            convs.push(Conv2d::new(store, &format!("decoder.conv{i}"), c_in, spec, rng));
            c_in = c;
        }
        let out = ConvSpec { c_out: cfg.image_channels + 1, kernel: 3, stride: 1, pad: 1, relu: false };
        convs.push(Conv2d::new(store, "decoder.out", c_in, out, rng));
        Self {
            position: Linear::new(store, "decoder.position", 4, d, true, rng),
            convs,
            size: cfg.image_size,
            image_channels: cfg.image_channels,
            dim: d,
        }
    }

    /// Decodes every slot of `[B, K, D]` independently.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, slots: Var) -> Result<Render> {
        let s = g.shape(slots).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(shape_err!("decoder expects [B, K, {}], got {:?}", self.dim, s));
        }
        let (b, k) = (s[0], s[1]);
        let flat = g.reshape(slots, &[b * k, self.dim])?;
        let mut h = g.spatial_broadcast(flat, self.size, self.size)?;
        let pos = projected_position(g, store, &self.position, self.size)?;
        h = g.add_bcast(h, pos)?;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
        }
        let c = self.image_channels;
        let hw = self.size * self.size;
        let h = g.reshape(h, &[b, k, c + 1, hw])?;
        let recons = g.slice(h, 2, 0, c)?;
        let mask = g.slice(h, 2, c, 1)?;
        let mask_logits = g.reshape(mask, &[b, k, hw])?;
        Ok(Render { recons, mask_logits })
    }
}

/// Softmax over slots of the mask logits, then the mask-weighted sum of
/// the per-slot reconstructions.
pub fn composite<T: Float>(g: &mut Graph<T>, render: Render) -> Result<Composite> {
    let s = g.shape(render.recons).to_vec();
    let (b, k, c, hw) = (s[0], s[1], s[2], s[3]);
    let masks = g.softmax(render.mask_logits, 1)?;
    let mut channels = Vec::with_capacity(c);
    for ch in 0..c {
        let r = g.slice(render.recons, 2, ch, 1)?;
        let r = g.reshape(r, &[b, k, hw])?;
        let w = g.mul(masks, r)?;
        let sum = g.sum_axis(w, 1)?;
        channels.push(g.reshape(sum, &[b, 1, hw])?);
    }
    let image = if c == 1 { channels[0] } else { g.concat(&channels, 1)? };
    Ok(Composite { image, masks })
}
