//! Convolutional panel encoder.

use rand::Rng;

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numeric::nn::{Conv2d, ConvSpec, LayerNorm, Linear};
use crate::numeric::{Float, Graph, ParamStore, Tensor, Var};

/// Four linear ramps over an `h × w` grid, channel order top→bottom,
/// bottom→top, left→right, right→left. A one-pixel axis maps to 0 / 1.
pub fn build_position_embedding<T: Float>(h: usize, w: usize) -> Tensor<T> {
    let ramp = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = vec![T::zero(); 4 * h * w];
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (ty, tx) = (ramp(y, h), ramp(x, w));
            data[p] = T::from_f64(ty);
            data[hw + p] = T::from_f64(1.0 - ty);
            data[2 * hw + p] = T::from_f64(tx);
            data[3 * hw + p] = T::from_f64(1.0 - tx);
        }
    }
    Tensor::new(&[4, h, w], data).expect("h, w >= 1")
}

/// The embedding laid out as `[h·w, 4]` rows, ready for a linear projection.
pub(crate) fn position_rows<T: Float>(h: usize, w: usize) -> Tensor<T> {
    let pe = build_position_embedding::<T>(h, w);
    let hw = h * w;
    let d = pe.data();
    let rows = (0..hw).flat_map(|p| (0..4).map(move |c| d[c * hw + p])).collect();
    Tensor::new(&[hw, 4], rows).expect("4 channels")
}

/// Projects the position embedding to `channels` and returns it as a
/// `[channels, h, w]` node for broadcasting over a batch of feature maps.
pub(crate) fn projected_position<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &Linear,
    size: usize,
) -> Result<Var> {
    let rows = g.input(position_rows(size, size));
    let p = proj.forward(g, store, rows)?;
    let p = g.transpose(p)?;
    g.reshape(p, &[proj.d_out, size, size])
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub position: Linear,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub size: usize,
    pub image_channels: usize,
    pub channels: usize,
}

impl Encoder {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let c = cfg.encoder_channels;
        let spec = ConvSpec { c_out: c, kernel: 5, stride: 1, pad: 2, relu: true };
        let convs = (0..4)
            .map(|i| {
                let c_in = if i == 0 { cfg.image_channels } else { c };
                Conv2d::new(store, &format!("encoder.conv{i}"), c_in, spec, rng)
            })
            .collect();
        Self {
            convs,
            position: Linear::new(store, "encoder.position", 4, c, true, rng),
            norm: LayerNorm::new(store, "encoder.norm", c),
            fc1: Linear::new(store, "encoder.fc1", c, c, true, rng),
            fc2: Linear::new(store, "encoder.fc2", c, c, true, rng),
            size: cfg.image_size,
            image_channels: cfg.image_channels,
            channels: c,
        }
    }

    /// `[B, C_img, H, W]` panels to `[B, H·W, channels]` features.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.image_channels || s[2] != self.size || s[3] != self.size {
            return Err(shape_err!(
                "encoder expects [B, {}, {}, {}], got {:?}",
                self.image_channels,
                self.size,
                self.size,
                s
            ));
        }
        let b = s[0];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
        }
        let pos = projected_position(g, store, &self.position, self.size)?;
        let h = g.add_bcast(h, pos)?;
        let n = self.size * self.size;
        let h = g.reshape(h, &[b, self.channels, n])?;
        let h = g.transpose(h)?;
        let h = self.norm.forward(g, store, h)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}
