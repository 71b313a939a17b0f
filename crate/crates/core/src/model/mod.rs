//! The scoring network: encoder, slot attention, slot decoder and reasoner.

pub mod decoder;
pub mod encoder;
pub mod reasoner;
pub mod slot_attention;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use decoder::{composite, Composite, Decoder, Render};
pub use encoder::{build_position_embedding, Encoder};
pub use reasoner::{row_col_onehot, tcn, Reasoner, CANDIDATES, CONTEXT};
pub use slot_attention::{SlotAttention, SlotNodes};

use crate::error::{contract_err, shape_err, Result};
use crate::numeric::{Float, Graph, ParamStore, Tensor, Var};

/// Panels per problem: 8 context panels followed by 8 candidates.
pub const PANELS: usize = CONTEXT + CANDIDATES;

/// Default reconstruction weight.
pub const DEFAULT_LAMBDA: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub encoder_channels: usize,
    pub decoder_channels: usize,
    /// Hidden 5×5 conv layers before the output conv.
    pub decoder_layers: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub iterations: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub no_slot_attention: bool,
    pub no_tcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::grayscale_80()
    }
}

impl ModelConfig {
    /// 80×80 grayscale configuration with the 6-layer transformer.
    pub fn grayscale_80() -> Self {
        Self {
            image_size: 80,
            image_channels: 1,
            encoder_channels: 32,
            decoder_channels: 32,
            decoder_layers: 3,
            slots: 9,
            slot_dim: 32,
            iterations: 3,
            layers: 6,
            heads: 8,
            head_dim: 32,
            mlp_dim: 512,
            dropout: 0.1,
            no_slot_attention: false,
            no_tcn: false,
        }
    }

    /// 128×128 RGB configuration with 64 channels throughout.
    pub fn rgb_128() -> Self {
        Self {
            image_size: 128,
            image_channels: 3,
            encoder_channels: 64,
            decoder_channels: 64,
            decoder_layers: 5,
            slot_dim: 64,
            layers: 24,
            dropout: 0.0,
            ..Self::grayscale_80()
        }
    }

    /// Smallest configuration exercising every component; used for
    /// gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            image_channels: 1,
            encoder_channels: 4,
            decoder_channels: 4,
            decoder_layers: 3,
            slots: 2,
            slot_dim: 4,
            iterations: 3,
            layers: 1,
            heads: 1,
            head_dim: 4,
            mlp_dim: 8,
            dropout: 0.0,
            no_slot_attention: false,
            no_tcn: false,
        }
    }

    /// Slots per panel seen by the decoder and reasoner.
    pub fn effective_slots(&self) -> usize {
        if self.no_slot_attention {
            1
        } else {
            self.slots
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("encoder_channels", self.encoder_channels),
            ("decoder_channels", self.decoder_channels),
            ("slots", self.slots),
            ("slot_dim", self.slot_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(contract_err!("{} must be positive", name));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract_err!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Randomness and mode for one forward pass.
pub struct Pass<'a> {
    /// Drives slot initialisation and, when training, dropout.
    pub rng: &'a mut dyn RngCore,
    pub train: bool,
}

/// Reconstruction branch outputs for a batch of panels.
#[derive(Clone, Copy, Debug)]
pub struct ReconNodes {
    pub slots: SlotNodes,
    pub render: Render,
    pub composite: Composite,
    /// Scalar mean squared error over all panels and pixels.
    pub loss: Var,
}

/// Every output of a full problem pass.
#[derive(Clone, Copy, Debug)]
pub struct ProblemNodes {
    pub recon: ReconNodes,
    /// `[8]` candidate logits.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct Stsn {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub slot_attention: SlotAttention,
    pub decoder: Decoder,
    pub reasoner: Reasoner,
}

impl Stsn {
    /// Registers all parameters in `store` with a deterministic layout.
    pub fn new<T: Float>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, store, rng);
        let slot_attention = SlotAttention::new(&config, store, rng);
        let decoder = Decoder::new(&config, store, rng);
        let reasoner = Reasoner::new(&config, store, rng);
        Ok(Self { config, encoder, slot_attention, decoder, reasoner })
    }

    /// True for parameters of the perceptual branch (everything but the
    /// reasoner).
    pub fn is_perceptual(name: &str) -> bool {
        !name.starts_with("reasoner.")
    }

    /// Encodes, binds and reconstructs `[B, C, H, W]` panels.
    pub fn reconstruct<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        panels: &Tensor<T>,
        pass: &mut Pass<'_>,
    ) -> Result<ReconNodes> {
        let x = g.input(panels.clone());
        let feats = self.encoder.forward(g, store, x)?;
        let slots = if self.config.no_slot_attention {
            self.slot_attention.mean_value(g, store, feats)?
        } else {
            self.slot_attention.forward(g, store, feats, &mut pass.rng)?
        };
        let render = self.decoder.forward(g, store, slots.slots)?;
        let comp = composite(g, render)?;
        let image = g.reshape(comp.image, panels.shape())?;
        let loss = g.mse(image, panels)?;
        Ok(ReconNodes { slots, render, composite: comp, loss })
    }

    /// Full pass over one problem's 16 panels.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        panels: &Tensor<T>,
        pass: &mut Pass<'_>,
    ) -> Result<ProblemNodes> {
        if panels.shape().first() != Some(&PANELS) {
            return Err(shape_err!("a problem has {} panels, got {:?}", PANELS, panels.shape()));
        }
        let recon = self.reconstruct(g, store, panels, pass)?;
        let dropout = if pass.train && self.config.dropout > 0.0 { Some(&mut *pass.rng) } else { None };
        let scores = self.reasoner.score(g, store, recon.slots.slots, dropout)?;
        Ok(ProblemNodes { recon, scores })
    }
}

/// Cross-entropy of the candidate logits against the answer index.
pub fn task_loss<T: Float>(g: &mut Graph<T>, scores: Var, answer: usize) -> Result<Var> {
    if answer >= CANDIDATES {
        return Err(contract_err!("answer index {} out of range 0..7", answer));
    }
    g.cross_entropy(scores, answer)
}

/// `λ·recon + task`.
pub fn total_loss<T: Float>(g: &mut Graph<T>, recon: Var, task: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(contract_err!("λ must be non-negative, got {}", lambda));
    }
    let r = g.scale(recon, T::from_f64(lambda));
    g.add(r, task)
}

/// Softmax distribution over candidate logits.
pub fn score_distribution(scores: &[f32]) -> Vec<f32> {
    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f32 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Index of the highest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
