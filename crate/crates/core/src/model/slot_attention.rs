//! Iterative competitive attention binding slots to feature locations.

use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numeric::nn::{Gru, LayerNorm, Linear};
use crate::numeric::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Floor added to each slot's attention mass before renormalising.
pub const WEIGHT_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub norm_inputs: LayerNorm,
    pub norm_slots: LayerNorm,
    pub norm_mlp: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gru: Gru,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub mu: ParamId,
    pub log_sigma: ParamId,
    pub slots: usize,
    pub dim: usize,
    pub iterations: usize,
}

/// Graph nodes for a batch of slot sets.
#[derive(Clone, Copy, Debug)]
pub struct SlotNodes {
    /// `[B, K, D_slot]`.
    pub slots: Var,
    /// `[B, K, N]`, softmax over the slot axis. `None` when slot attention
    /// is ablated.
    pub attn: Option<Var>,
}

impl SlotAttention {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let (d_in, d) = (cfg.encoder_channels, cfg.slot_dim);
        let bound = (6.0 / (1 + d) as f64).sqrt();
        let mut glorot = |name: &str, rng: &mut dyn rand::RngCore| {
            let data = (0..d).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            store.add(name, Tensor::new(&[d], data).expect("width d"))
        };
        let mu = glorot("slots.mu", rng);
        let log_sigma = glorot("slots.log_sigma", rng);
        Self {
            norm_inputs: LayerNorm::new(store, "slots.norm_inputs", d_in),
            norm_slots: LayerNorm::new(store, "slots.norm_slots", d),
            norm_mlp: LayerNorm::new(store, "slots.norm_mlp", d),
            q: Linear::new(store, "slots.q", d, d, false, rng),
            k: Linear::new(store, "slots.k", d_in, d, false, rng),
            v: Linear::new(store, "slots.v", d_in, d, false, rng),
            gru: Gru::new(store, "slots.gru", d, rng),
            mlp1: Linear::new(store, "slots.mlp1", d, d, true, rng),
            mlp2: Linear::new(store, "slots.mlp2", d, d, true, rng),
            mu,
            log_sigma,
            slots: cfg.slots,
            dim: d,
            iterations: cfg.iterations,
        }
    }

    /// `batch × K` slots drawn as `μ + exp(log σ) ⊙ ε`, `ε ~ N(0, I)`.
    pub fn init_slots<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let shape = [batch, self.slots, self.dim];
        let n = batch * self.slots * self.dim;
        let noise = (0..n).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
        let eps = g.input(Tensor::new(&shape, noise)?);
        let log_sigma = g.param(store, self.log_sigma);
        let sigma = g.exp(log_sigma);
        let mu = g.param(store, self.mu);
        let s = g.mul_bcast(eps, sigma)?;
        g.add_bcast(s, mu)
    }

    /// Layer-normalised inputs projected to keys and values.
    pub fn keys_values<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
    ) -> Result<(Var, Var)> {
        let x = self.norm_inputs.forward(g, store, inputs)?;
        Ok((self.k.forward(g, store, x)?, self.v.forward(g, store, x)?))
    }

    /// One refinement round. `slots: [B, K, D]`, `k, v: [B, N, D]`.
    /// Returns the new slots and the slot-normalised attention `[B, K, N]`.
    pub fn step<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        slots: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let s = self.norm_slots.forward(g, store, slots)?;
        let q = self.q.forward(g, store, s)?;
        let logits = g.matmul(k, q, false, true)?;
        let logits = g.scale(logits, T::from_f64(1.0 / (self.dim as f64).sqrt()));
        let attn = g.softmax(logits, 2)?;
        let attn = g.transpose(attn)?;
        let weights = g.normalize_sum(attn, WEIGHT_EPS);
        let updates = g.matmul(weights, v, false, false)?;
        let slots = self.gru.forward(g, store, slots, updates)?;
        let h = self.norm_mlp.forward(g, store, slots)?;
        let h = self.mlp1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.mlp2.forward(g, store, h)?;
        Ok((g.add(slots, h)?, attn))
    }

    /// Runs the configured number of iterations from an explicit start.
    pub fn iterate<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
        init: Var,
    ) -> Result<SlotNodes> {
        let (si, sn) = (g.shape(inputs).to_vec(), g.shape(init).to_vec());
        if si.len() != 3 || sn.len() != 3 || si[0] != sn[0] || sn[2] != self.dim {
            return Err(shape_err!("slot attention: inputs {:?} with slots {:?}", si, sn));
        }
        let (k, v) = self.keys_values(g, store, inputs)?;
        let mut slots = init;
        let mut attn = None;
        for _ in 0..self.iterations {
            let (s, a) = self.step(g, store, slots, k, v)?;
            slots = s;
            attn = Some(a);
        }
        Ok(SlotNodes { slots, attn })
    }

    /// Encodes `[B, N, D_in]` features into `[B, K, D_slot]` slots.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
        rng: &mut impl Rng,
    ) -> Result<SlotNodes> {
        let batch = g.shape(inputs)[0];
        let init = self.init_slots(g, store, batch, rng)?;
        self.iterate(g, store, inputs, init)
    }

    /// The ablated encoder: one slot per panel holding the mean value
    /// embedding over all locations, `[B, 1, D_slot]`.
    pub fn mean_value<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: Var) -> Result<SlotNodes> {
        let s = g.shape(inputs).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("slot attention: inputs {:?}", s));
        }
        let (_, v) = self.keys_values(g, store, inputs)?;
        let m = g.sum_axis(v, 1)?;
        let m = g.scale(m, T::from_f64(1.0 / s[1] as f64));
        let slots = g.reshape(m, &[s[0], 1, self.dim])?;
        Ok(SlotNodes { slots, attn: None })
    }
}
