//! Transformer scoring of candidate answers over slot sequences.

use rand::Rng;

use super::ModelConfig;
use crate::error::{contract_err, shape_err, Result};
use crate::numeric::nn::{LayerNorm, Linear};
use crate::numeric::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Variance floor inside temporal context normalisation.
pub const TCN_EPS: f64 = 1e-5;

/// Number of context panels and of answer candidates.
pub const CONTEXT: usize = 8;
pub const CANDIDATES: usize = 8;

/// Temporal context normalisation of `[.., M, D]` over the `M` axis,
/// followed by a per-feature gain and shift.
pub fn tcn<T: Float>(g: &mut Graph<T>, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() < 2 || s[s.len() - 2] < 2 {
        return Err(contract_err!("tcn needs at least two sequence elements, got {:?}", s));
    }
    let z = g.standardize(x, s.len() - 2, eps)?;
    let z = g.mul_bcast(z, gain)?;
    g.add_bcast(z, shift)
}

/// Row one-hot followed by column one-hot for a panel of the 3×3 grid.
/// Indices 0..7 are the context cells in row-major order and 8 is the
/// candidate in the bottom-right cell.
pub fn row_col_onehot(index: usize) -> Result<[f64; 6]> {
    if index > 8 {
        return Err(contract_err!("panel index {} out of range 0..8", index));
    }
    let mut v = [0.0; 6];
    v[index / 3] = 1.0;
    v[3 + index % 3] = 1.0;
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub tcn_gain: ParamId,
    pub tcn_shift: ParamId,
    pub row_col: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub use_tcn: bool,
}

impl Reasoner {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let d = cfg.slot_dim;
        let inner = cfg.heads * cfg.head_dim;
        let tcn_gain = store.add("reasoner.tcn.gain", Tensor::full(&[d], T::one()));
        let tcn_shift = store.add("reasoner.tcn.shift", Tensor::zeros(&[d]));
        let row_col = Linear::new(store, "reasoner.row_col", 6, d, true, rng);
        let bound = 1.0 / (d as f64).sqrt();
        let cls_data = (0..d).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        let cls = store.add("reasoner.cls", Tensor::new(&[d], cls_data).expect("width d"));
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("reasoner.block{l}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, inner, true, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, inner, true, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, inner, true, rng),
                    o: Linear::new(store, &format!("{p}.o"), inner, d, true, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    mlp1: Linear::new(store, &format!("{p}.mlp1"), d, cfg.mlp_dim, true, rng),
                    mlp2: Linear::new(store, &format!("{p}.mlp2"), cfg.mlp_dim, d, true, rng),
                }
            })
            .collect();
        Self {
            tcn_gain,
            tcn_shift,
            row_col,
            cls,
            blocks,
            final_norm: LayerNorm::new(store, "reasoner.final_norm", d),
            out: Linear::new(store, "reasoner.out", d, 1, true, rng),
            dim: d,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            dropout: cfg.dropout,
            use_tcn: !cfg.no_tcn,
        }
    }

    /// Scores the 8 candidates from `[16, K, D]` panel slots (context
    /// panels first). Returns `[8]` logits.
    pub fn score<T: Float, R: rand::RngCore + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        panel_slots: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let s = g.shape(panel_slots).to_vec();
        if s.len() != 3 || s[0] != CONTEXT + CANDIDATES || s[2] != self.dim {
            return Err(shape_err!("reasoner expects [16, K, {}], got {:?}", self.dim, s));
        }
        let k = s[1];
        let flat = g.reshape(panel_slots, &[(CONTEXT + CANDIDATES) * k, self.dim])?;
        let mut index = Vec::with_capacity(CANDIDATES * (CONTEXT + 1) * k);
        for a in 0..CANDIDATES {
            index.extend(0..CONTEXT * k);
            index.extend((CONTEXT + a) * k..(CONTEXT + a + 1) * k);
        }
        let seq = g.gather(flat, &index)?;
        let seq = g.reshape(seq, &[CANDIDATES, (CONTEXT + 1) * k, self.dim])?;
        self.score_sequences(g, store, seq, k, dropout_rng)
    }

    /// Scores `[C, 9K, D]` slot sequences, each laid out as 9 panels of
    /// `k` slots. Returns `[C]`.
    pub fn score_sequences<T: Float, R: rand::RngCore + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: Var,
        k: usize,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let m = (CONTEXT + 1) * k;
        if s.len() != 3 || s[1] != m || s[2] != self.dim {
            return Err(shape_err!("reasoner sequence {:?}, expected [C, {}, {}]", s, m, self.dim));
        }
        let c = s[0];
        let mut x = if self.use_tcn {
            let gain = g.param(store, self.tcn_gain);
            let shift = g.param(store, self.tcn_shift);
            tcn(g, seq, gain, shift, TCN_EPS)?
        } else {
            seq
        };
        let mut rc = Vec::with_capacity(m * 6);
        for p in 0..=CONTEXT {
            let oh = row_col_onehot(p)?;
            for _ in 0..k {
                rc.extend(oh.iter().map(|&v| T::from_f64(v)));
            }
        }
        let rc = g.input(Tensor::new(&[m, 6], rc)?);
        let rc = self.row_col.forward(g, store, rc)?;
        x = g.add_bcast(x, rc)?;
        let zeros = g.input(Tensor::zeros(&[c, 1, self.dim]));
        let cls = g.param(store, self.cls);
        let cls = g.add_bcast(zeros, cls)?;
        x = g.concat(&[cls, x], 1)?;
        for block in &self.blocks {
            x = self.block(g, store, block, x, dropout_rng.as_deref_mut())?;
        }
        let x = self.final_norm.forward(g, store, x)?;
        let head = g.slice(x, 1, 0, 1)?;
        let head = g.reshape(head, &[c, self.dim])?;
        let score = self.out.forward(g, store, head)?;
        g.reshape(score, &[c])
    }

    fn block<T: Float, R: rand::RngCore + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        b: &Block,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (c, m) = (s[0], s[1]);
        let (h, dh) = (self.heads, self.head_dim);
        let y = b.norm1.forward(g, store, x)?;
        let split = |g: &mut Graph<T>, lin: &Linear| -> Result<Var> {
            let p = lin.forward(g, store, y)?;
            let p = g.reshape(p, &[c, m, h, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[c * h, m, dh])
        };
        let q = split(g, &b.q)?;
        let k = split(g, &b.k)?;
        let v = split(g, &b.v)?;
        let logits = g.matmul(q, k, false, true)?;
        let logits = g.scale(logits, T::from_f64(1.0 / (dh as f64).sqrt()));
        let mut att = g.softmax(logits, 2)?;
        if let Some(mut r) = rng.as_deref_mut() {
            att = g.dropout(att, self.dropout, &mut r)?;
        }
        let ctx = g.matmul(att, v, false, false)?;
        let ctx = g.reshape(ctx, &[c, h, m, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[c, m, h * dh])?;
        let ctx = b.o.forward(g, store, ctx)?;
        let x = g.add(x, ctx)?;
        let y = b.norm2.forward(g, store, x)?;
        let y = b.mlp1.forward(g, store, y)?;
        let mut y = g.relu(y);
        if let Some(mut r) = rng.as_deref_mut() {
            y = g.dropout(y, self.dropout, &mut r)?;
        }
        let y = b.mlp2.forward(g, store, y)?;
        g.add(x, y)
    }
}
