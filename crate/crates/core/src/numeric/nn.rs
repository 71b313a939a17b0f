//! Parameterised layers built from graph primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
fn uniform_init<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(&[d_in, d_out], d_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(&[d_out], d_in, rng)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[width]));
        Self { gain, shift, eps: Self::EPS }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let k = spec.kernel;
        let fan_in = c_in * k * k;
        let w = store.add(format!("{name}.w"), uniform_init(&[spec.c_out, c_in, k, k], fan_in, rng));
        let b = store.add(format!("{name}.b"), uniform_init(&[spec.c_out], fan_in, rng));
        Self { w, b, spec }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, Some(b), self.spec.stride, self.spec.pad)?;
        Ok(if self.spec.relu { g.relu(y) } else { y })
    }
}

/// Gated recurrent unit cell with hidden width equal to the input width.
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
/// Gate blocks are stored side by side in `[width, 3·width]` matrices in
/// the order reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub width: usize,
}

impl Gru {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.ih"), width, 3 * width, true, rng),
            hidden: Linear::new(store, &format!("{name}.hh"), width, 3 * width, true, rng),
            width,
        }
    }

    /// One recurrence step on row-batched `h` and `u` of shape `[.., width]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, u: Var) -> Result<Var> {
        let d = self.width;
        for v in [h, u] {
            if g.shape(v).last() != Some(&d) {
                return Err(shape_err!("gru: width {:?} differs from {}", g.shape(v), d));
            }
        }
        let last = g.shape(h).len() - 1;
        let gi = self.input.forward(g, store, u)?;
        let gh = self.hidden.forward(g, store, h)?;
        let gate = |g: &mut Graph<T>, src: Var, k: usize| g.slice(src, last, k * d, d);
        let (ir, iz, in_) = (gate(g, gi, 0)?, gate(g, gi, 1)?, gate(g, gi, 2)?);
        let (hr, hz, hn) = (gate(g, gh, 0)?, gate(g, gh, 1)?, gate(g, gh, 2)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(in_, rn)?;
        let n = g.tanh(n);
        // h' = n + z ⊙ (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}
