use super::{Float, Gradients, ParamStore, Tensor};
use crate::error::{contract_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// ADAM optimiser state: one first- and second-moment tensor per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    /// Rebuilds state from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if first.len() != second.len() {
            return Err(shape_err!("moment lists differ in length"));
        }
        for (m, v) in first.iter().zip(&second) {
            if m.shape() != v.shape() {
                return Err(shape_err!("moment shapes {:?} and {:?} differ", m.shape(), v.shape()));
            }
        }
        Ok(Self { config, step, first, second })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One bias-corrected ADAM step. Parameters without a gradient are left
    /// untouched, as are their moments.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(contract_err!("learning rate {} must be non-negative", lr));
        }
        if self.first.len() != store.len() {
            return Err(shape_err!("optimiser tracks {} params, store has {}", self.first.len(), store.len()));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.eps));
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(shape_err!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamId;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x));
        (s, id)
    }

    fn grads(id: ParamId, g: f64) -> Gradients<f64> {
        let mut gr = Gradients::empty(1);
        gr.set(id, Tensor::scalar(g));
        gr
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.25] {
            let (mut s, id) = scalar_store(1.0);
            let mut adam = Adam::new(&s, AdamConfig::default());
            adam.update(&mut s, &grads(id, g), 0.01).unwrap();
            let delta = s.get(id).item() - 1.0;
            assert!((delta + 0.01 * f64::signum(g)).abs() < 1e-8, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = scalar_store(0.5);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.update(&mut s, &grads(id, 0.0), 0.1).unwrap();
        assert_eq!(s.get(id).item(), 0.5);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn three_step_trace_matches_hand_computation() {
        // Gradients 1, -2, 0.5 with lr 0.1 from x = 0, evaluated by hand:
        // t=1: m=0.1, v=0.001, m^=1, v^=1 -> x=-0.1
        // t=2: m=-0.11, v=0.004999, m^=-0.11/0.19, v^=0.004999/0.001999
        // t=3: m=-0.049, v=0.005244001, bias corrections 0.271, 0.002997001
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut expected = 0.0f64;
        let steps = [
            (1.0, 1.0, 1.0),
            (-0.11 / 0.19, 0.004999 / 0.001999, 0.0),
            (-0.049 / 0.271, 0.005244001 / 0.002997001, 0.0),
        ];
        for (g, (m_hat, v_hat, _)) in [1.0, -2.0, 0.5].into_iter().zip(steps) {
            adam.update(&mut s, &grads(id, g), 0.1).unwrap();
            expected -= 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
            assert!((s.get(id).item() - expected).abs() < 1e-9, "{} vs {}", s.get(id).item(), expected);
        }
    }

    #[test]
    fn second_moments_stay_non_negative() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        for g in [-5.0, 3.0, -1e-3] {
            adam.update(&mut s, &grads(id, g), 1e-3).unwrap();
            assert!(adam.second_moments()[0].item() >= 0.0);
        }
    }
}
