use rand::Rng;

use crate::error::Result;
use crate::model::{task_loss, total_loss, ModelConfig, Pass, Stsn, DEFAULT_LAMBDA, PANELS};
use crate::numeric::{check_params_refined, Float, GradCheckReport, Graph, ParamStore, Tensor, Var};

use super::train::stream;

/// Steps tried per coordinate, most reliable first. Kinks from ReLU and
/// max-subtraction spoil large steps on a few coordinates, rounding spoils
/// small steps on others.
pub const LADDER: [f64; 4] = [1e-5, 1e-3, 1e-4, 1e-6];

/// Steps for the double-double re-check, where rounding is no concern.
pub const FINE_LADDER: [f64; 3] = [1e-8, 1e-10, 1e-6];

/// Agreement at which a coordinate needs no further steps.
pub const ACCEPT: f64 = 1e-4;

fn micro_loss<T: Float>(
    model: &Stsn,
    panels: &Tensor<f64>,
    answer: usize,
    seed: u64,
    g: &mut Graph<T>,
    s: &ParamStore<T>,
) -> Result<Var> {
    let mut r = stream(seed, 2);
    let out = model.forward(g, s, &panels.cast(), &mut Pass { rng: &mut r, train: true })?;
    let task = task_loss(g, out.scores, answer)?;
    total_loss(g, out.recon.loss, task, DEFAULT_LAMBDA)
}

/// Finite-difference check of the total loss of the micro model over every
/// parameter, in f64 with a double-double re-check of coordinates whose
/// gradient is below f64 resolution.
pub fn micro_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro();
    let mut store = ParamStore::<f64>::new();
    let model = Stsn::new(cfg.clone(), &mut store, &mut stream(seed, 0))?;
    let mut rng = stream(seed, 1);
    let n = PANELS * cfg.image_channels * cfg.image_size * cfg.image_size;
    let data: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let panels = Tensor::from_f64(&[PANELS, cfg.image_channels, cfg.image_size, cfg.image_size], &data)?;
    let answer = rng.random_range(0..8);
    check_params_refined(
        &store,
        |g, s| micro_loss(&model, &panels, answer, seed, g, s),
        |g, s| micro_loss(&model, &panels, answer, seed, g, s),
        &LADDER,
        &FINE_LADDER,
        ACCEPT,
        |_| true,
    )
}
