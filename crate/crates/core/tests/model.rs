mod common;

use std::time::Instant;

use common::random_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsn::model::{task_loss, total_loss, ModelConfig, Pass, Stsn};
use stsn::numeric::{check_params_refined, Float, Graph, ParamStore, Var};

fn loss<T: Float>(
    model: &Stsn,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    panels: &stsn::numeric::Tensor<f64>,
    answer: usize,
) -> stsn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut pass = Pass { rng: &mut rng, train: true };
    let out = model.forward(g, store, &panels.cast(), &mut pass)?;
    let task = task_loss(g, out.scores, answer)?;
    total_loss(g, out.recon.loss, task, 1000.0)
}

#[test]
fn end_to_end_gradient_check_micro() {
    for seed in 1..=3 {
        let started = Instant::now();
        let mut store = ParamStore::<f64>::new();
        let model = Stsn::new(ModelConfig::micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let panels = random_tensor::<f64>(&[16, 1, 8, 8], 0.0, 1.0, seed + 100);
        let answer = seed as usize % 8;
        let report = check_params_refined(
            &store,
            |g, s| loss(&model, g, s, &panels, answer),
            |g, s| loss(&model, g, s, &panels, answer),
            &[1e-5, 1e-3, 1e-4, 1e-6],
            &[1e-8, 1e-10, 1e-6],
            1e-4,
            |_| true,
        )
        .unwrap();
        assert_eq!(report.coordinates, store.numel());
        assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        assert!(started.elapsed().as_secs() < 60);
    }
}

#[test]
fn forward_shapes() {
    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig { image_size: 12, slots: 3, ..ModelConfig::micro() };
    let model = Stsn::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let panels = random_tensor::<f32>(&[16, 1, 12, 12], 0.0, 1.0, 4);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = model.forward(&mut g, &store, &panels, &mut Pass { rng: &mut rng, train: false }).unwrap();
    assert_eq!(g.shape(out.scores), &[8]);
    assert_eq!(g.shape(out.recon.slots.slots), &[16, 3, 4]);
    assert_eq!(g.shape(out.recon.composite.masks), &[16, 3, 144]);
    assert_eq!(g.shape(out.recon.composite.image), &[16, 1, 144]);
    assert!(g.value(out.recon.loss).item() >= 0.0);
}

#[test]
fn ablated_slot_attention_uses_one_slot_per_panel() {
    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig { no_slot_attention: true, ..ModelConfig::micro() };
    let model = Stsn::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let panels = random_tensor::<f32>(&[16, 1, 8, 8], 0.0, 1.0, 7);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let out = model.forward(&mut g, &store, &panels, &mut Pass { rng: &mut rng, train: true }).unwrap();
    assert_eq!(g.shape(out.recon.slots.slots), &[16, 1, 4]);
    assert!(out.recon.slots.attn.is_none());
    assert_eq!(g.shape(out.scores), &[8]);
}

#[test]
fn forward_rejects_wrong_panel_count() {
    let mut store = ParamStore::<f32>::new();
    let model = Stsn::new(ModelConfig::micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let panels = random_tensor::<f32>(&[15, 1, 8, 8], 0.0, 1.0, 10);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(model.forward(&mut g, &store, &panels, &mut Pass { rng: &mut rng, train: true }).is_err());
}

#[test]
fn reasoner_names_are_separable() {
    let mut store = ParamStore::<f32>::new();
    Stsn::new(ModelConfig::micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let reasoner = store.iter().filter(|(_, n, _)| !Stsn::is_perceptual(n)).count();
    assert!(reasoner > 0 && reasoner < store.len());
    assert!(store.iter().all(|(_, n, _)| ["encoder.", "slots.", "decoder.", "reasoner."]
        .iter()
        .any(|p| n.starts_with(p))));
}
