mod common;

use common::random_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsn::model::{composite, Decoder, ModelConfig, Render};
use stsn::numeric::{Graph, ParamStore, Tensor};

#[test]
fn spatial_broadcast_tiles_and_mean_recovers() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let y = g.spatial_broadcast(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);

    let x = g.input(random_tensor(&[3, 5], -1.0, 1.0, 1));
    let y = g.spatial_broadcast(x, 80, 80).unwrap();
    assert_eq!(g.shape(y), &[3, 5, 80, 80]);
    for (i, chunk) in g.value(y).data().chunks(6400).enumerate() {
        let mean = chunk.iter().sum::<f64>() / 6400.0;
        assert!((mean - g.value(x).data()[i]).abs() < 1e-12);
    }
}

fn decoder(cfg: &ModelConfig, seed: u64) -> (ParamStore<f32>, Decoder) {
    let mut store = ParamStore::new();
    let d = Decoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, d)
}

#[test]
fn table_stack_layout() {
    let (store, d) = decoder(&ModelConfig::grayscale_80(), 2);
    assert_eq!(d.convs.len(), 4);
    for conv in &d.convs[..3] {
        assert_eq!((conv.spec.c_out, conv.spec.kernel, conv.spec.pad, conv.spec.relu), (32, 5, 2, true));
    }
    let last = d.convs[3].spec;
    assert_eq!((last.c_out, last.kernel, last.stride, last.pad, last.relu), (2, 3, 1, 1, false));
    assert_eq!(store.get(d.convs[0].w).shape(), &[32, 32, 5, 5]);

    let mut g = Graph::new();
    let s = g.input(random_tensor(&[1, 1, 32], -1.0, 1.0, 3));
    let r = d.forward(&mut g, &store, s).unwrap();
    assert_eq!(g.shape(r.recons), &[1, 1, 1, 6400]);
    assert_eq!(g.shape(r.mask_logits), &[1, 1, 6400]);
}

#[test]
fn zero_parameters_render_zero() {
    let (mut store, d) = decoder(&ModelConfig::micro(), 4);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let s = g.input(random_tensor(&[2, 2, 4], -1.0, 1.0, 5));
    let r = d.forward(&mut g, &store, s).unwrap();
    assert!(g.value(r.recons).data().iter().all(|&v| v == 0.0));
    assert!(g.value(r.mask_logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn equal_slots_render_identically() {
    let (store, d) = decoder(&ModelConfig::micro(), 6);
    let one = random_tensor::<f32>(&[4], -1.0, 1.0, 7).into_data();
    let mut g = Graph::new();
    let s = g.input(Tensor::new(&[1, 2, 4], [one.clone(), one].concat()).unwrap());
    let r = d.forward(&mut g, &store, s).unwrap();
    let rec = g.value(r.recons).data();
    assert_eq!(rec[..64], rec[64..]);
    let m = g.value(r.mask_logits).data();
    assert_eq!(m[..64], m[64..]);
}

fn render(g: &mut Graph<f64>, recons: Tensor<f64>, logits: Tensor<f64>) -> Render {
    Render { recons: g.input(recons), mask_logits: g.input(logits) }
}

#[test]
fn single_slot_composite_is_its_recon() {
    let mut g = Graph::new();
    let rec = random_tensor::<f64>(&[2, 1, 1, 9], 0.0, 1.0, 8);
    let r = render(&mut g, rec.clone(), random_tensor(&[2, 1, 9], -3.0, 3.0, 9));
    let c = composite(&mut g, r).unwrap();
    assert_eq!(g.value(c.image).data(), rec.data());
    assert!(g.value(c.masks).data().iter().all(|&m| m == 1.0));
}

#[test]
fn equal_logits_average() {
    let mut g = Graph::new();
    let rec = random_tensor::<f64>(&[1, 2, 1, 6], 0.0, 1.0, 10);
    let r = render(&mut g, rec.clone(), Tensor::full(&[1, 2, 6], 0.3));
    let c = composite(&mut g, r).unwrap();
    for p in 0..6 {
        let want = 0.5 * (rec.data()[p] + rec.data()[6 + p]);
        assert!((g.value(c.image).data()[p] - want).abs() < 1e-12);
    }
}

#[test]
fn masks_sum_to_one_and_composite_ignores_slot_order() {
    for seed in 0..20u64 {
        let (b, k, ch, hw) = (2, 4, 3, 10);
        let rec = random_tensor::<f32>(&[b, k, ch, hw], 0.0, 1.0, seed);
        let logits = random_tensor::<f32>(&[b, k, hw], -4.0, 4.0, seed + 100);
        let run = |rec: Tensor<f32>, logits: Tensor<f32>| {
            let mut g = Graph::new();
            let r = Render { recons: g.input(rec), mask_logits: g.input(logits) };
            let c = composite(&mut g, r).unwrap();
            (g.value(c.image).clone(), g.value(c.masks).clone())
        };
        let (img, masks) = run(rec.clone(), logits.clone());
        assert_eq!(img.shape(), &[b, ch, hw]);
        for bi in 0..b {
            for p in 0..hw {
                let s: f32 = (0..k).map(|ki| masks.data()[(bi * k + ki) * hw + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let perm = [3usize, 1, 0, 2];
        let permute = |t: &Tensor<f32>, block: usize| {
            let mut out = Vec::with_capacity(t.numel());
            for bi in 0..b {
                for &p in &perm {
                    let start = (bi * k + p) * block;
                    out.extend_from_slice(&t.data()[start..start + block]);
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let (img2, _) = run(permute(&rec, ch * hw), permute(&logits, hw));
        for (a, b) in img.data().iter().zip(img2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn reconstruction_loss_values() {
    let mut g = Graph::<f64>::new();
    let panels = random_tensor::<f64>(&[16, 1, 4, 4], 0.0, 0.9, 11);
    let same = g.input(panels.clone());
    let l = g.mse(same, &panels).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let off = g.input(panels.map(|v| v + 0.1));
    let l = g.mse(off, &panels).unwrap();
    assert!((g.value(l).item() - 0.01).abs() < 1e-12);

    let other = random_tensor::<f64>(&[16, 1, 4, 4], 0.0, 1.0, 12);
    let x = g.input(other.clone());
    let l = g.mse(x, &panels).unwrap();
    let mut want = 0.0;
    for i in 0..panels.numel() {
        let d = other.data()[i] - panels.data()[i];
        want += d * d;
    }
    want /= panels.numel() as f64;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    assert!(g.value(l).item() > 0.0);
}
