//! Straight-line scalar reference implementations used as test oracles.
//! They read parameters by name and share no code with the graph path.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsn::numeric::{Float, ParamStore, Tensor};

pub fn random_tensor<T: Float>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn param<T: Float>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().iter().map(|v| v.as_f64()).collect()
}

pub fn has_param<T: Float>(store: &ParamStore<T>, name: &str) -> bool {
    store.find(name).is_some()
}

/// `x · W + b` with `W` stored `[d_in, d_out]`.
pub fn linear<T: Float>(store: &ParamStore<T>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{name}.w"));
    let d_in = x.len();
    let d_out = w.len() / d_in;
    let mut y = if has_param(store, &format!("{name}.b")) {
        param(store, &format!("{name}.b"))
    } else {
        vec![0.0; d_out]
    };
    for o in 0..d_out {
        for i in 0..d_in {
            y[o] += x[i] * w[i * d_out + o];
        }
    }
    y
}

pub fn standardize(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

pub fn layer_norm<T: Float>(store: &ParamStore<T>, name: &str, x: &[f64]) -> Vec<f64> {
    let g = param(store, &format!("{name}.gain"));
    let s = param(store, &format!("{name}.shift"));
    standardize(x, 1e-5).iter().enumerate().map(|(i, v)| v * g[i] + s[i]).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gru<T: Float>(store: &ParamStore<T>, name: &str, h: &[f64], u: &[f64]) -> Vec<f64> {
    let d = h.len();
    let gi = linear(store, &format!("{name}.ih"), u);
    let gh = linear(store, &format!("{name}.hh"), h);
    (0..d)
        .map(|j| {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[d + j] + gh[d + j]);
            let n = (gi[2 * d + j] + r * gh[2 * d + j]).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

/// One slot-attention round on a single panel. Returns the new slots and
/// the `[K][N]` attention (softmax over slots).
pub fn slot_step<T: Float>(
    store: &ParamStore<T>,
    slots: &[Vec<f64>],
    inputs: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let kk = slots.len();
    let n = inputs.len();
    let d = slots[0].len();
    let xs: Vec<Vec<f64>> = inputs.iter().map(|x| layer_norm(store, "slots.norm_inputs", x)).collect();
    let keys: Vec<Vec<f64>> = xs.iter().map(|x| linear(store, "slots.k", x)).collect();
    let vals: Vec<Vec<f64>> = xs.iter().map(|x| linear(store, "slots.v", x)).collect();
    let qs: Vec<Vec<f64>> = slots
        .iter()
        .map(|s| linear(store, "slots.q", &layer_norm(store, "slots.norm_slots", s)))
        .collect();
    let mut attn = vec![vec![0.0; n]; kk];
    for j in 0..n {
        let logits: Vec<f64> = (0..kk).map(|k| dot(&keys[j], &qs[k]) / (d as f64).sqrt()).collect();
        let p = softmax(&logits);
        for k in 0..kk {
            attn[k][j] = p[k];
        }
    }
    let mut out = Vec::with_capacity(kk);
    for k in 0..kk {
        let mass: f64 = attn[k].iter().sum::<f64>() + 1e-8;
        let mut upd = vec![0.0; d];
        for j in 0..n {
            for c in 0..d {
                upd[c] += attn[k][j] / mass * vals[j][c];
            }
        }
        let s = gru(store, "slots.gru", &slots[k], &upd);
        let h = layer_norm(store, "slots.norm_mlp", &s);
        let h = linear(store, "slots.mlp2", &relu(&linear(store, "slots.mlp1", &h)));
        out.push(s.iter().zip(&h).map(|(a, b)| a + b).collect());
    }
    (out, attn)
}

/// Scores one `[9K][D]` slot sequence with the reasoner parameters.
pub fn score_sequence<T: Float>(
    store: &ParamStore<T>,
    seq: &[Vec<f64>],
    k: usize,
    heads: usize,
    head_dim: usize,
    layers: usize,
    use_tcn: bool,
) -> f64 {
    let m = seq.len();
    let d = seq[0].len();
    let mut x: Vec<Vec<f64>> = seq.to_vec();
    if use_tcn {
        let gain = param(store, "reasoner.tcn.gain");
        let shift = param(store, "reasoner.tcn.shift");
        for c in 0..d {
            let col: Vec<f64> = x.iter().map(|r| r[c]).collect();
            let z = standardize(&col, 1e-5);
            for i in 0..m {
                x[i][c] = z[i] * gain[c] + shift[c];
            }
        }
    }
    for i in 0..m {
        let p = i / k;
        let mut oh = vec![0.0; 6];
        oh[p / 3] = 1.0;
        oh[3 + p % 3] = 1.0;
        let e = linear(store, "reasoner.row_col", &oh);
        for c in 0..d {
            x[i][c] += e[c];
        }
    }
    x.insert(0, param(store, "reasoner.cls"));
    let len = x.len();
    for l in 0..layers {
        let b = format!("reasoner.block{l}");
        let y: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(store, &format!("{b}.norm1"), r)).collect();
        let q: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &format!("{b}.q"), r)).collect();
        let kx: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &format!("{b}.k"), r)).collect();
        let v: Vec<Vec<f64>> = y.iter().map(|r| linear(store, &format!("{b}.v"), r)).collect();
        let mut ctx = vec![vec![0.0; heads * head_dim]; len];
        for h in 0..heads {
            let sl = |r: &Vec<f64>| r[h * head_dim..(h + 1) * head_dim].to_vec();
            for i in 0..len {
                let logits: Vec<f64> =
                    (0..len).map(|j| dot(&sl(&q[i]), &sl(&kx[j])) / (head_dim as f64).sqrt()).collect();
                let a = softmax(&logits);
                for j in 0..len {
                    for c in 0..head_dim {
                        ctx[i][h * head_dim + c] += a[j] * v[j][h * head_dim + c];
                    }
                }
            }
        }
        for i in 0..len {
            let o = linear(store, &format!("{b}.o"), &ctx[i]);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let y = layer_norm(store, &format!("{b}.norm2"), &x[i]);
            let y = relu(&linear(store, &format!("{b}.mlp1"), &y));
            let y = linear(store, &format!("{b}.mlp2"), &y);
            for c in 0..d {
                x[i][c] += y[c];
            }
        }
    }
    let head = layer_norm(store, "reasoner.final_norm", &x[0]);
    linear(store, "reasoner.out", &head)[0]
}

/// Rows of a `[.., rows, cols]` tensor slice as nested vectors.
pub fn rows<T: Float>(data: &[T], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}
