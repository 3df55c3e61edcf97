#![allow(dead_code)]

use dpinn_core::autodiff::Activation;
use dpinn_core::network::{init_params, ExpertConfig, ExpertParams, InputMap};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Expert with random biases and a non-trivial input map.
pub fn random_expert(input_dim: usize, hidden: usize, width: usize, act: Activation, seed: u64) -> ExpertParams {
    let out = if input_dim == 4 { 4 } else { 3 };
    let config = ExpertConfig::new(input_dim, hidden, width, act, out).unwrap();
    let mut params = init_params(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in 0..params.layer_count() {
        params.tensors[2 * l + 1].mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    let lo: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-1.5..-0.5)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(1.0..3.0)).collect();
    params.with_input_map(InputMap::from_bounds(&lo, &hi))
}

pub fn uniform_points(n: usize, lo: &[f64], hi: &[f64], seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, lo.len()), |(_, j)| rng.gen_range(lo[j]..hi[j]))
}

/// Plain scalar forward pass, written without any of the crate's evaluation code.
pub fn mlp(params: &ExpertParams, x: &[f64]) -> Vec<f64> {
    let map = &params.input_map;
    let mut a: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, v)| (v - map.center[j]) / map.half_width[j])
        .collect();
    let layers = params.layer_count();
    for l in 0..layers {
        let w = params.weight(l);
        let b = params.bias(l);
        let mut z = vec![0.0; w.nrows()];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut s = b[[0, o]];
            for (i, ai) in a.iter().enumerate() {
                s += w[[o, i]] * ai;
            }
            *zo = if l + 1 < layers {
                match params.config.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Sin => s.sin(),
                }
            } else {
                s
            };
        }
        a = z;
    }
    a
}

/// Fourth-order central first derivative of a vector function along `j`.
pub fn fd_first(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], j: usize, h: f64) -> Vec<f64> {
    let at = |s: f64| {
        let mut y = x.to_vec();
        y[j] += s * h;
        f(&y)
    };
    let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
    (0..m1.len())
        .map(|c| (m2[c] - 8.0 * m1[c] + 8.0 * p1[c] - p2[c]) / (12.0 * h))
        .collect()
}

/// Fourth-order central second derivative along `j`.
pub fn fd_second(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], j: usize, h: f64) -> Vec<f64> {
    let at = |s: f64| {
        let mut y = x.to_vec();
        y[j] += s * h;
        f(&y)
    };
    let (m2, m1, z, p1, p2) = (at(-2.0), at(-1.0), at(0.0), at(1.0), at(2.0));
    (0..z.len())
        .map(|c| (-m2[c] + 16.0 * m1[c] - 30.0 * z[c] + 16.0 * p1[c] - p2[c]) / (12.0 * h * h))
        .collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
