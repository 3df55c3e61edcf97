mod common;

use common::{fd_first, fd_second, mlp, random_expert, rel_norm, uniform_points};
use dpinn_core::autodiff::{build_tape, forward_jet, Activation, TapeMode};
use dpinn_core::network::predict;

const H: f64 = 1e-3;

#[test]
fn jets_match_finite_differences() {
    for act in [Activation::Tanh, Activation::Sin] {
        for seed in 0..5u64 {
            let d = 2 + (seed as usize % 3);
            let hidden = 2 + (seed as usize % 2);
            let width = [8, 16, 32, 24, 12][seed as usize];
            let params = random_expert(d, hidden, width, act, seed);
            let pts = uniform_points(100, &vec![-1.0; d], &vec![1.0; d], 100 + seed);
            let mut tape = build_tape(&params.config.architecture(), 100, TapeMode::Jet).unwrap();
            let jets = forward_jet(&mut tape, &params, pts.view()).unwrap();

            let f = |x: &[f64]| mlp(&params, x);
            let (mut ad_g, mut fd_g, mut ad_l, mut fd_l) = (vec![], vec![], vec![], vec![]);
            for (jet, p) in jets.iter().zip(pts.rows()) {
                let x = p.to_vec();
                let value = f(&x);
                for (c, v) in value.iter().enumerate() {
                    assert!((jet.value[c] - v).abs() <= 1e-12 * (1.0 + v.abs()));
                }
                for j in 0..d {
                    let g = fd_first(&f, &x, j, H);
                    let l = fd_second(&f, &x, j, H);
                    for c in 0..value.len() {
                        ad_g.push(jet.grad[[c, j]]);
                        fd_g.push(g[c]);
                        ad_l.push(jet.lap[[c, j]]);
                        fd_l.push(l[c]);
                    }
                }
            }
            let eg = rel_norm(&ad_g, &fd_g);
            let el = rel_norm(&ad_l, &fd_l);
            assert!(eg <= 1e-5, "{act:?} seed {seed}: first-derivative error {eg:e}");
            assert!(el <= 1e-5, "{act:?} seed {seed}: second-derivative error {el:e}");
        }
    }
}

#[test]
fn predict_agrees_with_jet_value() {
    for act in [Activation::Tanh, Activation::Sin] {
        let params = random_expert(3, 3, 20, act, 11);
        let pts = uniform_points(64, &[0.0, -1.0, -1.0], &[2.0, 1.0, 1.0], 5);
        let pred = predict(&params, pts.view()).unwrap();
        let mut tape = build_tape(&params.config.architecture(), 64, TapeMode::Jet).unwrap();
        let jets = forward_jet(&mut tape, &params, pts.view()).unwrap();
        for (i, jet) in jets.iter().enumerate() {
            for c in 0..2 {
                assert!((pred.velocity[[i, c]] - jet.value[c]).abs() <= 1e-13 * (1.0 + jet.value[c].abs()));
            }
            assert!((pred.pressure[i] - jet.value[2]).abs() <= 1e-13 * (1.0 + jet.value[2].abs()));
        }
    }
}

#[test]
fn reused_tape_is_bit_identical_to_fresh_tape() {
    let a = random_expert(4, 2, 16, Activation::Sin, 3);
    let b = random_expert(4, 2, 16, Activation::Sin, 4);
    let p = uniform_points(30, &[-1.0; 4], &[1.0; 4], 1);
    let q = uniform_points(30, &[-1.0; 4], &[1.0; 4], 2);
    let arch = a.config.architecture();
    let mut reused = build_tape(&arch, 30, TapeMode::Jet).unwrap();
    let first = forward_jet(&mut reused, &a, p.view()).unwrap();
    forward_jet(&mut reused, &b, q.view()).unwrap();
    let again = forward_jet(&mut reused, &a, p.view()).unwrap();
    let fresh = forward_jet(&mut build_tape(&arch, 30, TapeMode::Jet).unwrap(), &a, p.view()).unwrap();
    for ((x, y), z) in first.iter().zip(&again).zip(&fresh) {
        for (u, v) in x.grad.iter().zip(y.grad.iter()).chain(x.lap.iter().zip(z.lap.iter())) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        assert_eq!(x, y);
        assert_eq!(x, z);
    }
}
