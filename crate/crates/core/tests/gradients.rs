mod common;

use common::{mlp, random_expert, uniform_points};
use dpinn_core::autodiff::{build_tape, forward_jet, Activation, TapeMode};
use dpinn_core::decomposition::{GhostSet, InterfaceKind, RankDatasets, RankId};
use dpinn_core::network::ExpertParams;
use dpinn_core::physics::{FlowRegime, LossWeights, RegimeKind};
use dpinn_core::runtime::{compute_gradients, GhostCache, RankState, Role, TapeCache};

const RE: f64 = 50.0;

fn weights() -> LossWeights {
    LossWeights {
        obs: 10.0,
        pde: 2.0,
        ghost_u: 3.0,
        ghost_p_space: 1.5,
        ghost_p_time: 0.7,
        velocity_components: vec![1.0, 5.0],
    }
}

fn state(params: ExpertParams) -> RankState {
    let regime = FlowRegime::new(RegimeKind::Unsteady2d, RE).unwrap();
    let lo = [0.0, -1.0, -1.0];
    let hi = [1.0, 1.0, 1.0];
    let obs_points = uniform_points(20, &lo, &hi, 1);
    let obs_velocity = uniform_points(20, &[-1.0, -1.0], &[1.0, 1.0], 2);
    let data = RankDatasets {
        obs_points,
        obs_velocity,
        collocation: uniform_points(30, &lo, &hi, 3),
        ghosts: vec![
            GhostSet {
                component: 0,
                neighbor: 1,
                kind: InterfaceKind::Spatial,
                points: uniform_points(6, &[0.0, 1.0, -1.0], &[1.0, 1.2, 1.0], 4),
            },
            GhostSet {
                component: 1,
                neighbor: 2,
                kind: InterfaceKind::Temporal,
                points: uniform_points(4, &[1.0, -1.0, -1.0], &[1.3, 1.0, 1.0], 5),
            },
        ],
    };
    let mut s = RankState::new(0, RankId { k: 0, m: 0 }, Role::Slave, regime, params, data, weights(), 9);
    for (i, cache) in s.cache.iter_mut().enumerate() {
        let n = cache.pressure.len();
        let vals = uniform_points(n, &[-1.0; 3], &[1.0; 3], 10 + i as u64);
        *cache = GhostCache {
            velocity: vals.slice(ndarray::s![.., ..2]).to_owned(),
            pressure: vals.column(2).to_owned(),
            normalized: false,
            epoch: Some(0),
        };
    }
    s
}

fn expert() -> ExpertParams {
    random_expert(3, 2, 8, Activation::Tanh, 21)
}

/// The weighted objective rebuilt from network values, tape jets and the residual formulas.
fn oracle_total(s: &RankState) -> f64 {
    let w = weights();
    let cw = &w.velocity_components;
    let p = &s.params;
    let mut obs = 0.0;
    for (x, t) in s.data.obs_points.rows().into_iter().zip(s.data.obs_velocity.rows()) {
        let y = mlp(p, x.as_slice().unwrap());
        obs += cw[0] * (y[0] - t[0]).powi(2) + cw[1] * (y[1] - t[1]).powi(2);
    }
    obs /= 20.0;

    let n = s.data.collocation.nrows();
    let mut tape = build_tape(&p.config.architecture(), n, TapeMode::Jet).unwrap();
    let jets = forward_jet(&mut tape, p, s.data.collocation.view()).unwrap();
    let mut pde = 0.0;
    for j in &jets {
        let (u, v) = (j.value[0], j.value[1]);
        let g = &j.grad;
        let l = &j.lap;
        let ru = g[[0, 0]] + u * g[[0, 1]] + v * g[[0, 2]] + g[[2, 1]] - (l[[0, 1]] + l[[0, 2]]) / RE;
        let rv = g[[1, 0]] + u * g[[1, 1]] + v * g[[1, 2]] + g[[2, 2]] - (l[[1, 1]] + l[[1, 2]]) / RE;
        let rc = g[[0, 1]] + g[[1, 2]];
        pde += ru * ru + rv * rv + rc * rc;
    }
    pde /= n as f64;

    let (mut gu, mut gps, mut gpt) = (0.0, 0.0, 0.0);
    let n_gh = s.data.ghost_count() as f64;
    for (set, cache) in s.data.ghosts.iter().zip(&s.cache) {
        let m = set.points.nrows() as f64;
        for (i, x) in set.points.rows().into_iter().enumerate() {
            let y = mlp(p, x.as_slice().unwrap());
            gu += (cw[0] * (y[0] - cache.velocity[[i, 0]]).powi(2) + cw[1] * (y[1] - cache.velocity[[i, 1]]).powi(2))
                / n_gh;
            let e = (y[2] - cache.pressure[i]).powi(2) / m;
            match set.kind {
                InterfaceKind::Spatial => gps += e,
                InterfaceKind::Temporal => gpt += e,
            }
        }
    }
    w.obs * obs + w.pde * pde + w.ghost_u * gu + w.ghost_p_space * gps + w.ghost_p_time * gpt
}

fn total_at(base: &RankState, params: &ExpertParams) -> f64 {
    let mut s = base.clone();
    s.params = params.clone();
    let mut tapes = TapeCache::new(params.config.architecture(), s.regime);
    compute_gradients(&mut s, &mut tapes, 1000).unwrap().1
}

#[test]
fn total_matches_independent_oracle() {
    let mut s = state(expert());
    let mut tapes = TapeCache::new(s.params.config.architecture(), s.regime);
    let (parts, total, _) = compute_gradients(&mut s, &mut tapes, 1000).unwrap();
    assert!(parts.ghost_p_space > 0.0 && parts.ghost_p_time > 0.0);
    let oracle = oracle_total(&s);
    assert!((total - oracle).abs() <= 1e-12 * oracle.abs(), "{total} vs {oracle}");
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let base = state(expert());
    let mut s = base.clone();
    let mut tapes = TapeCache::new(s.params.config.architecture(), s.regime);
    let (_, _, grads) = compute_gradients(&mut s, &mut tapes, 1000).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    for (t, g) in grads.iter().enumerate() {
        for (idx, &ad) in g.indexed_iter() {
            let at = |delta: f64| {
                let mut p = base.params.clone();
                p.tensors[t][idx] += delta;
                total_at(&base, &p)
            };
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            if ad.abs() < 1e-10 && fd.abs() < 1e-10 {
                continue;
            }
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            assert!(err <= 1e-4, "tensor {t} {idx:?}: ad {ad:e} fd {fd:e}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn mini_batch_accumulation_equals_full_batch() {
    let base = state(expert());
    let run = |batch: usize| {
        let mut s = base.clone();
        let mut tapes = TapeCache::new(s.params.config.architecture(), s.regime);
        compute_gradients(&mut s, &mut tapes, batch).unwrap()
    };
    let (pf, tf, gf) = run(1000);
    let (pb, tb, gb) = run(7);
    let scale = gf.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in gf.iter().zip(&gb) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
        }
    }
    assert!((tf - tb).abs() <= 1e-12 * tf);
    for (x, y) in [
        (pf.obs, pb.obs),
        (pf.pde, pb.pde),
        (pf.ghost_u, pb.ghost_u),
        (pf.ghost_p_space, pb.ghost_p_space),
        (pf.ghost_p_time, pb.ghost_p_time),
    ] {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
    }
}

#[test]
fn zero_weight_terms_contribute_no_gradient() {
    let mut s = state(expert());
    s.weights = LossWeights {
        obs: 0.0,
        pde: 0.0,
        ghost_u: 0.0,
        ghost_p_space: 1.0,
        ghost_p_time: 0.0,
        velocity_components: vec![1.0, 1.0],
    };
    // a pressure-only objective leaves the velocity rows of the output layer untouched
    let mut tapes = TapeCache::new(s.params.config.architecture(), s.regime);
    let (_, _, g) = compute_gradients(&mut s, &mut tapes, 1000).unwrap();
    let last_w = &g[g.len() - 2];
    let last_b = &g[g.len() - 1];
    assert!(last_w.row(0).iter().chain(last_w.row(1).iter()).all(|&v| v == 0.0));
    assert_eq!(last_b[[0, 0]], 0.0);
    assert_eq!(last_b[[0, 1]], 0.0);
    assert!(last_b[[0, 2]] != 0.0);
}
