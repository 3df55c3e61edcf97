use dpinn_core::decomposition::{
    budget_share, identify_masters, partition, sample_rank_datasets, Budget, GlobalDomain, InterfaceKind,
    ObservationSet, Partition, RankId,
};
use dpinn_core::physics::{FlowRegime, RegimeKind};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
struct Case {
    kind: RegimeKind,
    spatial: Vec<(f64, f64)>,
    time: Option<(f64, f64)>,
    grid: Vec<usize>,
    time_splits: usize,
    delta_frac: f64,
    delta_time_frac: f64,
}

impl Case {
    fn build(&self) -> Partition {
        let regime = FlowRegime::new(self.kind, 100.0).unwrap();
        let domain = GlobalDomain::new(self.spatial.clone(), self.time, regime).unwrap();
        let min_cell = self
            .spatial
            .iter()
            .zip(&self.grid)
            .map(|(&(lo, hi), &n)| (hi - lo) / n as f64)
            .fold(f64::INFINITY, f64::min);
        let dt = self.time.map_or(0.0, |(t0, t1)| (t1 - t0) / self.time_splits as f64);
        partition(
            &domain,
            &self.grid,
            self.time_splits,
            self.delta_frac * min_cell,
            self.delta_time_frac * dt,
        )
        .unwrap()
    }
}

fn case() -> impl Strategy<Value = Case> {
    (0usize..3, proptest::collection::vec((-3.0f64..1.0, 0.5f64..4.0, 1usize..4), 3), 1usize..4, 0.0f64..0.95, 0.0f64..0.95, 0.5f64..10.0)
        .prop_map(|(k, axes, m, df, dtf, t1)| {
            let kind = [RegimeKind::Steady2d, RegimeKind::Unsteady2d, RegimeKind::Unsteady3d][k];
            let sd = if kind == RegimeKind::Unsteady3d { 3 } else { 2 };
            let steady = kind == RegimeKind::Steady2d;
            Case {
                kind,
                spatial: axes[..sd].iter().map(|&(lo, w, _)| (lo, lo + w)).collect(),
                time: (!steady).then_some((0.0, t1)),
                grid: axes[..sd].iter().map(|a| a.2).collect(),
                time_splits: if steady { 1 } else { m },
                delta_frac: df,
                delta_time_frac: dtf,
            }
        })
}

/// Points in the global box, a quarter of them snapped to cell edges.
fn probe_points(p: &Partition, n: usize, seed: u64) -> Array2<f64> {
    let bounds = p.domain.bounds();
    let splits: Vec<usize> = p
        .domain
        .time
        .map(|_| p.time_splits)
        .into_iter()
        .chain(p.spatial_grid.iter().copied())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, bounds.len()), |(_, j)| {
        let (lo, hi) = bounds[j];
        if rng.gen_bool(0.25) {
            let i = rng.gen_range(0..=splits[j]);
            if i == splits[j] {
                hi
            } else {
                lo + (hi - lo) * i as f64 / splits[j] as f64
            }
        } else {
            rng.gen_range(lo..=hi)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interiors_tile_the_domain(c in case(), seed in 0u64..1000) {
        let p = c.build();
        let pts = probe_points(&p, 100_000, seed);
        let mut total = 0.0;
        for s in &p.subdomains {
            total += s.interior.overlap_volume(&s.interior);
            for o in &p.subdomains {
                if o.index != s.index {
                    prop_assert_eq!(s.interior.overlap_volume(&o.interior), 0.0);
                }
            }
        }
        let whole = p.domain.region();
        prop_assert!((total - whole.overlap_volume(&whole)).abs() <= 1e-9 * total);
        for row in pts.rows() {
            let owner = p.owner(row).expect("every domain point has an owner");
            prop_assert!(p.subdomains[owner].interior.contains(row));
        }
    }

    #[test]
    fn ghost_regions_sit_in_the_neighbor_and_the_extension(c in case()) {
        let p = c.build();
        let whole = p.domain.region();
        for s in &p.subdomains {
            prop_assert!(whole.encloses(&s.extended));
            prop_assert!(s.extended.encloses(&s.interior));
            for g in &s.ghosts {
                prop_assert!(s.extended.encloses(&g.region));
                prop_assert!(p.subdomains[g.neighbor].interior.encloses(&g.region));
                prop_assert_eq!(g.region.overlap_volume(&s.interior), 0.0);
                let temporal = p.domain.time.is_some() && g.axis == 0;
                prop_assert_eq!(g.kind == InterfaceKind::Temporal, temporal);
                let delta = if temporal { p.delta_time } else { p.delta_space };
                let thickness = g.region.hi[g.axis] - g.region.lo[g.axis];
                prop_assert!((thickness - delta).abs() <= 1e-12 * (1.0 + delta));
                // face-adjacent only: the region spans the interior on every other axis
                for j in (0..s.interior.dim()).filter(|&j| j != g.axis) {
                    prop_assert_eq!(g.region.lo[j], s.interior.lo[j]);
                    prop_assert_eq!(g.region.hi[j], s.interior.hi[j]);
                }
            }
        }
    }

    #[test]
    fn interfaces_are_symmetric(c in case()) {
        let p = c.build();
        for s in &p.subdomains {
            for g in &s.ghosts {
                let back = p.subdomains[g.neighbor]
                    .ghosts
                    .iter()
                    .filter(|h| h.neighbor == s.index)
                    .collect::<Vec<_>>();
                prop_assert_eq!(back.len(), 1);
                prop_assert_eq!(back[0].kind, g.kind);
                prop_assert_eq!(back[0].axis, g.axis);
                prop_assert_eq!(back[0].upper, !g.upper);
            }
        }
    }

    #[test]
    fn flat_index_is_a_bijection(c in case()) {
        let p = c.build();
        let k_count: usize = c.grid.iter().product();
        prop_assert_eq!(p.len(), k_count * c.time_splits);
        let mut seen = vec![false; p.len()];
        for m in 0..c.time_splits {
            for k in 0..k_count {
                let i = p.flat_index(RankId { k, m });
                prop_assert_eq!(i, m * k_count + k);
                prop_assert!(!seen[i]);
                seen[i] = true;
                prop_assert_eq!(p.subdomains[i].rank, RankId { k, m });
                prop_assert_eq!(p.subdomains[i].index, i);
            }
        }
    }

    #[test]
    fn budget_shares_are_conserved(total in 0usize..100_000, count in 1usize..17) {
        let shares: Vec<usize> = (0..count).map(|i| budget_share(total, i, count)).collect();
        prop_assert_eq!(shares.iter().sum::<usize>(), total);
        let (lo, hi) = (shares.iter().min().unwrap(), shares.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn sampled_datasets_respect_their_regions(c in case(), seed in 0u64..100) {
        let p = c.build();
        let pts = probe_points(&p, 2000, seed + 1);
        let sd = p.domain.regime.spatial_dim();
        let obs = ObservationSet {
            velocity: Array2::zeros((pts.nrows(), sd)),
            pressure: Some(Array1::zeros(pts.nrows())),
            points: pts,
        };
        let budget = Budget { n_obs: 0, n_pde: 1000, n_ghost_per_interface: 17 };
        let mut owned = 0;
        let mut colloc = 0;
        for s in &p.subdomains {
            let d = sample_rank_datasets(&p, s, &budget, &obs, seed).unwrap();
            for row in d.obs_points.rows() {
                prop_assert_eq!(p.owner(row), Some(s.index));
            }
            for row in d.collocation.rows() {
                prop_assert!(s.interior.contains(row));
            }
            prop_assert_eq!(d.ghosts.len(), s.ghosts.len());
            for set in &d.ghosts {
                prop_assert_eq!(set.points.nrows(), 17);
                let region = &s.ghosts[set.component].region;
                for row in set.points.rows() {
                    prop_assert!(region.contains(row));
                }
            }
            owned += d.obs_points.nrows();
            colloc += d.collocation.nrows();
        }
        prop_assert_eq!(owned, obs.len());
        prop_assert_eq!(colloc, 1000);
    }
}

#[test]
fn one_master_per_time_slab() {
    let c = Case {
        kind: RegimeKind::Unsteady2d,
        spatial: vec![(0.0, 1.0), (0.0, 1.0)],
        time: Some((0.0, 7.35)),
        grid: vec![2, 2],
        time_splits: 2,
        delta_frac: 0.2,
        delta_time_frac: 0.2,
    };
    let p = c.build();
    let masters = identify_masters(&p, &[0.75, 0.25]).unwrap();
    assert_eq!(masters.into_iter().collect::<Vec<_>>(), vec![2, 6]);
    assert!(identify_masters(&p, &[1.5, 0.25]).is_err());
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let c = Case {
        kind: RegimeKind::Steady2d,
        spatial: vec![(0.0, 1.0), (0.0, 1.0)],
        time: None,
        grid: vec![2, 2],
        time_splits: 1,
        delta_frac: 0.4,
        delta_time_frac: 0.0,
    };
    let p = c.build();
    let obs = ObservationSet {
        points: probe_points(&p, 400, 3),
        velocity: Array2::zeros((400, 2)),
        pressure: None,
    };
    let budget = Budget { n_obs: 400, n_pde: 100, n_ghost_per_interface: 10 };
    let a = sample_rank_datasets(&p, &p.subdomains[1], &budget, &obs, 5).unwrap();
    let b = sample_rank_datasets(&p, &p.subdomains[1], &budget, &obs, 5).unwrap();
    let other = sample_rank_datasets(&p, &p.subdomains[1], &budget, &obs, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.collocation, other.collocation);
    // a different rank with the same seed draws from its own stream
    let r2 = sample_rank_datasets(&p, &p.subdomains[2], &budget, &obs, 5).unwrap();
    let shifted = &r2.collocation - &ndarray::array![[0.5, -0.5]];
    assert_ne!(a.collocation, shifted);
}

#[test]
fn ghost_diagnostic_examples() {
    use dpinn_core::autodiff::Activation;
    use dpinn_core::decomposition::ghost_generalization_diagnostic;
    use dpinn_core::network::{init_params, ExpertConfig};

    let c = Case {
        kind: RegimeKind::Steady2d,
        spatial: vec![(0.0, 1.0), (0.0, 1.0)],
        time: None,
        grid: vec![2, 1],
        time_splits: 1,
        delta_frac: 0.2,
        delta_time_frac: 0.0,
    };
    let p = c.build();
    let obs = ObservationSet {
        points: probe_points(&p, 100, 1),
        velocity: Array2::zeros((100, 2)),
        pressure: None,
    };
    let budget = Budget { n_obs: 100, n_pde: 10, n_ghost_per_interface: 25 };
    let spec = &p.subdomains[0];
    let data = sample_rank_datasets(&p, spec, &budget, &obs, 2).unwrap();
    let config = ExpertConfig::new(2, 2, 8, Activation::Tanh, 3).unwrap();
    let a = init_params(&config, 1).unwrap();

    let same = ghost_generalization_diagnostic(&a, &[a.clone(), a.clone()], spec, &data, 4).unwrap();
    assert_eq!((same.mismatch_selected, same.mismatch_fresh, same.ratio), (0.0, 0.0, 1.0));

    let mut shifted = a.clone();
    *shifted.pressure_bias_mut() += 0.3;
    let d = ghost_generalization_diagnostic(&a, &[a.clone(), shifted], spec, &data, 4).unwrap();
    assert!((d.mismatch_selected - 0.09).abs() < 1e-12);
    assert!((d.mismatch_fresh - 0.09).abs() < 1e-12);

    let b = init_params(&config, 2).unwrap();
    let x = ghost_generalization_diagnostic(&a, &[a.clone(), b.clone()], spec, &data, 4).unwrap();
    let y = ghost_generalization_diagnostic(&a, &[a.clone(), b], spec, &data, 4).unwrap();
    assert_eq!(x, y);
    assert!(x.mismatch_selected > 0.0 && x.mismatch_fresh > 0.0);
    assert!((x.ratio - x.mismatch_fresh / x.mismatch_selected).abs() < 1e-15);
}
