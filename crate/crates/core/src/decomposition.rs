//! Space-time partitioning, ghost layers and per-rank datasets.
//!
//! Boxes are stored in the regime's input order: `(t, x, y[, z])`, or `(x, y)` when
//! steady. Ranks are numbered `index = m · K + k` with `k` the flattened spatial cell
//! (first axis slowest) and `m` the time slab, all zero-based.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ExpertParams, NetworkError};
use crate::physics::FlowRegime;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("point {0:?} lies outside the global domain")]
    Outside(Vec<f64>),
    #[error("no observations fall inside the interior of rank {0}")]
    ReferenceGap(RankId),
    #[error("reference file: {0}")]
    Reference(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<csv::Error> for DecompositionError {
    fn from(e: csv::Error) -> Self {
        DecompositionError::Reference(e.to_string())
    }
}

/// Axis-aligned box in input-coordinate order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Closed-box containment.
    pub fn contains(&self, p: ArrayView1<f64>) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }

    /// Closed containment of `other`.
    pub fn encloses(&self, other: &Region) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Volume of the overlap with `other` (0 when they only touch).
    pub fn overlap_volume(&self, other: &Region) -> f64 {
        (0..self.dim())
            .map(|i| (self.hi[i].min(other.hi[i]) - self.lo[i].max(other.lo[i])).max(0.0))
            .product()
    }

    /// `n` points uniform in `[lo, hi)` per axis.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.hi[j] > self.lo[j] {
                    rng.gen_range(self.lo[j]..self.hi[j])
                } else {
                    self.lo[j]
                };
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDomain {
    /// Per spatial axis `[min, max]`.
    pub spatial: Vec<(f64, f64)>,
    /// `[t0, t1]`, absent for steady regimes.
    pub time: Option<(f64, f64)>,
    pub regime: FlowRegime,
}

impl GlobalDomain {
    pub fn new(
        spatial: Vec<(f64, f64)>,
        time: Option<(f64, f64)>,
        regime: FlowRegime,
    ) -> Result<Self, DecompositionError> {
        if spatial.len() != regime.spatial_dim() {
            return Err(DecompositionError::Domain(format!(
                "{} spatial axes for a {}-D regime",
                spatial.len(),
                regime.spatial_dim()
            )));
        }
        if time.is_some() == regime.is_steady() {
            return Err(DecompositionError::Domain(
                "a time interval is required exactly for unsteady regimes".into(),
            ));
        }
        for &(lo, hi) in spatial.iter().chain(time.iter()) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DecompositionError::Domain(format!("empty interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { spatial, time, regime })
    }

    /// Per input column `[min, max]`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.time.iter().chain(&self.spatial).copied().collect()
    }

    pub fn region(&self) -> Region {
        let (lo, hi) = self.bounds().into_iter().unzip();
        Region { lo, hi }
    }

    pub fn contains(&self, p: ArrayView1<f64>) -> bool {
        p.len() == self.regime.input_dim() && self.region().contains(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankId {
    /// Flattened spatial cell.
    pub k: usize,
    /// Time slab.
    pub m: usize,
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(k={}, m={})", self.k, self.m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceKind {
    Spatial,
    Temporal,
}

/// One face-adjacent piece of a rank's ghost layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostComponent {
    pub region: Region,
    /// Flat index of the neighbor whose interior holds `region`.
    pub neighbor: usize,
    pub kind: InterfaceKind,
    /// Input column that was extended.
    pub axis: usize,
    /// Extension toward larger coordinates.
    pub upper: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub index: usize,
    pub rank: RankId,
    /// Cell index per spatial axis.
    pub cell: Vec<usize>,
    pub interior: Region,
    pub extended: Region,
    pub ghosts: Vec<GhostComponent>,
}

/// Ranks of a `K × M` split and the ownership rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub domain: GlobalDomain,
    pub spatial_grid: Vec<usize>,
    pub time_splits: usize,
    pub delta_space: f64,
    pub delta_time: f64,
    pub subdomains: Vec<SubdomainSpec>,
}

/// Cell `i` of `n` equal cells of `[lo, hi]` is `[edge(i), edge(i+1))`.
fn edge(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if i == n {
        hi
    } else {
        lo + (hi - lo) * i as f64 / n as f64
    }
}

/// Half-open cell lookup, closed at the global upper end.
fn axis_cell(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(lo <= v && v <= hi) {
        return None;
    }
    let mut i = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
    i = i.min(n - 1);
    while i > 0 && v < edge(lo, hi, n, i) {
        i -= 1;
    }
    while i + 1 < n && v >= edge(lo, hi, n, i + 1) {
        i += 1;
    }
    Some(i)
}

impl Partition {
    pub fn len(&self) -> usize {
        self.subdomains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subdomains.is_empty()
    }

    pub fn spatial_count(&self) -> usize {
        self.spatial_grid.iter().product()
    }

    pub fn flat_index(&self, rank: RankId) -> usize {
        rank.m * self.spatial_count() + rank.k
    }

    fn spatial_cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut k = 0;
        for (a, &(lo, hi)) in self.domain.spatial.iter().enumerate() {
            let n = self.spatial_grid[a];
            k = k * n + axis_cell(x[a], lo, hi, n)?;
        }
        Some(k)
    }

    /// Flat index of the rank whose interior owns `p` (input order).
    pub fn owner(&self, p: ArrayView1<f64>) -> Option<usize> {
        if p.len() != self.domain.regime.input_dim() {
            return None;
        }
        let offset = usize::from(!self.domain.regime.is_steady());
        let x: Vec<f64> = p.iter().skip(offset).copied().collect();
        let k = self.spatial_cell_of(&x)?;
        let m = match self.domain.time {
            Some((t0, t1)) => axis_cell(p[0], t0, t1, self.time_splits)?,
            None => 0,
        };
        Some(m * self.spatial_count() + k)
    }

    /// A short label such as `2x2` or `2x2x2`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = self.spatial_grid.iter().map(|n| n.to_string()).collect();
        if self.time_splits > 1 {
            parts.push(self.time_splits.to_string());
        }
        parts.join("x")
    }
}

/// Equal `K × M` split with ghost layers of thickness `delta_space` / `delta_time`.
pub fn partition(
    domain: &GlobalDomain,
    spatial_grid: &[usize],
    time_splits: usize,
    delta_space: f64,
    delta_time: f64,
) -> Result<Partition, DecompositionError> {
    let sd = domain.regime.spatial_dim();
    if spatial_grid.len() != sd {
        return Err(DecompositionError::Partition(format!(
            "spatial grid {spatial_grid:?} does not match {sd} spatial axes"
        )));
    }
    if spatial_grid.iter().any(|&n| n == 0) || time_splits == 0 {
        return Err(DecompositionError::Partition("split counts must be at least 1".into()));
    }
    if domain.time.is_none() && time_splits != 1 {
        return Err(DecompositionError::Partition(
            "a steady domain cannot be split in time".into(),
        ));
    }
    if !(delta_space >= 0.0 && delta_time >= 0.0) {
        return Err(DecompositionError::Partition("ghost thickness must be non-negative".into()));
    }
    for (a, &(lo, hi)) in domain.spatial.iter().enumerate() {
        let n = spatial_grid[a];
        let extent = (hi - lo) / n as f64;
        if n > 1 && delta_space >= extent {
            return Err(DecompositionError::Partition(format!(
                "delta_space {delta_space} is not smaller than the subdomain extent {extent} on axis {a}"
            )));
        }
    }
    if let Some((t0, t1)) = domain.time {
        let extent = (t1 - t0) / time_splits as f64;
        if time_splits > 1 && delta_time >= extent {
            return Err(DecompositionError::Partition(format!(
                "delta_time {delta_time} is not smaller than the time-slab length {extent}"
            )));
        }
    }

    let offset = usize::from(domain.time.is_some());
    let k_count: usize = spatial_grid.iter().product();
    let bounds = domain.bounds();
    // split count per input column
    let splits: Vec<usize> = domain
        .time
        .map(|_| time_splits)
        .into_iter()
        .chain(spatial_grid.iter().copied())
        .collect();

    let mut subdomains = Vec::with_capacity(k_count * time_splits);
    for m in 0..time_splits {
        for k in 0..k_count {
            let mut cell = vec![0; sd];
            let mut rem = k;
            for a in (0..sd).rev() {
                cell[a] = rem % spatial_grid[a];
                rem /= spatial_grid[a];
            }
            let pos: Vec<usize> = domain
                .time
                .map(|_| m)
                .into_iter()
                .chain(cell.iter().copied())
                .collect();
            let region_of = |pos: &[usize]| {
                let (lo, hi) = (0..bounds.len())
                    .map(|j| {
                        let (blo, bhi) = bounds[j];
                        (edge(blo, bhi, splits[j], pos[j]), edge(blo, bhi, splits[j], pos[j] + 1))
                    })
                    .unzip();
                Region { lo, hi }
            };
            let interior = region_of(&pos);
            let mut extended = interior.clone();
            let mut ghosts = Vec::new();
            for j in 0..bounds.len() {
                let temporal = offset == 1 && j == 0;
                let delta = if temporal { delta_time } else { delta_space };
                let (blo, bhi) = bounds[j];
                extended.lo[j] = (interior.lo[j] - delta).max(blo);
                extended.hi[j] = (interior.hi[j] + delta).min(bhi);
                for upper in [false, true] {
                    let neighbor_pos = if upper {
                        if pos[j] + 1 >= splits[j] {
                            continue;
                        }
                        pos[j] + 1
                    } else {
                        if pos[j] == 0 {
                            continue;
                        }
                        pos[j] - 1
                    };
                    let mut npos = pos.clone();
                    npos[j] = neighbor_pos;
                    let neighbor_region = region_of(&npos);
                    let mut region = interior.clone();
                    if upper {
                        region.lo[j] = interior.hi[j];
                        region.hi[j] = (interior.hi[j] + delta).min(neighbor_region.hi[j]);
                    } else {
                        region.lo[j] = (interior.lo[j] - delta).max(neighbor_region.lo[j]);
                        region.hi[j] = interior.lo[j];
                    }
                    let (nk, nm) = if temporal {
                        (k, neighbor_pos)
                    } else {
                        let mut ncell = cell.clone();
                        ncell[j - offset] = neighbor_pos;
                        let nk = ncell
                            .iter()
                            .zip(spatial_grid)
                            .fold(0, |acc, (&c, &n)| acc * n + c);
                        (nk, m)
                    };
                    ghosts.push(GhostComponent {
                        region,
                        neighbor: nm * k_count + nk,
                        kind: if temporal {
                            InterfaceKind::Temporal
                        } else {
                            InterfaceKind::Spatial
                        },
                        axis: j,
                        upper,
                    });
                }
            }
            subdomains.push(SubdomainSpec {
                index: m * k_count + k,
                rank: RankId { k, m },
                cell,
                interior,
                extended,
                ghosts,
            });
        }
    }
    Ok(Partition {
        domain: domain.clone(),
        spatial_grid: spatial_grid.to_vec(),
        time_splits,
        delta_space,
        delta_time,
        subdomains,
    })
}

/// Flat indices of the ranks whose spatial interior owns `anchor`, one per time slab.
pub fn identify_masters(
    partition: &Partition,
    anchor: &[f64],
) -> Result<BTreeSet<usize>, DecompositionError> {
    if anchor.len() != partition.domain.regime.spatial_dim() {
        return Err(DecompositionError::Outside(anchor.to_vec()));
    }
    let k = partition
        .spatial_cell_of(anchor)
        .ok_or_else(|| DecompositionError::Outside(anchor.to_vec()))?;
    Ok((0..partition.time_splits)
        .map(|m| m * partition.spatial_count() + k)
        .collect())
}

/// Global sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub n_obs: usize,
    pub n_pde: usize,
    pub n_ghost_per_interface: usize,
}

/// Velocity observations (and optionally pressure) at points in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub points: Array2<f64>,
    pub velocity: Array2<f64>,
    pub pressure: Option<Array1<f64>>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> ObservationSet {
        ObservationSet {
            points: self.points.select(Axis(0), rows),
            velocity: self.velocity.select(Axis(0), rows),
            pressure: self.pressure.as_ref().map(|p| p.select(Axis(0), rows)),
        }
    }

    /// Distinct time coordinates in order of first appearance (`[None]` when steady).
    pub fn snapshot_rows(&self, steady: bool) -> Vec<(Option<f64>, Vec<usize>)> {
        if steady {
            return vec![(None, (0..self.len()).collect())];
        }
        let mut out: Vec<(Option<f64>, Vec<usize>)> = Vec::new();
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let t = row[0];
            match out.iter_mut().find(|(s, _)| *s == Some(t)) {
                Some((_, rows)) => rows.push(i),
                None => out.push((Some(t), vec![i])),
            }
        }
        out
    }
}

/// One ghost component's fixed training points.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostSet {
    /// Index into `SubdomainSpec::ghosts`.
    pub component: usize,
    pub neighbor: usize,
    pub kind: InterfaceKind,
    pub points: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankDatasets {
    pub obs_points: Array2<f64>,
    pub obs_velocity: Array2<f64>,
    pub collocation: Array2<f64>,
    pub ghosts: Vec<GhostSet>,
}

impl RankDatasets {
    pub fn ghost_count(&self) -> usize {
        self.ghosts.iter().map(|g| g.points.nrows()).sum()
    }
}

fn rank_rng(seed: u64, rank: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rank as u64) << 8) | purpose);
    rng
}

/// Share of `total` for rank `index` of `count`; shares sum to `total`.
pub fn budget_share(total: usize, index: usize, count: usize) -> usize {
    total / count + usize::from(index < total % count)
}

/// Datasets of one rank: owned observations, its share of collocation points, and
/// `n_ghost_per_interface` points in each ghost component.
pub fn sample_rank_datasets(
    partition: &Partition,
    spec: &SubdomainSpec,
    budget: &Budget,
    observations: &ObservationSet,
    seed: u64,
) -> Result<RankDatasets, DecompositionError> {
    let owned: Vec<usize> = observations
        .points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, p)| partition.owner(*p) == Some(spec.index))
        .map(|(i, _)| i)
        .collect();
    if budget.n_obs > 0 && owned.is_empty() {
        return Err(DecompositionError::ReferenceGap(spec.rank));
    }
    let obs = observations.select(&owned);

    let n_pde = budget_share(budget.n_pde, spec.index, partition.len());
    let collocation = spec.interior.sample(n_pde, &mut rank_rng(seed, spec.index, 1));

    let mut ghost_rng = rank_rng(seed, spec.index, 2);
    let ghosts = spec
        .ghosts
        .iter()
        .enumerate()
        .map(|(c, g)| GhostSet {
            component: c,
            neighbor: g.neighbor,
            kind: g.kind,
            points: g.region.sample(budget.n_ghost_per_interface, &mut ghost_rng),
        })
        .collect();
    Ok(RankDatasets {
        obs_points: obs.points,
        obs_velocity: obs.velocity,
        collocation,
        ghosts,
    })
}

/// Mean squared `(u, p)` mismatch against neighbors on the training ghost points and on a
/// fresh set of the same size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostDiagnostic {
    pub mismatch_selected: f64,
    pub mismatch_fresh: f64,
    /// `mismatch_fresh / mismatch_selected`; infinite when only the fresh set disagrees.
    pub ratio: f64,
}

fn mean_sq_mismatch(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    total / a.nrows() as f64
}

pub fn ghost_generalization_diagnostic(
    expert: &ExpertParams,
    neighbors: &[ExpertParams],
    spec: &SubdomainSpec,
    datasets: &RankDatasets,
    seed: u64,
) -> Result<GhostDiagnostic, DecompositionError> {
    let mut rng = rank_rng(seed, spec.index, 3);
    let (mut sel, mut fresh, mut count) = (0.0, 0.0, 0usize);
    for set in &datasets.ghosts {
        let nbr = &neighbors[set.neighbor];
        let n = set.points.nrows();
        if n == 0 {
            continue;
        }
        let own = expert.outputs(set.points.view())?;
        let other = nbr.outputs(set.points.view())?;
        sel += mean_sq_mismatch(&own, &other) * n as f64;
        let pts = spec.ghosts[set.component].region.sample(n, &mut rng);
        let own = expert.outputs(pts.view())?;
        let other = nbr.outputs(pts.view())?;
        fresh += mean_sq_mismatch(&own, &other) * n as f64;
        count += n;
    }
    if count > 0 {
        sel /= count as f64;
        fresh /= count as f64;
    }
    let ratio = if sel > 0.0 {
        fresh / sel
    } else if fresh > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(GhostDiagnostic {
        mismatch_selected: sel,
        mismatch_fresh: fresh,
        ratio,
    })
}

/// Reads `t,x,y[,z],u,v[,w][,p]`. The `t` column is dropped for steady regimes.
pub fn read_reference_csv(path: &Path, regime: FlowRegime) -> Result<ObservationSet, DecompositionError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let sd = regime.spatial_dim();
    let coords = &["t", "x", "y", "z"][..=sd];
    let vels = &["u", "v", "w"][..sd];
    let col = |name: &str| -> Result<usize, DecompositionError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DecompositionError::Reference(format!("missing column `{name}`")))
    };
    let coord_cols = coords.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let vel_cols = vels.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let p_col = col("p").ok();
    let skip_t = usize::from(regime.is_steady());

    let (mut pts, mut vel, mut pres) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| -> Result<f64, DecompositionError> {
            record
                .get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    DecompositionError::Reference(format!("bad value in row {}, column {}", line + 2, c + 1))
                })
        };
        for &c in &coord_cols[skip_t..] {
            pts.push(field(c)?);
        }
        for &c in &vel_cols {
            vel.push(field(c)?);
        }
        if let Some(c) = p_col {
            pres.push(field(c)?);
        }
        rows += 1;
    }
    let dim = regime.input_dim();
    Ok(ObservationSet {
        points: Array2::from_shape_vec((rows, dim), pts).expect("row-major coordinates"),
        velocity: Array2::from_shape_vec((rows, sd), vel).expect("row-major velocities"),
        pressure: p_col.map(|_| Array1::from(pres)),
    })
}

/// Rows of `points` with their owners.
pub fn owners(partition: &Partition, points: ArrayView2<f64>) -> Result<Vec<usize>, DecompositionError> {
    points
        .rows()
        .into_iter()
        .map(|p| partition.owner(p).ok_or_else(|| DecompositionError::Outside(p.to_vec())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::RegimeKind;
    use ndarray::array;

    fn cavity() -> GlobalDomain {
        let regime = FlowRegime::new(RegimeKind::Steady2d, 100.0).unwrap();
        GlobalDomain::new(vec![(0.0, 1.0), (0.0, 1.0)], None, regime).unwrap()
    }

    fn unsteady(k: [usize; 2], m: usize) -> Partition {
        let regime = FlowRegime::new(RegimeKind::Unsteady2d, 100.0).unwrap();
        let d = GlobalDomain::new(vec![(0.0, 1.0), (0.0, 1.0)], Some((0.0, 7.35)), regime).unwrap();
        partition(&d, &k, m, 0.1, 1.0).unwrap()
    }

    #[test]
    fn cavity_two_by_two_ghosts() {
        let p = partition(&cavity(), &[2, 2], 1, 0.2, 0.0).unwrap();
        let first = &p.subdomains[0];
        assert_eq!(first.interior, Region { lo: vec![0.0, 0.0], hi: vec![0.5, 0.5] });
        assert_eq!(first.ghosts.len(), 2);
        let regions: Vec<&Region> = first.ghosts.iter().map(|g| &g.region).collect();
        assert!(regions.contains(&&Region { lo: vec![0.5, 0.0], hi: vec![0.7, 0.5] }));
        assert!(regions.contains(&&Region { lo: vec![0.0, 0.5], hi: vec![0.5, 0.7] }));
        assert!(first.ghosts.iter().all(|g| g.kind == InterfaceKind::Spatial));
        // no corner component: nothing reaches into the diagonal cell
        let corner = &p.subdomains[3].interior;
        assert!(first.ghosts.iter().all(|g| g.region.overlap_volume(corner) == 0.0));
    }

    #[test]
    fn single_domain_has_no_ghosts() {
        let p = partition(&cavity(), &[1, 1], 1, 0.2, 0.0).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.subdomains[0].ghosts.is_empty());
    }

    #[test]
    fn temporal_ghost_arithmetic() {
        let p = unsteady([1, 1], 2);
        let g: Vec<_> = p.subdomains[0]
            .ghosts
            .iter()
            .filter(|g| g.kind == InterfaceKind::Temporal)
            .collect();
        assert_eq!(g.len(), 1);
        assert!((g[0].region.lo[0] - 3.675).abs() < 1e-12);
        assert!((g[0].region.hi[0] - 4.675).abs() < 1e-12);
        assert_eq!(g[0].neighbor, 1);
        assert!(p.subdomains[1].interior.encloses(&g[0].region));
    }

    #[test]
    fn oversized_delta_is_rejected() {
        assert!(partition(&cavity(), &[2, 2], 1, 0.5, 0.0).is_err());
        assert!(partition(&cavity(), &[2, 2], 1, -0.1, 0.0).is_err());
        assert!(partition(&cavity(), &[1, 1], 1, 0.9, 0.0).is_ok());
    }

    #[test]
    fn masters() {
        let p = partition(&cavity(), &[2, 2], 1, 0.2, 0.0).unwrap();
        assert_eq!(identify_masters(&p, &[0.25, 0.25]).unwrap(), BTreeSet::from([0]));
        assert!(identify_masters(&p, &[1.5, 0.25]).is_err());
        // on the split line the upper cell owns the anchor
        assert_eq!(identify_masters(&p, &[0.5, 0.25]).unwrap(), BTreeSet::from([2]));
        let single = partition(&cavity(), &[1, 1], 1, 0.2, 0.0).unwrap();
        assert_eq!(identify_masters(&single, &[0.9, 0.9]).unwrap(), BTreeSet::from([0]));
        let u = unsteady([2, 2], 2);
        let m = identify_masters(&u, &[0.25, 0.25]).unwrap();
        assert_eq!(m, BTreeSet::from([0, 4]));
        assert_eq!(m.len(), u.time_splits);
    }

    #[test]
    fn half_open_ownership() {
        let p = partition(&cavity(), &[2, 2], 1, 0.1, 0.0).unwrap();
        assert_eq!(p.owner(array![0.5, 0.2].view()), Some(2));
        assert_eq!(p.owner(array![1.0, 1.0].view()), Some(3));
        assert_eq!(p.owner(array![0.0, 0.0].view()), Some(0));
        assert_eq!(p.owner(array![1.0 + 1e-12, 0.0].view()), None);
    }

    fn grid_observations(n: usize) -> ObservationSet {
        let mut pts = Array2::zeros((n * n, 2));
        for i in 0..n {
            for j in 0..n {
                pts[[i * n + j, 0]] = (i as f64 + 0.5) / n as f64;
                pts[[i * n + j, 1]] = (j as f64 + 0.5) / n as f64;
            }
        }
        let velocity = pts.clone();
        ObservationSet { points: pts, velocity, pressure: None }
    }

    #[test]
    fn cavity_dataset_sizes() {
        let obs = grid_observations(10);
        let budget = Budget { n_obs: 100, n_pde: 5000, n_ghost_per_interface: 100 };
        let single = partition(&cavity(), &[1, 1], 1, 0.2, 0.0).unwrap();
        let d = sample_rank_datasets(&single, &single.subdomains[0], &budget, &obs, 0).unwrap();
        assert_eq!((d.obs_points.nrows(), d.collocation.nrows(), d.ghost_count()), (100, 5000, 0));

        let four = partition(&cavity(), &[2, 2], 1, 0.2, 0.0).unwrap();
        for spec in &four.subdomains {
            let d = sample_rank_datasets(&four, spec, &budget, &obs, 0).unwrap();
            assert_eq!(d.obs_points.nrows(), 25);
            assert_eq!(d.collocation.nrows(), 1250);
            assert!(d.ghosts.iter().all(|g| g.points.nrows() == 100));
            let again = sample_rank_datasets(&four, spec, &budget, &obs, 0).unwrap();
            assert_eq!(d, again);
        }
    }

    #[test]
    fn reference_gap_names_the_rank() {
        let obs = grid_observations(10).select(&[0]);
        let budget = Budget { n_obs: 1, n_pde: 10, n_ghost_per_interface: 1 };
        let four = partition(&cavity(), &[2, 2], 1, 0.2, 0.0).unwrap();
        let err = sample_rank_datasets(&four, &four.subdomains[3], &budget, &obs, 0).unwrap_err();
        assert!(matches!(err, DecompositionError::ReferenceGap(RankId { k: 3, m: 0 })));
    }
}
