//! Global reconstruction from per-rank experts and its error metrics.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{owners, DecompositionError, InterfaceKind, ObservationSet, Partition};
use crate::benchmarks::{BenchmarkError, ManufacturedSolution};
use crate::network::{ExpertParams, NetworkError};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error("reference norm is zero; relative error undefined")]
    ZeroReference,
    #[error("{what}: {left} vs {right}")]
    Mismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("reference has no pressure column")]
    NoPressure,
    #[error("expected {expected} experts, found {found}")]
    Experts { expected: usize, found: usize },
}

/// Anything that maps points to `(u…, p)` rows: a trained expert or an exact solution.
pub trait FieldModel {
    fn field(&self, points: ArrayView2<f64>) -> Result<Array2<f64>, EvaluationError>;
}

impl FieldModel for ExpertParams {
    fn field(&self, points: ArrayView2<f64>) -> Result<Array2<f64>, EvaluationError> {
        Ok(self.outputs(points)?)
    }
}

impl FieldModel for ManufacturedSolution {
    fn field(&self, points: ArrayView2<f64>) -> Result<Array2<f64>, EvaluationError> {
        Ok(self.values(points)?)
    }
}

/// Predictions at evaluation points, each made by the point's interior owner.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedField {
    pub points: Array2<f64>,
    pub velocity: Array2<f64>,
    pub pressure: Array1<f64>,
    pub owner: Vec<usize>,
}

impl StitchedField {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Number of points owned by each rank.
    pub fn provenance_counts(&self, ranks: usize) -> Vec<usize> {
        let mut counts = vec![0; ranks];
        for &o in &self.owner {
            counts[o] += 1;
        }
        counts
    }
}

fn check_experts<M>(experts: &[M], partition: &Partition) -> Result<(), EvaluationError> {
    if experts.len() != partition.len() {
        return Err(EvaluationError::Experts {
            expected: partition.len(),
            found: experts.len(),
        });
    }
    Ok(())
}

pub fn stitch<M: FieldModel>(
    experts: &[M],
    partition: &Partition,
    points: ArrayView2<f64>,
) -> Result<StitchedField, EvaluationError> {
    check_experts(experts, partition)?;
    let owner = owners(partition, points)?;
    let sd = partition.domain.regime.spatial_dim();
    let mut velocity = Array2::zeros((points.nrows(), sd));
    let mut pressure = Array1::zeros(points.nrows());
    for (r, expert) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..owner.len()).filter(|&i| owner[i] == r).collect();
        if rows.is_empty() {
            continue;
        }
        let out = expert.field(points.select(Axis(0), &rows).view())?;
        for (k, &i) in rows.iter().enumerate() {
            velocity.row_mut(i).assign(&out.slice(s![k, ..sd]));
            pressure[i] = out[[k, sd]];
        }
    }
    Ok(StitchedField {
        points: points.to_owned(),
        velocity,
        pressure,
        owner,
    })
}

/// `‖pred − ref‖₂ / ‖ref‖₂`.
pub fn relative_l2(pred: ArrayView1<f64>, reference: ArrayView1<f64>) -> Result<f64, EvaluationError> {
    if pred.len() != reference.len() {
        return Err(EvaluationError::Mismatch {
            what: "relative_l2 lengths",
            left: pred.len(),
            right: reference.len(),
        });
    }
    let (err, norm) = sq_norms(pred, reference);
    if norm == 0.0 {
        return Err(EvaluationError::ZeroReference);
    }
    Ok((err / norm).sqrt())
}

/// `(Σ (p − r)², Σ r²)`.
fn sq_norms(pred: ArrayView1<f64>, reference: ArrayView1<f64>) -> (f64, f64) {
    pred.iter().zip(reference.iter()).fold((0.0, 0.0), |(e, n), (&p, &r)| {
        (e + (p - r) * (p - r), n + r * r)
    })
}

/// Relative error of whole velocity vectors (all components pooled).
pub fn velocity_relative_l2(pred: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64, EvaluationError> {
    if pred.dim() != reference.dim() {
        return Err(EvaluationError::Mismatch {
            what: "velocity shapes",
            left: pred.nrows(),
            right: reference.nrows(),
        });
    }
    let p: Array1<f64> = pred.iter().copied().collect();
    let r: Array1<f64> = reference.iter().copied().collect();
    relative_l2(p.view(), r.view())
}

/// Rows grouped by time coordinate (one group when steady), in order of appearance.
pub fn snapshots(points: ArrayView2<f64>, steady: bool) -> Vec<(f64, Vec<usize>)> {
    if steady {
        return vec![(0.0, (0..points.nrows()).collect())];
    }
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, row) in points.rows().into_iter().enumerate() {
        let t = row[0];
        match out.iter_mut().find(|(s, _)| s.to_bits() == t.to_bits()) {
            Some((_, rows)) => rows.push(i),
            None => out.push((t, vec![i])),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPressure {
    pub pred: Array1<f64>,
    pub reference: Array1<f64>,
}

/// Pins master-owned predictions to the anchor, then removes each snapshot's spatial mean
/// from prediction and reference.
pub fn align_pressure<M: FieldModel>(
    stitched: &StitchedField,
    reference: ArrayView1<f64>,
    experts: &[M],
    partition: &Partition,
    masters: &BTreeSet<usize>,
    anchor: &[f64],
) -> Result<AlignedPressure, EvaluationError> {
    check_experts(experts, partition)?;
    if reference.len() != stitched.len() {
        return Err(EvaluationError::Mismatch {
            what: "reference pressure length",
            left: reference.len(),
            right: stitched.len(),
        });
    }
    let regime = partition.domain.regime;
    let steady = regime.is_steady();
    let sd = regime.spatial_dim();
    if anchor.len() != sd {
        return Err(EvaluationError::Mismatch {
            what: "anchor coordinates",
            left: anchor.len(),
            right: sd,
        });
    }
    let mut pred = stitched.pressure.clone();
    let groups = snapshots(stitched.points.view(), steady);
    // pin master-owned points, one anchor evaluation per (master, snapshot)
    for &m in masters {
        for (t, rows) in &groups {
            let owned: Vec<usize> = rows.iter().copied().filter(|&i| stitched.owner[i] == m).collect();
            if owned.is_empty() {
                continue;
            }
            let mut q = Vec::with_capacity(regime.input_dim());
            if !steady {
                q.push(*t);
            }
            q.extend_from_slice(anchor);
            let q = Array2::from_shape_vec((1, q.len()), q).expect("one row");
            let p_anchor = experts[m].field(q.view())?[[0, sd]];
            for i in owned {
                pred[i] -= p_anchor;
            }
        }
    }
    let mut reference = reference.to_owned();
    for (_, rows) in &groups {
        let n = rows.len() as f64;
        let mp = rows.iter().map(|&i| pred[i]).sum::<f64>() / n;
        let mr = rows.iter().map(|&i| reference[i]).sum::<f64>() / n;
        for &i in rows {
            pred[i] -= mp;
            reference[i] -= mr;
        }
    }
    Ok(AlignedPressure { pred, reference })
}

/// Relative errors per variable (`u`, `v`[, `w`], `vel`, `p`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub errors: BTreeMap<String, f64>,
}

const VELOCITY_NAMES: [&str; 3] = ["u", "v", "w"];

/// Stitches at the reference points and reports relative errors; pressure is aligned.
pub fn evaluate_reconstruction<M: FieldModel>(
    experts: &[M],
    partition: &Partition,
    masters: &BTreeSet<usize>,
    anchor: &[f64],
    reference: &ObservationSet,
) -> Result<(StitchedField, ErrorReport), EvaluationError> {
    let stitched = stitch(experts, partition, reference.points.view())?;
    let mut errors = BTreeMap::new();
    for c in 0..reference.velocity.ncols() {
        errors.insert(
            VELOCITY_NAMES[c].to_string(),
            relative_l2(stitched.velocity.column(c), reference.velocity.column(c))?,
        );
    }
    errors.insert(
        "vel".to_string(),
        velocity_relative_l2(stitched.velocity.view(), reference.velocity.view())?,
    );
    let p_ref = reference.pressure.as_ref().ok_or(EvaluationError::NoPressure)?;
    let aligned = align_pressure(&stitched, p_ref.view(), experts, partition, masters, anchor)?;
    errors.insert("p".to_string(), relative_l2(aligned.pred.view(), aligned.reference.view())?);
    Ok((stitched, ErrorReport { errors }))
}

/// Per-snapshot errors with the squared norms they were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotError {
    pub t: f64,
    pub errors: BTreeMap<String, f64>,
    /// `(Σ err², Σ ref²)` per variable.
    pub norms: BTreeMap<String, (f64, f64)>,
}

/// Relative errors of each snapshot. `pred` and `reference` are `(u…, p)` columns
/// aligned row by row with `points`.
pub fn error_over_time(
    points: ArrayView2<f64>,
    pred: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    steady: bool,
) -> Result<Vec<SnapshotError>, EvaluationError> {
    if pred.dim() != reference.dim() || pred.nrows() != points.nrows() {
        return Err(EvaluationError::Mismatch {
            what: "snapshot series sizes",
            left: pred.nrows(),
            right: reference.nrows(),
        });
    }
    let sd = pred.ncols() - 1;
    let mut out = Vec::new();
    for (t, rows) in snapshots(points, steady) {
        let p = pred.select(Axis(0), &rows);
        let r = reference.select(Axis(0), &rows);
        let mut errors = BTreeMap::new();
        let mut norms = BTreeMap::new();
        let mut vel = (0.0, 0.0);
        for c in 0..=sd {
            let name = if c == sd { "p" } else { VELOCITY_NAMES[c] };
            let (e, n) = sq_norms(p.column(c), r.column(c));
            if n == 0.0 {
                return Err(EvaluationError::ZeroReference);
            }
            if c < sd {
                vel.0 += e;
                vel.1 += n;
            }
            errors.insert(name.to_string(), (e / n).sqrt());
            norms.insert(name.to_string(), (e, n));
        }
        errors.insert("vel".to_string(), (vel.0 / vel.1).sqrt());
        norms.insert("vel".to_string(), vel);
        out.push(SnapshotError { t, errors, norms });
    }
    Ok(out)
}

/// All-points relative error of `variable` recovered from a snapshot series.
pub fn aggregate_series(series: &[SnapshotError], variable: &str) -> Option<f64> {
    let (e, n) = series.iter().try_fold((0.0, 0.0), |(e, n), s| {
        s.norms.get(variable).map(|&(se, sn)| (e + se, n + sn))
    })?;
    (n > 0.0).then(|| (e / n).sqrt())
}

/// Mean and sample standard deviation; the deviation is absent for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    (mean, std)
}

/// Largest disagreement across one interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceJump {
    pub lower: usize,
    pub upper: usize,
    pub kind: InterfaceKind,
    pub axis: usize,
    /// Max Euclidean norm of the velocity difference.
    pub max_du: f64,
    pub max_dp: f64,
}

/// Probes each interface at `probes` random face points, offset by `±eps_frac · extent`
/// along the interface normal, and compares the stitched field on both sides.
pub fn interface_jump<M: FieldModel>(
    experts: &[M],
    partition: &Partition,
    probes: usize,
    eps_frac: f64,
    seed: u64,
) -> Result<Vec<InterfaceJump>, EvaluationError> {
    check_experts(experts, partition)?;
    let bounds = partition.domain.bounds();
    let sd = partition.domain.regime.spatial_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in &partition.subdomains {
        for g in spec.ghosts.iter().filter(|g| g.upper) {
            let axis = g.axis;
            let eps = eps_frac * (bounds[axis].1 - bounds[axis].0);
            let mut face = spec.interior.clone();
            face.lo[axis] = spec.interior.hi[axis];
            face.hi[axis] = spec.interior.hi[axis];
            let pts = face.sample(probes, &mut rng);
            let mut below = pts.clone();
            below.column_mut(axis).mapv_inplace(|v| v - eps);
            let mut above = pts;
            above.column_mut(axis).mapv_inplace(|v| v + eps);
            let a = experts[spec.index].field(below.view())?;
            let b = experts[g.neighbor].field(above.view())?;
            let (mut du, mut dp) = (0.0f64, 0.0f64);
            for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
                let d: f64 = (0..sd).map(|c| (ra[c] - rb[c]).powi(2)).sum::<f64>().sqrt();
                du = du.max(d);
                dp = dp.max((ra[sd] - rb[sd]).abs());
            }
            out.push(InterfaceJump {
                lower: spec.index,
                upper: g.neighbor,
                kind: g.kind,
                axis,
                max_du: du,
                max_dp: dp,
            });
        }
    }
    Ok(out)
}
