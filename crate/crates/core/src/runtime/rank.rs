use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, AdamState};
use super::{RuntimeError, TrainConfig};
use crate::autodiff::{build_tape, Architecture, Tape, TapeMode};
use crate::decomposition::{InterfaceKind, RankDatasets, RankId};
use crate::network::ExpertParams;
use crate::physics::{FlowRegime, LossParts, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Slave,
}

/// Neighbor values at one ghost set, as last received.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostCache {
    pub velocity: Array2<f64>,
    pub pressure: Array1<f64>,
    pub normalized: bool,
    /// Exchange epoch the values came from; `None` before the first exchange.
    pub epoch: Option<usize>,
}

/// One local expert with everything it trains on.
#[derive(Clone, Debug)]
pub struct RankState {
    pub index: usize,
    pub rank: RankId,
    pub role: Role,
    pub regime: FlowRegime,
    pub params: ExpertParams,
    pub optimizer: AdamState,
    pub data: RankDatasets,
    pub cache: Vec<GhostCache>,
    /// Effective weights after the role adjustment.
    pub weights: LossWeights,
    shuffle_rng: ChaCha8Rng,
}

impl RankState {
    pub fn new(
        index: usize,
        rank: RankId,
        role: Role,
        regime: FlowRegime,
        params: ExpertParams,
        data: RankDatasets,
        weights: LossWeights,
        seed: u64,
    ) -> Self {
        let n_out = regime.output_dim();
        let cache = data
            .ghosts
            .iter()
            .map(|g| GhostCache {
                velocity: Array2::zeros((g.points.nrows(), n_out - 1)),
                pressure: Array1::zeros(g.points.nrows()),
                normalized: false,
                epoch: None,
            })
            .collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(((index as u64) << 8) | 4);
        Self {
            index,
            rank,
            role,
            regime,
            optimizer: AdamState::new(&params),
            params,
            data,
            cache,
            weights,
            shuffle_rng,
        }
    }

    fn ghost_rows(&self) -> usize {
        self.data.ghost_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum TapeKind {
    Fit,
    Pde,
}

/// Tapes of one rank, built on first use for each batch size and reused afterwards.
#[derive(Debug)]
pub struct TapeCache {
    arch: Architecture,
    regime: FlowRegime,
    tapes: HashMap<(TapeKind, usize), Tape>,
}

impl TapeCache {
    pub fn new(arch: Architecture, regime: FlowRegime) -> Self {
        Self {
            arch,
            regime,
            tapes: HashMap::new(),
        }
    }

    fn get(&mut self, kind: TapeKind, batch: usize) -> Result<&mut Tape, RuntimeError> {
        if !self.tapes.contains_key(&(kind, batch)) {
            let mode = match kind {
                TapeKind::Fit => TapeMode::FitLoss,
                TapeKind::Pde => TapeMode::PdeLoss(self.regime),
            };
            let tape = build_tape(&self.arch, batch, mode)?;
            self.tapes.insert((kind, batch), tape);
        }
        Ok(self.tapes.get_mut(&(kind, batch)).expect("inserted above"))
    }

    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }
}

/// Loss components (unweighted, full-set means) of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

fn batches(n: usize, batch: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Executes a fit tape on the selected rows and returns its outputs.
#[allow(clippy::too_many_arguments)]
fn run_fit(
    tapes: &mut TapeCache,
    params: &ExpertParams,
    points: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    coef: f64,
    grads: &mut [Array2<f64>],
) -> Result<Array2<f64>, RuntimeError> {
    let tape = tapes.get(TapeKind::Fit, points.nrows())?;
    tape.bind_params(params)?;
    tape.bind_points(points, &params.input_map)?;
    tape.bind_targets(targets, weights)?;
    tape.set_coefficient(coef)?;
    tape.execute();
    if coef != 0.0 && weights.iter().any(|&w| w != 0.0) {
        tape.backward_into(grads)?;
    }
    Ok(tape.outputs().to_owned())
}

/// Full-epoch loss parts, weighted total and accumulated gradient at the current parameters.
///
/// Each dataset is traversed in mini-batches of `batch_size`; every batch contributes
/// `B_b / N` of its mean so the accumulated sum is the full-set mean.
pub fn compute_gradients(
    state: &mut RankState,
    tapes: &mut TapeCache,
    batch_size: usize,
) -> Result<(LossParts, f64, Vec<Array2<f64>>), RuntimeError> {
    let sd = state.regime.spatial_dim();
    let n_out = sd + 1;
    let cw = state.weights.components(sd);
    if cw.len() != sd {
        return Err(RuntimeError::Config(format!(
            "{} velocity component weights for {sd} components",
            cw.len()
        )));
    }
    let w = state.weights.clone();
    let mut grads: Vec<Array2<f64>> = state.params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
    let mut parts = LossParts::default();

    // observations
    let n_obs = state.data.obs_points.nrows();
    if n_obs == 0 && w.obs > 0.0 {
        return Err(RuntimeError::Config(format!(
            "rank {} has no observations but a positive observation weight",
            state.index
        )));
    }
    for idx in batches(n_obs, batch_size, Some(&mut state.shuffle_rng)) {
        let b = idx.len();
        let pts = state.data.obs_points.select(Axis(0), &idx);
        let mut targets = Array2::zeros((b, n_out));
        targets
            .slice_mut(s![.., ..sd])
            .assign(&state.data.obs_velocity.select(Axis(0), &idx));
        let mut weights = Array2::zeros((b, n_out));
        for mut row in weights.rows_mut() {
            for c in 0..sd {
                row[c] = cw[c];
            }
        }
        let coef = w.obs * b as f64 / n_obs as f64;
        let out = run_fit(tapes, &state.params, pts.view(), targets.view(), weights.view(), coef, &mut grads)?;
        for (o, t) in out.rows().into_iter().zip(targets.rows()) {
            for c in 0..sd {
                parts.obs += cw[c] * (o[c] - t[c]) * (o[c] - t[c]) / n_obs as f64;
            }
        }
    }

    // collocation
    let n_pde = state.data.collocation.nrows();
    for idx in batches(n_pde, batch_size, Some(&mut state.shuffle_rng)) {
        let b = idx.len();
        let pts = state.data.collocation.select(Axis(0), &idx);
        let share = b as f64 / n_pde as f64;
        let tape = tapes.get(TapeKind::Pde, b)?;
        tape.bind_params(&state.params)?;
        tape.bind_points(pts.view(), &state.params.input_map)?;
        tape.set_coefficient(w.pde * share)?;
        tape.execute();
        parts.pde += tape.part().expect("pde tape has a loss") * share;
        if w.pde != 0.0 {
            tape.backward_into(&mut grads)?;
        }
    }

    // ghost layers
    let n_gh = state.ghost_rows();
    if n_gh > 0 {
        let d = state.regime.input_dim();
        let mut points = Array2::zeros((n_gh, d));
        let mut targets = Array2::zeros((n_gh, n_out));
        let mut kinds = Vec::with_capacity(n_gh);
        let mut row = 0;
        for (set, cache) in state.data.ghosts.iter().zip(&state.cache) {
            if cache.epoch.is_none() {
                return Err(RuntimeError::Config(format!(
                    "rank {} trains before receiving ghost values from rank {}",
                    state.index, set.neighbor
                )));
            }
            let n = set.points.nrows();
            points.slice_mut(s![row..row + n, ..]).assign(&set.points);
            targets.slice_mut(s![row..row + n, ..sd]).assign(&cache.velocity);
            targets.slice_mut(s![row..row + n, sd]).assign(&cache.pressure);
            kinds.extend(std::iter::repeat(set.kind).take(n));
            row += n;
        }
        let n_space = kinds.iter().filter(|&&k| k == InterfaceKind::Spatial).count();
        let n_time = n_gh - n_space;
        // per-row weights without the batch factor; the tape divides by B_b, coef restores it
        let mut weights = Array2::zeros((n_gh, n_out));
        for (i, kind) in kinds.iter().enumerate() {
            for c in 0..sd {
                weights[[i, c]] = w.ghost_u * cw[c] / n_gh as f64;
            }
            weights[[i, sd]] = match kind {
                InterfaceKind::Spatial => w.ghost_p_space / n_space as f64,
                InterfaceKind::Temporal => w.ghost_p_time / n_time as f64,
            };
        }
        for idx in batches(n_gh, batch_size, Some(&mut state.shuffle_rng)) {
            let pts = points.select(Axis(0), &idx);
            let tgt = targets.select(Axis(0), &idx);
            let wts = weights.select(Axis(0), &idx);
            let out = run_fit(tapes, &state.params, pts.view(), tgt.view(), wts.view(), idx.len() as f64, &mut grads)?;
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..sd {
                    let e = out[[r, c]] - tgt[[r, c]];
                    parts.ghost_u += cw[c] * e * e / n_gh as f64;
                }
                let e = out[[r, sd]] - tgt[[r, sd]];
                match kinds[i] {
                    InterfaceKind::Spatial => parts.ghost_p_space += e * e / n_space as f64,
                    InterfaceKind::Temporal => parts.ghost_p_time += e * e / n_time as f64,
                }
            }
        }
    }

    let total = crate::physics::compose_loss(&parts, &w)?;
    Ok((parts, total, grads))
}

/// One epoch: full pass with gradient accumulation, then a single optimizer step.
pub fn train_epoch(
    state: &mut RankState,
    tapes: &mut TapeCache,
    epoch: usize,
    config: &TrainConfig,
) -> Result<EpochReport, RuntimeError> {
    let (parts, total, mut grads) = compute_gradients(state, tapes, config.batch_size)?;
    if !parts.is_finite() || !total.is_finite() {
        return Err(RuntimeError::NonFiniteLoss {
            rank: state.index,
            epoch,
            parts,
        });
    }
    let lr = config.lr_at(epoch);
    optimizer_step(&mut state.params, &mut grads, &mut state.optimizer, lr, config.clip_norm)?;
    Ok(EpochReport {
        epoch,
        parts,
        total,
        lr,
    })
}
