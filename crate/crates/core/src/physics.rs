//! Incompressible Navier-Stokes residuals and the terms of the local objective.
//!
//! Everything is nondimensional. Inputs are ordered `(t, x, y[, z])` for unsteady
//! regimes and `(x, y)` for the steady one; outputs are `(u, v[, w], p)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::tape::JetNodes;
use crate::autodiff::{AutodiffError, GraphBuilder, Jet, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("empty batch for {0}")]
    EmptyBatch(&'static str),
    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("loss weight `{0}` is negative or not finite")]
    BadWeight(&'static str),
    #[error("Reynolds number must be positive, got {0}")]
    Reynolds(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Steady2d,
    Unsteady2d,
    Unsteady3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRegime {
    pub kind: RegimeKind,
    pub reynolds: f64,
}

impl FlowRegime {
    pub fn new(kind: RegimeKind, reynolds: f64) -> Result<Self, PhysicsError> {
        if !(reynolds.is_finite() && reynolds > 0.0) {
            return Err(PhysicsError::Reynolds(reynolds));
        }
        Ok(Self { kind, reynolds })
    }

    pub fn spatial_dim(&self) -> usize {
        match self.kind {
            RegimeKind::Steady2d | RegimeKind::Unsteady2d => 2,
            RegimeKind::Unsteady3d => 3,
        }
    }

    pub fn is_steady(&self) -> bool {
        self.kind == RegimeKind::Steady2d
    }

    pub fn input_dim(&self) -> usize {
        self.spatial_dim() + usize::from(!self.is_steady())
    }

    pub fn output_dim(&self) -> usize {
        self.spatial_dim() + 1
    }

    /// Input column holding `t`, if any.
    pub fn time_index(&self) -> Option<usize> {
        (!self.is_steady()).then_some(0)
    }

    /// Input column of spatial axis `axis`.
    pub fn space_index(&self, axis: usize) -> usize {
        axis + usize::from(!self.is_steady())
    }

    /// Momentum components plus continuity.
    pub fn residual_count(&self) -> usize {
        self.spatial_dim() + 1
    }
}

/// Per-point residuals: momentum components, then continuity (last column).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBatch {
    pub values: Array2<f64>,
}

impl ResidualBatch {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn continuity(&self) -> ArrayView1<'_, f64> {
        self.values.column(self.values.ncols() - 1)
    }
}

/// Momentum and continuity residuals for a batch of jets.
pub fn ns_residuals(jets: &[Jet], regime: FlowRegime) -> Result<ResidualBatch, PhysicsError> {
    let sd = regime.spatial_dim();
    let mut out = Array2::zeros((jets.len(), sd + 1));
    let inv_re = 1.0 / regime.reynolds;
    for (i, jet) in jets.iter().enumerate() {
        if jet.n_inputs() != regime.input_dim() || jet.n_outputs() != regime.output_dim() {
            return Err(PhysicsError::Mismatch {
                what: "jet dimensions for regime",
                expected: regime.input_dim(),
                found: jet.n_inputs(),
            });
        }
        for c in 0..sd {
            let mut r = regime.time_index().map_or(0.0, |t| jet.grad[[c, t]]);
            for a in 0..sd {
                r += jet.value[a] * jet.grad[[c, regime.space_index(a)]];
            }
            r += jet.grad[[sd, regime.space_index(c)]];
            let mut lap = 0.0;
            for a in 0..sd {
                lap += jet.lap[[c, regime.space_index(a)]];
            }
            out[[i, c]] = r - inv_re * lap;
        }
        out[[i, sd]] = (0..sd).map(|a| jet.grad[[a, regime.space_index(a)]]).sum();
    }
    Ok(ResidualBatch { values: out })
}

/// Appends the mean squared residual norm to a graph holding a jet.
pub(crate) fn append_pde_loss(
    b: &mut GraphBuilder,
    jet: &JetNodes,
    regime: FlowRegime,
) -> Result<NodeId, AutodiffError> {
    let sd = regime.spatial_dim();
    let inv_re = 1.0 / regime.reynolds;
    let vel = (0..sd)
        .map(|a| b.column(jet.value, a))
        .collect::<Result<Vec<_>, _>>()?;
    let mut squares = Vec::with_capacity(sd + 1);
    for c in 0..sd {
        let mut terms = Vec::new();
        if let Some(t) = regime.time_index() {
            terms.push((b.column(jet.grad[t], c)?, 1.0));
        }
        for (a, &ua) in vel.iter().enumerate() {
            let d = b.column(jet.grad[regime.space_index(a)], c)?;
            terms.push((b.mul(ua, d)?, 1.0));
        }
        terms.push((b.column(jet.grad[regime.space_index(c)], sd)?, 1.0));
        for a in 0..sd {
            if let Some(lap) = jet.lap[regime.space_index(a)] {
                terms.push((b.column(lap, c)?, -inv_re));
            }
        }
        let r = b.weighted_sum(&terms)?;
        let sq = b.square(r)?;
        squares.push((b.mean(sq)?, 1.0));
    }
    let div_terms = (0..sd)
        .map(|a| Ok((b.column(jet.grad[regime.space_index(a)], a)?, 1.0)))
        .collect::<Result<Vec<_>, AutodiffError>>()?;
    let div = b.weighted_sum(&div_terms)?;
    let sq = b.square(div)?;
    squares.push((b.mean(sq)?, 1.0));
    b.weighted_sum(&squares)
}

fn weighted_mse(
    what: &'static str,
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    component_weights: &[f64],
) -> Result<f64, PhysicsError> {
    if pred.nrows() == 0 {
        return Err(PhysicsError::EmptyBatch(what));
    }
    if pred.dim() != target.dim() {
        return Err(PhysicsError::Mismatch {
            what,
            expected: pred.nrows(),
            found: target.nrows(),
        });
    }
    if component_weights.len() != pred.ncols() {
        return Err(PhysicsError::Mismatch {
            what: "component weights",
            expected: pred.ncols(),
            found: component_weights.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        for ((a, b), w) in p.iter().zip(t.iter()).zip(component_weights) {
            total += w * (a - b) * (a - b);
        }
    }
    Ok(total / pred.nrows() as f64)
}

/// Mean over points of the component-weighted squared velocity error.
pub fn loss_obs(
    pred_vel: ArrayView2<f64>,
    obs_vel: ArrayView2<f64>,
    component_weights: &[f64],
) -> Result<f64, PhysicsError> {
    weighted_mse("observation loss", pred_vel, obs_vel, component_weights)
}

/// Mean over points of the squared residual vector norm.
pub fn loss_pde(residuals: &ResidualBatch) -> Result<f64, PhysicsError> {
    if residuals.is_empty() {
        return Err(PhysicsError::EmptyBatch("PDE loss"));
    }
    let total: f64 = residuals.values.iter().map(|r| r * r).sum();
    Ok(total / residuals.len() as f64)
}

/// Velocity consistency against cached neighbor values on the ghost set.
pub fn loss_ghost_u(
    pred_vel: ArrayView2<f64>,
    cached_nbr_vel: ArrayView2<f64>,
    component_weights: &[f64],
) -> Result<f64, PhysicsError> {
    weighted_mse("ghost velocity loss", pred_vel, cached_nbr_vel, component_weights)
}

/// Mean squared pressure mismatch over one interface class. Empty sets give 0.
pub fn loss_ghost_p(pred_p: &[f64], cached_nbr_p: &[f64]) -> Result<f64, PhysicsError> {
    if pred_p.len() != cached_nbr_p.len() {
        return Err(PhysicsError::Mismatch {
            what: "ghost pressure batch",
            expected: pred_p.len(),
            found: cached_nbr_p.len(),
        });
    }
    if pred_p.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred_p
        .iter()
        .zip(cached_nbr_p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pred_p.len() as f64)
}

/// Coefficients of the local objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub obs: f64,
    pub pde: f64,
    pub ghost_u: f64,
    pub ghost_p_space: f64,
    pub ghost_p_time: f64,
    /// Per-velocity-component weights inside the observation and ghost-velocity terms.
    #[serde(default)]
    pub velocity_components: Vec<f64>,
}

impl LossWeights {
    /// Uniform pressure weight for both interface classes, unit component weights.
    pub fn new(obs: f64, pde: f64, ghost_u: f64, ghost_p: f64) -> Self {
        Self {
            obs,
            pde,
            ghost_u,
            ghost_p_space: ghost_p,
            ghost_p_time: ghost_p,
            velocity_components: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (name, w) in [
            ("obs", self.obs),
            ("pde", self.pde),
            ("ghost_u", self.ghost_u),
            ("ghost_p_space", self.ghost_p_space),
            ("ghost_p_time", self.ghost_p_time),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(PhysicsError::BadWeight(name));
            }
        }
        if self
            .velocity_components
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(PhysicsError::BadWeight("velocity_components"));
        }
        Ok(())
    }

    /// Component weights for `n` velocity components (all ones if unset).
    pub fn components(&self, n: usize) -> Vec<f64> {
        if self.velocity_components.is_empty() {
            vec![1.0; n]
        } else {
            self.velocity_components.clone()
        }
    }
}

/// The five loss terms of one local objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub obs: f64,
    pub pde: f64,
    pub ghost_u: f64,
    pub ghost_p_space: f64,
    pub ghost_p_time: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.obs, self.pde, self.ghost_u, self.ghost_p_space, self.ghost_p_time]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `λ_obs·L_obs + λ_PDE·L_PDE + λ_gh_u·L_gh_u + λ_space·L_space + λ_time·L_time`.
pub fn compose_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64, PhysicsError> {
    weights.validate()?;
    Ok(weights.obs * parts.obs
        + weights.pde * parts.pde
        + weights.ghost_u * parts.ghost_u
        + weights.ghost_p_space * parts.ghost_p_space
        + weights.ghost_p_time * parts.ghost_p_time)
}
