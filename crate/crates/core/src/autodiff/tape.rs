//! Reusable network tapes with forward jet propagation.
//!
//! For every input coordinate `j` the tape carries the value, the first
//! derivative and the diagonal second derivative of each layer through the
//! network:
//!
//! ```text
//! affine      z = W a + b      z' = W a'       z'' = W a''
//! activation  s = σ(z)         s' = σ'(z) z'   s'' = σ''(z) (z')² + σ'(z) z''
//! ```
//!
//! Mixed second derivatives are never formed. All of it lives on one
//! [`Graph`], so a loss assembled from these derivatives is differentiated with
//! respect to the weights by a single reverse sweep.

use ndarray::{Array1, Array2, ArrayView2};

use super::graph::{Activation, Graph, GraphBuilder, NodeId};
use super::AutodiffError;
use crate::network::{ExpertParams, InputMap};
use crate::physics::{self, FlowRegime};

/// Layer widths (input, hidden..., output) plus the hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self, AutodiffError> {
        if sizes.len() < 2 {
            return Err(AutodiffError::Architecture {
                sizes,
                reason: "needs an input and an output layer",
            });
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(AutodiffError::Architecture {
                sizes,
                reason: "zero-width layer",
            });
        }
        Ok(Self { sizes, activation })
    }

    /// Like [`Architecture::new`] but with the activation given by name.
    pub fn parse(sizes: Vec<usize>, activation: &str) -> Result<Self, AutodiffError> {
        let activation = Activation::parse(activation)?;
        Self::new(sizes, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }
}

/// What a tape computes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TapeMode {
    /// Network outputs only.
    Value,
    /// Outputs with first and diagonal second input derivatives.
    Jet,
    /// Jet plus the mean squared Navier-Stokes residual, scaled by a bound coefficient.
    PdeLoss(FlowRegime),
    /// Outputs plus `coef · (1/B) Σ_i Σ_c w_ic (y_ic − target_ic)²`.
    FitLoss,
}

impl TapeMode {
    fn is_jet(self) -> bool {
        matches!(self, TapeMode::Jet | TapeMode::PdeLoss(_))
    }
}

/// Network output at one point with its input derivatives.
///
/// `grad[[c, j]] = ∂y_c/∂x_j` and `lap[[c, j]] = ∂²y_c/∂x_j²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: Array1<f64>,
    pub grad: Array2<f64>,
    pub lap: Array2<f64>,
}

impl Jet {
    pub fn zeros(n_outputs: usize, n_inputs: usize) -> Self {
        Self {
            value: Array1::zeros(n_outputs),
            grad: Array2::zeros((n_outputs, n_inputs)),
            lap: Array2::zeros((n_outputs, n_inputs)),
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.value.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.grad.ncols()
    }
}

/// Graph nodes holding a batched jet: value `B×out`, and per input `B×out`.
#[derive(Clone, Debug)]
pub struct JetNodes {
    pub value: NodeId,
    pub grad: Vec<NodeId>,
    /// `None` where the second derivative is identically zero.
    pub lap: Vec<Option<NodeId>>,
}

/// A network laid onto a static graph for a fixed batch size.
#[derive(Clone, Debug)]
pub struct Tape {
    graph: Graph,
    arch: Architecture,
    mode: TapeMode,
    batch: usize,
    points_slot: usize,
    seed_slots: Vec<usize>,
    target_slot: Option<usize>,
    weight_slot: Option<usize>,
    coef_slot: Option<usize>,
    jet: JetNodes,
    part: Option<NodeId>,
    loss: Option<NodeId>,
}

/// Builds a tape for `arch` evaluated on `batch` points.
pub fn build_tape(arch: &Architecture, batch: usize, mode: TapeMode) -> Result<Tape, AutodiffError> {
    let arch = Architecture::new(arch.sizes.clone(), arch.activation)?;
    if batch == 0 {
        return Err(AutodiffError::EmptyBatch);
    }
    if let TapeMode::PdeLoss(regime) = mode {
        if regime.input_dim() != arch.input_dim() || regime.output_dim() != arch.output_dim() {
            return Err(AutodiffError::Architecture {
                sizes: arch.sizes.clone(),
                reason: "input/output widths do not match the flow regime",
            });
        }
    }

    let d = arch.input_dim();
    let mut b = GraphBuilder::new();
    let points = b.input(batch, d)?;
    let points_slot = 0;

    let mut layers = Vec::with_capacity(arch.layer_count());
    for w in arch.sizes.windows(2) {
        let weight = b.param(w[1], w[0])?;
        let bias = b.param(1, w[1])?;
        layers.push((weight, bias));
    }

    let jet_mode = mode.is_jet();
    let mut seed_slots = Vec::new();
    let mut da: Vec<NodeId> = Vec::new();
    if jet_mode {
        for j in 0..d {
            da.push(b.input(batch, d)?);
            seed_slots.push(1 + j);
        }
    }
    let mut dda: Vec<Option<NodeId>> = vec![None; da.len()];

    let mut a = points;
    let last = layers.len() - 1;
    for (l, &(weight, bias)) in layers.iter().enumerate() {
        let z = b.matmul_t(a, weight)?;
        let z = b.add_bias(z, bias)?;
        let dz = da
            .iter()
            .map(|&n| b.matmul_t(n, weight))
            .collect::<Result<Vec<_>, _>>()?;
        let ddz = dda
            .iter()
            .map(|n| n.map(|n| b.matmul_t(n, weight)).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        if l == last {
            a = z;
            da = dz;
            dda = ddz;
            break;
        }
        a = b.activation(z, arch.activation, 0)?;
        if jet_mode {
            let s1 = b.activation(z, arch.activation, 1)?;
            let s2 = b.activation(z, arch.activation, 2)?;
            let mut next_da = Vec::with_capacity(d);
            let mut next_dda = Vec::with_capacity(d);
            for (&dzj, ddzj) in dz.iter().zip(&ddz) {
                next_da.push(b.mul(s1, dzj)?);
                let sq = b.square(dzj)?;
                let curv = b.mul(s2, sq)?;
                let lap = match ddzj {
                    Some(n) => {
                        let carried = b.mul(s1, *n)?;
                        b.add(curv, carried)?
                    }
                    None => curv,
                };
                next_dda.push(Some(lap));
            }
            da = next_da;
            dda = next_dda;
        }
    }
    let jet = JetNodes {
        value: a,
        grad: da,
        lap: dda,
    };

    let n_out = arch.output_dim();
    let (mut target_slot, mut weight_slot, mut coef_slot) = (None, None, None);
    let (mut part, mut loss) = (None, None);
    match mode {
        TapeMode::Value | TapeMode::Jet => {}
        TapeMode::FitLoss => {
            let next = b_input_count(jet_mode, d);
            let target = b.input(batch, n_out)?;
            let weights = b.input(batch, n_out)?;
            let coef = b.input(1, 1)?;
            target_slot = Some(next);
            weight_slot = Some(next + 1);
            coef_slot = Some(next + 2);
            let diff = b.sub(jet.value, target)?;
            let sq = b.square(diff)?;
            let weighted = b.mul(sq, weights)?;
            let total = b.sum(weighted)?;
            let p = b.scale(total, 1.0 / batch as f64)?;
            part = Some(p);
            loss = Some(b.scale_by(p, coef)?);
        }
        TapeMode::PdeLoss(regime) => {
            let next = b_input_count(jet_mode, d);
            let coef = b.input(1, 1)?;
            coef_slot = Some(next);
            let p = physics::append_pde_loss(&mut b, &jet, regime)?;
            part = Some(p);
            loss = Some(b.scale_by(p, coef)?);
        }
    }

    let mut tape = Tape {
        graph: b.finish(),
        arch,
        mode,
        batch,
        points_slot,
        seed_slots,
        target_slot,
        weight_slot,
        coef_slot,
        jet,
        part,
        loss,
    };
    if let Some(slot) = tape.coef_slot {
        tape.graph.input_mut(slot).fill(1.0);
    }
    if let Some(slot) = tape.weight_slot {
        tape.graph.input_mut(slot).fill(1.0);
    }
    Ok(tape)
}

fn b_input_count(jet: bool, d: usize) -> usize {
    if jet {
        1 + d
    } else {
        1
    }
}

impl Tape {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// Copies the weights in and sets the input-derivative seeds for the
    /// parameters' coordinate normalization.
    pub fn bind_params(&mut self, params: &ExpertParams) -> Result<(), AutodiffError> {
        if params.config.layer_sizes() != self.arch.sizes
            || params.config.activation != self.arch.activation
        {
            return Err(AutodiffError::ParamMismatch);
        }
        for (slot, tensor) in params.tensors.iter().enumerate() {
            if let Some(index) = tensor.iter().position(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteParam { tensor: slot, index });
            }
            self.graph.bind_param(slot, tensor.view())?;
        }
        for (j, &slot) in self.seed_slots.iter().enumerate() {
            let inv = 1.0 / params.input_map.half_width[j];
            let mut seed = self.graph.input_mut(slot);
            seed.fill(0.0);
            seed.column_mut(j).fill(inv);
        }
        Ok(())
    }

    /// Writes normalized coordinates of `points` into the tape.
    pub fn bind_points(&mut self, points: ArrayView2<f64>, map: &InputMap) -> Result<(), AutodiffError> {
        let d = self.arch.input_dim();
        if points.dim() != (self.batch, d) {
            return Err(AutodiffError::Shape {
                op: "bind_points",
                left: (self.batch, d),
                right: points.dim(),
            });
        }
        for (i, row) in points.rows().into_iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteInput { point: i, coord: j });
            }
        }
        let mut x = self.graph.input_mut(self.points_slot);
        for ((i, j), v) in x.indexed_iter_mut() {
            *v = (points[[i, j]] - map.center[j]) / map.half_width[j];
        }
        Ok(())
    }

    /// Fit-loss targets and per-entry weights, both `B×out`.
    pub fn bind_targets(
        &mut self,
        targets: ArrayView2<f64>,
        weights: ArrayView2<f64>,
    ) -> Result<(), AutodiffError> {
        let (t, w) = self
            .target_slot
            .zip(self.weight_slot)
            .ok_or(AutodiffError::Mode("bind_targets"))?;
        self.graph.bind_input(t, targets)?;
        self.graph.bind_input(w, weights)?;
        Ok(())
    }

    pub fn set_coefficient(&mut self, coef: f64) -> Result<(), AutodiffError> {
        let slot = self.coef_slot.ok_or(AutodiffError::Mode("set_coefficient"))?;
        self.graph.input_mut(slot)[[0, 0]] = coef;
        Ok(())
    }

    pub fn execute(&mut self) {
        self.graph.forward();
    }

    /// Output values `B×out` of the last execution.
    pub fn outputs(&self) -> ArrayView2<'_, f64> {
        self.graph.value(self.jet.value)
    }

    /// Unweighted loss part of the last execution.
    pub fn part(&self) -> Option<f64> {
        self.part.map(|n| self.graph.scalar(n))
    }

    /// Coefficient-weighted loss of the last execution.
    pub fn loss(&self) -> Option<f64> {
        self.loss.map(|n| self.graph.scalar(n))
    }

    /// Per-point jets of the last execution.
    pub fn jets(&self) -> Result<Vec<Jet>, AutodiffError> {
        if !self.mode.is_jet() {
            return Err(AutodiffError::Mode("jets"));
        }
        let (n_out, d) = (self.arch.output_dim(), self.arch.input_dim());
        let value = self.graph.value(self.jet.value);
        let mut jets: Vec<Jet> = (0..self.batch)
            .map(|i| {
                let mut jet = Jet::zeros(n_out, d);
                jet.value.assign(&value.row(i));
                jet
            })
            .collect();
        for j in 0..d {
            let g = self.graph.value(self.jet.grad[j]);
            for (i, jet) in jets.iter_mut().enumerate() {
                jet.grad.column_mut(j).assign(&g.row(i));
            }
            if let Some(node) = self.jet.lap[j] {
                let h = self.graph.value(node);
                for (i, jet) in jets.iter_mut().enumerate() {
                    jet.lap.column_mut(j).assign(&h.row(i));
                }
            }
        }
        Ok(jets)
    }

    /// Adds parameter gradients of the loss into `grads` (parameter-tensor order).
    pub fn backward_into(&mut self, grads: &mut [Array2<f64>]) -> Result<(), AutodiffError> {
        let seed = self.loss.ok_or(AutodiffError::Mode("backward"))?;
        self.graph.backward_accumulate(seed, grads)
    }

    pub fn zero_gradients(&self) -> Vec<Array2<f64>> {
        (0..self.graph.param_count())
            .map(|s| Array2::zeros(self.graph.param_shape(s)))
            .collect()
    }
}

/// Evaluates the network and its input derivatives at `points`.
pub fn forward_jet(
    tape: &mut Tape,
    params: &ExpertParams,
    points: ArrayView2<f64>,
) -> Result<Vec<Jet>, AutodiffError> {
    if !tape.mode.is_jet() {
        return Err(AutodiffError::Mode("forward_jet"));
    }
    tape.bind_params(params)?;
    tape.bind_points(points, &params.input_map)?;
    tape.execute();
    tape.jets()
}

/// Gradient of the tape's loss with respect to every parameter tensor.
pub fn backward(tape: &mut Tape) -> Result<Vec<Array2<f64>>, AutodiffError> {
    let mut grads = tape.zero_gradients();
    tape.backward_into(&mut grads)?;
    Ok(grads)
}
