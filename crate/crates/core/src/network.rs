//! Fully connected local experts mapping space-time coordinates to `(u, p)`.
//!
//! Parameters are stored as a flat list of tensors in layer order,
//! `[W₀, b₀, W₁, b₁, …]`, with `W_l` of shape `out×in` and `b_l` of shape `1×out`.
//! Every tape binds them in exactly this order.

use std::io::{self, Read, Write};

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, Architecture};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid expert configuration: {0}")]
    Config(String),
    #[error("points have {found} coordinates, expert expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Shape of one local expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// 2 for steady 2D `(x, y)`, 3 for `(t, x, y)`, 4 for `(t, x, y, z)`.
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    /// Velocity components plus pressure.
    pub output_dim: usize,
    /// Multiplier applied to the initial first-layer weights (ω₀ of sinusoidal nets).
    #[serde(default = "default_first_layer_scale")]
    pub first_layer_scale: f64,
}

fn default_first_layer_scale() -> f64 {
    1.0
}

impl ExpertConfig {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        width: usize,
        activation: Activation,
        output_dim: usize,
    ) -> Result<Self, NetworkError> {
        let config = Self {
            input_dim,
            hidden_layers,
            width,
            activation,
            output_dim,
            first_layer_scale: 1.0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(2..=4).contains(&self.input_dim) {
            return Err(NetworkError::Config(format!(
                "input_dim must be 2, 3 or 4, got {}",
                self.input_dim
            )));
        }
        let spatial = if self.input_dim == 2 { 2 } else { self.input_dim - 1 };
        if self.output_dim != spatial + 1 {
            return Err(NetworkError::Config(format!(
                "output_dim must be {} (velocity components + pressure), got {}",
                spatial + 1,
                self.output_dim
            )));
        }
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(NetworkError::Config(
                "at least one hidden layer of non-zero width is required".into(),
            ));
        }
        if !(self.first_layer_scale.is_finite() && self.first_layer_scale > 0.0) {
            return Err(NetworkError::Config("first_layer_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_layers + 2);
        sizes.push(self.input_dim);
        sizes.extend(std::iter::repeat(self.width).take(self.hidden_layers));
        sizes.push(self.output_dim);
        sizes
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            sizes: self.layer_sizes(),
            activation: self.activation,
        }
    }

    /// Σ over layers of `fan_in·fan_out + fan_out`.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn velocity_dim(&self) -> usize {
        self.output_dim - 1
    }
}

/// Affine map from physical coordinates to the network's `[-1, 1]` box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl InputMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            half_width: vec![1.0; dim],
        }
    }

    /// Maps the box `[lo, hi]` onto `[-1, 1]` per axis.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Self {
        let center = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half_width = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| {
                let h = 0.5 * (b - a);
                if h > 0.0 {
                    h
                } else {
                    1.0
                }
            })
            .collect();
        Self { center, half_width }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

/// Trainable state of one local expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub config: ExpertConfig,
    pub seed: u64,
    pub input_map: InputMap,
    pub tensors: Vec<Array2<f64>>,
}

/// Glorot-uniform weights and zero biases, deterministic in `(config, seed)`.
pub fn init_params(config: &ExpertConfig, seed: u64) -> Result<ExpertParams, NetworkError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = config.layer_sizes();
    let mut tensors = Vec::with_capacity(2 * (sizes.len() - 1));
    for (l, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let scale = if l == 0 { config.first_layer_scale } else { 1.0 };
        let weight =
            Array2::from_shape_simple_fn((fan_out, fan_in), || scale * rng.gen_range(-limit..limit));
        tensors.push(weight);
        tensors.push(Array2::zeros((1, fan_out)));
    }
    Ok(ExpertParams {
        config: config.clone(),
        seed,
        input_map: InputMap::identity(config.input_dim),
        tensors,
    })
}

/// Velocity and pressure at a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub velocity: Array2<f64>,
    pub pressure: Array1<f64>,
}

impl ExpertParams {
    pub fn layer_count(&self) -> usize {
        self.tensors.len() / 2
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Array2<f64> {
        &self.tensors[2 * layer + 1]
    }

    /// Index of the pressure output bias entry within the last bias tensor.
    pub fn pressure_bias_mut(&mut self) -> &mut f64 {
        let last = self.tensors.len() - 1;
        let p = self.config.output_dim - 1;
        &mut self.tensors[last][[0, p]]
    }

    pub fn with_input_map(mut self, map: InputMap) -> Self {
        self.input_map = map;
        self
    }

    /// Raw network outputs `B×out`.
    pub fn outputs(&self, points: ArrayView2<f64>) -> Result<Array2<f64>, NetworkError> {
        let d = self.config.input_dim;
        if points.ncols() != d {
            return Err(NetworkError::Dimension {
                expected: d,
                found: points.ncols(),
            });
        }
        let mut a = Array2::from_shape_fn(points.dim(), |(i, j)| {
            (points[[i, j]] - self.input_map.center[j]) / self.input_map.half_width[j]
        });
        let layers = self.layer_count();
        for l in 0..layers {
            let w = self.weight(l);
            let b = self.bias(l).row(0);
            let mut z = Array2::zeros((a.nrows(), w.nrows()));
            general_mat_mul(1.0, &a, &w.t(), 0.0, &mut z);
            let act = self.config.activation;
            let hidden = l + 1 < layers;
            for mut row in z.rows_mut() {
                for (v, &bb) in row.iter_mut().zip(b.iter()) {
                    let s = *v + bb;
                    *v = if hidden { act.derivative(0, s) } else { s };
                }
            }
            a = z;
        }
        Ok(a)
    }

    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Prediction, NetworkError> {
        let out = self.outputs(points)?;
        let nv = self.config.velocity_dim();
        Ok(Prediction {
            velocity: out.slice(ndarray::s![.., ..nv]).to_owned(),
            pressure: out.column(nv).to_owned(),
        })
    }
}

/// Convenience wrapper around [`ExpertParams::predict`].
pub fn predict(params: &ExpertParams, points: ArrayView2<f64>) -> Result<Prediction, NetworkError> {
    params.predict(points)
}

const MAGIC: &[u8; 8] = b"DPINNCKP";
const VERSION: u32 = 1;

/// Checkpoint layout (all integers and floats little-endian):
///
/// ```text
/// magic        8 bytes  "DPINNCKP"
/// version      u32      1
/// input_dim    u32
/// hidden       u32
/// width        u32
/// output_dim   u32
/// activation   u32      0 = tanh, 1 = sin
/// first_scale  f64
/// seed         u64
/// center       input_dim × f64
/// half_width   input_dim × f64
/// per layer    weight (out×in, row-major) f64, then bias (out) f64
/// ```
pub fn write_checkpoint<W: Write>(params: &ExpertParams, mut w: W) -> Result<(), NetworkError> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        c.input_dim as u32,
        c.hidden_layers as u32,
        c.width as u32,
        c.output_dim as u32,
        match c.activation {
            Activation::Tanh => 0,
            Activation::Sin => 1,
        },
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.first_layer_scale.to_le_bytes())?;
    w.write_all(&params.seed.to_le_bytes())?;
    for v in params.input_map.center.iter().chain(&params.input_map.half_width) {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in &params.tensors {
        for row in t.rows() {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ExpertParams, NetworkError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetworkError::Checkpoint("bad magic".into()));
    }
    let mut u32s = [0u32; 6];
    for v in &mut u32s {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *v = u32::from_le_bytes(buf);
    }
    if u32s[0] != VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {}", u32s[0])));
    }
    let activation = match u32s[5] {
        0 => Activation::Tanh,
        1 => Activation::Sin,
        other => return Err(NetworkError::Checkpoint(format!("unknown activation code {other}"))),
    };
    let read_f64 = |r: &mut R| -> Result<f64, NetworkError> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    let first_layer_scale = read_f64(&mut r)?;
    let mut seed_buf = [0u8; 8];
    r.read_exact(&mut seed_buf)?;
    let seed = u64::from_le_bytes(seed_buf);
    let config = ExpertConfig {
        input_dim: u32s[1] as usize,
        hidden_layers: u32s[2] as usize,
        width: u32s[3] as usize,
        activation,
        output_dim: u32s[4] as usize,
        first_layer_scale,
    };
    config.validate()?;
    let d = config.input_dim;
    let center = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let half_width = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let mut tensors = Vec::new();
    for w in config.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = (0..fan_in * fan_out)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        tensors.push(Array2::from_shape_vec((fan_out, fan_in), weight).expect("shape"));
        let bias = (0..fan_out).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        tensors.push(Array2::from_shape_vec((1, fan_out), bias).expect("shape"));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NetworkError::Checkpoint("trailing bytes".into()));
    }
    Ok(ExpertParams {
        config,
        seed,
        input_map: InputMap { center, half_width },
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(input: usize, hidden: usize, width: usize, out: usize) -> ExpertConfig {
        ExpertConfig::new(input, hidden, width, Activation::Tanh, out).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = cfg(3, 3, 16, 3);
        let a = init_params(&c, 11).unwrap();
        let b = init_params(&c, 11).unwrap();
        let bytes = |p: &ExpertParams| {
            let mut v = Vec::new();
            write_checkpoint(p, &mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        let other = init_params(&c, 12).unwrap();
        assert!(a.tensors[0].iter().zip(other.tensors[0].iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_glorot_bound() {
        let c = cfg(2, 2, 8, 3);
        let p = init_params(&c, 0).unwrap();
        for l in 0..p.layer_count() {
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
            let (out, inp) = p.weight(l).dim();
            let limit = (6.0 / (inp + out) as f64).sqrt();
            assert!(p.weight(l).iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn three_dimensional_expert_parameter_count() {
        let c = ExpertConfig::new(4, 8, 200, Activation::Sin, 4).unwrap();
        let expected = 4 * 200 + 200 + 7 * (200 * 200 + 200) + 200 * 4 + 4;
        assert_eq!(expected, 283_204);
        assert_eq!(c.parameter_count(), expected);
        let p = init_params(&c, 0).unwrap();
        assert_eq!(p.tensors.iter().map(|t| t.len()).sum::<usize>(), expected);
    }

    #[test]
    fn config_validation() {
        assert!(ExpertConfig::new(3, 0, 8, Activation::Tanh, 3).is_err());
        assert!(ExpertConfig::new(3, 2, 0, Activation::Tanh, 3).is_err());
        assert!(ExpertConfig::new(4, 2, 8, Activation::Tanh, 3).is_err());
        assert!(ExpertConfig::new(5, 2, 8, Activation::Tanh, 5).is_err());
    }

    #[test]
    fn zero_weight_network_outputs_final_bias() {
        let c = cfg(3, 2, 8, 3);
        let mut p = init_params(&c, 0).unwrap();
        for t in &mut p.tensors {
            t.fill(0.0);
        }
        let last = p.tensors.len() - 1;
        p.tensors[last] = array![[0.5, -1.0, 2.0]];
        let pts = Array2::from_shape_fn((5, 3), |(i, j)| i as f64 - j as f64);
        let pred = p.predict(pts.view()).unwrap();
        for i in 0..5 {
            assert_eq!(pred.velocity.row(i).to_vec(), vec![0.5, -1.0]);
            assert_eq!(pred.pressure[i], 2.0);
        }
    }

    #[test]
    fn prediction_is_batch_invariant() {
        let c = cfg(3, 2, 16, 3);
        let p = init_params(&c, 4).unwrap();
        let one = array![[0.1, 0.2, -0.3]];
        let single = p.outputs(one.view()).unwrap();
        let many = Array2::from_shape_fn((100, 3), |(_, j)| one[[0, j]]);
        let batched = p.outputs(many.view()).unwrap();
        for row in batched.rows() {
            assert_eq!(row, single.row(0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = init_params(&cfg(3, 1, 4, 3), 0).unwrap();
        assert!(p.predict(Array2::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut c = ExpertConfig::new(4, 2, 5, Activation::Sin, 4).unwrap();
        c.first_layer_scale = 3.0;
        let p = init_params(&c, 99)
            .unwrap()
            .with_input_map(InputMap::from_bounds(&[0.0, -1.0, 2.0, 0.5], &[1.0, 1.0, 3.0, 0.75]));
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut again = Vec::new();
        write_checkpoint(&q, &mut again).unwrap();
        assert_eq!(buf, again);
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
