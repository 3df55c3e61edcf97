//! Closed-form Navier-Stokes solutions used as reference data and residual oracles.
//!
//! Each field is a finite sum of terms `c · exp(l·q) · f(m·q)` with `q = (t, x, y, z)`
//! and `f ∈ {sin, cos}`, which makes every space-time derivative exact:
//!
//! ```text
//! ∂_i  term = c e [ l_i f + m_i f' ]
//! ∂_ii term = c e [ l_i² f + 2 l_i m_i f' + m_i² f'' ]
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Jet;
use crate::physics::{FlowRegime, PhysicsError, RegimeKind};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("points have {found} columns, the solution expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("grid needs at least 2 nodes per axis and a non-empty box, got {0}")]
    Grid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Kovasznay2dSteady,
    TaylorGreen2dUnsteady,
    Beltrami3dUnsteady,
}

impl SolutionKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "kovasznay" | "kovasznay2d_steady" => Some(Self::Kovasznay2dSteady),
            "taylor_green" | "taylor_green_2d_unsteady" => Some(Self::TaylorGreen2dUnsteady),
            "beltrami" | "beltrami_3d_unsteady" => Some(Self::Beltrami3dUnsteady),
            _ => None,
        }
    }

    pub fn regime_kind(self) -> RegimeKind {
        match self {
            Self::Kovasznay2dSteady => RegimeKind::Steady2d,
            Self::TaylorGreen2dUnsteady => RegimeKind::Unsteady2d,
            Self::Beltrami3dUnsteady => RegimeKind::Unsteady3d,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Wave {
    Sin,
    Cos,
}

/// `coef · exp(l·q) · wave(m·q)`, `q = (t, x, y, z)`.
#[derive(Clone, Copy, Debug)]
struct Term {
    coef: f64,
    l: [f64; 4],
    m: [f64; 4],
    wave: Wave,
}

impl Term {
    fn new(coef: f64, l: [f64; 4], m: [f64; 4], wave: Wave) -> Self {
        Self { coef, l, m, wave }
    }

    fn constant(coef: f64) -> Self {
        Self::new(coef, [0.0; 4], [0.0; 4], Wave::Cos)
    }

    /// Value, `∂_i`, `∂_ii` for each of the four coordinates.
    fn eval(&self, q: &[f64; 4]) -> (f64, [f64; 4], [f64; 4]) {
        let dot = |v: &[f64; 4]| v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
        let e = self.coef * dot(&self.l).exp();
        let (s, c) = dot(&self.m).sin_cos();
        // f, f', f''
        let (f, f1, f2) = match self.wave {
            Wave::Sin => (s, c, -s),
            Wave::Cos => (c, -s, -c),
        };
        let mut d1 = [0.0; 4];
        let mut d2 = [0.0; 4];
        for i in 0..4 {
            let (l, m) = (self.l[i], self.m[i]);
            d1[i] = e * (l * f + m * f1);
            d2[i] = e * (l * l * f + 2.0 * l * m * f1 + m * m * f2);
        }
        (e * f, d1, d2)
    }
}

/// An exact incompressible flow on its natural domain.
#[derive(Clone, Debug)]
pub struct ManufacturedSolution {
    pub kind: SolutionKind,
    pub reynolds: f64,
    /// Beltrami wave parameters; unused otherwise.
    pub a: f64,
    pub d: f64,
    /// Fields `(u, v[, w], p)`, each a sum of terms.
    fields: Vec<Vec<Term>>,
}

impl ManufacturedSolution {
    pub fn kovasznay(reynolds: f64) -> Result<Self, BenchmarkError> {
        FlowRegime::new(RegimeKind::Steady2d, reynolds)?;
        let lam = kovasznay_lambda(reynolds);
        let k = 2.0 * PI;
        let u = vec![
            Term::constant(1.0),
            Term::new(-1.0, [0.0, lam, 0.0, 0.0], [0.0, 0.0, k, 0.0], Wave::Cos),
        ];
        let v = vec![Term::new(lam / k, [0.0, lam, 0.0, 0.0], [0.0, 0.0, k, 0.0], Wave::Sin)];
        let p = vec![
            Term::constant(0.5),
            Term::new(-0.5, [0.0, 2.0 * lam, 0.0, 0.0], [0.0; 4], Wave::Cos),
        ];
        Ok(Self {
            kind: SolutionKind::Kovasznay2dSteady,
            reynolds,
            a: 0.0,
            d: 0.0,
            fields: vec![u, v, p],
        })
    }

    pub fn taylor_green(reynolds: f64) -> Result<Self, BenchmarkError> {
        FlowRegime::new(RegimeKind::Unsteady2d, reynolds)?;
        let g = -2.0 / reynolds;
        // −cos x sin y = −(sin(x+y) − sin(x−y))/2, sin x cos y = (sin(x+y) + sin(x−y))/2
        let decay = [g, 0.0, 0.0, 0.0];
        let u = vec![
            Term::new(-0.5, decay, [0.0, 1.0, 1.0, 0.0], Wave::Sin),
            Term::new(0.5, decay, [0.0, 1.0, -1.0, 0.0], Wave::Sin),
        ];
        let v = vec![
            Term::new(0.5, decay, [0.0, 1.0, 1.0, 0.0], Wave::Sin),
            Term::new(0.5, decay, [0.0, 1.0, -1.0, 0.0], Wave::Sin),
        ];
        let pd = [2.0 * g, 0.0, 0.0, 0.0];
        let p = vec![
            Term::new(-0.25, pd, [0.0, 2.0, 0.0, 0.0], Wave::Cos),
            Term::new(-0.25, pd, [0.0, 0.0, 2.0, 0.0], Wave::Cos),
        ];
        Ok(Self {
            kind: SolutionKind::TaylorGreen2dUnsteady,
            reynolds,
            a: 0.0,
            d: 0.0,
            fields: vec![u, v, p],
        })
    }

    /// Ethier-Steinman flow with velocity decay `exp(−d² t / Re)`.
    pub fn beltrami(a: f64, d: f64, reynolds: f64) -> Result<Self, BenchmarkError> {
        FlowRegime::new(RegimeKind::Unsteady3d, reynolds)?;
        let g = -d * d / reynolds;
        let t = |coef: f64, ex: [f64; 3], arg: [f64; 3], wave| {
            Term::new(
                coef,
                [g, ex[0], ex[1], ex[2]],
                [0.0, arg[0], arg[1], arg[2]],
                wave,
            )
        };
        // u = −a [e^{ax} sin(ay + dz) + e^{az} cos(ax + dy)], cyclic in (x, y, z)
        let u = vec![
            t(-a, [a, 0.0, 0.0], [0.0, a, d], Wave::Sin),
            t(-a, [0.0, 0.0, a], [a, d, 0.0], Wave::Cos),
        ];
        let v = vec![
            t(-a, [0.0, a, 0.0], [d, 0.0, a], Wave::Sin),
            t(-a, [a, 0.0, 0.0], [0.0, a, d], Wave::Cos),
        ];
        let w = vec![
            t(-a, [0.0, 0.0, a], [a, d, 0.0], Wave::Sin),
            t(-a, [0.0, a, 0.0], [d, 0.0, a], Wave::Cos),
        ];
        // p = −(a²/2) e^{2gt} [e^{2ax} + e^{2ay} + e^{2az}
        //     + 2 sin(ax+dy) cos(az+dx) e^{a(y+z)}
        //     + 2 sin(ay+dz) cos(ax+dy) e^{a(z+x)}
        //     + 2 sin(az+dx) cos(ay+dz) e^{a(x+y)}]
        // with 2 sin A cos B = sin(A+B) + sin(A−B).
        let c = -0.5 * a * a;
        let pt = |ex: [f64; 3], arg: [f64; 3], wave| {
            Term::new(
                c,
                [2.0 * g, ex[0], ex[1], ex[2]],
                [0.0, arg[0], arg[1], arg[2]],
                wave,
            )
        };
        let p = vec![
            pt([2.0 * a, 0.0, 0.0], [0.0; 3], Wave::Cos),
            pt([0.0, 2.0 * a, 0.0], [0.0; 3], Wave::Cos),
            pt([0.0, 0.0, 2.0 * a], [0.0; 3], Wave::Cos),
            // A = ax + dy, B = az + dx
            pt([0.0, a, a], [a + d, d, a], Wave::Sin),
            pt([0.0, a, a], [a - d, d, -a], Wave::Sin),
            // A = ay + dz, B = ax + dy
            pt([a, 0.0, a], [a, a + d, d], Wave::Sin),
            pt([a, 0.0, a], [-a, a - d, d], Wave::Sin),
            // A = az + dx, B = ay + dz
            pt([a, a, 0.0], [d, a, a + d], Wave::Sin),
            pt([a, a, 0.0], [d, -a, a - d], Wave::Sin),
        ];
        Ok(Self {
            kind: SolutionKind::Beltrami3dUnsteady,
            reynolds,
            a,
            d,
            fields: vec![u, v, w, p],
        })
    }

    pub fn regime(&self) -> FlowRegime {
        FlowRegime {
            kind: self.kind.regime_kind(),
            reynolds: self.reynolds,
        }
    }

    /// Default spatial box and time interval.
    pub fn natural_domain(&self) -> (Vec<(f64, f64)>, Option<(f64, f64)>) {
        match self.kind {
            SolutionKind::Kovasznay2dSteady => (vec![(-0.5, 1.0), (-0.5, 1.5)], None),
            SolutionKind::TaylorGreen2dUnsteady => {
                (vec![(0.0, 2.0 * PI), (0.0, 2.0 * PI)], Some((0.0, 2.0)))
            }
            SolutionKind::Beltrami3dUnsteady => (vec![(-1.0, 1.0); 3], Some((0.0, 1.0))),
        }
    }

    /// Exact values and derivatives at each point, in the regime's input order.
    pub fn evaluate(&self, points: ArrayView2<f64>) -> Result<Vec<Jet>, BenchmarkError> {
        let regime = self.regime();
        let dim = regime.input_dim();
        if points.ncols() != dim {
            return Err(BenchmarkError::Dimension {
                expected: dim,
                found: points.ncols(),
            });
        }
        // column of q that each input coordinate maps to
        let offset = usize::from(regime.is_steady());
        let n_out = self.fields.len();
        Ok(points
            .rows()
            .into_iter()
            .map(|row| {
                let mut q = [0.0; 4];
                for (j, &v) in row.iter().enumerate() {
                    q[j + offset] = v;
                }
                let mut jet = Jet::zeros(n_out, dim);
                for (c, terms) in self.fields.iter().enumerate() {
                    for term in terms {
                        let (v, d1, d2) = term.eval(&q);
                        jet.value[c] += v;
                        for j in 0..dim {
                            jet.grad[[c, j]] += d1[j + offset];
                            jet.lap[[c, j]] += d2[j + offset];
                        }
                    }
                }
                jet
            })
            .collect())
    }

    /// Values only, `points.nrows() × (velocity components + 1)`.
    pub fn values(&self, points: ArrayView2<f64>) -> Result<Array2<f64>, BenchmarkError> {
        let jets = self.evaluate(points)?;
        let mut out = Array2::zeros((jets.len(), self.fields.len()));
        for (mut row, jet) in out.rows_mut().into_iter().zip(&jets) {
            row.assign(&jet.value);
        }
        Ok(out)
    }
}

/// `Re/2 − √(Re²/4 + 4π²)`.
pub fn kovasznay_lambda(reynolds: f64) -> f64 {
    0.5 * reynolds - (0.25 * reynolds * reynolds + 4.0 * PI * PI).sqrt()
}

/// Uniform tensor grid: per-axis node counts over a box, plus snapshot times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub nodes: Vec<usize>,
    /// Snapshot times; empty for steady solutions.
    #[serde(default)]
    pub times: Vec<f64>,
}

impl GridSpec {
    fn validate(&self, spatial_dim: usize, steady: bool) -> Result<(), BenchmarkError> {
        let bad = self.bounds.len() != spatial_dim
            || self.nodes.len() != spatial_dim
            || self.nodes.iter().any(|&n| n < 2)
            || self.bounds.iter().any(|&(lo, hi)| !(lo < hi))
            || (!steady && self.times.is_empty());
        if bad {
            return Err(BenchmarkError::Grid(format!("{self:?}")));
        }
        Ok(())
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds[i];
        let n = self.nodes[i];
        (0..n)
            .map(|k| {
                if k == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Grid points in the regime's input order: time outermost, then x, y, z (z fastest).
    pub fn points(&self, regime: FlowRegime) -> Result<Array2<f64>, BenchmarkError> {
        self.validate(regime.spatial_dim(), regime.is_steady())?;
        let axes: Vec<Vec<f64>> = (0..regime.spatial_dim()).map(|i| self.axis(i)).collect();
        let per_snapshot: usize = self.nodes.iter().product();
        let times: Vec<Option<f64>> = if regime.is_steady() {
            vec![None]
        } else {
            self.times.iter().copied().map(Some).collect()
        };
        let mut out = Array2::zeros((per_snapshot * times.len(), regime.input_dim()));
        let mut row = 0;
        for t in &times {
            for flat in 0..per_snapshot {
                let mut rem = flat;
                let mut coords = vec![0.0; axes.len()];
                for (i, axis) in axes.iter().enumerate().rev() {
                    coords[i] = axis[rem % axis.len()];
                    rem /= axis.len();
                }
                let mut col = 0;
                if let Some(t) = t {
                    out[[row, 0]] = *t;
                    col = 1;
                }
                for c in coords {
                    out[[row, col]] = c;
                    col += 1;
                }
                row += 1;
            }
        }
        Ok(out)
    }
}

/// Writes `t,x,y[,z],u,v[,w],p` rows of the solution sampled on `grid`; `t` is 0 when steady.
/// Returns the number of data rows.
pub fn make_reference_grid(
    solution: &ManufacturedSolution,
    grid: &GridSpec,
    path: &Path,
) -> Result<usize, BenchmarkError> {
    let regime = solution.regime();
    let points = grid.points(regime)?;
    let values = solution.values(points.view())?;
    let mut out = BufWriter::new(File::create(path)?);
    let sd = regime.spatial_dim();
    let header: Vec<&str> = ["t", "x", "y", "z"][..=sd]
        .iter()
        .chain(["u", "v", "w"][..sd].iter())
        .chain(std::iter::once(&"p"))
        .copied()
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (pt, val) in points.rows().into_iter().zip(values.rows()) {
        let mut fields = Vec::with_capacity(header.len());
        if regime.is_steady() {
            fields.push(format_f64(0.0));
        }
        fields.extend(pt.iter().map(|&v| format_f64(v)));
        fields.extend(val.iter().map(|&v| format_f64(v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(points.nrows())
}

/// Shortest representation that parses back to the same bits.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}
