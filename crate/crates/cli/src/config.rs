//! Run configuration: one TOML file, merged over a named preset.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use dpinn_core::autodiff::Activation;
use dpinn_core::benchmarks::{GridSpec, ManufacturedSolution, SolutionKind};
use dpinn_core::decomposition::{partition, Budget, GlobalDomain, Partition};
use dpinn_core::network::ExpertConfig;
use dpinn_core::physics::LossWeights;
use dpinn_core::runtime::{GaugeProtocol, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [&str; 6] = ["cavity2d", "cylinder2d", "cylinder3d", "kovasznay", "taylor_green", "beltrami"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: String,
    pub benchmark: BenchmarkSection,
    pub decomposition: DecompositionSection,
    pub budget: BudgetSection,
    pub expert: ExpertSection,
    pub train: TrainSection,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    /// `kovasznay`, `taylor_green` or `beltrami`.
    pub solution: String,
    pub reynolds: f64,
    /// Beltrami wave parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// `[lo, hi]` per spatial axis.
    pub spatial: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<[f64; 2]>,
    /// Reference grid nodes per spatial axis.
    pub grid: Vec<usize>,
    /// Reference snapshots, evenly spaced over `time` inclusive; ignored when steady.
    pub snapshots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSection {
    pub spatial_grid: Vec<usize>,
    pub time_splits: usize,
    pub delta_space: f64,
    pub delta_time: f64,
    pub anchor: Vec<f64>,
    pub ghost_probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub n_obs: usize,
    pub n_pde: usize,
    pub n_ghost_per_interface: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSection {
    pub hidden: usize,
    pub width: usize,
    pub activation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub obs: f64,
    pub pde: f64,
    pub ghost_u: f64,
    pub ghost_p: f64,
    /// Overrides `ghost_p` on temporal interfaces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost_p_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub velocity_components: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_interval: usize,
    pub comm_interval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub gauge: GaugeProtocol,
    pub exchange_timeout_s: f64,
    pub weights: WeightsSection,
}

fn snapshot_times(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64 })
        .collect()
}

/// Built-in defaults. The three flow presets carry the published hyperparameters with a
/// manufactured solution standing in for each flow.
pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let weights = |obs: f64, pde: f64| WeightsSection {
        obs,
        pde,
        ghost_u: 1.0,
        ghost_p: 1.0,
        ghost_p_time: None,
        velocity_components: Vec::new(),
    };
    let train = |epochs, batch_size, lr, lr_factor, lr_interval, w| TrainSection {
        epochs,
        batch_size,
        lr,
        lr_factor,
        lr_interval,
        comm_interval: 1,
        clip_norm: None,
        gauge: GaugeProtocol::Anchored,
        exchange_timeout_s: 600.0,
        weights: w,
    };
    let cfg = match name {
        "cavity2d" => RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.into(),
            benchmark: BenchmarkSection {
                solution: "kovasznay".into(),
                reynolds: 100.0,
                a: None,
                d: None,
                spatial: vec![[0.0, 1.0], [0.0, 1.0]],
                time: None,
                grid: vec![257, 257],
                snapshots: 1,
            },
            decomposition: DecompositionSection {
                spatial_grid: vec![2, 2],
                time_splits: 1,
                delta_space: 0.2,
                delta_time: 0.0,
                anchor: vec![0.25, 0.25],
                ghost_probes: 200,
            },
            budget: BudgetSection {
                n_obs: 100,
                n_pde: 5000,
                n_ghost_per_interface: 100,
            },
            expert: ExpertSection {
                hidden: 6,
                width: 80,
                activation: "tanh".into(),
            },
            train: train(12000, 1250, 1e-2, 0.5, 1500, weights(10.0, 4.0)),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/cavity2d"),
        },
        "cylinder2d" => RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.into(),
            benchmark: BenchmarkSection {
                solution: "taylor_green".into(),
                reynolds: 100.0,
                a: None,
                d: None,
                spatial: vec![[0.0, 2.0 * PI], [0.0, 2.0 * PI]],
                time: Some([0.0, 7.35]),
                grid: vec![129, 129],
                snapshots: 50,
            },
            decomposition: DecompositionSection {
                spatial_grid: vec![2, 2],
                time_splits: 2,
                delta_space: 2.0,
                delta_time: 1.0,
                anchor: vec![0.5 * PI, 0.5 * PI],
                ghost_probes: 200,
            },
            budget: BudgetSection {
                n_obs: 10_000,
                n_pde: 500_000,
                n_ghost_per_interface: 1000,
            },
            expert: ExpertSection {
                hidden: 6,
                width: 150,
                activation: "sin".into(),
            },
            train: train(8000, 25_000, 1e-3, 0.2, 2000, weights(10.0, 5.0)),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/cylinder2d"),
        },
        "cylinder3d" => {
            let mut t = train(25_000, 25_000, 1e-3, 0.3, 5000, weights(10.0, 10.0));
            t.clip_norm = Some(1.0);
            t.weights.velocity_components = vec![1.0, 5.0, 100.0];
            RunConfig {
                schema_version: SCHEMA_VERSION,
                preset: name.into(),
                benchmark: BenchmarkSection {
                    solution: "beltrami".into(),
                    reynolds: 300.0,
                    a: Some(0.25),
                    d: Some(0.25),
                    spatial: vec![[-4.0, 4.0]; 3],
                    time: Some([0.0, 11.85]),
                    grid: vec![33, 33, 33],
                    snapshots: 80,
                },
                decomposition: DecompositionSection {
                    spatial_grid: vec![2, 2, 2],
                    time_splits: 1,
                    delta_space: 2.0,
                    delta_time: 2.0,
                    anchor: vec![-2.0, -2.0, -2.0],
                    ghost_probes: 200,
                },
                budget: BudgetSection {
                    n_obs: 100_000,
                    n_pde: 600_000,
                    n_ghost_per_interface: 5000,
                },
                expert: ExpertSection {
                    hidden: 8,
                    width: 200,
                    activation: "sin".into(),
                },
                train: t,
                seeds: vec![0, 1, 2, 3, 4],
                output: PathBuf::from("runs/cylinder3d"),
            }
        }
        "kovasznay" => RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.into(),
            benchmark: BenchmarkSection {
                solution: "kovasznay".into(),
                reynolds: 40.0,
                a: None,
                d: None,
                spatial: vec![[-0.5, 1.0], [-0.5, 1.5]],
                time: None,
                grid: vec![101, 101],
                snapshots: 1,
            },
            decomposition: DecompositionSection {
                spatial_grid: vec![1, 1],
                time_splits: 1,
                delta_space: 0.1,
                delta_time: 0.0,
                anchor: vec![0.0, 0.0],
                ghost_probes: 200,
            },
            budget: BudgetSection {
                n_obs: 100,
                n_pde: 2000,
                n_ghost_per_interface: 100,
            },
            expert: ExpertSection {
                hidden: 4,
                width: 64,
                activation: "tanh".into(),
            },
            train: train(5000, 2000, 5e-3, 0.5, 1500, weights(10.0, 1.0)),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/kovasznay"),
        },
        "taylor_green" => RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.into(),
            benchmark: BenchmarkSection {
                solution: "taylor_green".into(),
                reynolds: 100.0,
                a: None,
                d: None,
                spatial: vec![[0.0, 2.0 * PI], [0.0, 2.0 * PI]],
                time: Some([0.0, 2.0]),
                grid: vec![41, 41],
                snapshots: 5,
            },
            decomposition: DecompositionSection {
                spatial_grid: vec![2, 1],
                time_splits: 1,
                delta_space: 0.5,
                delta_time: 0.0,
                anchor: vec![0.5 * PI, PI],
                ghost_probes: 200,
            },
            budget: BudgetSection {
                n_obs: 500,
                n_pde: 2000,
                n_ghost_per_interface: 200,
            },
            expert: ExpertSection {
                hidden: 3,
                width: 32,
                activation: "tanh".into(),
            },
            train: train(2000, 2000, 5e-3, 0.5, 1000, weights(10.0, 1.0)),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/taylor_green"),
        },
        "beltrami" => RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.into(),
            benchmark: BenchmarkSection {
                solution: "beltrami".into(),
                reynolds: 1.0,
                a: Some(1.0),
                d: Some(1.0),
                spatial: vec![[-1.0, 1.0]; 3],
                time: Some([0.0, 1.0]),
                grid: vec![17, 17, 17],
                snapshots: 5,
            },
            decomposition: DecompositionSection {
                spatial_grid: vec![2, 1, 1],
                time_splits: 1,
                delta_space: 0.2,
                delta_time: 0.0,
                anchor: vec![-0.5, 0.0, 0.0],
                ghost_probes: 200,
            },
            budget: BudgetSection {
                n_obs: 2000,
                n_pde: 4000,
                n_ghost_per_interface: 200,
            },
            expert: ExpertSection {
                hidden: 3,
                width: 32,
                activation: "tanh".into(),
            },
            train: train(2000, 2000, 5e-3, 0.5, 1000, weights(10.0, 1.0)),
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs/beltrami"),
        },
        other => {
            return Err(CliError::Validation(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Recursively overlays `top` on `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a config text. Missing fields come from the preset it names (`cavity2d` if none).
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Value = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let table = user
            .as_table()
            .ok_or_else(|| CliError::Validation("config must be a table".into()))?;
        match table.get("schema_version").map(|v| v.as_integer()) {
            None => {}
            Some(Some(v)) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(CliError::Validation(format!(
                    "unsupported schema_version {v:?}; this build reads version {SCHEMA_VERSION}"
                )))
            }
        }
        let name = match table.get("preset") {
            None => "cavity2d",
            Some(v) => v
                .as_str()
                .ok_or_else(|| CliError::Validation("`preset` must be a string".into()))?,
        };
        let mut merged = toml::Value::try_from(preset(name)?).expect("presets serialize");
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching the file system.
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |msg: String| Err(CliError::Validation(msg));
        self.solution_kind()?;
        let sd = self.spatial_dim();
        let steady = self.solution()?.regime().is_steady();
        if self.benchmark.spatial.len() != sd || self.benchmark.grid.len() != sd {
            return v(format!("benchmark `{}` needs {sd} spatial bounds and grid sizes", self.benchmark.solution));
        }
        if steady != self.benchmark.time.is_none() {
            return v(format!("benchmark `{}` {} a time interval", self.benchmark.solution, if steady { "takes no" } else { "needs" }));
        }
        if !steady && self.benchmark.snapshots == 0 {
            return v("snapshots must be at least 1".into());
        }
        if self.decomposition.spatial_grid.len() != sd || self.decomposition.anchor.len() != sd {
            return v(format!("decomposition needs {sd} spatial splits and anchor coordinates"));
        }
        if self.seeds.is_empty() {
            return v("at least one seed is required".into());
        }
        self.expert_config()?;
        self.train_config(self.seeds[0])
            .validate(self.decomposition.time_splits)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.partition()?;
        self.grid()?;
        Ok(())
    }

    pub fn solution_kind(&self) -> Result<SolutionKind, CliError> {
        SolutionKind::parse(&self.benchmark.solution).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown benchmark `{}` (expected kovasznay, taylor_green or beltrami)",
                self.benchmark.solution
            ))
        })
    }

    pub fn spatial_dim(&self) -> usize {
        match self.solution_kind() {
            Ok(SolutionKind::Beltrami3dUnsteady) => 3,
            _ => 2,
        }
    }

    pub fn solution(&self) -> Result<ManufacturedSolution, CliError> {
        let b = &self.benchmark;
        let out = match self.solution_kind()? {
            SolutionKind::Kovasznay2dSteady => ManufacturedSolution::kovasznay(b.reynolds),
            SolutionKind::TaylorGreen2dUnsteady => ManufacturedSolution::taylor_green(b.reynolds),
            SolutionKind::Beltrami3dUnsteady => {
                ManufacturedSolution::beltrami(b.a.unwrap_or(1.0), b.d.unwrap_or(1.0), b.reynolds)
            }
        };
        out.map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn times(&self) -> Vec<f64> {
        match self.benchmark.time {
            Some([lo, hi]) => snapshot_times(lo, hi, self.benchmark.snapshots),
            None => Vec::new(),
        }
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        let grid = GridSpec {
            bounds: self.benchmark.spatial.iter().map(|b| (b[0], b[1])).collect(),
            nodes: self.benchmark.grid.clone(),
            times: self.times(),
        };
        if grid.nodes.iter().any(|&n| n < 2) {
            return Err(CliError::Validation("reference grid needs at least 2 nodes per axis".into()));
        }
        if grid.bounds.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(CliError::Validation("every spatial interval needs lo < hi".into()));
        }
        Ok(grid)
    }

    pub fn domain(&self) -> Result<GlobalDomain, CliError> {
        let spatial = self.benchmark.spatial.iter().map(|b| (b[0], b[1])).collect();
        let time = self.benchmark.time.map(|t| (t[0], t[1]));
        GlobalDomain::new(spatial, time, self.solution()?.regime()).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn partition(&self) -> Result<Partition, CliError> {
        let d = &self.decomposition;
        partition(&self.domain()?, &d.spatial_grid, d.time_splits, d.delta_space, d.delta_time)
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn budget(&self) -> Budget {
        Budget {
            n_obs: self.budget.n_obs,
            n_pde: self.budget.n_pde,
            n_ghost_per_interface: self.budget.n_ghost_per_interface,
        }
    }

    pub fn expert_config(&self) -> Result<ExpertConfig, CliError> {
        let activation = Activation::parse(&self.expert.activation).map_err(|e| CliError::Validation(e.to_string()))?;
        let regime = self.solution()?.regime();
        ExpertConfig::new(regime.input_dim(), self.expert.hidden, self.expert.width, activation, regime.output_dim())
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        let w = &self.train.weights;
        let mut out = LossWeights::new(w.obs, w.pde, w.ghost_u, w.ghost_p);
        if let Some(t) = w.ghost_p_time {
            out.ghost_p_time = t;
        }
        out.velocity_components = w.velocity_components.clone();
        out
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_factor: t.lr_factor,
            lr_interval: t.lr_interval,
            comm_interval: t.comm_interval,
            clip_norm: t.clip_norm,
            seed,
            weights: self.loss_weights(),
            anchor: self.decomposition.anchor.clone(),
            gauge: t.gauge,
            exchange_timeout_s: t.exchange_timeout_s,
        }
    }

    /// Decomposition used for `P` ranks in scaling runs.
    pub fn with_procs(&self, procs: usize) -> Result<RunConfig, CliError> {
        let sd = self.spatial_dim();
        let (grid, m): (Vec<usize>, usize) = match (procs, sd) {
            (1, _) => (vec![1; sd], 1),
            (2, 2) => (vec![2, 1], 1),
            (4, 2) => (vec![2, 2], 1),
            (8, 2) => (vec![2, 2], 2),
            (2, 3) => (vec![2, 1, 1], 1),
            (4, 3) => (vec![2, 2, 1], 1),
            (8, 3) => (vec![2, 2, 2], 1),
            _ => {
                return Err(CliError::Validation(format!(
                    "no decomposition defined for P = {procs} (use 1, 2, 4 or 8)"
                )))
            }
        };
        if m > 1 && self.benchmark.time.is_none() {
            return Err(CliError::Validation("P = 8 in 2D bisects time, which a steady benchmark lacks".into()));
        }
        let mut out = self.clone();
        out.decomposition.spatial_grid = grid;
        out.decomposition.time_splits = m;
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn empty_file_is_the_cavity_preset() {
        assert_eq!(RunConfig::from_toml("").unwrap(), preset("cavity2d").unwrap());
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let cfg = RunConfig::from_toml("preset = \"cylinder2d\"\n[train]\nepochs = 10\n").unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.expert.width, 150);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nepocs = 3\n"),
            Err(CliError::Validation(_))
        ));
        assert!(matches!(RunConfig::from_toml("schema_version = 7\n"), Err(CliError::Validation(_))));
    }

    #[test]
    fn round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn scaling_decompositions() {
        let cfg = preset("cylinder2d").unwrap();
        let p8 = cfg.with_procs(8).unwrap();
        assert_eq!((p8.decomposition.spatial_grid.clone(), p8.decomposition.time_splits), (vec![2, 2], 2));
        let cfg = preset("cylinder3d").unwrap();
        assert_eq!(cfg.with_procs(4).unwrap().decomposition.spatial_grid, vec![2, 2, 1]);
        assert!(cfg.with_procs(3).is_err());
    }
}
