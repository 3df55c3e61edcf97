use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dpinn_core::benchmarks::make_reference_grid;
use dpinn_core::decomposition::{identify_masters, read_reference_csv, ObservationSet, Partition};
use dpinn_core::evaluation::{
    aggregate_series, align_pressure, error_over_time, interface_jump, mean_std, stitch, FieldModel,
    InterfaceJump, SnapshotError,
};
use dpinn_core::network::{read_checkpoint, write_checkpoint, ExpertParams};
use dpinn_core::runtime::{setup_ranks, train as run_training, write_loss_history, TraceOptions, TrainOutput};
use ndarray::{concatenate, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{manifest, CliError};

pub const REFERENCE_FILE: &str = "reference.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SNAPSHOTS_FILE: &str = "snapshots.csv";
pub const JUMPS_FILE: &str = "interface_jumps.csv";
pub const SCALING_FILE: &str = "scaling.csv";

/// Fixed stream for observation placement, shared by every seed.
const OBSERVATION_SEED: u64 = 0x0b5e_7a11;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn checkpoint_path(out: &Path, seed: u64, rank: usize) -> PathBuf {
    seed_dir(out, seed).join(format!("rank_{rank}.ckpt"))
}

pub fn loss_path(out: &Path, seed: u64, rank: usize) -> PathBuf {
    seed_dir(out, seed).join(format!("loss_rank_{rank}.csv"))
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn write_config(cfg: &RunConfig) -> Result<String, CliError> {
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(CONFIG_FILE.to_string())
}

/// Writes the reference grid of the configured solution. Returns the file path.
pub fn generate(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let path = cfg.output.join(REFERENCE_FILE);
    if path.exists() && !force {
        return Err(CliError::Validation(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    let config_file = write_config(cfg)?;
    let solution = cfg.solution()?;
    make_reference_grid(&solution, &cfg.grid()?, &path).map_err(runtime)?;
    manifest::record(&cfg.output, cfg, &[config_file, REFERENCE_FILE.to_string()], &[])?;
    Ok(path)
}

/// Reads the generated reference and checks it matches the configured grid.
pub fn load_reference(cfg: &RunConfig) -> Result<ObservationSet, CliError> {
    let path = cfg.output.join(REFERENCE_FILE);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{} not found; run `generate` first",
            path.display()
        )));
    }
    let regime = cfg.solution()?.regime();
    let reference = read_reference_csv(&path, regime).map_err(|e| CliError::Validation(e.to_string()))?;
    let snapshots = if regime.is_steady() { 1 } else { cfg.benchmark.snapshots };
    let expected: usize = cfg.benchmark.grid.iter().product::<usize>() * snapshots;
    if reference.len() != expected {
        return Err(CliError::Validation(format!(
            "{} has {} rows but the config describes {expected}; regenerate it",
            path.display(),
            reference.len()
        )));
    }
    Ok(reference)
}

/// Row indices of a `k`-per-axis lattice inside each snapshot of the reference grid, when
/// `n_obs` allows one; otherwise a fixed uniform random subset.
pub fn observation_rows(cfg: &RunConfig, total_rows: usize) -> Result<Vec<usize>, CliError> {
    let n_obs = cfg.budget.n_obs;
    if n_obs > total_rows {
        return Err(CliError::Validation(format!(
            "n_obs = {n_obs} exceeds the {total_rows} reference points"
        )));
    }
    let nodes = &cfg.benchmark.grid;
    let per_snapshot: usize = nodes.iter().product();
    let snapshots = total_rows / per_snapshot;
    let sd = nodes.len();
    if n_obs % snapshots == 0 {
        let per = n_obs / snapshots;
        let k = (per as f64).powf(1.0 / sd as f64).round() as usize;
        if k >= 1 && k.pow(sd as u32) == per && nodes.iter().all(|&n| k <= n) {
            let picks: Vec<Vec<usize>> = nodes
                .iter()
                .map(|&n| {
                    if k == 1 {
                        vec![(n - 1) / 2]
                    } else {
                        (0..k).map(|j| ((j * (n - 1)) as f64 / (k - 1) as f64).round() as usize).collect()
                    }
                })
                .collect();
            let mut rows = Vec::with_capacity(n_obs);
            for snap in 0..snapshots {
                for flat in 0..per {
                    let mut rem = flat;
                    let mut idx = 0;
                    let mut stride = 1;
                    for axis in (0..sd).rev() {
                        idx += picks[axis][rem % k] * stride;
                        rem /= k;
                        stride *= nodes[axis];
                    }
                    rows.push(snap * per_snapshot + idx);
                }
            }
            return Ok(rows);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(OBSERVATION_SEED);
    let mut rows = sample(&mut rng, total_rows, n_obs).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

pub fn select_observations(cfg: &RunConfig, reference: &ObservationSet) -> Result<ObservationSet, CliError> {
    let rows = observation_rows(cfg, reference.len())?;
    let mut obs = reference.select(&rows);
    obs.pressure = None;
    Ok(obs)
}

/// Trains one seed and writes its checkpoints and loss histories under `seed_<s>/`.
pub fn train_seed(
    cfg: &RunConfig,
    observations: &ObservationSet,
    seed: u64,
) -> Result<(TrainOutput, Vec<String>), CliError> {
    let partition = cfg.partition()?;
    let expert = cfg.expert_config()?;
    let config = cfg.train_config(seed);
    let setup = setup_ranks(&partition, &expert, &cfg.budget(), observations, &config)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let out = run_training(&setup, &config, TraceOptions::default()).map_err(runtime)?;
    let dir = seed_dir(&cfg.output, seed);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (rank, (params, history)) in out.experts.iter().zip(&out.histories).enumerate() {
        let ckpt = checkpoint_path(&cfg.output, seed, rank);
        let mut w = BufWriter::new(File::create(&ckpt)?);
        write_checkpoint(params, &mut w).map_err(runtime)?;
        std::io::Write::flush(&mut w)?;
        let loss = loss_path(&cfg.output, seed, rank);
        write_loss_history(&loss, history).map_err(runtime)?;
        files.push(rel(&cfg.output, &ckpt));
        files.push(rel(&cfg.output, &loss));
    }
    let timing = dir.join("epoch_wall_time.csv");
    let mut w = csv::Writer::from_path(&timing).map_err(runtime)?;
    w.write_record(["epoch", "wall_time_s"]).map_err(runtime)?;
    for (e, t) in out.epoch_wall_s.iter().enumerate() {
        w.write_record([e.to_string(), format!("{t:?}")]).map_err(runtime)?;
    }
    w.flush()?;
    files.push(rel(&cfg.output, &timing));
    Ok((out, files))
}

/// Per-seed training summary.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub total_wall_s: f64,
    pub median_epoch_s: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<Vec<SeedRun>, CliError> {
    cfg.validate()?;
    let reference = load_reference(cfg)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output, seed);
        if dir.exists() && !force {
            return Err(CliError::Validation(format!(
                "{} exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    let observations = select_observations(cfg, &reference)?;
    let mut files = vec![write_config(cfg)?];
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output, seed);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let (out, written) = train_seed(cfg, &observations, seed)?;
        files.extend(written);
        runs.push(SeedRun {
            seed,
            total_wall_s: out.total_wall_s,
            median_epoch_s: median(&out.epoch_wall_s),
        });
    }
    manifest::record(&cfg.output, cfg, &files, &[])?;
    Ok(runs)
}

/// Loads every rank's checkpoint of one seed.
pub fn load_experts(cfg: &RunConfig, seed: u64, ranks: usize) -> Result<Vec<ExpertParams>, CliError> {
    let missing: Vec<String> = (0..ranks)
        .filter(|&r| !checkpoint_path(&cfg.output, seed, r).exists())
        .map(|r| format!("seed {seed} rank {r}"))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Validation(format!("missing checkpoints: {}", missing.join(", "))));
    }
    (0..ranks)
        .map(|r| {
            let path = checkpoint_path(&cfg.output, seed, r);
            read_checkpoint(BufReader::new(File::open(&path)?))
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Errors of one seed's reconstruction.
#[derive(Clone, Debug)]
pub struct SeedEvaluation {
    pub seed: u64,
    /// All-points relative L² per variable (`u`, `v`[, `w`], `vel`, `p`).
    pub errors: BTreeMap<String, f64>,
    pub series: Vec<SnapshotError>,
    pub jumps: Vec<InterfaceJump>,
}

#[derive(Clone, Debug)]
pub struct EvaluationSummary {
    pub procs: usize,
    pub decomposition: String,
    pub seeds: Vec<SeedEvaluation>,
    /// Mean and (for ≥ 2 seeds) sample standard deviation per variable.
    pub aggregate: BTreeMap<String, (f64, Option<f64>)>,
}

/// Stitches, aligns pressure and measures errors for each seed's experts.
pub fn evaluate_models<M: FieldModel>(
    cfg: &RunConfig,
    partition: &Partition,
    runs: &[(u64, Vec<M>)],
    reference: &ObservationSet,
) -> Result<EvaluationSummary, CliError> {
    let regime = partition.domain.regime;
    let anchor = &cfg.decomposition.anchor;
    let masters: BTreeSet<usize> = identify_masters(partition, anchor).map_err(|e| CliError::Validation(e.to_string()))?;
    let p_ref = reference
        .pressure
        .as_ref()
        .ok_or_else(|| CliError::Validation("reference has no pressure column".into()))?;
    let mut seeds = Vec::new();
    for (seed, experts) in runs {
        let stitched = stitch(experts, partition, reference.points.view()).map_err(runtime)?;
        let aligned = align_pressure(&stitched, p_ref.view(), experts, partition, &masters, anchor).map_err(runtime)?;
        let pred = concatenate(
            Axis(1),
            &[stitched.velocity.view(), aligned.pred.view().insert_axis(Axis(1))],
        )
        .expect("matching rows");
        let refv = concatenate(
            Axis(1),
            &[reference.velocity.view(), aligned.reference.view().insert_axis(Axis(1))],
        )
        .expect("matching rows");
        let series = error_over_time(reference.points.view(), pred.view(), refv.view(), regime.is_steady())
            .map_err(runtime)?;
        let mut errors = BTreeMap::new();
        for name in series.first().map(|s| s.errors.keys().cloned().collect::<Vec<_>>()).unwrap_or_default() {
            let e = aggregate_series(&series, &name).ok_or_else(|| runtime(format!("no norms for {name}")))?;
            errors.insert(name, e);
        }
        let jumps = interface_jump(experts, partition, cfg.decomposition.ghost_probes, 1e-4, *seed).map_err(runtime)?;
        seeds.push(SeedEvaluation {
            seed: *seed,
            errors,
            series,
            jumps,
        });
    }
    let mut aggregate = BTreeMap::new();
    if let Some(first) = seeds.first() {
        for name in first.errors.keys() {
            let values: Vec<f64> = seeds.iter().map(|s| s.errors[name]).collect();
            aggregate.insert(name.clone(), mean_std(&values));
        }
    }
    Ok(EvaluationSummary {
        procs: partition.len(),
        decomposition: partition.label(),
        seeds,
        aggregate,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes metrics, summary, per-snapshot and interface-jump CSVs; returns their names.
pub fn write_evaluation(out: &Path, summary: &EvaluationSummary) -> Result<Vec<String>, CliError> {
    let io = |e: csv::Error| runtime(e);
    let mut w = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(io)?;
    w.write_record(["variable", "seed", "P", "decomposition", "relative_l2"]).map_err(io)?;
    for s in &summary.seeds {
        for (name, e) in &s.errors {
            w.write_record([
                name.clone(),
                s.seed.to_string(),
                summary.procs.to_string(),
                summary.decomposition.clone(),
                format!("{e:?}"),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE)).map_err(io)?;
    w.write_record(["variable", "P", "decomposition", "seeds", "mean", "std"]).map_err(io)?;
    for (name, (mean, std)) in &summary.aggregate {
        w.write_record([
            name.clone(),
            summary.procs.to_string(),
            summary.decomposition.clone(),
            summary.seeds.len().to_string(),
            format!("{mean:?}"),
            fmt_opt(*std),
        ])
        .map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join(SNAPSHOTS_FILE)).map_err(io)?;
    w.write_record(["seed", "t", "variable", "relative_l2"]).map_err(io)?;
    for s in &summary.seeds {
        for snap in &s.series {
            for (name, e) in &snap.errors {
                w.write_record([s.seed.to_string(), format!("{:?}", snap.t), name.clone(), format!("{e:?}")])
                    .map_err(io)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join(JUMPS_FILE)).map_err(io)?;
    w.write_record(["seed", "lower", "upper", "kind", "axis", "max_du", "max_dp"]).map_err(io)?;
    for s in &summary.seeds {
        for j in &s.jumps {
            w.write_record([
                s.seed.to_string(),
                j.lower.to_string(),
                j.upper.to_string(),
                format!("{:?}", j.kind).to_lowercase(),
                j.axis.to_string(),
                format!("{:?}", j.max_du),
                format!("{:?}", j.max_dp),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok([METRICS_FILE, SUMMARY_FILE, SNAPSHOTS_FILE, JUMPS_FILE].map(String::from).to_vec())
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvaluationSummary, CliError> {
    cfg.validate()?;
    let reference = load_reference(cfg)?;
    let partition = cfg.partition()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| Ok((seed, load_experts(cfg, seed, partition.len())?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let summary = evaluate_models(cfg, &partition, &runs, &reference)?;
    let files = write_evaluation(&cfg.output, &summary)?;
    manifest::record(&cfg.output, cfg, &files, &[])?;
    Ok(summary)
}

/// One row of the strong-scaling table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub procs: usize,
    pub decomposition: String,
    /// Median epoch wall time.
    pub wall_time_s: f64,
    pub speedup_vs_prev: Option<f64>,
    pub vel_l2: f64,
    pub pres_l2: f64,
}

/// Trains the first configured seed at each `P` with fixed global budgets.
pub fn scaling(cfg: &RunConfig, procs: &[usize], force: bool) -> Result<(Vec<ScalingRow>, Vec<String>), CliError> {
    cfg.validate()?;
    if procs.is_empty() {
        return Err(CliError::Validation("empty P list".into()));
    }
    let configs = procs
        .iter()
        .map(|&p| {
            let mut c = cfg.with_procs(p)?;
            c.output = cfg.output.join("scaling").join(format!("P{p}"));
            c.seeds = vec![cfg.seeds[0]];
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let table = cfg.output.join(SCALING_FILE);
    if table.exists() && !force {
        return Err(CliError::Validation(format!("{} exists; pass --force to overwrite", table.display())));
    }
    let reference = load_reference(cfg)?;
    let observations = select_observations(cfg, &reference)?;

    let mut warnings = Vec::new();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let max_p = procs.iter().copied().max().unwrap_or(1);
    if cores < max_p {
        let msg = format!(
            "only {cores} hardware threads for up to P = {max_p} ranks; wall times are not a strong-scaling measurement"
        );
        eprintln!("warning: {msg}");
        warnings.push(msg);
    }

    let mut rows: Vec<ScalingRow> = Vec::new();
    for c in &configs {
        if c.output.exists() {
            fs::remove_dir_all(&c.output)?;
        }
        fs::create_dir_all(&c.output)?;
        let (out, _) = train_seed(c, &observations, c.seeds[0])?;
        let partition = c.partition()?;
        let summary = evaluate_models(c, &partition, &[(c.seeds[0], out.experts)], &reference)?;
        let errs = &summary.seeds[0].errors;
        let wall = median(&out.epoch_wall_s);
        rows.push(ScalingRow {
            procs: partition.len(),
            decomposition: partition.label(),
            wall_time_s: wall,
            speedup_vs_prev: rows.last().map(|prev| prev.wall_time_s / wall),
            vel_l2: errs["vel"],
            pres_l2: errs["p"],
        });
    }
    write_scaling(&table, &rows)?;
    let mut files = vec![write_config(cfg)?, SCALING_FILE.to_string()];
    files.sort();
    manifest::record(&cfg.output, cfg, &files, &warnings)?;
    Ok((rows, warnings))
}

pub fn write_scaling(path: &Path, rows: &[ScalingRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record(["P", "decomposition", "wall_time_s", "speedup_vs_prev", "vel_l2", "pres_l2"])
        .map_err(runtime)?;
    for r in rows {
        w.write_record([
            r.procs.to_string(),
            r.decomposition.clone(),
            format!("{:?}", r.wall_time_s),
            fmt_opt(r.speedup_vs_prev),
            format!("{:?}", r.vel_l2),
            format!("{:?}", r.pres_l2),
        ])
        .map_err(runtime)?;
    }
    w.flush()?;
    Ok(())
}
