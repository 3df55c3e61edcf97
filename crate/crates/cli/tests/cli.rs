use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpinn_cli::commands::{self, checkpoint_path, evaluate_models, load_reference};
use dpinn_cli::config::RunConfig;
use dpinn_cli::manifest::{self, sha256_hex};

fn dpinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpinn")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let text = format!(
        r#"schema_version = 1
preset = "kovasznay"
seeds = [0, 1]
output = "{}"

[benchmark]
grid = [21, 21]

[budget]
n_obs = 100
n_pde = 200
n_ghost_per_interface = 20

[expert]
hidden = 2
width = 8

[train]
epochs = 5
batch_size = 100
"#,
        out.display()
    );
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_a_deterministic_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cavity");
    let o = dpinn(&["generate", "--preset", "cavity2d", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(out.join("reference.csv")).unwrap();
    let text = std::str::from_utf8(&first).unwrap();
    assert!(text.starts_with("t,x,y,u,v,p\n"));
    assert_eq!(text.lines().count(), 1 + 257 * 257);

    // refusing to overwrite is a validation failure
    assert_eq!(dpinn(&["generate", "--preset", "cavity2d", "--out", s(&out)]).status.code(), Some(1));
    let o = dpinn(&["generate", "--preset", "cavity2d", "--out", s(&out), "--force"]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(out.join("reference.csv")).unwrap());

    let m = manifest::load(&out).unwrap();
    assert_eq!(m.files["reference.csv"], sha256_hex(&first));
    assert!(m.files.contains_key("config.toml"));
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[benchmark]\nsolution = \"poiseuille\"\n").unwrap();
    assert_eq!(dpinn(&["generate", "--config", s(&bad)]).status.code(), Some(1));
    std::fs::write(&bad, "schema_version = 1\nbogus = 3\n").unwrap();
    assert_eq!(dpinn(&["generate", "--config", s(&bad)]).status.code(), Some(1));
    std::fs::write(&bad, "schema_version = 99\n").unwrap();
    assert_eq!(dpinn(&["config", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(dpinn(&["config", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(dpinn(&["train", "--preset", "kovasznay", "--procs", "3"]).status.code(), Some(1));
    assert_eq!(dpinn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dpinn(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_round_trips_through_the_printer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let o = dpinn(&["config", "--config", s(&cfg_path)]);
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();
    let again = RunConfig::from_toml(&printed).unwrap();
    assert_eq!(again, RunConfig::load(&cfg_path).unwrap());
    assert_eq!(again.expert.width, 8);
    assert_eq!(again.benchmark.reynolds, 40.0);
}

#[test]
fn train_evaluate_and_plot_small_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let out = cfg.output.clone();

    // training needs the reference first
    assert_eq!(dpinn(&["train", "--config", s(&cfg_path)]).status.code(), Some(1));
    assert!(dpinn(&["generate", "--config", s(&cfg_path)]).status.success());

    let o = dpinn(&["train", "--config", s(&cfg_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        assert!(checkpoint_path(&out, seed, 0).exists());
        assert!(!checkpoint_path(&out, seed, 1).exists());
        let loss = std::fs::read_to_string(commands::loss_path(&out, seed, 0)).unwrap();
        assert_eq!(loss.lines().count(), 6);
    }
    assert_eq!(dpinn(&["train", "--config", s(&cfg_path)]).status.code(), Some(1));

    let o = dpinn(&["evaluate", "--config", s(&cfg_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("variable,seed,P,decomposition,relative_l2\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "2");
        assert!(cols[5].parse::<f64>().unwrap() >= 0.0);
    }
    let m = manifest::load(&out).unwrap();
    for f in ["metrics.csv", "summary.csv", "snapshots.csv", "interface_jumps.csv", "seed_0/rank_0.ckpt"] {
        assert_eq!(m.files[f], sha256_hex(&std::fs::read(out.join(f)).unwrap()), "{f}");
    }

    let o = dpinn(&["plot", "--config", s(&cfg_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("plots/loss_seed_1.svg").exists());
    assert!(out.join("plots/error_over_time.svg").exists());
}

#[test]
fn four_ranks_write_four_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let out = dir.path().join("p4");
    let args = ["--config", s(&cfg_path), "--procs", "4", "--seeds", "3", "--out", s(&out), "--epochs", "3"];
    assert!(dpinn(&[&["generate"][..], &args].concat()).status.success());
    let o = dpinn(&[&["train"][..], &args].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for rank in 0..4 {
        assert!(checkpoint_path(&out, 3, rank).exists());
    }
    assert!(!checkpoint_path(&out, 3, 4).exists());

    let o = dpinn(&[&["evaluate"][..], &args].concat());
    assert!(o.status.success());
    let jumps = std::fs::read_to_string(out.join("interface_jumps.csv")).unwrap();
    assert_eq!(jumps.lines().count(), 1 + 4);
    // one seed: no spread
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(',')));

    std::fs::remove_file(checkpoint_path(&out, 3, 2)).unwrap();
    let o = dpinn(&[&["evaluate"][..], &args].concat());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed 3 rank 2"));
}

#[test]
fn exact_models_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&small_config(dir.path())).unwrap();
    for procs in [1, 4] {
        cfg = cfg.with_procs(procs).unwrap();
        cfg.output = dir.path().join(format!("exact{procs}"));
        commands::generate(&cfg, false).unwrap();
        let reference = load_reference(&cfg).unwrap();
        let partition = cfg.partition().unwrap();
        let experts: Vec<_> = (0..partition.len()).map(|_| cfg.solution().unwrap()).collect();
        let summary = evaluate_models(&cfg, &partition, &[(0, experts)], &reference).unwrap();
        for (name, (mean, std)) in &summary.aggregate {
            assert!(*mean <= 1e-10, "{name}: {mean:e}");
            assert!(std.is_none());
        }
        assert!(summary.seeds[0].jumps.iter().all(|j| j.max_du < 1e-2));
    }
}

#[test]
fn scaling_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    assert!(dpinn(&["generate", "--config", s(&cfg_path)]).status.success());
    let out = RunConfig::load(&cfg_path).unwrap().output;

    let o = dpinn(&["scaling", "--config", s(&cfg_path), "--procs", "1", "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("scaling.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("P,decomposition,wall_time_s,speedup_vs_prev,vel_l2,pres_l2"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[3], "");
    assert_eq!(dpinn(&["scaling", "--config", s(&cfg_path), "--procs", "1"]).status.code(), Some(1));

    let o = dpinn(&["scaling", "--config", s(&cfg_path), "--procs", "1,2", "--epochs", "2", "--force"]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(out.join("scaling.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0], rows[1][1]), ("1", "2", "2x1"));
    assert!(rows[1][3].parse::<f64>().unwrap() > 0.0);
}
