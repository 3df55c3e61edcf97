//! SVG figures drawn from the CSV outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::commands::{loss_path, SNAPSHOTS_FILE};
use crate::config::RunConfig;
use crate::CliError;

const LOSS_COLUMNS: [&str; 5] = ["loss_obs", "loss_pde", "loss_gh_u", "loss_gh_p_space", "loss_gh_p_time"];

const COLORS: [RGBColor; 6] = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn draw_err<E: std::fmt::Debug>(e: E) -> CliError {
    CliError::Runtime(format!("plot: {e:?}"))
}

fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = r.headers().map_err(draw_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(draw_err)?;
        rows.push(rec.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect());
    }
    Ok((headers, rows))
}

/// Draws positive-valued series on a log-scaled y axis.
fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &Series) -> Result<(), CliError> {
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|(_, y)| *y > 0.0 && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(CliError::Validation(format!("nothing positive to plot for {}", path.display())));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 * 10.0;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, (y0 * 0.8..y1 * 1.25).log_scale())
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(draw_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let data: Vec<(f64, f64)> = s.iter().copied().filter(|(_, y)| *y > 0.0 && y.is_finite()).collect();
        if data.is_empty() {
            continue;
        }
        chart
            .draw_series(LineSeries::new(data, color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Loss components per seed (summed over ranks) and, when evaluated, error over time.
pub fn plot(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ranks = cfg.partition()?.len();
    let dir = cfg.output.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let mut sums: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for rank in 0..ranks {
            let path = loss_path(&cfg.output, seed, rank);
            if !path.exists() {
                return Err(CliError::Validation(format!("missing loss history for seed {seed} rank {rank}")));
            }
            let (headers, rows) = read_columns(&path)?;
            for name in LOSS_COLUMNS {
                let Some(c) = headers.iter().position(|h| h == name) else { continue };
                let acc = sums.entry(name).or_default();
                for (i, row) in rows.iter().enumerate() {
                    if acc.len() <= i {
                        acc.push((row[0], 0.0));
                    }
                    acc[i].1 += row[c];
                }
            }
        }
        let series: Series = sums.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let path = dir.join(format!("loss_seed_{seed}.svg"));
        line_chart(&path, &format!("Loss components, seed {seed}"), "epoch", "loss", &series)?;
        written.push(path);
    }

    let snaps = cfg.output.join(SNAPSHOTS_FILE);
    if snaps.exists() {
        let mut r = csv::Reader::from_path(&snaps).map_err(draw_err)?;
        // mean over seeds per (variable, t)
        let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(draw_err)?;
            let t: f64 = rec[1].parse().map_err(draw_err)?;
            let e: f64 = rec[3].parse().map_err(draw_err)?;
            let slot = acc.entry(rec[2].to_string()).or_default().entry(t.to_bits()).or_insert((t, 0.0, 0));
            slot.1 += e;
            slot.2 += 1;
        }
        let series: Series = acc
            .into_iter()
            .map(|(name, by_t)| {
                let mut pts: Vec<(f64, f64)> = by_t.into_values().map(|(t, s, n)| (t, s / n as f64)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (name, pts)
            })
            .collect();
        let path = dir.join("error_over_time.svg");
        line_chart(&path, "Relative L2 error over time", "t", "relative L2", &series)?;
        written.push(path);
    }
    Ok(written)
}
