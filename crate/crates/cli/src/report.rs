//! `report`: SVG plots and a metrics table from trace files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use tubeform::sim::metrics::{follower_count, metrics, Metrics};
use tubeform::sim::trace::SimTrace;

use crate::svg::{Circle, Figure, Series};
use crate::Failure;

struct Loaded {
    label: String,
    trace: SimTrace,
    metrics: Metrics,
}

/// `run/trace.csv` is labelled `run`; other files by their stem.
fn label_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    if stem == "trace" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

fn unique_labels(paths: &[PathBuf]) -> Vec<String> {
    let raw: Vec<String> = paths.iter().map(|p| label_for(p)).collect();
    raw.iter()
        .enumerate()
        .map(|(k, l)| {
            if raw.iter().filter(|o| *o == l).count() > 1 {
                format!("{l}-{}", k + 1)
            } else {
                l.clone()
            }
        })
        .collect()
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn pairs(trace: &SimTrace, x: &str, y: &str) -> Option<Vec<(f64, f64)>> {
    let xs = trace.column(x)?;
    let ys = trace.column(y)?;
    Some(xs.into_iter().zip(ys).collect())
}

fn axes(trace: &SimTrace) -> usize {
    (1..).take_while(|a| trace.index(&format!("fe1_{a}")).is_some()).count()
}

fn obstacle_circles(path: Option<&Path>) -> Result<Vec<Circle>, Failure> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = tubeform::scenario::ScenarioConfig::from_toml_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg
        .obstacles()
        .iter()
        .filter(|o| o.center.len() >= 2)
        .map(|o| Circle {
            cx: o.center[0],
            cy: o.center[1],
            r: o.effective_radius(),
        })
        .collect())
}

fn trajectories(run: &Loaded, circles: &[Circle]) -> Figure {
    let n = run.metrics.followers;
    let planar = run.trace.index("x0_1_2").is_some();
    let mut series = Vec::new();
    for i in 0..=n {
        let name = if i == 0 { "leader".to_string() } else { format!("agent {i}") };
        let points = if planar {
            pairs(&run.trace, &format!("x{i}_1_1"), &format!("x{i}_1_2"))
        } else {
            pairs(&run.trace, "t", &format!("x{i}_1_1"))
        };
        if let Some(points) = points {
            let s = Series::new(name, points, i);
            series.push(if i == 0 { s.dashed() } else { s });
        }
    }
    Figure {
        title: format!("Trajectories ({})", run.label),
        xlabel: if planar { "x".into() } else { "t (s)".into() },
        ylabel: if planar { "y".into() } else { "x".into() },
        series,
        circles: if planar { circles.to_vec() } else { Vec::new() },
        equal_aspect: planar,
        ..Figure::default()
    }
}

fn formation_errors(run: &Loaded, axis: usize) -> Figure {
    let series = (1..=run.metrics.followers)
        .filter_map(|i| pairs(&run.trace, "t", &format!("fe{i}_{axis}")).map(|p| Series::new(format!("agent {i}"), p, i)))
        .collect();
    Figure {
        title: format!("Formation error, axis {axis} ({})", run.label),
        xlabel: "t (s)".into(),
        ylabel: "offset error".into(),
        series,
        hlines: vec![0.0],
        ..Figure::default()
    }
}

fn clearance(run: &Loaded) -> Figure {
    let mut series = Vec::new();
    if let Some(p) = pairs(&run.trace, "t", "clear_obs") {
        series.push(Series::new("obstacles", p, 0));
    }
    if let Some(p) = pairs(&run.trace, "t", "clear_pair") {
        series.push(Series::new("pairwise", p, 1));
    }
    Figure {
        title: format!("Minimum clearance ({})", run.label),
        xlabel: "t (s)".into(),
        ylabel: "clearance".into(),
        series,
        hlines: vec![0.0],
        ..Figure::default()
    }
}

fn occupancy(run: &Loaded) -> Figure {
    let series = (0..=run.metrics.followers)
        .filter_map(|i| {
            let name = if i == 0 { "leader".to_string() } else { format!("agent {i}") };
            pairs(&run.trace, "t", &format!("occ{i}")).map(|p| Series::new(name, p, i))
        })
        .collect();
    Figure {
        title: format!("Tube occupancy ({})", run.label),
        xlabel: "t (s)".into(),
        ylabel: "V / r^2".into(),
        series,
        hlines: vec![1.0],
        ..Figure::default()
    }
}

/// Root-mean-square over followers of one formation-error axis.
fn rms_axis(run: &Loaded, axis: usize) -> Option<Vec<(f64, f64)>> {
    let t = run.trace.column("t")?;
    let cols: Vec<Vec<f64>> = (1..=run.metrics.followers)
        .map(|i| run.trace.column(&format!("fe{i}_{axis}")))
        .collect::<Option<_>>()?;
    let n = cols.len().max(1) as f64;
    Some(
        t.iter()
            .enumerate()
            .map(|(k, &s)| (s, (cols.iter().map(|c| c[k] * c[k]).sum::<f64>() / n).sqrt()))
            .collect(),
    )
}

fn min_clearance(run: &Loaded) -> Option<Vec<(f64, f64)>> {
    let t = run.trace.column("t")?;
    let obs = run.trace.column("clear_obs");
    let pair = run.trace.column("clear_pair");
    if obs.is_none() && pair.is_none() {
        return None;
    }
    Some(
        t.iter()
            .enumerate()
            .map(|(k, &s)| {
                let a = obs.as_ref().map_or(f64::INFINITY, |c| c[k]);
                let b = pair.as_ref().map_or(f64::INFINITY, |c| c[k]);
                (s, a.min(b))
            })
            .collect(),
    )
}

fn comparisons(runs: &[Loaded]) -> Vec<(String, Figure)> {
    let mut out = Vec::new();
    let stacked = runs
        .iter()
        .enumerate()
        .filter_map(|(k, r)| pairs(&r.trace, "t", "stacked_err").map(|p| Series::new(r.label.clone(), p, k)))
        .collect();
    out.push((
        "comparison_stacked_error.svg".to_string(),
        Figure {
            title: "Stacked formation error".into(),
            xlabel: "t (s)".into(),
            ylabel: "norm".into(),
            series: stacked,
            ..Figure::default()
        },
    ));
    let d = runs.iter().map(|r| axes(&r.trace)).min().unwrap_or(0);
    for axis in 1..=d {
        let series = runs
            .iter()
            .enumerate()
            .filter_map(|(k, r)| rms_axis(r, axis).map(|p| Series::new(r.label.clone(), p, k)))
            .collect();
        out.push((
            format!("comparison_formation_error_axis{axis}.svg"),
            Figure {
                title: format!("RMS formation error, axis {axis}"),
                xlabel: "t (s)".into(),
                ylabel: "offset error".into(),
                series,
                ..Figure::default()
            },
        ));
    }
    let clear: Vec<Series> = runs
        .iter()
        .enumerate()
        .filter_map(|(k, r)| min_clearance(r).map(|p| Series::new(r.label.clone(), p, k)))
        .collect();
    if !clear.is_empty() {
        out.push((
            "comparison_clearance.svg".to_string(),
            Figure {
                title: "Minimum clearance".into(),
                xlabel: "t (s)".into(),
                ylabel: "clearance".into(),
                series: clear,
                hlines: vec![0.0],
                ..Figure::default()
            },
        ));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |c| format!("{c:.4e}"))
}

pub fn metrics_table(runs: &[(String, Metrics)]) -> String {
    let mut s = String::from(
        "| trace | duration (s) | min obstacle clearance | min pairwise clearance | max occupancy | final mean stacked error | max stacked error | final mean formation error |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for (label, m) in runs {
        let occ = m.max_occupancy.iter().copied().fold(0.0, f64::max);
        let fe = if m.final_mean_formation_error.is_empty() {
            0.0
        } else {
            m.final_mean_formation_error.iter().sum::<f64>() / m.final_mean_formation_error.len() as f64
        };
        let _ = writeln!(
            s,
            "| {label} | {:.3} | {} | {} | {occ:.4e} | {:.4e} | {:.4e} | {fe:.4e} |",
            m.duration,
            opt(m.min_obstacle_clearance),
            opt(m.min_pairwise_clearance),
            m.final_mean_stacked_error,
            m.max_stacked_error,
        );
    }
    s
}

pub fn cmd_report(paths: &[PathBuf], out: &Path, scenario: Option<&Path>) -> Result<(), Failure> {
    let labels = unique_labels(paths);
    let mut runs = Vec::with_capacity(paths.len());
    for (path, label) in paths.iter().zip(labels) {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let trace = SimTrace::read_csv(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        if follower_count(&trace) == 0 {
            return Err(anyhow::anyhow!("{}: trace has no follower columns", path.display()).into());
        }
        let metrics = metrics(&trace).with_context(|| format!("summarizing {}", path.display()))?;
        runs.push(Loaded { label, trace, metrics });
    }
    let circles = obstacle_circles(scenario)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut figures: Vec<(String, Figure)> = Vec::new();
    for run in &runs {
        let prefix = if runs.len() == 1 { String::new() } else { format!("{}_", file_label(&run.label)) };
        figures.push((format!("{prefix}trajectories.svg"), trajectories(run, &circles)));
        for axis in 1..=axes(&run.trace) {
            figures.push((format!("{prefix}formation_error_axis{axis}.svg"), formation_errors(run, axis)));
        }
        figures.push((format!("{prefix}clearance.svg"), clearance(run)));
        figures.push((format!("{prefix}occupancy.svg"), occupancy(run)));
    }
    if runs.len() > 1 {
        figures.extend(comparisons(&runs));
    }
    for (name, fig) in &figures {
        let path = out.join(name);
        fs::write(&path, fig.render()).with_context(|| format!("writing {}", path.display()))?;
    }
    let table = metrics_table(&runs.iter().map(|r| (r.label.clone(), r.metrics.clone())).collect::<Vec<_>>());
    fs::write(out.join("metrics.md"), &table)?;
    print!("{table}");
    println!("{} plots written to {}", figures.len(), out.display());
    Ok(())
}
