use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tubeform"));
    cmd.env("TUBEFORM_THREADS", "2");
    cmd
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn certify_shipped(dir: &Path) -> PathBuf {
    let cert = dir.join("cert.toml");
    let out = run(&["certify", path(&scenario("two_obstacles.toml")), "-o", path(&cert)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    cert
}

/// Writes an edited copy of the shipped scenario.
fn edited(dir: &Path, name: &str, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let text = fs::read_to_string(scenario("two_obstacles.toml")).unwrap();
    let mut table: toml::Table = text.parse().unwrap();
    edit(&mut table);
    let p = dir.join(name);
    fs::write(&p, toml::to_string(&table).unwrap()).unwrap();
    p
}

fn assert_well_formed(svg: &Path) -> String {
    let text = fs::read_to_string(svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", svg.display()));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    text
}

#[test]
fn certify_shipped_scenario() {
    let dir = TempDir::new().unwrap();
    let cert = certify_shipped(dir.path());
    let table: toml::Table = fs::read_to_string(cert).unwrap().parse().unwrap();
    let global = table["global"].as_table().unwrap();
    assert!(global["sv_min"].as_float().unwrap() > 0.0);
    assert!(global["bound"].as_float().unwrap() > 0.0);
    let followers = table["followers"].as_array().unwrap();
    assert_eq!(followers.len(), 5);
    for f in followers {
        let f = f.as_table().unwrap();
        for key in ["r", "r_ball", "w_eff", "input_margin", "v_max"] {
            assert!(f[key].as_float().unwrap() > 0.0, "{key}");
        }
    }
}

#[test]
fn unrooted_graph_exits_2() {
    let dir = TempDir::new().unwrap();
    let bad = edited(dir.path(), "lonely.toml", |t| {
        let g = t["graph"].as_table_mut().unwrap();
        g.insert("b0".into(), toml::Value::try_from(vec![0.0; 5]).unwrap());
        g.insert("adjacency".into(), toml::Value::try_from(vec![vec![0.0; 5]; 5]).unwrap());
    });
    let out = run(&["certify", path(&bad), "-o", path(&dir.path().join("c.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("GraphNotRooted"));
}

#[test]
fn untuned_leader_tube_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "certify",
        path(&scenario("two_obstacles_untuned.toml")),
        "-o",
        path(&dir.path().join("c.toml")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("InfeasibleLeaderTube"));
}

#[test]
fn parse_error_reports_location() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n[dims\nn = 3\n").unwrap();
    let out = run(&["certify", path(&bad), "-o", path(&dir.path().join("c.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn short_run_and_stale_certificate() {
    let dir = TempDir::new().unwrap();
    let cert = certify_shipped(dir.path());
    let out_dir = dir.path().join("short");
    let out = run(&[
        "run",
        path(&scenario("two_obstacles.toml")),
        "--cert",
        path(&cert),
        "-o",
        path(&out_dir),
        "--t-end",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    // Five sampling steps of ten fine steps each, plus the final state.
    assert_eq!(rows.len(), 51);
    let summary: toml::Table = fs::read_to_string(out_dir.join("summary.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["safe"].as_bool(), Some(true));

    let renamed = edited(dir.path(), "renamed.toml", |t| {
        t.insert("name".into(), toml::Value::String("something-else".into()));
    });
    let out = run(&["run", path(&renamed), "--cert", path(&cert), "-o", path(&dir.path().join("stale"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("hash mismatch"));
}

#[test]
fn seed_override_keeps_hash_binding() {
    let dir = TempDir::new().unwrap();
    let cert = certify_shipped(dir.path());
    let out = run(&[
        "run",
        path(&scenario("two_obstacles.toml")),
        "--cert",
        path(&cert),
        "-o",
        path(&dir.path().join("seeded")),
        "--t-end",
        "0.2",
        "--seed",
        "99",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn shipped_run_and_report() {
    let dir = TempDir::new().unwrap();
    let cert = certify_shipped(dir.path());
    let sc = scenario("two_obstacles.toml");
    let ff = dir.path().join("ff");
    let bl = dir.path().join("baseline");
    for (out_dir, extra) in [(&ff, None), (&bl, Some("--baseline-margins"))] {
        let mut args = vec!["run", path(&sc), "--cert", path(&cert), "-o", path(out_dir)];
        args.extend(extra);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let plots = dir.path().join("plots");
    let out = run(&[
        "report",
        path(&ff.join("trace.csv")),
        path(&bl.join("trace.csv")),
        "-o",
        path(&plots),
        "--scenario",
        path(&sc),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut svgs = 0;
    for entry in fs::read_dir(&plots).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "svg") {
            assert_well_formed(&p);
            svgs += 1;
        }
    }
    assert!(svgs >= 10);
    let cmp = assert_well_formed(&plots.join("comparison_stacked_error.svg"));
    assert!(cmp.contains(">ff<") && cmp.contains(">baseline<"));
    assert!(assert_well_formed(&plots.join("ff_trajectories.svg")).contains("<ellipse"));
    let summary: toml::Table = fs::read_to_string(ff.join("summary.toml")).unwrap().parse().unwrap();
    let m = summary["metrics"].as_table().unwrap();
    assert!(m["min_obstacle_clearance"].as_float().unwrap() > 0.0);
    assert!(m["min_pairwise_clearance"].as_float().unwrap() > 0.0);
}

fn still_trace() -> String {
    let cols = [
        "t", "x0_1_1", "x0_1_2", "occ0", "x1_1_1", "x1_1_2", "occ1", "fe1_1", "fe1_2", "ferr1", "stacked_err",
        "clear_obs", "pred_err",
    ];
    let mut s = cols.join(",") + "\n";
    for k in 0..=20 {
        let mut row = vec![format!("{}", k as f64 * 0.1)];
        row.extend(std::iter::repeat_n("0".to_string(), cols.len() - 1));
        s += &(row.join(",") + "\n");
    }
    s
}

#[test]
fn report_on_still_trace() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("still.csv");
    fs::write(&trace, still_trace()).unwrap();
    let plots = dir.path().join("plots");
    let out = run(&["report", path(&trace), "-o", path(&plots)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["trajectories", "formation_error_axis1", "formation_error_axis2", "clearance", "occupancy"] {
        let svg = assert_well_formed(&plots.join(format!("{name}.svg")));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
    let table = fs::read_to_string(plots.join("metrics.md")).unwrap();
    let row = table.lines().nth(2).unwrap();
    assert!(row.starts_with("| still |"));
    let numbers: Vec<f64> = row.split('|').filter_map(|c| c.trim().parse().ok()).collect();
    assert!(!numbers.is_empty());
    assert!(numbers.iter().all(|v| *v == 0.0 || *v == 2.0), "{row}");
}

#[test]
fn malformed_trace_exits_1() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("broken.csv");
    fs::write(&trace, "t,occ0\n0,0\n0.1,abc\n").unwrap();
    let out = run(&["report", path(&trace), "-o", path(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"));
}
