use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridhealth::forecaster::{evaluate, initialize, Checkpoint, Dataset, TrainConfig};
use gridhealth::health::{load_signals, HealthBundle};
use gridhealth::ingest::{load_fuel_mix, FuelCategoryMap};

fn gridhealth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridhealth")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gridhealth(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = gridhealth(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A short synthetic bundle in `root/synth`.
fn synth_bundle(root: &Path, hours: usize) -> PathBuf {
    let dir = root.join("synth");
    ok(&["synth", "--hours", &hours.to_string(), "--seed", "11", "--out", s(&dir)]);
    dir
}

fn stat(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no '{key}' in {stdout}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn ingest_imputes_every_blank_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.csv");
    let mut text = String::from("timestamp,COL,NG,SUN,WND\n");
    let mut blanks = 0;
    for t in 0..72 {
        let sun = if t % 24 >= 7 && t % 24 <= 18 { "120" } else { "0" };
        let wind = if t % 17 == 5 {
            blanks += 1;
            String::new()
        } else {
            format!("{}", 40 + t % 9)
        };
        text.push_str(&format!("{t},300,{},{sun},{wind}\n", 200 + t));
    }
    fs::write(&raw, text).unwrap();
    let out = tmp.path().join("o");
    let stdout = ok(&["ingest", "--dataset", s(&raw), "--out", s(&out)]);
    assert_eq!(stat(&stdout, "records"), 72.0);
    assert_eq!(stat(&stdout, "missing"), blanks as f64);
    assert_eq!(stat(&stdout, "imputed"), blanks as f64);
    let series = load_fuel_mix(&out.join("dataset.csv"), &FuelCategoryMap::identity()).unwrap();
    for r in &series.records {
        assert!((r.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(out.join("manifest.json").exists());
}

#[test]
fn ingest_names_an_unmapped_label() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.csv");
    fs::write(&raw, "timestamp,COL,peat_fired\n0,1,2\n1,1,2\n").unwrap();
    let out = tmp.path().join("o");
    let e = err(&["ingest", "--dataset", s(&raw), "--out", s(&out)]);
    assert!(e.contains("peat_fired"), "{e}");
    assert!(!out.exists());
}

#[test]
fn synth_labels_match_an_offline_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth_bundle(tmp.path(), 96);
    let bundle = HealthBundle::load_dir(&dir).unwrap();
    let series = load_fuel_mix(&dir.join("fuel_mix.csv"), &FuelCategoryMap::identity()).unwrap();
    let labels = load_signals(&dir.join("labels.csv")).unwrap();
    assert_eq!(labels.len(), 96);
    for (r, l) in series.records.iter().zip(&labels) {
        let expect = bundle.impact_per_mwh(r).unwrap();
        assert_eq!(expect.timestamp, l.timestamp);
        assert_eq!(expect.internal_cost, l.internal_cost);
        assert_eq!(expect.external_cost, l.external_cost);
    }
}

#[test]
fn synth_with_only_solar_has_no_impact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sun");
    ok(&["synth", "--hours", "48", "--force-fuel", "SUN", "--out", s(&out)]);
    for l in load_signals(&out.join("labels.csv")).unwrap() {
        assert_eq!((l.internal_cost, l.external_cost), (0.0, 0.0));
    }
}

#[test]
fn synth_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["synth", "--hours", "200", "--seed", "4", "--out", s(&a)]);
    ok(&["synth", "--hours", "200", "--seed", "4", "--out", s(&b)]);
    for f in ["fuel_mix.csv", "labels.csv", "sr_matrix.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_with_zero_epochs_writes_the_initial_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth_bundle(tmp.path(), 600);
    let mix = dir.join("fuel_mix.csv");
    let labels = dir.join("labels.csv");
    let out = tmp.path().join("t");
    ok(&["train", "--dataset", s(&mix), "--labels", s(&labels), "--epochs", "0", "--seed", "9", "--out", s(&out)]);

    let series = load_fuel_mix(&mix, &FuelCategoryMap::identity()).unwrap();
    let data = Dataset::new(&series, &load_signals(&labels).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let (model, converter) = initialize(&data, &cfg).unwrap();
    let expect = Checkpoint::new(&model, &converter, &cfg, &data.fuel_names).to_json().unwrap();
    assert_eq!(fs::read_to_string(out.join("checkpoint.json")).unwrap(), expect);
}

#[test]
fn sweep_and_predict_agree_on_test_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth_bundle(tmp.path(), 600);
    let mix = dir.join("fuel_mix.csv");
    let labels = dir.join("labels.csv");
    let common = ["--dataset", s(&mix), "--labels", s(&labels), "--epochs", "1", "--architecture", "linear"];

    let sweep = tmp.path().join("sw");
    let mut args = vec!["sweep", "--betas", "0.998,0.5", "--out", s(&sweep)];
    args.extend(common);
    ok(&args);
    let table = fs::read_to_string(sweep.join("tradeoff.csv")).unwrap();
    let rows: Vec<Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), (0.5, 0.998));

    let train = tmp.path().join("tr");
    let mut args = vec!["train", "--beta", "0.5", "--out", s(&train)];
    args.extend(common);
    ok(&args);
    let ckpt = train.join("checkpoint.json");
    let pred = tmp.path().join("pr");
    let stdout = ok(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&mix), "--labels", s(&labels), "--out", s(&pred)]);
    assert_eq!(stat(&stdout, "fuel_nmae"), rows[0][1]);
    assert_eq!(stat(&stdout, "health_nmae"), rows[0][2]);

    let (model, converter) = Checkpoint::from_json(&fs::read_to_string(&ckpt).unwrap()).unwrap().into_parts().unwrap();
    let series = load_fuel_mix(&mix, &FuelCategoryMap::identity()).unwrap();
    let data = Dataset::new(&series, &load_signals(&labels).unwrap()).unwrap();
    let report = evaluate(&model, &converter, &data, &data.splits(24).unwrap().test).unwrap();
    assert_eq!(report.fuel_nmae, rows[0][1]);
    assert_eq!(load_signals(&pred.join("signal.csv")).unwrap(), report.signals);

    let future = tmp.path().join("fu");
    let stdout = ok(&["predict", "--future", "--checkpoint", s(&ckpt), "--dataset", s(&mix), "--out", s(&future)]);
    assert_eq!(stat(&stdout, "forecast_hours"), 24.0);
    let first = load_signals(&future.join("signal.csv")).unwrap()[0].timestamp;
    assert_eq!(first, series.records.last().unwrap().timestamp + 1);
}

#[test]
fn predict_rejects_a_mismatched_window() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth_bundle(tmp.path(), 600);
    let mix = dir.join("fuel_mix.csv");
    let labels = dir.join("labels.csv");
    let train = tmp.path().join("tr");
    ok(&["train", "--dataset", s(&mix), "--labels", s(&labels), "--epochs", "0", "--out", s(&train)]);
    let ckpt = train.join("checkpoint.json");
    let e = err(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&mix), "--labels", s(&labels), "--window", "72", "--out", s(&tmp.path().join("p"))]);
    assert!(e.contains("window"), "{e}");
}

fn signal_file(dir: &Path, costs: &[f64]) -> PathBuf {
    let p = dir.join("signal.csv");
    let mut text = String::from("timestamp,internal_usd_per_mwh,external_usd_per_mwh\n");
    for (t, c) in costs.iter().enumerate() {
        text.push_str(&format!("{t},{c},0\n"));
    }
    fs::write(&p, text).unwrap();
    p
}

fn results(dir: &Path) -> Vec<(String, Vec<f64>)> {
    fs::read_to_string(dir.join("results.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut cells = l.split(',');
            let name = cells.next().unwrap().to_string();
            (name, cells.map(|c| c.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn constant_signal_makes_every_strategy_cost_the_same() {
    let tmp = tempfile::tempdir().unwrap();
    let signal = signal_file(tmp.path(), &[40.0; 24]);
    let sessions = tmp.path().join("sessions.csv");
    fs::write(&sessions, "session_id,arrival,departure,demand_kwh,rate_kw\na,3,12,20,7.2\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["schedule", "--signal", s(&signal), "--sessions", s(&sessions), "--out", s(&out)]);
    let rows = results(&out);
    assert_eq!(rows.len(), 4);
    // 20 kWh at $40/MWh
    for (name, r) in &rows {
        assert!((r[0] - 0.8).abs() < 1e-6, "{name}: {r:?}");
    }
    assert!(!out.join("sessions.csv").exists());
}

#[test]
fn sampled_fleet_percentages_follow_from_totals() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth_bundle(tmp.path(), 24 * 10);
    let out = tmp.path().join("o");
    ok(&["schedule", "--signal", s(&dir.join("labels.csv")), "--num-sessions", "40", "--seed", "2", "--out", s(&out)]);
    let rows = results(&out);
    let total = |name: &str| rows.iter().find(|(n, _)| n == name).unwrap().1[0];
    let opt = total("optimal");
    for (name, r) in &rows {
        assert!(opt <= r[0] + 1e-6, "{name}");
    }
    let first = total("first_hours");
    for (_, r) in &rows {
        let pct = 100.0 * (first - r[0]) / first;
        assert!((pct - r[1]).abs() < 0.01, "{pct} vs {}", r[1]);
    }
    let sessions = fs::read_to_string(out.join("sessions.csv")).unwrap();
    assert_eq!(sessions.lines().count(), 41);
}

#[test]
fn coverage_gap_names_the_session_and_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let signal = signal_file(tmp.path(), &[10.0; 12]);
    let sessions = tmp.path().join("sessions.csv");
    fs::write(&sessions, "session_id,arrival,departure,demand_kwh,rate_kw\nlate-van,8,30,10,7.2\n").unwrap();
    let out = tmp.path().join("o");
    let e = err(&["schedule", "--signal", s(&signal), "--sessions", s(&sessions), "--out", s(&out)]);
    assert!(e.contains("late-van"), "{e}");
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "hours = 48\nhourz = 12\n").unwrap();
    let e = err(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(e.contains("hourz"), "{e}");
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "hours = 48\nseed = 3\n").unwrap();
    let out = tmp.path().join("o");
    let stdout = ok(&["synth", "--config", s(&cfg), "--hours", "72", "--out", s(&out)]);
    assert_eq!(stat(&stdout, "hours"), 72.0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["hours"], 72);
}

#[test]
fn missing_inputs_are_reported_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let ghost = tmp.path().join("ghost.csv");
    let e = err(&["schedule", "--signal", s(&ghost), "--out", s(&tmp.path().join("o"))]);
    assert!(e.contains("ghost.csv"), "{e}");
}
