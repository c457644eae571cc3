use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adherence_fl::experiment::{read_cells, CellSummary, GridReport, Scenario};
use adherence_fl::federation::Setting;
use adherence_fl::metrics::{aggregate_seeds, Metric};
use adherence_fl::synthgen::CalibrationReport;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adherence-fl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
n_seeds = 1
holdout_users = 10
settings = ["centralized", "cross_device"]
scenarios = ["raw", "drop_users_5"]

[synth]
n_users = 50
seed = 3

[fed]
rounds = 2
local_epochs = 1
centralized_epochs = 2
silo_sizes = [13, 13, 14]
"#;

#[test]
fn generate_writes_calibrated_deterministic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("nested/missing/a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = bin(&["generate", "--out", path(dir)]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["histories.csv", "calibration.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let report: CalibrationReport =
        serde_json::from_slice(&fs::read(a.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(report.n_users, 454);
    assert!((0.70..=0.80).contains(&report.label0_fraction));
    let header = fs::read_to_string(a.join("histories.csv")).unwrap();
    assert!(header.starts_with("user_id,session_index,acquisition_count\n"));
}

#[test]
fn config_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "n_seedz = 2\n").unwrap();
    let out = bin(&[
        "run",
        "--preset",
        "desk",
        "--config",
        path(&bad),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(
        &bad,
        "scenarios = [\"oversample\"]\n[resample]\nmethod = \"undersample\"\n",
    )
    .unwrap();
    let out = bin(&["run", "--preset", "desk", "--config", path(&bad)]);
    assert_eq!(out.status.code(), Some(1));

    let missing = tmp.path().join("nope.toml");
    let out = bin(&["generate", "--config", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn silo_size_mismatch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "settings = [\"cross_silo\"]\n[synth]\nn_users = 30\n").unwrap();
    let out = bin(&[
        "run",
        "--preset",
        "desk",
        "--config",
        path(&cfg),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("silo sizes"));
}

#[test]
fn report_on_missing_grid_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["report", "--out", path(&tmp.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(2));

    let cells = tmp.path().join("g/cells/raw");
    fs::create_dir_all(&cells).unwrap();
    fs::write(cells.join("seed_0.json"), "{not json").unwrap();
    let out = bin(&["report", "--out", path(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn small_grid_runs_reports_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let dirs = [tmp.path().join("one"), tmp.path().join("two")];
    for (dir, threads) in dirs.iter().zip(["1", "3"]) {
        let out = bin(&[
            "run",
            "--preset",
            "desk",
            "--config",
            path(&cfg),
            "--out",
            path(dir),
            "--parallel",
            threads,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let grid = fs::read_to_string(dirs[0].join("grid.csv")).unwrap();
    assert_eq!(grid, fs::read_to_string(dirs[1].join("grid.csv")).unwrap());
    let mut lines = grid.lines();
    assert_eq!(
        lines.next().unwrap(),
        "setting,scenario,acc_mean,acc_std,p_mean,p_std,r_mean,r_std,f1_mean,f1_std,gm_mean,gm_std"
    );
    assert_eq!(lines.count(), 4);

    let cells: Vec<CellSummary> = read_cells(&dirs[0]).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        let m = c.metrics.as_ref().expect("cell succeeded");
        assert!(Metric::ALL.iter().all(|&k| (0.0..=1.0).contains(&m.get(k))));
        let log = dirs[0]
            .join("cells")
            .join(c.setting.name())
            .join(c.scenario.name())
            .join("seed_0.jsonl");
        assert_eq!(
            fs::read_to_string(log).unwrap().lines().count(),
            3 - usize::from(c.setting != Setting::Centralized)
        );
    }
    let find = |s: Setting, sc: Scenario| {
        cells
            .iter()
            .find(|c| c.setting == s && c.scenario == sc)
            .unwrap()
    };
    let raw = find(Setting::CrossDevice, Scenario::Raw);
    let dropped = find(Setting::CrossDevice, Scenario::DropUsers5);
    assert!(dropped.clients_participating <= raw.clients_participating);
    assert_eq!(raw.clients_participating, raw.clients_total);

    let out = bin(&["report", "--out", path(&dirs[0])]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cross_device  drop_users_5"));

    let gm = fs::read_to_string(dirs[0].join("report/gm.csv")).unwrap();
    assert_eq!(gm.lines().count(), 1 + 2 * 2);
    assert!(dirs[0].join("report/fig_centralized.csv").exists());
    assert!(dirs[0].join("report/fig_cross_device.csv").exists());

    // Aggregates in grid.json equal a recomputation from the per-seed files.
    let saved: GridReport =
        serde_json::from_slice(&fs::read(dirs[0].join("grid.json")).unwrap()).unwrap();
    for g in &saved.grid {
        let reports: Vec<_> = cells
            .iter()
            .filter(|c| c.setting == g.setting && c.scenario == g.scenario)
            .filter_map(|c| c.metrics.clone())
            .collect();
        let fresh = aggregate_seeds(&reports).unwrap();
        let stored = g.aggregate.as_ref().unwrap();
        for m in Metric::ALL {
            assert!(close(fresh.get(m).mean, stored.get(m).mean));
            assert!(close(fresh.get(m).std, stored.get(m).std));
        }
    }
}

#[test]
fn one_cell_grid_gives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("one.toml");
    fs::write(
        &cfg,
        format!("{SMALL}\n").replace(
            "settings = [\"centralized\", \"cross_device\"]\nscenarios = [\"raw\", \"drop_users_5\"]",
            "settings = [\"cross_silo\"]\nscenarios = [\"undersample\"]",
        ),
    )
    .unwrap();
    let out = bin(&[
        "run",
        "--preset",
        "desk",
        "--config",
        path(&cfg),
        "--out",
        path(tmp.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = bin(&["report", "--out", path(tmp.path())]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    assert!(stdout
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("cross_silo    undersample"));
}
