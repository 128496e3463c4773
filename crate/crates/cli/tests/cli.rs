use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mla");

fn mla(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn mla")
}

fn ok(args: &[&str]) -> String {
    let out = mla(args);
    assert!(
        out.status.success(),
        "mla {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn table2() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/table2.toml")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

const SINGLE_LAC: &str = r#"
[time_grid]
slot_count = 3
slot_duration_hours = 1.0

[[lacs]]
id = "home"
desired_power = [40.0, 60.0, 80.0]
max_power = [200.0, 200.0, 200.0]
k_sensitivity = 0.217
forecast_price = [18.21, 9.87, 18.21]

[[generators]]
kind = "grid"
id = "grid"
tariff = [18.21, 9.87, 18.21]
max_draw = [500.0, 500.0, 500.0]
"#;

#[test]
fn solve_writes_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let scenario = table2();
    let stdout = ok(&[
        "solve",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(stdout.contains("24 converged"), "{stdout}");
    for f in ["results.csv", "trace.csv", "summary.txt", "scenario.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let (header, rows) = read_csv(&run.join("results.csv"));
    assert_eq!(
        &header[..6],
        [
            "slot",
            "price_cent_per_kwh",
            "iterations",
            "converged",
            "primal_residual",
            "dual_residual"
        ]
    );
    assert_eq!(header.len(), 6 + 23);
    assert_eq!(header[6], "lac01");
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r[3] == "1"));
    // Peak slot where the grid is marginal clears at the night tariff.
    let price: f64 = rows[20][1].parse().unwrap();
    assert!((price - 18.21).abs() < 1e-2, "{price}");
    let (trace_header, _) = read_csv(&run.join("trace.csv"));
    assert_eq!(
        &trace_header[..6],
        ["slot", "iter", "lambda", "rho", "primal_norm", "dual_norm"]
    );
}

#[test]
fn trace_thresholds_follow_the_stopping_rule() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "solve",
        "--eps-abs",
        "1e-4",
        "--eps-rel",
        "1e-5",
        "--out",
        run.to_str().unwrap(),
    ]);
    let (_, results) = read_csv(&run.join("results.csv"));
    let (_, trace) = read_csv(&run.join("trace.csv"));
    for r in &results {
        let iters: usize = r[2].parse().unwrap();
        let last = trace
            .iter()
            .find(|t| t[0] == r[0] && t[1] == iters.to_string())
            .unwrap();
        let powers: Vec<f64> = r[6..].iter().map(|v| v.parse().unwrap()).collect();
        let n = powers.len() as f64;
        let max_p = powers.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        let lambda: f64 = last[2].parse().unwrap();
        let eps_pri = n.sqrt() * 1e-4 + 1e-5 * max_p;
        let eps_dual = n.sqrt() * 1e-4 + 1e-5 * n * lambda.abs();
        let got_pri: f64 = last[6].parse().unwrap();
        let got_dual: f64 = last[7].parse().unwrap();
        assert!(
            (got_pri - eps_pri).abs() <= 1e-12 * eps_pri,
            "{got_pri} vs {eps_pri}"
        );
        assert!(
            (got_dual - eps_dual).abs() <= 1e-12 * eps_dual,
            "{got_dual} vs {eps_dual}"
        );
        assert_eq!(r[1], last[2], "reported price is the last iterate");
    }
}

#[test]
fn tcp_mode_reproduces_inprocess_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["solve", "--out", a.to_str().unwrap()]);
    ok(&["solve", "--mode", "tcp", "--out", b.to_str().unwrap()]);
    for f in ["results.csv", "trace.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn single_consumer_on_grid_pays_the_tariff() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("one.toml");
    fs::write(&scenario, SINGLE_LAC).unwrap();
    let run = dir.path().join("run");
    ok(&[
        "solve",
        "--scenario",
        scenario.to_str().unwrap(),
        "--eps-abs",
        "1e-9",
        "--eps-rel",
        "1e-12",
        "--max-iter",
        "5000",
        "--out",
        run.to_str().unwrap(),
    ]);
    let (_, rows) = read_csv(&run.join("results.csv"));
    for (r, kappa) in rows.iter().zip([18.21, 9.87, 18.21]) {
        let price: f64 = r[1].parse().unwrap();
        assert!((price - kappa).abs() < 1e-6, "{price} vs {kappa}");
    }
}

#[test]
fn external_agents_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("one.toml");
    fs::write(&scenario, SINGLE_LAC).unwrap();
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let run = dir.path().join("run");
    let coordinator = Command::new(BIN)
        .args([
            "solve",
            "--scenario",
            scenario.to_str().unwrap(),
            "--mode",
            "tcp",
            "--external-agents",
        ])
        .args(["--listen", &addr, "--out", run.to_str().unwrap()])
        .spawn()
        .unwrap();
    let agents: Vec<_> = ["home", "grid"]
        .iter()
        .map(|id| {
            Command::new(BIN)
                .args(["serve-agent", "--scenario", scenario.to_str().unwrap()])
                .args(["--connect", &addr, "--agent-id", id])
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let status = coordinator.wait_with_output().unwrap().status;
    assert!(status.success());
    for a in agents {
        let a = a.wait_with_output().unwrap();
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        assert!(String::from_utf8_lossy(&a.stdout).contains("completed 3 slot(s)"));
    }
    let (_, rows) = read_csv(&run.join("results.csv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn serve_agent_rejects_unknown_id() {
    let out = mla(&[
        "serve-agent",
        "--connect",
        "127.0.0.1:9",
        "--agent-id",
        "nobody",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown agent id"));
}

#[test]
fn invalid_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    fs::write(
        &scenario,
        SINGLE_LAC.replace(
            "max_power = [200.0, 200.0, 200.0]",
            "max_power = [200.0, -1.0, 200.0]",
        ),
    )
    .unwrap();
    let out = mla(&[
        "solve",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lacs[0]"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn report_bills_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "solve",
        "--eps-abs",
        "1e-8",
        "--eps-rel",
        "1e-10",
        "--max-iter",
        "5000",
        "--out",
        run.to_str().unwrap(),
    ]);
    let stdout = ok(&["report", "--out", run.to_str().unwrap(), "--slot", "12"]);
    for f in [
        "prices.svg",
        "profile.csv",
        "trace_slot12.svg",
        "bills.csv",
        "surplus.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(stdout.contains("with DER"));
    let (header, rows) = read_csv(&run.join("bills.csv"));
    assert_eq!(
        header,
        [
            "lac",
            "with_der_eur",
            "grid_only_eur",
            "grid_only_closed_form_eur",
            "saving_eur"
        ]
    );
    assert_eq!(rows.len(), 21);
    for r in &rows {
        let der: f64 = r[1].parse().unwrap();
        let grid: f64 = r[2].parse().unwrap();
        let closed: f64 = r[3].parse().unwrap();
        assert!(der >= 0.0);
        // Grid-only run clears at the tariff with demand at the desired level.
        assert!(
            (grid - closed).abs() <= 1e-4 * closed.max(1.0),
            "{grid} vs {closed}"
        );
    }
    let total = &rows[20];
    assert_eq!(total[0], "TOTAL");
    let der: f64 = total[1].parse().unwrap();
    let grid: f64 = total[2].parse().unwrap();
    assert!(der <= grid + 1e-6, "{der} vs {grid}");
    let svg = fs::read_to_string(run.join("prices.svg")).unwrap();
    assert!(svg.contains("<polyline"));
}

#[test]
fn report_on_empty_dir_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = mla(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    let missing = dir.path().join("nope");
    assert!(!mla(&["report", "--out", missing.to_str().unwrap()])
        .status
        .success());
}

#[test]
fn report_on_corrupt_results_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["solve", "--out", run.to_str().unwrap()]);
    let results = run.join("results.csv");
    let text = fs::read_to_string(&results).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(5);
    fs::write(&results, lines.join("\n")).unwrap();
    assert!(!mla(&["report", "--out", run.to_str().unwrap()])
        .status
        .success());
    assert!(!run.join("bills.csv").exists());
}

#[test]
fn oracle_comparison_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp.csv");
    let stdout = ok(&["oracle", "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("max price deviation"));
    let (header, rows) = read_csv(&out);
    assert_eq!(header[..3], ["slot", "admm_price", "oracle_price"]);
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r[6] == "ok"));
    // Slot 12 is the only one where the grid is idle; the price drops below the tariff.
    let oracle12: f64 = rows[12][2].parse().unwrap();
    assert!(oracle12 < 9.87);
}

#[test]
fn generate_round_trips_through_solve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    ok(&["generate", "--seed", "7", "--out", path.to_str().unwrap()]);
    let run = dir.path().join("run");
    ok(&[
        "solve",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--max-iter",
        "2000",
    ]);
}
