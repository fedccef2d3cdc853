use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lqport_cli::formats::ParamsFile;
use serde_json::Value;
use tempfile::TempDir;

fn lqport(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqport"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lqport(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Simulated prices in the input format for `assets` names.
fn price_file(dir: &Path, assets: usize, rows: usize, seed: u64) -> String {
    let name = format!("prices{assets}_{seed}.csv");
    let (a, h, s) = (assets.to_string(), (rows - 1).to_string(), seed.to_string());
    ok(
        dir,
        &[
            "simulate",
            "--assets",
            &a,
            "--horizon",
            &h,
            "--seed",
            &s,
            "--out",
            "path.csv",
            "--prices-out",
            &name,
        ],
    );
    name
}

#[test]
fn fit_writes_parameters_for_eleven_assets() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let prices = price_file(d, 11, 500, 5);
    ok(d, &["fit", "--prices", &prices, "--out", "params.json"]);
    let file = ParamsFile::load(&d.join("params.json")).unwrap();
    let p = file.params().unwrap();
    assert_eq!(p.n(), 11);
    assert_eq!(file.tickers.len(), 11);
    assert_eq!(file.format_version, 1);
    let fit = file.fit.as_ref().unwrap();
    assert_eq!(fit.observations, 499);
    assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(file.config.is_some());
    // Starting prices are the last row of the input.
    let last: Vec<f64> = std::fs::read_to_string(d.join(&prices))
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(file.s0, last);
}

#[test]
fn fit_handles_a_single_asset() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let prices = price_file(d, 1, 400, 9);
    ok(d, &["fit", "--prices", &prices, "--out", "params.json"]);
    let p = ParamsFile::load(&d.join("params.json")).unwrap().params().unwrap();
    assert_eq!(p.n(), 1);
    assert!(p.a[(0, 0)].powi(2) + p.b[(0, 0)].powi(2) < 1.0);
}

#[test]
fn fitted_parameters_drive_simulation_and_refit() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let prices = price_file(d, 2, 400, 3);
    ok(d, &["fit", "--prices", &prices, "--out", "first.json"]);
    ok(
        d,
        &[
            "simulate",
            "--params",
            "first.json",
            "--horizon",
            "399",
            "--seed",
            "4",
            "--out",
            "p.csv",
            "--prices-out",
            "again.csv",
        ],
    );
    ok(d, &["fit", "--prices", "again.csv", "--out", "second.json"]);
    let first = ParamsFile::load(&d.join("first.json")).unwrap();
    let second = ParamsFile::load(&d.join("second.json")).unwrap();
    assert_eq!(first.tickers, second.tickers);
    assert!(second.params().is_ok());
    let meta = json(d.join("p.meta.json"));
    assert_eq!(meta["seed"], 4);
    assert_eq!(meta["config"]["model"]["params"], "first.json");
}

#[test]
fn simulate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--seed", "7", "--horizon", "40", "--out", "a.csv"]);
    ok(d, &["simulate", "--seed", "7", "--horizon", "40", "--out", "b.csv"]);
    ok(d, &["simulate", "--seed", "8", "--horizon", "40", "--out", "c.csv"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert_eq!(read("a.meta.json"), read("b.meta.json"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 42);
    assert!(text.starts_with("t,price_ASSET1,price_ASSET2,price_ASSET3,return_ASSET1"));
}

#[test]
fn backtest_writes_one_report_per_policy_and_a_comparison() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.json"), r#"{"nn": {"max_iter": 2, "epochs": 10}}"#).unwrap();
    ok(
        d,
        &["--config", "cfg.json", "train", "--horizon", "15", "--out-dir", "net"],
    );
    assert!(d.join("net/model.json").exists());
    assert_eq!(json(d.join("net/train_report.json"))["report"]["iterations"], 2);
    ok(
        d,
        &[
            "backtest",
            "--policy",
            "myopic",
            "--policy",
            "expansion-nn",
            "--model-file",
            "net/model.json",
            "--paths",
            "3",
            "--horizon",
            "15",
            "--out-dir",
            "bt",
        ],
    );
    for f in [
        "backtest_myopic.csv",
        "backtest_myopic.json",
        "backtest_expansion-nn.csv",
        "backtest_expansion-nn.json",
    ] {
        assert!(d.join("bt").join(f).exists(), "{f}");
    }
    let comparison = std::fs::read_to_string(d.join("bt/comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 2);
    assert!(comparison
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("synthetic,myopic,expansion-nn,"));
    let summary = json(d.join("bt/summary.json"));
    assert_eq!(summary["format_version"], 1);
    assert_eq!(summary["runs"][0]["paths"], 3);
    let policy = json(d.join("bt/backtest_myopic.json"));
    let paths = policy["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 3);
    assert_eq!(paths[0]["wealth"].as_array().unwrap().len(), 16);
    let steps = std::fs::read_to_string(d.join("bt/backtest_myopic.csv")).unwrap();
    assert!(
        steps.starts_with("run,seed,t,date,wealth,invested,holding_ASSET1,holding_ASSET2,holding_ASSET3,cost,risk\n")
    );
    assert_eq!(steps.lines().count(), 1 + 3 * 16);

    ok(
        d,
        &[
            "report",
            "--input",
            "bt",
            "--table",
            "decomposition",
            "--out",
            "dec.csv",
        ],
    );
    let dec = std::fs::read_to_string(d.join("dec.csv")).unwrap();
    assert_eq!(dec.lines().count(), 4);
    ok(
        d,
        &[
            "report",
            "--input",
            "bt/summary.json",
            "--table",
            "annualized",
            "--out",
            "ann.csv",
        ],
    );
    let ann = std::fs::read_to_string(d.join("ann.csv")).unwrap();
    let avg = ann.lines().last().unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(avg[0], "average");
    assert_eq!(avg[1].split('.').nth(1).unwrap().len(), 2);
    assert_eq!(avg[3].split('.').nth(1).unwrap().len(), 4);
    let meta = json(d.join("ann.meta.json"));
    assert_eq!(meta["annualization"], "linear, 252 trading days");
    assert_eq!(meta["table"], "annualized");
}

#[test]
fn fold_backtest_replays_history() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let prices = price_file(d, 2, 400, 21);
    std::fs::write(
        d.join("cfg.json"),
        r#"{"backtest": {"folds": {"unit": "observations", "train": 200, "test": 50, "stride": 100}}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "--config",
            "cfg.json",
            "backtest",
            "--prices",
            &prices,
            "--policy",
            "myopic",
            "--policy",
            "expansion-zeroth",
            "--out-dir",
            "bt",
        ],
    );
    let summary = json(d.join("bt/summary.json"));
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["run"], "fold-01");
    assert_eq!(runs[0]["days"], 50);
    // Step dates follow the input calendar.
    let steps = std::fs::read_to_string(d.join("bt/backtest_myopic.csv")).unwrap();
    let first: Vec<&str> = steps.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&first[..3], ["fold-01", "0", "0"]);
    let prices_text = std::fs::read_to_string(d.join(&prices)).unwrap();
    let start = prices_text.lines().nth(1 + 200).unwrap().split(',').next().unwrap();
    assert_eq!(first[3], start);
    assert_eq!(steps.lines().count(), 1 + 2 * 51);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&lqport(d, &["nonsense"])), 1);
    assert_eq!(code(&lqport(d, &["simulate"])), 1);
    assert_eq!(code(&lqport(d, &["--help"])), 0);
    assert_eq!(code(&lqport(d, &["--version"])), 0);

    std::fs::write(d.join("bad.json"), r#"{"control": {"epsilon": 0.01, "epsilonn": 2}}"#).unwrap();
    let out = lqport(d, &["--config", "bad.json", "simulate", "--out", "x.csv"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epsilonn"), "{}", stderr(&out));

    let out = lqport(d, &["simulate", "--epsilon", "-1", "--out", "x.csv"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn malformed_prices_exit_two_with_line_number() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("p.csv"),
        "date,A,B\n2020-01-02,1,2\n2020-01-03,1,2\n2020-01-06,1,oops\n2020-01-07,1,2\n",
    )
    .unwrap();
    let out = lqport(d, &["fit", "--prices", "p.csv", "--out", "o.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
    assert!(!d.join("o.json").exists());

    let out = lqport(d, &["fit", "--prices", "missing.csv", "--out", "o.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn verify_reports_each_check_and_exits_four_on_failure() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = lqport(d, &["verify", "--out", "v.json"]);
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    let v = json(d.join("v.json"));
    let checks = v["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 6);
    assert_eq!(table.lines().count(), 6);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(code(&out), if failed.is_empty() { 0 } else { 4 });
    assert_eq!(v["passed"], failed.is_empty());
    for name in failed {
        assert!(stderr(&out).contains(name));
    }

    // With no discounting the certificate holds and every check passes.
    std::fs::write(
        d.join("cfg.json"),
        r#"{"verify": {"certificate": {"scenario": {"variance": 1e-4, "gamma": 1.0, "chi": 1e6, "delta": 0.0}}}}"#,
    )
    .unwrap();
    let out = lqport(d, &["--config", "cfg.json", "verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}
