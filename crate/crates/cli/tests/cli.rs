use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn fbttr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbttr")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

const QUICK: &[&str] = &["--set", "snr_grid=5,10,20,40", "--set", "tau_grid=95:100", "--blocks", "2"];

fn with_quick<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(QUICK.iter().copied()).collect()
}

fn write_config(dir: &Path, csv: &Path) -> String {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# synthetic CSV with three sites\ndata = csv\ncsv.path = {}\ncsv.response = y0\ncsv.task = regression\n\
             csv.site = site\ncsv.feature_shape = 5x4\nrepeats = 2\nshuffle = true\n",
            csv.display()
        ),
    )
    .unwrap();
    cfg.display().to_string()
}

#[test]
fn synth_fit_predict_experiment_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("synth.csv");
    let csv_s = csv.display().to_string();
    let stdout = ok(&fbttr(&["synth", "--shape", "120x5x4", "--sites", "3", "--seed", "4", "--out", &csv_s]));
    assert!(stdout.contains("csv.feature_shape = 5x4"));
    let cfg = write_config(dir.path(), &csv);

    let fit_dir = dir.path().join("fit").display().to_string();
    let stdout = ok(&fbttr(&with_quick(&["fit", "--config", &cfg, "--out", &fit_dir])));
    assert!(stdout.contains("training pearson"));
    let model = format!("{fit_dir}/model.fbttr");
    assert!(Path::new(&model).exists() && Path::new(&format!("{fit_dir}/config.resolved")).exists());

    let pred = dir.path().join("pred.csv").display().to_string();
    ok(&fbttr(&["predict", "--model", &model, "--config", &cfg, "--data", &csv_s, "--out", &pred]));
    let lines = std::fs::read_to_string(&pred).unwrap().lines().count();
    assert_eq!(lines, 121);

    let exp_dir = dir.path().join("exp").display().to_string();
    let stdout = ok(&fbttr(&with_quick(&[
        "experiment",
        "--config",
        &cfg,
        "--mode",
        "centralized,federated",
        "--set",
        "partition=by_column",
        "--clients",
        "3",
        "--out",
        &exp_dir,
    ])));
    assert!(stdout.contains("centralized vs federated"), "{stdout}");
    for f in ["metrics.csv", "report.json", "config.resolved", "model-centralized.fbttr", "model-federated.fbttr"] {
        assert!(Path::new(&exp_dir).join(f).exists(), "{f} missing");
    }
    // 2 seeds x 2 methods x 5 blocks, plus the header.
    let rows = std::fs::read_to_string(format!("{exp_dir}/metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 21);

    let rebuilt = dir.path().join("again.json").display().to_string();
    ok(&fbttr(&["report", "--metrics", &format!("{exp_dir}/metrics.csv"), "--out", &rebuilt]));
    let a = std::fs::read_to_string(&rebuilt).unwrap();
    assert_eq!(a, std::fs::read_to_string(format!("{exp_dir}/report.json")).unwrap());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    // Config error: unknown field.
    assert_eq!(fbttr(&["experiment", "--set", "bogus=1", "--out", &out]).status.code(), Some(2));
    // Config error: field value.
    assert_eq!(fbttr(&["experiment", "--clients", "0", "--out", &out]).status.code(), Some(2));
    // Data error: missing CSV.
    let missing = dir.path().join("missing.csv").display().to_string();
    let code = fbttr(&[
        "fit",
        "--set",
        "data=csv",
        "--set",
        &format!("csv.path={missing}"),
        "--set",
        "csv.response=y",
        "--set",
        "csv.task=regression",
        "--out",
        &out,
    ])
    .status
    .code();
    assert_eq!(code, Some(4));
    // Protocol error: nobody listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let code = fbttr(&["federate", "--role", "client", "--connect", &addr, "--id", "0", "--timeout-secs", "1", "--out", &out])
        .status
        .code();
    assert_eq!(code, Some(3));
}

#[test]
fn federate_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let common = ["--clients", "2", "--seed", "3", "--set", "synth.shape=80x5x4", "--out", &out];
    let mut server_args = vec!["federate", "--role", "server", "--listen", &addr];
    server_args.extend(common);
    server_args.extend(QUICK);
    let server = Command::new(env!("CARGO_BIN_EXE_fbttr")).args(&server_args).stdout(Stdio::piped()).spawn().unwrap();
    let clients: Vec<_> = ["0", "1"]
        .iter()
        .map(|id| {
            let mut args = vec!["federate", "--role", "client", "--connect", &addr, "--id", id];
            args.extend(common);
            args.extend(QUICK);
            Command::new(env!("CARGO_BIN_EXE_fbttr")).args(&args).stdout(Stdio::piped()).spawn().unwrap()
        })
        .collect();
    assert!(server.wait_with_output().unwrap().status.success());
    for c in clients {
        assert!(c.wait_with_output().unwrap().status.success());
    }
    for f in ["model.fbttr", "model-client-0.fbttr", "model-client-1.fbttr"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
