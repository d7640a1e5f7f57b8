use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use debtrank_cli::{run, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME};
use serde_json::Value;

fn invoke(args: &[&str]) -> i32 {
    let mut full = vec!["debtrank"];
    full.extend_from_slice(args);
    run(full)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let idx = reader
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == name)
        .unwrap();
    reader
        .records()
        .map(|r| r.unwrap()[idx].to_string())
        .collect()
}

/// Two banks lending to each other with `Lambda_01 = 1` and `Lambda_10 = 4`.
fn two_bank_setup(dir: &Path, extra: &str) -> PathBuf {
    write(
        dir,
        "banks.csv",
        "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
         a,110,100,10,40\n\
         b,140,130,40,10\n",
    );
    write(dir, "net.csv", "i,j,weight\n0,1,10\n1,0,40\n");
    write(
        dir,
        "cfg.toml",
        &format!("input = \"banks.csv\"\nnetwork = \"net.csv\"\np_shock = 1.0\nn_shock_realizations = 1\n{extra}"),
    )
}

fn small_synthetic(dir: &Path, extra: &str) -> PathBuf {
    write(
        dir,
        "cfg.toml",
        &format!(
            "p = 0.3\nn_networks = 4\nn_shock_realizations = 3\np_shock = 0.1\n\
             alpha_grid = [0.0, 1.5]\nx_shock_grid = [0.005, 0.02]\n{extra}\n[synthetic]\nn = 30\n"
        ),
    )
}

#[test]
fn stability_of_two_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_bank_setup(dir.path(), "alpha = 0.5\n");
    let out = dir.path().join("out");
    let code = invoke(&[
        "stability",
        "-q",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let lambda: f64 = column(&out.join("stability.csv"), "lambda_max")[0]
        .parse()
        .unwrap();
    assert!((lambda - 2.0).abs() < 1e-8, "{lambda}");
    let s = summary(&out);
    assert_eq!(s["command"], "stability");
    // ln 2 > 0.5, so the single network is unstable at the configured alpha.
    assert_eq!(s["results"]["assessment"]["unstable"], 1);
}

#[test]
fn zero_shock_gives_no_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_bank_setup(dir.path(), "x_shock = 0.0\n");
    let out = dir.path().join("out");
    assert_eq!(
        invoke(&[
            "run",
            "-q",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let s = summary(&out);
    assert_eq!(s["results"]["h_inf"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(s["results"]["n_runs"], 1);
    let h = column(&out.join("trajectory.csv"), "H");
    assert!(h.iter().all(|x| x.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn single_cell_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(dir.path(), "alpha = 1.5\nx_shock = 0.02");
    let run_out = dir.path().join("run");
    let sweep_out = dir.path().join("sweep");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        invoke(&[
            "run",
            "-q",
            "--config",
            cfg,
            "--out",
            run_out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert_eq!(
        invoke(&[
            "sweep",
            "-q",
            "--config",
            cfg,
            "--out",
            sweep_out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let mean_run = summary(&run_out)["results"]["h_inf"]["mean"]
        .as_f64()
        .unwrap();
    let surface = sweep_out.join("surface.csv");
    let alphas = column(&surface, "alpha");
    let shocks = column(&surface, "x_shock");
    let means = column(&surface, "mean_H_inf");
    let k = (0..alphas.len())
        .find(|&k| alphas[k] == "1.5" && shocks[k] == "0.02")
        .unwrap();
    assert_eq!(means[k].parse::<f64>().unwrap(), mean_run);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(dir.path(), "write_weights = true");
    let cfg = cfg.to_str().unwrap();
    let tables = [
        ("reconstruct", vec!["reconstruction.csv", "weights.csv"]),
        ("run", vec!["trajectory.csv", "runs.csv", "weights.csv"]),
        ("sweep", vec!["surface.csv"]),
        ("stability", vec!["stability.csv"]),
    ];
    for (cmd, files) in tables {
        let out = dir.path().join(cmd);
        let out = out.to_str().unwrap();
        assert_eq!(
            invoke(&[cmd, "-q", "--config", cfg, "--out", out, "--seed", "11"]),
            EXIT_OK
        );
        let first: Vec<Vec<u8>> = files
            .iter()
            .chain(&["summary.json"])
            .map(|f| fs::read(Path::new(out).join(f)).unwrap())
            .collect();
        assert_eq!(
            invoke(&[cmd, "-q", "--config", cfg, "--out", out, "--seed", "11"]),
            EXIT_OK
        );
        for (f, bytes) in files.iter().chain(&["summary.json"]).zip(first) {
            assert_eq!(
                fs::read(Path::new(out).join(f)).unwrap(),
                bytes,
                "{cmd}: {f} changed"
            );
        }
    }
}

#[test]
fn seed_flag_changes_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        invoke(&[
            "reconstruct",
            "-q",
            "--config",
            cfg,
            "--out",
            a.to_str().unwrap(),
            "--seed",
            "1"
        ]),
        EXIT_OK
    );
    assert_eq!(
        invoke(&[
            "reconstruct",
            "-q",
            "--config",
            cfg,
            "--out",
            b.to_str().unwrap(),
            "--seed",
            "2"
        ]),
        EXIT_OK
    );
    assert_eq!(summary(&a)["seeds"]["base_seed"], 1);
    assert_eq!(summary(&a)["config"]["base_seed"], 1);
    assert_ne!(
        column(&a.join("reconstruction.csv"), "seed"),
        column(&b.join("reconstruction.csv"), "seed")
    );
}

#[test]
fn generate_round_trips_through_input() {
    let dir = tempfile::tempdir().unwrap();
    let gen_out = dir.path().join("gen");
    let cfg = write(dir.path(), "gen.toml", "[synthetic]\nn = 25\n");
    let code = invoke(&[
        "generate",
        "-q",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        gen_out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(code, EXIT_OK);
    let s = summary(&gen_out);
    assert_eq!(s["seeds"]["synthetic_seed"], 4);
    assert_eq!(s["results"]["n_banks"], 25);
    let system = debtrank::io::load_balance_sheets(gen_out.join("banks.csv")).unwrap();
    let expected = debtrank::synthetic::generate_synthetic(&debtrank::synthetic::SyntheticParams {
        n: 25,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(system.banks(), expected.banks());

    // Relative input paths resolve against the config file's directory.
    let cfg = write(
        dir.path(),
        "use.toml",
        "input = \"gen/banks.csv\"\np = 0.5\nn_networks = 2\n",
    );
    let out = dir.path().join("rec");
    assert_eq!(
        invoke(&[
            "reconstruct",
            "-q",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert_eq!(summary(&out)["results"]["system"]["n_banks"], 25);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("out");
    let out = out.to_str().unwrap();
    let missing = d.join("missing.toml");
    assert_eq!(
        invoke(&["run", "--config", missing.to_str().unwrap(), "--out", out]),
        EXIT_CONFIG
    );
    let bad_value = write(d, "bad.toml", "p = 2.0\n");
    assert_eq!(
        invoke(&["run", "--config", bad_value.to_str().unwrap(), "--out", out]),
        EXIT_CONFIG
    );
    let unknown = write(d, "unknown.toml", "alpah = 1.0\n");
    assert_eq!(
        invoke(&["run", "--config", unknown.to_str().unwrap(), "--out", out]),
        EXIT_CONFIG
    );
    assert_eq!(invoke(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(invoke(&["run", "--seed", "minus-one"]), EXIT_CONFIG);

    write(d, "broken.csv", "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\na,10,12,1,1\n");
    let broken = write(d, "broken.toml", "input = \"broken.csv\"\n");
    assert_eq!(
        invoke(&["run", "--config", broken.to_str().unwrap(), "--out", out]),
        EXIT_DATA
    );
    let absent = write(d, "absent.toml", "input = \"nowhere.csv\"\n");
    assert_eq!(
        invoke(&[
            "stability",
            "--config",
            absent.to_str().unwrap(),
            "--out",
            out
        ]),
        EXIT_DATA
    );

    // Only one ordered pair can carry an edge, so p = 0.5 is unreachable.
    write(
        d,
        "lopsided.csv",
        "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
         a,100,90,10,0\n\
         b,100,90,0,10\n\
         c,100,90,0,0\n",
    );
    let lopsided = write(d, "lopsided.toml", "input = \"lopsided.csv\"\np = 0.5\n");
    assert_eq!(
        invoke(&[
            "reconstruct",
            "--config",
            lopsided.to_str().unwrap(),
            "--out",
            out
        ]),
        EXIT_RUNTIME
    );
}

#[test]
fn binary_reports_on_stderr_and_respects_quiet() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_bank_setup(dir.path(), "");
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_debtrank");
    let base = [
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];

    let loud = Command::new(bin).args(base).output().unwrap();
    assert!(loud.status.success());
    assert!(String::from_utf8_lossy(&loud.stderr).contains("wrote"));
    assert!(loud.stdout.is_empty());

    let quiet = Command::new(bin)
        .args(base)
        .arg("--quiet")
        .output()
        .unwrap();
    assert!(quiet.status.success());
    assert!(quiet.stderr.is_empty());

    let failed = Command::new(bin)
        .args(["run", "--config", "/nonexistent/cfg.toml"])
        .output()
        .unwrap();
    assert_eq!(failed.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("configuration error"));
}
