use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flix::harness::CSV_HEADER;

fn flix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flix"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLIX_THREADS")
        .output()
        .unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn csvs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

fn column(csv: &str, idx: usize) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&flix(&["run"], d)), 2);
    assert_eq!(code(&flix(&["frobnicate"], d)), 2);
    assert_eq!(code(&flix(&["run", "--config", "missing.cfg"], d)), 2);
    write_cfg(d, "bad.cfg", "run.seed = 1\nrun.colour = blue\n");
    let o = flix(&["run", "--config", "bad.cfg"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    write_cfg(d, "noseed.cfg", "run.rounds = 3\n");
    assert_eq!(code(&flix(&["run", "--config", "noseed.cfg"], d)), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_flix"))
        .args(["verify"])
        .current_dir(d)
        .env("FLIX_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn precompute_is_idempotent_and_rejects_empty_machines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(
        d,
        "p.cfg",
        "synthetic.clients = 4\nsynthetic.dim = 6\nsynthetic.per_client = 30\n",
    );
    assert_eq!(
        code(&flix(&["precompute-local", "--config", "p.cfg", "--out", "a"], d)),
        0
    );
    assert_eq!(
        code(&flix(&["precompute-local", "--config", "p.cfg", "--out", "b"], d)),
        0
    );
    let a = fs::read(d.join("a/local_models.txt")).unwrap();
    assert_eq!(a, fs::read(d.join("b/local_models.txt")).unwrap());
    let bundle = flix::harness::LocalBundle::parse(std::str::from_utf8(&a).unwrap()).unwrap();
    assert_eq!(bundle.models.len(), 4);
    assert!(bundle.certificates.iter().all(|&c| c <= 1e-6));

    fs::write(d.join("tiny.svm"), "+1 1:1\n-1 2:1\n+1 1:0.5 2:0.5\n").unwrap();
    write_cfg(
        d,
        "t.cfg",
        "problem.source = libsvm\nproblem.path = tiny.svm\nproblem.machines = 5\n",
    );
    let o = flix(&["precompute-local", "--config", "t.cfg", "--out", "c"], d);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!d.join("c/local_models.txt").exists());

    write_cfg(
        d,
        "t3.cfg",
        "problem.source = libsvm\nproblem.path = tiny.svm\nproblem.machines = 3\n",
    );
    assert_eq!(
        code(&flix(&["precompute-local", "--config", "t3.cfg", "--out", "c"], d)),
        0
    );
}

#[test]
fn alpha_grid_produces_one_csv_per_weight() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(
        d,
        "g.cfg",
        "synthetic.kind = quadratic\nsynthetic.clients = 4\nsynthetic.dim = 3\nalpha.policy = grid\n\
         alpha.grid = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0\nrun.rounds = 25\nrun.seed = 1\noutput.dir = out\n",
    );
    let o = flix(&["run", "--config", "g.cfg"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files = csvs(&d.join("out"));
    assert_eq!(files.len(), 10);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = manifest["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["file"].as_str().unwrap().to_string())
        .collect();
    let mut sorted = listed.clone();
    sorted.sort();
    assert_eq!(sorted, files);
    for f in &files {
        let text = fs::read_to_string(d.join("out").join(f)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), 26);
        let up: Vec<f64> = column(&text, 8).iter().map(|s| s.parse().unwrap()).collect();
        assert!(up.windows(2).all(|w| ((w[1] - w[0]) - 0.012).abs() < 1e-15));
    }

    // a second, smaller run leaves no stale CSVs behind
    write_cfg(
        d,
        "g2.cfg",
        "synthetic.kind = quadratic\nsynthetic.clients = 4\nsynthetic.dim = 3\nrun.rounds = 5\nrun.seed = 1\n",
    );
    assert_eq!(code(&flix(&["run", "--config", "g2.cfg", "--out", "out"], d)), 0);
    assert_eq!(csvs(&d.join("out")).len(), 1);
}

#[test]
fn identity_compressed_run_matches_plain_descent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = "synthetic.clients = 5\nsynthetic.dim = 8\nsynthetic.per_client = 30\nalpha.beta = 0.6\nrun.rounds = 40\nrun.seed = 9\n";
    write_cfg(d, "a.cfg", &format!("{base}run.algorithm = dgd\n"));
    write_cfg(
        d,
        "b.cfg",
        &format!("{base}run.algorithm = dcgd\nrun.compressor = identity\n"),
    );
    assert_eq!(code(&flix(&["run", "--config", "a.cfg", "--out", "a"], d)), 0);
    assert_eq!(code(&flix(&["run", "--config", "b.cfg", "--out", "b"], d)), 0);
    let a = fs::read_to_string(d.join("a").join(&csvs(&d.join("a"))[0])).unwrap();
    let b = fs::read_to_string(d.join("b").join(&csvs(&d.join("b"))[0])).unwrap();
    assert_eq!(column(&a, 5), column(&b, 5));
    assert_eq!(column(&a, 8), column(&b, 8));
}

#[test]
fn k_sweep_run_count_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(
        d,
        "k.cfg",
        "synthetic.clients = 3\nsynthetic.dim = 112\nsynthetic.per_client = 40\nrun.algorithm = diana\n\
         run.compressor = rand_k_sweep\nrun.rounds = 3\nrun.seed = 1\nalpha.beta = 0.5\n",
    );
    assert_eq!(code(&flix(&["run", "--config", "k.cfg", "--out", "o"], d)), 0);
    let files = csvs(&d.join("o"));
    assert_eq!(files.len(), 7);
    let mut ks: Vec<usize> = files
        .iter()
        .map(|f| {
            column(&fs::read_to_string(d.join("o").join(f)).unwrap(), 3)[0]
                .parse()
                .unwrap()
        })
        .collect();
    ks.sort();
    assert_eq!(ks, vec![1, 20, 38, 57, 75, 94, 112]);

    write_cfg(
        d,
        "s.cfg",
        "synthetic.clients = 3\nsynthetic.dim = 10\nsynthetic.per_client = 20\nrun.algorithm = dcgd\n\
         run.compressor = rand_k\nrun.k = 2\nrun.rounds = 5\nrun.seed = 1\n",
    );
    for (out, seed) in [("s1", "1"), ("s1b", "1"), ("s2", "2")] {
        assert_eq!(
            code(&flix(&["run", "--config", "s.cfg", "--out", out, "--seed", seed], d)),
            0
        );
    }
    let read = |o: &str| fs::read(d.join(o).join(&csvs(&d.join(o))[0])).unwrap();
    assert_eq!(read("s1"), read("s1b"));
    assert_ne!(read("s1"), read("s2"));
}

#[test]
fn diverging_run_is_recorded_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(
        d,
        "x.cfg",
        "synthetic.kind = quadratic\nsynthetic.clients = 3\nsynthetic.dim = 3\nalpha.policy = grid\nalpha.grid = 0.05, 1.0\n\
         run.stepsize = 5\nrun.rounds = 2000\nrun.seed = 1\n",
    );
    let o = flix(&["run", "--config", "x.cfg", "--out", "o"], d);
    assert_eq!(code(&o), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("o/manifest.json")).unwrap()).unwrap();
    let status: Vec<&str> = manifest["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["status"].as_str().unwrap())
        .collect();
    assert_eq!(status, vec!["ok", "diverged"]);
    assert_eq!(csvs(&d.join("o")).len(), 1);
}

#[test]
fn verify_passes_replays_and_catches_a_bad_stepsize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&flix(&["verify", "--out", "a"], d)), 0);
    assert_eq!(code(&flix(&["verify", "--out", "b"], d)), 0);
    let a = fs::read_to_string(d.join("a/verify_report.json")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b/verify_report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["passed"], true);
    for c in v["checks"].as_array().unwrap() {
        assert!(c["name"].is_string() && c["passed"].is_boolean());
        assert!(c["measured"].is_number() && c["bound"].is_number());
    }

    write_cfg(d, "bad.cfg", "verify.step_scale = 10\n");
    let o = flix(&["verify", "--config", "bad.cfg", "--out", "c"], d);
    assert_eq!(code(&o), 1);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("c/verify_report.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn budget_table_and_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(
        d,
        "q.cfg",
        "synthetic.kind = quadratic\nsynthetic.clients = 4\nsynthetic.dim = 3\nbudget.epsilon = 1e-3\n",
    );
    let o = flix(&["budget", "--config", "q.cfg", "--out", "o"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("A = ") && text.contains("communications"));
    assert_eq!(text, fs::read_to_string(d.join("o/budget.txt")).unwrap());
    // the first table row is the zero-weight rung
    let row = text.lines().skip_while(|l| !l.starts_with("beta_lo")).nth(1).unwrap();
    assert!(row.starts_with("0e0\t0e0\t0\t"));

    write_cfg(
        d,
        "v.cfg",
        "synthetic.clients = 2\nalpha.policy = values\nalpha.values = 0.2, 0.9\n",
    );
    assert_eq!(code(&flix(&["budget", "--config", "v.cfg"], d)), 2);
    write_cfg(
        d,
        "l.cfg",
        "synthetic.clients = 3\nsynthetic.lambda = 0\nsynthetic.per_client = 200\n",
    );
    assert_eq!(code(&flix(&["budget", "--config", "l.cfg"], d)), 2);
}
