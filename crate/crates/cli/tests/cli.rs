use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
data.n_molecules = 24
data.atoms_min = 4
data.atoms_max = 8
data.box_size = 6.0
host.features = 8
host.layers = 1
host.n_rbf = 8
phi.k = 3
train.epochs = 2
train.batch_size = 8
";

fn phi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phi"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &TempDir) -> String {
    let path = dir.path().join("small.cfg");
    fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest_paths(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (hash, rel) = l.split_once(' ').unwrap();
            assert_eq!(hash.len(), 64);
            rel.to_string()
        })
        .collect()
}

#[test]
fn unknown_key_is_a_validation_error_listing_keys() {
    let dir = TempDir::new().unwrap();
    let o = phi(dir.path(), &["gen-data", "--set", "data.sed=7"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("data.sed") && err.contains("data.seed") && err.contains("train.lr"), "{err}");
}

#[test]
fn bad_value_names_the_key() {
    let dir = TempDir::new().unwrap();
    let o = phi(dir.path(), &["train", "--set", "train.lr=fast"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.lr"));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = phi(out, &["gen-data", "--config", &cfg, "--set", "data.seed=7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ma = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("manifest.txt")).unwrap());
    assert_eq!(manifest_paths(&a), ["config.txt", "dataset.xyz"]);
    let c = dir.path().join("c");
    phi(&c, &["gen-data", "--config", &cfg, "--set", "data.seed=8"]);
    assert_ne!(ma, fs::read_to_string(c.join("manifest.txt")).unwrap());
}

#[test]
fn train_eval_md_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let run = dir.path().join("train");
    let o = phi(&run, &["train", "--config", &cfg, "--set", "phi.beta=0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.starts_with("# phi train\n"));
    assert!(echo.contains("phi.beta = 0.1\n") && echo.contains("host.features = 8\n"));
    assert_eq!(
        manifest_paths(&run),
        ["best.ckpt", "config.txt", "eval.csv", "final.ckpt", "metrics.csv"]
    );
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("best.ckpt");
    let ckpt = ckpt.to_string_lossy();
    let eval = dir.path().join("eval");
    let o = phi(&eval, &["eval", "--config", &cfg, "--set", &format!("eval.checkpoint={ckpt}")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // Evaluating the best model on the same split reproduces the training report's test row.
    let test_row = |p: &Path| {
        fs::read_to_string(p.join("eval.csv")).unwrap().lines().find(|l| l.starts_with("test,")).unwrap().to_string()
    };
    assert_eq!(test_row(&run), test_row(&eval));

    let md = dir.path().join("md");
    let o = phi(
        &md,
        &["md", "--config", &cfg, "--set", &format!("md.checkpoint={ckpt}"), "--set", "md.steps=20", "--set", "md.frame_stride=10", "--set", "md.equilibration_steps=5"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(md.join("drift.csv")).unwrap().lines().count(), 22);
    assert!(fs::read_to_string(md.join("drift.txt")).unwrap().contains("trend_is_zero"));

    let o = phi(&md, &["md", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("md.checkpoint"));
}

#[test]
fn numerical_failure_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let o = phi(dir.path(), &["train", "--config", &cfg, "--set", "train.lr=1e300", "--set", "train.grad_clip=1e308"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn verify_text_and_csv_agree() {
    let dir = TempDir::new().unwrap();
    let o = phi(dir.path(), &["verify", "--set", "verify.instances=30", "--set", "verify.evp_draws=20000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    let text_pass = text.lines().filter(|l| l.starts_with("PASS")).count();
    let csv_pass = csv.lines().skip(1).filter(|l| l.ends_with(",true")).count();
    assert!(text_pass > 0);
    assert_eq!(text_pass, csv_pass);
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
}

#[test]
fn bench_writes_one_row_per_phase() {
    let dir = TempDir::new().unwrap();
    let o = phi(
        dir.path(),
        &["bench", "--set", "bench.n_list=60,120", "--set", "bench.k_list=2,4", "--set", "bench.repetitions=1"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r[3].parse::<usize>().unwrap() > 0 && r[5] != "oom"));
}

#[test]
fn hyper_search_writes_trials_and_curve() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(&dir);
    let o = phi(
        dir.path(),
        &["hyper-search", "--config", &cfg, "--set", "search.budget=3", "--set", "search.trial_epochs=1"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("trials.csv")).unwrap().lines().count(), 4);
    let evp = fs::read_to_string(dir.path().join("evp.csv")).unwrap();
    let best: Vec<f64> = evp.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}
