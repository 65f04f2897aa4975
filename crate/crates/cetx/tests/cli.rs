use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn cetx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cetx"))
        .args(args)
        .env("CETX_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3

[synthetic]
num_classes = 3
channels = 2
length = 64
per_class = 6
groups = 4
noise_std = 0.3

[model]
filters = [4, 6, 8]
dropout = [0.0, 0.1, 0.0]
hidden_units = 8

[train]
epochs = 2
batch_size = 8
learning_rate = 0.003

[perturb]
mask_length = 16
"#;

/// Train the tiny configuration into `dir/run`.
fn train_tiny(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let run = dir.join("run");
    let o = cetx(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    run
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn phis(path: &Path) -> Vec<f64> {
    rows(path).iter().map(|r| r[0].parse().unwrap()).collect()
}

#[test]
fn argument_errors_exit_with_code_two_on_one_line() {
    for args in [&[][..], &["bogus"][..], &["train", "--nope"][..], &["eval", "--checkpoint", "x"][..]] {
        let o = cetx(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("error: args:"), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
    let o = cetx(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep"));
}

#[test]
fn run_errors_exit_nonzero_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    let o = cetx(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim_end(), "error: train.epochs: must be at least 1");

    let o = cetx(&["synth-data", "--out", s(&dir.path().join("d.cetd")), "--classes", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("num_classes"), "{}", stderr(&o));
    assert!(!dir.path().join("d.cetd").exists());

    let o = cetx(&["train", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"));
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cetd");
    let b = dir.path().join("b.cetd");
    let c = dir.path().join("c.cetd");
    let args = ["--classes", "4", "--channels", "2", "--length", "50", "--per-class", "5", "--groups", "3"];
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let mut v = vec!["synth-data", "--out", s(out), "--seed", seed];
        v.extend(args);
        let o = cetx(&v);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ds = cetx::windows_file::load_windows_file(&dir.path().join("a.cetd")).unwrap();
    assert_eq!((ds.len(), ds.channels(), ds.window_length(), ds.num_classes()), (20, 2, 50, 4));
}

#[test]
fn train_eval_and_sweep_write_consistent_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "");
    for f in ["config.toml", "model.cetm", "train_report.csv", "test_windows.cetd"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = rows(&run.join("train_report.csv"));
    assert_eq!(report.len(), 2);

    let ckpt = run.join("model.cetm");
    let data = run.join("test_windows.cetd");
    let eval = dir.path().join("eval");
    let o = cetx(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = phis(&eval.join("fscore_vs_entropy.csv"));
    assert_eq!(grid, (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
    for f in ["avgexit_tradeoff.csv", "exit_fractions.csv"] {
        assert_eq!(phis(&eval.join(f)), grid);
    }
    assert_eq!(rows(&eval.join("per_class_confidence.csv")).len(), 11 * 3);
    assert_eq!(rows(&eval.join("per_exit_metrics.csv")).len(), 3);
    let fractions = rows(&eval.join("exit_fractions.csv"));
    assert_eq!(fractions[0][1..], ["0", "0", "1"]);

    let sweep = dir.path().join("sweep");
    let start = Instant::now();
    let o = cetx(&["sweep", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&sweep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let grid = phis(&sweep.join("fscore_vs_entropy.csv"));
    assert_eq!(grid.len(), 101);
    assert!(grid.windows(2).all(|w| w[0] < w[1]));
    let avg: Vec<f64> = rows(&sweep.join("fscore_vs_entropy.csv")).iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(avg.windows(2).all(|w| w[0] >= w[1]));

    let listed = dir.path().join("listed");
    let o = cetx(&["sweep", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&listed), "--phi", "0.9,0.1,0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(phis(&listed.join("fscore_vs_entropy.csv")), vec![0.1, 0.9]);

    let o = cetx(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&listed), "--phi", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: phi:"), "{}", stderr(&o));
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let extra = "\n[eval]\nselect_phi = true\nvalidation_fraction = 0.3\n";
    let run_a = train_tiny(a.path(), extra);
    let first = file_bytes(&run_a);
    assert!(first.iter().any(|(n, _)| n == "phi_selection.csv"));
    std::fs::remove_dir_all(&run_a).unwrap();
    let run_a = train_tiny(a.path(), extra);
    assert_eq!(first, file_bytes(&run_a));

    let eval = |run: &Path, out: &Path| {
        let o = cetx(&[
            "eval",
            "--checkpoint",
            s(&run.join("model.cetm")),
            "--data",
            s(&run.join("test_windows.cetd")),
            "--out",
            s(out),
            "--test-noise",
            "0.3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (ea, eb) = (a.path().join("eval"), a.path().join("eval2"));
    eval(&run_a, &ea);
    eval(&run_a, &eb);
    assert_eq!(file_bytes(&ea), file_bytes(&eb));
}

#[test]
fn csv_data_can_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "");
    let ds = cetx::windows_file::load_windows_file(&run.join("test_windows.cetd")).unwrap();
    let mut text = String::new();
    for i in 0..ds.len() {
        let mut row = vec![ds.groups()[i].to_string(), ds.labels()[i].to_string()];
        row.extend(ds.window(i).iter().map(|v| format!("{v:?}")));
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let csv = dir.path().join("test.csv");
    std::fs::write(&csv, text).unwrap();
    let ckpt = run.join("model.cetm");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = cetx(&["eval", "--checkpoint", s(&ckpt), "--data", s(&csv), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cetx(&["eval", "--checkpoint", s(&ckpt), "--data", s(&run.join("test_windows.cetd")), "--out", s(&b)]);
    assert!(o.status.success());
    let (fa, fb) = (file_bytes(&a), file_bytes(&b));
    // Same windows either way; only the echoed data path differs.
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "config.toml" {
            assert_eq!(ba, bb, "{na}");
        }
    }
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let start = Instant::now();
    let o = cetx(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(120));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",ok")), "{out}");
    assert!(out.contains("network_3_block"));

    let o = cetx(&["gradcheck", "--inject-fault", "conv1d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: gradient check failed"), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let o = cetx(&["gradcheck", "--inject-fault", "teleport"]);
    assert_eq!(o.status.code(), Some(1));
}
