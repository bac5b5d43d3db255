use std::path::Path;
use std::process::{Command, Output};

fn loopformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopformer"))
        .args(args)
        .env("LOOPFORMER_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const BASE: &[&str] = &[
    "--set",
    "data.vocab_size=32768",
    "--set",
    "model.d_model=512",
    "--set",
    "model.d_ff=2048",
    "--set",
    "model.heads=8",
    "--set",
    "model.enc_mode=stacked",
    "--set",
    "model.enc_layers=6",
    "--set",
    "model.enc_loops=1",
    "--set",
    "model.dec_mode=stacked",
    "--set",
    "model.dec_layers=6",
    "--set",
    "model.dec_loops=1",
];

#[test]
fn count_params_on_base_dims() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["count-params", "--out-dir", p(dir.path())];
    args.extend_from_slice(BASE);
    let o = loopformer(&args);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    let total: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 62e6).abs() <= 0.05 * 62e6, "{total}");
    assert!(stdout(&o).contains(&format!("{total}")));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# base dims\nmodel.d_model = 512\nmodel.heads = 8\n").unwrap();
    let o = loopformer(&[
        "count-params",
        "--config",
        p(&conf),
        "--set",
        "model.heads=7",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.heads"));
    let o = loopformer(&[
        "count-params",
        "--config",
        p(&conf),
        "--out-dir",
        p(dir.path()),
    ]);
    assert!(stdout(&o).contains("d_model=512"), "{o:?}");
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(
        loopformer(&["count-params", "--set", "bogus.key=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        loopformer(&["count-params", "--set", "model.dropout"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        loopformer(&["count-params", "--set", "model.dropout=1.5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(loopformer(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(loopformer(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = loopformer(&["score", "--hyp", p(&missing), "--ref", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = loopformer(&[
        "translate",
        "--checkpoint",
        p(&junk),
        "--vocab",
        p(&junk),
        "--input",
        p(&junk),
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_closed_chain() {
    let dir = tempfile::tempdir().unwrap();
    let o = loopformer(&[
        "grad-check",
        "--set",
        "model.enc_mode=closed-chain",
        "--set",
        "model.enc_layers=3",
        "--set",
        "model.dec_mode=closed-chain",
        "--set",
        "model.dec_layers=3",
        "--out-dir",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
    assert!(csv.contains("clone_and_sum"));
}

#[test]
fn train_translate_score_on_copy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = loopformer(&["make-data", "--out-dir", p(&data)]);
    assert!(o.status.success(), "{o:?}");
    let run = d.join("run");
    let o = loopformer(&[
        "train",
        "--set",
        "train.stop_accuracy=0.99",
        "--set",
        "train.checkpoint_interval=250",
        "--average-last",
        "2",
        "--out-dir",
        p(&run),
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("final loss"), "{out}");
    for f in [
        "config.resolved",
        "metrics.csv",
        "vocab.txt",
        "ckpt-250",
        "ckpt-avg",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    // make-data and train draw the same synthetic corpus from the same seed
    assert_eq!(
        std::fs::read(run.join("vocab.txt")).unwrap(),
        std::fs::read(data.join("vocab.txt")).unwrap()
    );

    let last = out
        .lines()
        .find_map(|l| l.strip_prefix("checkpoint "))
        .unwrap();
    let hyp = d.join("hyp.txt");
    let o = loopformer(&[
        "translate",
        "--checkpoint",
        last,
        "--vocab",
        p(&run.join("vocab.txt")),
        "--input",
        p(&data.join("valid.src")),
        "--output",
        p(&hyp),
    ]);
    assert!(o.status.success(), "{o:?}");
    let got = std::fs::read_to_string(&hyp).unwrap();
    let want = std::fs::read_to_string(data.join("valid.tgt")).unwrap();
    let exact = got
        .lines()
        .zip(want.lines())
        .filter(|(a, b)| a == b)
        .count();
    let lines = want.lines().count();
    assert_eq!(got.lines().count(), lines);
    assert!(
        exact as f64 >= 0.9 * lines as f64,
        "{exact}/{lines} lines exact"
    );

    let o = loopformer(&[
        "score",
        "--hyp",
        p(&hyp),
        "--ref",
        p(&data.join("valid.tgt")),
    ]);
    assert!(o.status.success());
    let line = stdout(&o);
    let bleu: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(bleu > 90.0, "{line}");
}

#[test]
fn debug_logging_reports_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_loopformer"))
        .args([
            "train",
            "--set",
            "train.max_steps=3",
            "--set",
            "train.eval_interval=0",
        ])
        .args(["--set", "data.samples=50", "--out-dir", p(dir.path())])
        .env("LOOPFORMER_LOG", "debug")
        .output()
        .unwrap();
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.matches("] step ").count(), 3, "{err}");
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}
