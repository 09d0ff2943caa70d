use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in a few seconds
radio = wifi
k = 16
l = 4
nr = 1
envs = 4
classes = 3
obs = 4
channels = 2,3,4
hidden = 6
alpha = 4
iota = 3
adjust_channels = 2
epochs = 1
n_query = 2
folds = 2
seeds = 0,1
shots = 1,2
eval_episodes = 5
ft_steps = 5
";

fn rfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfnet"))
        .args(args)
        .env("RF_NET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rfnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flags_are_rejected_with_usage() {
    for args in [&["gen", "--bogus", "1"][..], &["selftest", "--fast"], &["frobnicate"]] {
        let out = rfnet(args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage"), "{err}");
    }
}

#[test]
fn bad_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "nonsense = 3\n").unwrap();
    let out = rfnet(&["crossval", "--config", path(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.rfds");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let stdout = ok(&[
        "gen",
        "--radio",
        "wifi",
        "--envs",
        "3",
        "--classes",
        "3",
        "--obs",
        "4",
        "--seed",
        "5",
        "--k",
        "16",
        "--l",
        "4",
        "--nr",
        "1",
        "--out",
        path(&data),
    ]);
    assert!(stdout.contains("36 observations"), "{stdout}");
    assert_eq!(&fs::read(&data).unwrap()[..4], b"RFDS");

    for method in ["rfnet", "pn"] {
        let out = dir.path().join(method);
        ok(&[
            "train",
            "--data",
            path(&data),
            "--method",
            method,
            "--config",
            path(&cfg),
            "--out",
            path(&out),
        ]);
        for f in ["model.rfck", "loss_trace.csv", "config.txt"] {
            assert!(out.join(f).exists(), "{method}: missing {f}");
        }
        let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
        assert!(trace.lines().count() > 1);

        let ckpt = out.join("model.rfck");
        let first = ok(&[
            "eval",
            "--ckpt",
            path(&ckpt),
            "--data",
            path(&data),
            "--shots",
            "2",
            "--episodes",
            "6",
        ]);
        assert!(first.contains(&format!("{method} 2-shot accuracy")), "{first}");
        let again = ok(&[
            "eval",
            "--ckpt",
            path(&ckpt),
            "--data",
            path(&data),
            "--shots",
            "2",
            "--episodes",
            "6",
        ]);
        assert_eq!(first, again);
    }
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("a.rfds");
    let other = dir.path().join("b.rfds");
    let gen = |out: &Path, k: &str| {
        ok(&[
            "gen",
            "--envs",
            "2",
            "--classes",
            "3",
            "--obs",
            "3",
            "--k",
            k,
            "--l",
            "4",
            "--nr",
            "1",
            "--out",
            path(out),
        ]);
    };
    gen(&data, "16");
    gen(&other, "8");
    let model = dir.path().join("m");
    ok(&[
        "train",
        "--data",
        path(&data),
        "--config",
        path(&cfg),
        "--set",
        "epochs=0",
        "--out",
        path(&model),
    ]);
    let out = rfnet(&[
        "eval",
        "--ckpt",
        path(&model.join("model.rfck")),
        "--data",
        path(&other),
    ]);
    assert!(!out.status.success());
}

#[test]
fn crossval_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let runs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let stdout = ok(&[
                "crossval",
                "--config",
                path(&cfg),
                "--set",
                "method=ft",
                "--out",
                path(&out),
            ]);
            assert!(stdout.contains("mean_accuracy"), "{stdout}");
            for f in [
                "metrics.csv",
                "episodes.csv",
                "loss_trace.csv",
                "summary.txt",
                "config.txt",
            ] {
                assert!(out.join(f).exists(), "missing {f}");
            }
            fs::read(out.join("metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let text = String::from_utf8(runs[0].clone()).unwrap();
    // 2 folds x 2 seeds x 2 shot counts, plus the header
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().skip(1).all(|l| l.starts_with("ft,")));
}

#[test]
fn crossval_compares_several_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("all");
    let stdout = ok(&[
        "crossval",
        "--config",
        path(&cfg),
        "--methods",
        "rfnet,rfnet-star,ft,pn",
        "--out",
        path(&out),
    ]);
    for m in ["rfnet ", "rfnet-star", "ft ", "pn "] {
        assert!(stdout.contains(m), "{m} missing:\n{stdout}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4 * 2 * 2 * 2);
    assert!(!rfnet(&["crossval", "--config", path(&cfg), "--methods", "maml"])
        .status
        .success());
}
