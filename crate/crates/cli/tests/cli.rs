use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
stage = resolution=16 schedule=1x1,2x2,3x3,4x4 batch=4 lr=0.003 steps=6
depth = 1
d_model = 32
heads = 2
vocab = 32
mask_steps = 3
mask_batch = 2
codebook_images = 32
";

fn starlite(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starlite"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = starlite(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data",
            "--out-dir",
            "data",
            "--n",
            "32",
            "--resolution",
            "16",
            "--seed",
            "1",
        ],
    );
    ok(
        dir,
        &[
            "gen-data",
            "--out-dir",
            "held",
            "--n",
            "8",
            "--resolution",
            "16",
            "--seed",
            "2",
        ],
    );
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(
        dir,
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--data",
            "data",
            "--out-dir",
            "run",
        ],
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = starlite(
        dir.path(),
        &[
            "train",
            "--config",
            "missing.cfg",
            "--data",
            "d",
            "--out-dir",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
    assert_eq!(
        starlite(dir.path(), &["gen-data", "--out-dir", "x", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(starlite(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(starlite(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = starlite(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "bad.ckpt",
            "--prompt",
            "small red circle at center",
            "--out-dir",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let ckpt = fs::read(d.join("run/model.ckpt")).unwrap();
    // The echoed run.cfg is itself a valid config that reproduces the run.
    ok(
        d,
        &[
            "train",
            "--config",
            "run/run.cfg",
            "--data",
            "data",
            "--out-dir",
            "run2",
        ],
    );
    assert_eq!(fs::read(d.join("run2/model.ckpt")).unwrap(), ckpt);
    assert_eq!(
        fs::read(d.join("run2/metrics.tsv")).unwrap(),
        fs::read(d.join("run/metrics.tsv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("run2/run.cfg")).unwrap(),
        fs::read(d.join("run/run.cfg")).unwrap()
    );

    for sampler in ["topk", "gumbel", "causal"] {
        let args = |out: &'static str| {
            vec![
                "sample",
                "--checkpoint",
                "run/model.ckpt",
                "--prompt",
                "large red circle at top-left",
                "--seed",
                "7",
                "--sampler",
                sampler,
                "--count",
                "2",
                "--out-dir",
                out,
            ]
        };
        let a = ok(d, &args("s1"));
        let b = ok(d, &args("s2"));
        assert_eq!(a.replace("s1", "s2"), b);
        assert!(a.contains("seed = 7"));
        for f in ["sample_000.ppm", "sample_001.ppm", "trace.txt", "run.cfg"] {
            assert_eq!(
                fs::read(d.join("s1").join(f)).unwrap(),
                fs::read(d.join("s2").join(f)).unwrap(),
                "{sampler} {f}"
            );
        }
    }

    let table = ok(
        d,
        &[
            "ablate-sampler",
            "--checkpoint",
            "run/model.ckpt",
            "--heldout",
            "held",
            "--count",
            "4",
            "--out-dir",
            "ab",
        ],
    );
    let names: Vec<&str> = table
        .lines()
        .skip_while(|l| !l.starts_with("sampler\t"))
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(names, ["Baseline", "Smooth", "Ours"]);

    let metrics = ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--heldout",
            "held",
            "--count",
            "4",
            "--out-dir",
            "ev",
        ],
    );
    assert!(metrics.contains("alignment = ") && metrics.contains("token_accuracy = "));
    let loc = ok(
        d,
        &[
            "inspect-attn",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "held",
            "--count",
            "4",
            "--out-dir",
            "ia",
        ],
    );
    assert!(loc.contains("uniform\t3\t"));
}

#[test]
fn rope_ablation_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out-dir",
            "data",
            "--n",
            "24",
            "--resolution",
            "32",
            "--seed",
            "1",
        ],
    );
    ok(
        d,
        &[
            "gen-data",
            "--out-dir",
            "held",
            "--n",
            "4",
            "--resolution",
            "32",
            "--seed",
            "2",
        ],
    );
    let base: String = TINY
        .lines()
        .filter(|l| !l.starts_with("stage"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = format!(
        "{base}stage = resolution=16 batch=2 steps=2\nstage = resolution=32 batch=2 steps=2\n"
    );
    fs::write(d.join("two.cfg"), cfg).unwrap();
    let summary = ok(
        d,
        &[
            "ablate-rope",
            "--config",
            "two.cfg",
            "--data",
            "data",
            "--heldout",
            "held",
            "--seeds",
            "1",
            "--out-dir",
            "ar",
        ],
    );
    for run in ["normalized", "absolute", "raw", "scratch"] {
        assert!(summary.contains(&format!("0\t{run}\t")), "{run}");
    }
    let curves = fs::read_to_string(d.join("ar/rope_curves.tsv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 2 + 2 * 2 + 2);
}
