use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use roadcast::graphmodel::{load_frames, load_graph, load_manifest};

fn roadcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadcast"))
        .current_dir(dir)
        .env_remove("ROADCAST_OUT_DIR")
        .env_remove("ROADCAST_SEED")
        .env_remove("ROADCAST_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        stdout(&o),
        stderr(&o)
    );
    o
}

const SMALL: [&str; 8] = [
    "--nodes",
    "12",
    "--edges",
    "24",
    "--supersegments",
    "3",
    "--frames",
    "16",
];
const TINY_MODEL: [&str; 9] = [
    "--dim",
    "4",
    "--hidden",
    "8",
    "6",
    "--tvae-hidden",
    "6",
    "--tvae-latent",
    "3",
];

fn synth(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out-dir", out, "--seed", "7"];
    args.extend(SMALL);
    args.extend(extra);
    ok(roadcast(dir, &args))
}

#[test]
fn synth_files_load_back_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&synth(dir.path(), "a", &[]));
    assert!(
        out.contains("nodes 12") && out.contains("edges 24") && out.contains("supersegments 3")
    );
    assert!(out.contains("class_ratio r "));
    let a = dir.path().join("a");
    let m = load_manifest(a.join("dataset.manifest")).unwrap();
    let g = load_graph(a.join(&m.graph)).unwrap();
    let f = load_frames(a.join(&m.frames)).unwrap();
    assert_eq!(
        (g.num_nodes(), g.num_edges(), g.num_supersegments(), f.len()),
        (12, 24, 3, 16)
    );
    assert!(m.stats.is_some());
    assert!(a.join("synth.toml").exists());

    synth(dir.path(), "b", &[]);
    for name in ["graph.txt", "frames.txt", "dataset.manifest"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    synth(dir.path(), "full", &["--missing", "0"]);
    let f = load_frames(dir.path().join("full/frames.txt")).unwrap();
    assert!(f
        .iter()
        .all(|fr| fr.mask().data().iter().all(|&m| m == 1.0)));
}

#[test]
fn out_dir_precedence_flag_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let cfg = "[paths]\nmanifest = \"data/dataset.manifest\"\noutput_dir = \"from-file\"\n\
               [training]\nepochs = 1\n[model]\ndim = 4\nhidden = [8, 6]\ntvae_hidden = 6\ntvae_latent = 3\n";
    fs::write(dir.path().join("run.toml"), cfg).unwrap();

    ok(roadcast(dir.path(), &["train", "--config", "run.toml"]));
    assert!(dir.path().join("from-file/model.ckpt").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_roadcast"))
        .current_dir(dir.path())
        .env("ROADCAST_OUT_DIR", "from-env")
        .env_remove("ROADCAST_SEED")
        .args(["train", "--config", "run.toml"])
        .output()
        .unwrap();
    ok(o);
    assert!(dir.path().join("from-env/model.ckpt").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_roadcast"))
        .current_dir(dir.path())
        .env("ROADCAST_OUT_DIR", "from-env-2")
        .env_remove("ROADCAST_SEED")
        .args(["train", "--config", "run.toml", "--out-dir", "from-flag"])
        .output()
        .unwrap();
    ok(o);
    assert!(dir.path().join("from-flag/model.ckpt").exists());
    assert!(!dir.path().join("from-env-2").exists());
}

#[test]
fn train_manifest_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let mut args = vec![
        "train",
        "--manifest",
        "data/dataset.manifest",
        "--out-dir",
        "r1",
        "--epochs",
        "3",
        "--seed",
        "9",
    ];
    args.extend(TINY_MODEL);
    ok(roadcast(dir.path(), &args));
    let manifest = fs::read_to_string(dir.path().join("r1/train.toml")).unwrap();
    assert!(
        manifest.contains("seed = 9") && manifest.contains("epochs = 3"),
        "{manifest}"
    );

    ok(roadcast(
        dir.path(),
        &["train", "--config", "r1/train.toml", "--out-dir", "r2"],
    ));
    for name in ["model.ckpt", "run.txt"] {
        assert_eq!(
            fs::read(dir.path().join("r1").join(name)).unwrap(),
            fs::read(dir.path().join("r2").join(name)).unwrap()
        );
    }
}

#[test]
fn five_folds_write_fold_checkpoints_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let mut args = vec![
        "train",
        "--manifest",
        "data/dataset.manifest",
        "--out-dir",
        "k",
        "--epochs",
        "2",
    ];
    args.extend(TINY_MODEL);
    args.extend(["--enable", "five_folds"]);
    let out = stdout(&ok(roadcast(dir.path(), &args)));
    for i in 0..5 {
        assert!(dir.path().join(format!("k/fold-{i}.ckpt")).exists());
        assert!(out.contains(&format!("fold {i} ")), "{out}");
    }
    let preds = fs::read_to_string(dir.path().join("k/predictions.txt")).unwrap();
    assert!(preds.starts_with("# task congestion frames 16 rows 24"));
}

#[test]
fn rejects_averaging_window_longer_than_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadcast(
        dir.path(),
        &[
            "train",
            "--epochs",
            "5",
            "--enable",
            "average",
            "--average-k",
            "10",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least 10 epochs"), "{}", stderr(&o));
}

#[test]
fn exit_codes_for_usage_and_data_faults() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(roadcast(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        roadcast(dir.path(), &["train", "--epochs", "zero"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(roadcast(dir.path(), &["--help"]).status.code(), Some(0));
    // no data named at all is a usage problem
    assert_eq!(roadcast(dir.path(), &["train"]).status.code(), Some(1));

    fs::write(
        dir.path().join("bad.toml"),
        "[training]\nepochs = 3\nlr = \"fast\"\n",
    )
    .unwrap();
    let o = roadcast(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml:3:"), "{}", stderr(&o));

    synth(dir.path(), "data", &[]);
    let graph = fs::read_to_string(dir.path().join("data/graph.txt")).unwrap();
    let mut lines: Vec<&str> = graph.lines().collect();
    let target = lines.iter().position(|l| l.starts_with("edge")).unwrap();
    lines[target] = "edge 0 999 x";
    fs::write(dir.path().join("data/graph.txt"), lines.join("\n")).unwrap();
    let o = roadcast(
        dir.path(),
        &["train", "--manifest", "data/dataset.manifest"],
    );
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(
        msg.contains("graph.txt:") && msg.contains(&format!(":{}:", target + 1)),
        "{msg}"
    );

    let o = roadcast(dir.path(), &["inspect", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_and_eval_after_training() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let mut args = vec![
        "train",
        "--manifest",
        "data/dataset.manifest",
        "--out-dir",
        "m",
        "--epochs",
        "2",
    ];
    args.extend(TINY_MODEL);
    ok(roadcast(dir.path(), &args));
    let common = [
        "--checkpoint",
        "m/model.ckpt",
        "--manifest",
        "data/dataset.manifest",
    ];

    let mut p = vec!["predict", "--out-dir", "p"];
    p.extend(common);
    ok(roadcast(dir.path(), &p));
    let plain = fs::read_to_string(dir.path().join("p/predictions.txt")).unwrap();
    let first: Vec<&str> = plain
        .lines()
        .skip_while(|l| !l.starts_with("# frame 0"))
        .skip(1)
        .take_while(|l| !l.starts_with('#'))
        .collect();
    assert_eq!(first.len(), 24);
    assert!(first.iter().all(|l| l.split_whitespace().count() == 3));
    assert!(dir.path().join("p/predict.toml").exists());

    let mut e = vec!["predict", "--out-dir", "e", "--ensemble", "--scores", "0.7"];
    e.extend(common);
    ok(roadcast(dir.path(), &e));
    assert_eq!(
        plain,
        fs::read_to_string(dir.path().join("e/predictions.txt")).unwrap()
    );

    let mut two = vec![
        "predict",
        "--out-dir",
        "two",
        "--ensemble",
        "--scores",
        "0.7,0.9",
        "--checkpoint",
        "m/model.ckpt",
    ];
    two.extend(common);
    ok(roadcast(dir.path(), &two));
    let averaged = fs::read_to_string(dir.path().join("two/predictions.txt")).unwrap();
    assert_eq!(averaged.lines().count(), plain.lines().count());

    let mut bad = vec![
        "predict",
        "--out-dir",
        "x",
        "--ensemble",
        "--scores",
        "0.7,0.9",
    ];
    bad.extend(common);
    assert_eq!(roadcast(dir.path(), &bad).status.code(), Some(1));

    let mut ev = vec!["eval", "--out-dir", "ev"];
    ev.extend(common);
    let report = stdout(&ok(roadcast(dir.path(), &ev)));
    assert!(report.starts_with("score "));
    assert!(report.contains("class r precision"));
    let score: f64 = report.lines().next().unwrap()[6..].parse().unwrap();
    assert!(score.is_finite() && score > 0.0);

    let ins = stdout(&ok(roadcast(
        dir.path(),
        &[
            "inspect",
            "--manifest",
            "data/dataset.manifest",
            "--checkpoint",
            "m/model.ckpt",
            "--out-dir",
            "i",
        ],
    )));
    assert!(
        ins.contains("nodes 12")
            && ins.contains("frames 16")
            && ins.contains("meta task congestion")
    );
}

#[test]
fn checkpoint_graph_mismatch_is_data_fault() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", &[]);
    let mut args = vec![
        "train",
        "--manifest",
        "data/dataset.manifest",
        "--out-dir",
        "m",
        "--epochs",
        "1",
    ];
    args.extend(TINY_MODEL);
    ok(roadcast(dir.path(), &args));
    ok(roadcast(
        dir.path(),
        &[
            "synth",
            "--out-dir",
            "other",
            "--nodes",
            "10",
            "--edges",
            "20",
            "--supersegments",
            "2",
            "--frames",
            "4",
        ],
    ));
    let o = roadcast(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "m/model.ckpt",
            "--manifest",
            "other/dataset.manifest",
            "--out-dir",
            "ev",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));
}
