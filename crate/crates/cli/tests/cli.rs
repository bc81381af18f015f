use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bavt::imgproc::MaskGrid;

const TINY: &str = "vit.image_size = 16
vit.patch_size = 4
vit.embed_dim = 8
vit.depth = 2
vit.heads = 2
vit.mlp_ratio = 4
vit.decoder_channels = 8,4,2
train.epochs = 3
train.batch_size = 2
train.lr_max = 1e-2
";

fn bavt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bavt")).args(args).env_remove("BAVT_OUT_ROOT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Six 16x16 phantoms: four train, one val, one test.
fn small_data(root: &Path) -> PathBuf {
    let d = root.join("data");
    let o = bavt(&["gen", "--n", "6", "--size", "16", "--ratio", "0.667", "--width-root", "2", "--seed", "1", "--out", s(&d)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    d
}

fn tiny_config(root: &Path) -> PathBuf {
    let p = root.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_writes_split_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = bavt(&["gen", "--n", "134", "--size", "64", "--seed", "7", "--out", s(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files = tree(&a);
    assert_eq!(files.keys().filter(|k| k.starts_with("images")).count(), 134);
    assert_eq!(files.keys().filter(|k| k.starts_with("masks")).count(), 134);
    let manifest = String::from_utf8(files[Path::new("manifest.txt")].clone()).unwrap();
    assert_eq!(manifest.matches("split=train").count(), 104);
    assert_eq!(manifest.matches("split=val").count() + manifest.matches("split=test").count(), 30);
    assert_eq!(files, tree(&b));
}

#[test]
fn gen_rejects_empty_split() {
    let t = tempfile::tempdir().unwrap();
    let o = bavt(&["gen", "--n", "2", "--out", s(&t.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("split"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&bavt(&["gen", "--bogus"])), 1);
    assert_eq!(code(&bavt(&["--help"])), 0);
}

#[test]
fn train_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = tiny_config(t.path());
    let run = t.path().join("run");
    let o = bavt(&["train", "--data", s(&data), "--config", s(&cfg), "--lambda", "0.01", "--mode", "signed", "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);
    for f in ["best.ckpt", "final.ckpt", "config.cfg", "run_manifest.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(run.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("config.loss.lambda=0.01"));
    assert!(manifest.contains("artifact=") && manifest.contains("final.ckpt"));

    let ev = t.path().join("eval");
    let o = bavt(&["eval", "--data", s(&data), "--checkpoint", s(&run.join("final.ckpt")), "--split", "train", "--roc", "--save-preds", "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# threshold=0.5\n"));
    assert_eq!(metrics.lines().count(), 2 + 4 + 2);
    assert_eq!(std::fs::read_dir(ev.join("roc")).unwrap().count(), 4);
    assert_eq!(std::fs::read_dir(ev.join("preds")).unwrap().count(), 4);
}

#[test]
fn lambda_zero_runs_baseline() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = tiny_config(t.path());
    let o = bavt(&["train", "--data", s(&data), "--config", s(&cfg), "--lambda", "0", "--epochs", "1", "--out", s(&t.path().join("r"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snap = std::fs::read_to_string(t.path().join("r/config.cfg")).unwrap();
    assert!(snap.contains("loss.lambda = 0\n"));
}

#[test]
fn deterministic_train_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = tiny_config(t.path());
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let dir = t.path().join(name);
        let o = bavt(&["--deterministic", "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outs.push(dir);
    }
    for f in ["history.csv", "best.ckpt", "final.ckpt"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f}");
    }

    let o = bavt(&[
        "--deterministic",
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--resume",
        s(&outs[0].join("final.ckpt")),
        "--out",
        s(&t.path().join("noop")),
    ]);
    // A finished run resumes to the same final state.
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(t.path().join("noop/final.ckpt")).unwrap(), std::fs::read(outs[0].join("final.ckpt")).unwrap());
}

#[test]
fn invalid_config_key_names_key_and_line() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = t.path().join("bad.cfg");
    std::fs::write(&cfg, format!("{TINY}\n# comment\ntrain.learning_rate = 1\n")).unwrap();
    let o = bavt(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&t.path().join("r"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("train.learning_rate") && err.contains("line 13"), "{err}");
}

#[test]
fn divergence_exits_with_3() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = t.path().join("hot.cfg");
    std::fs::write(&cfg, TINY.replace("train.lr_max = 1e-2", "train.lr_max = 1e300")).unwrap();
    let out = t.path().join("r");
    let o = bavt(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(out.join("history.csv").exists());
}

#[test]
fn eval_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = tiny_config(t.path());
    let run = t.path().join("run");
    assert_eq!(code(&bavt(&["train", "--data", s(&data), "--config", s(&cfg), "--epochs", "1", "--out", s(&run)])), 0);
    let ckpt = run.join("final.ckpt");

    let other = t.path().join("other.cfg");
    std::fs::write(&other, TINY.replace("vit.embed_dim = 8", "vit.embed_dim = 16")).unwrap();
    let o = bavt(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--config", s(&other), "--out", s(&t.path().join("e1"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("different architecture"));

    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    let line = manifest.lines().find(|l| l.contains("split=test")).unwrap();
    let mask = line.split_whitespace().find_map(|kv| kv.strip_prefix("mask=")).unwrap();
    std::fs::remove_file(data.join(mask)).unwrap();
    let o = bavt(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&t.path().join("e2"))]);
    assert_eq!(code(&o), 2);
    let image = line.split_whitespace().find_map(|kv| kv.strip_prefix("image=")).unwrap();
    assert!(stderr(&o).contains(mask) && stderr(&o).contains(image), "{}", stderr(&o));
}

#[test]
fn ablate_table_shape() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let cfg = tiny_config(t.path());
    let out = t.path().join("ab");
    let o = bavt(&["ablate", "--data", s(&data), "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "method,seed,sensitivity,specificity,f1,accuracy,auc,iou");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("baseline,") && rows[2].starts_with("BAVT,"));
    let manifest = std::fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    let gap: f64 = manifest.lines().find_map(|l| l.strip_prefix("first_step_gradient_gap.0=")).unwrap().parse().unwrap();
    assert!(gap > 0.0);

    let out3 = t.path().join("ab3");
    let o = bavt(&["ablate", "--data", s(&data), "--config", s(&cfg), "--epochs", "1", "--seeds", "0,1,2", "--out", s(&out3)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out3.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 2);
    assert!(csv.contains("baseline-median,,") && csv.contains("BAVT-median,,"));
}

#[test]
fn inspect_sdt_on_line_fixture() {
    let t = tempfile::tempdir().unwrap();
    let mask = t.path().join("line.png");
    bavt::io::write_mask(&mask, &MaskGrid::new(1, 3, vec![0, 1, 0]).unwrap()).unwrap();
    let o = bavt(&["inspect", "sdt", "--mask", s(&mask), "--out", s(t.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sdm = bavt::io::read_sdm(&t.path().join("line.sdm")).unwrap();
    assert_eq!(sdm.data(), &[1.0, -1.0, 1.0]);
    assert!(t.path().join("line_sdm.png").exists());
}

#[test]
fn inspect_augment_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path());
    let (img, mask) = (data.join("images/0000.png"), data.join("masks/0000.png"));
    let mut panels = Vec::new();
    for name in ["a", "b"] {
        let out = t.path().join(name);
        let o = bavt(&["inspect", "augment", "--image", s(&img), "--mask", s(&mask), "--seed", "5", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        panels.push(tree(&out));
    }
    assert_eq!(panels[0].len(), 2);
    assert_eq!(panels[0], panels[1]);
}

#[test]
fn inspect_model_reports_counts_and_convention() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("base.cfg");
    std::fs::write(&cfg, "vit.image_size = 512\nvit.patch_size = 16\nvit.embed_dim = 768\nvit.depth = 12\nvit.heads = 12\nvit.decoder_channels = 256,128,64,32,16\n").unwrap();
    let o = bavt(&["inspect", "model", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let total: f64 = text.lines().find_map(|l| l.strip_prefix("params.total ")).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((total - 86e6).abs() <= 0.05 * 86e6);
    assert!(text.contains("1024 tokens"));
    assert!(text.contains("convention: 1 multiply-accumulate = 2 FLOPs"));
}

#[test]
fn env_sets_default_output_root() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bavt"))
        .args(["gen", "--n", "3", "--size", "16", "--ratio", "0.34", "--width-root", "2"])
        .env("BAVT_OUT_ROOT", t.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.path().join("data/manifest.txt").exists());
}
