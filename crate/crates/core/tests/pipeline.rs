//! End-to-end runs of the `sanet` binary on the bundled smoke configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sanet::checkpoint::{checkpoint_hash, load_checkpoint};
use sanet::eval::read_cmc_csv;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sanet")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = sanet(&["synth", "--spec", s(&configs().join("smoke_spec.json")), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join("smoke_train.json");
    let mut args = vec!["train", "--data", s(data), "--config", s(&cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    sanet(&args)
}

#[test]
fn smoke_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt_dir = dir.path().join("ckpt");
    let out = train(&data, &ckpt_dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("train: seed 5"), "{stdout}");
    assert_eq!(fs::read_to_string(ckpt_dir.join("train_log.jsonl")).unwrap().lines().count(), 10);

    let eval_dir = dir.path().join("eval");
    let ckpt = ckpt_dir.join("model.json");
    let out = sanet(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&eval_dir), "--kmax", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = read_cmc_csv(&eval_dir.join("cmc.csv")).unwrap();
    assert_eq!(curve.k_max(), 4);
    assert_eq!(curve.at(4), 1.0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("CMC-1:"));

    let viz = dir.path().join("viz");
    let out = sanet(&["align-viz", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&viz), "--count", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(viz.join("theta.csv")).unwrap().lines().count(), 4);
    assert!(viz.join("run.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let again = dir.path().join("again");
    let out = sanet(&["synth", "--spec", s(&configs().join("smoke_spec.json")), "--out", s(&again)]);
    assert!(out.status.success());
    for entry in fs::read_dir(data.join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(data.join("images").join(&name)).unwrap(), fs::read(again.join("images").join(&name)).unwrap());
    }
    assert_eq!(fs::read(data.join("meta.json")).unwrap(), fs::read(again.join("meta.json")).unwrap());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &[]).status.success());
    assert_eq!(checkpoint_hash(&a.join("model.json")).unwrap(), checkpoint_hash(&b.join("model.json")).unwrap());
    for f in ["train_log.jsonl", "run.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn baseline_differs_only_in_alignment_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("smoke_train.json")).unwrap()).unwrap();
    let mut one_step = cfg.clone();
    one_step["epochs"] = 1.into();
    one_step["steps_per_epoch"] = 1.into();
    let cfg_path = dir.path().join("one.json");
    fs::write(&cfg_path, one_step.to_string()).unwrap();

    // Epoch-0 weights of both variants.
    let model_cfg: sanet::model::SANetConfig = serde_json::from_value(cfg["model"].clone()).unwrap();
    let seed = cfg["seed"].as_u64().unwrap();
    let full = sanet::model::SANet::<f32>::new(model_cfg.clone(), seed).unwrap();
    let base = sanet::model::SANet::<f32>::new(
        sanet::model::SANetConfig {
            stn_enabled: false,
            ..model_cfg
        },
        seed,
    )
    .unwrap();
    for p in full.params.iter() {
        match base.params.get(&p.name) {
            Some(b) => assert_eq!(b.value, p.value, "{}", p.name),
            None => assert!(p.name.starts_with("stn.")),
        }
    }

    let out_dir = dir.path().join("base");
    let args = ["train", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&out_dir), "--baseline"];
    assert!(sanet(&args).status.success());
    let trained = load_checkpoint(&out_dir.join("model.json")).unwrap();
    assert!(!trained.config.stn_enabled);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["stn_enabled"], false);
}

#[test]
fn exit_codes() {
    let out = sanet(&["nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let out = sanet(&["eval", "--ckpt", s(&dir.path().join("none.json")), "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let out = sanet(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
