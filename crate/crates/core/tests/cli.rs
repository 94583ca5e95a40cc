mod common;

use std::path::Path;
use std::process::{Command, Output};

fn cgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgnet")).args(args).env_remove("CGNET_OUT_ROOT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_is_reproducible_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dataset]\nscenes = 12\n");
    let a = dir.path().join("a.cgds");
    let b = dir.path().join("b.cgds");
    let c = dir.path().join("c.cgds");
    let run = |out: &Path, seed: &str| cgnet(&["generate", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
    let o = run(&a, "4");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("scenes: 12"));
    assert!(run(&b, "4").status.success());
    assert!(run(&c, "5").status.success());
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dataset]\nscenez = 12\n");
    let o = cgnet(&["generate", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("error[config]") && err.contains("scenez"), "{err}");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let o = cgnet(&["eval", "--dataset", "/nonexistent/ds.cgds", "--models", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[io]"));
}

#[test]
fn train_eval_infer_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::single_sample_dataset(1);
    let ds_path = dir.path().join("one.cgds");
    cgnet::dataset::save_dataset(&ds, &ds_path).unwrap();
    let ds_arg = ds_path.to_str().unwrap();
    let models = dir.path().join("models");
    let m_arg = models.to_str().unwrap();

    let o = cgnet(&["train", "--dataset", ds_arg, "--out", m_arg, "--iterations", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = models.join("cgnet/model.ckpt");
    assert!(ck.exists());

    // Bad method name is a usage error.
    let o = cgnet(&["eval", "--dataset", ds_arg, "--models", m_arg, "--methods", "cgnet,bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    // The test side of this dataset has no samples.
    let o = cgnet(&["eval", "--dataset", ds_arg, "--models", m_arg, "--split", "test"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[eval]"), "{}", stderr(&o));

    // A method whose model is absent.
    let o = cgnet(&["eval", "--dataset", ds_arg, "--models", m_arg, "--methods", "agn_rnd", "--split", "train"]);
    assert_eq!(o.status.code(), Some(1));

    let report = dir.path().join("report");
    let o = cgnet(&["eval", "--dataset", ds_arg, "--models", m_arg, "--split", "train", "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cgnet"));
    assert!(report.join("report.json").exists());

    let png = dir.path().join("infer.png");
    let words: Vec<&str> = ds.samples[0].command.iter().map(|&t| ds.vocab.word(t).unwrap()).collect();
    let words = words.join(" ");
    let o = cgnet(&["infer", "--checkpoint", ck.to_str().unwrap(), "--dataset", ds_arg, "--scene", "0", "--command", &words, "--out", png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read(&png).unwrap().starts_with(b"\x89PNG"));

    let o = cgnet(&["infer", "--checkpoint", ck.to_str().unwrap(), "--dataset", ds_arg, "--scene", "9", "--command", &words]);
    assert_eq!(o.status.code(), Some(2));

    let renders = dir.path().join("renders");
    let r_arg = renders.to_str().unwrap();
    let o = cgnet(&["render", "--dataset", ds_arg, "--models", m_arg, "--split", "train", "--out", r_arg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(renders.join("cgnet/sample_00000.png")).unwrap();
    assert!(cgnet(&["render", "--dataset", ds_arg, "--models", m_arg, "--split", "train", "--out", r_arg]).status.success());
    assert_eq!(first, std::fs::read(renders.join("cgnet/sample_00000.png")).unwrap());
}

#[test]
fn out_root_env_relocates_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[dataset]\nscenes = 3\n");
    let o = Command::new(env!("CARGO_BIN_EXE_cgnet"))
        .args(["generate", "--config", &cfg, "--out", "rel/ds.cgds"])
        .env("CGNET_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("rel/ds.cgds").exists());
}
