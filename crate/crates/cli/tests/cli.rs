use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn r2o(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2o")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, corpus: &Path) -> String {
    let text = format!(
        "[data]\nside = 32\npath = {:?}\n[augment]\nside = 32\n[encoder]\ninput_side = 32\n\
         [train]\nbatch_size = 3\nepochs = 2\nseed = 5\n[curriculum]\nk0 = 5\nk_final = 2\n\
         [output]\ndir = {:?}\ncheckpoint_every = 1\n",
        corpus.display().to_string(),
        dir.join("run").display().to_string()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn end_to_end_on_a_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "n_images = 6\nside = 32\nseed = 9\n").unwrap();
    ok(r2o(&["gen-synthetic", "--spec", spec.to_str().unwrap(), "--out", corpus.to_str().unwrap()]));
    assert_eq!(fs::read_dir(corpus.join("images")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(corpus.join("gt")).unwrap().count(), 6);

    let config = write_config(dir.path(), &corpus);
    let schedule = ok(r2o(&["schedule", "--config", &config]));
    let lines: Vec<&str> = schedule.lines().collect();
    assert_eq!(lines[0], "epoch,K,tau");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,5,") && lines[3].starts_with("2,2,1"));

    let printed = ok(r2o(&["pretrain", "--config", &config]));
    assert!(printed.contains("metrics"));
    let ckpt = dir.path().join("run").join("checkpoints").join("epoch_0002.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let abo = ok(r2o(&["eval-abo", "--config", &config, "--checkpoints", ckpt]));
    assert_eq!(abo.lines().next(), Some("epoch,K,refined_abo,slic_abo"));
    assert_eq!(abo.lines().count(), 2);

    let seg = dir.path().join("seg.csv");
    ok(r2o(&["eval-seg", "--config", &config, "--checkpoint", ckpt, "--k", "3", "--out", seg.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(&seg).unwrap().lines().count(), 7);

    let masks = dir.path().join("masks");
    let images = corpus.join("images");
    ok(r2o(&["refine", "--config", &config, "--checkpoint", ckpt, "--images", images.to_str().unwrap(), "--k", "3", "--out", masks.to_str().unwrap()]));
    assert_eq!(fs::read_dir(&masks).unwrap().count(), 6);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = r2o(&["schedule", "--config", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!r2o(&["no-such-command"]).status.success());
}
