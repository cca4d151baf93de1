use std::path::Path;
use std::process::{Command, Output};

fn hdmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdmnet"))
        .args(args)
        .env_remove("HDM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn grad_check_passes_on_fresh_init() {
    let out = hdmnet(&["grad-check", "--seed", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("episode 16x16"));
    assert!(text.contains("max relative error"));
}

#[test]
fn oracle_scores_one() {
    let out = hdmnet(&["eval", "--oracle", "--episodes", "12", "--k", "2", "--seed", "4"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().last().unwrap() == "miou=1", "{text}");
    assert!(text.starts_with("episodes=12 k=2 seed=4"));
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let unknown = hdmnet(&["eval", "--oracle", "--bogus"]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--bogus"));

    let missing = hdmnet(&["eval", "--ckpt", "/nonexistent/model.ckpt"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/model.ckpt"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = red\n");
    let bad_key = hdmnet(&["train", "--config", &cfg]);
    assert!(!bad_key.status.success());
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("unknown key `colour`"));

    let stages = write_config(dir.path(), "stages = 4\n");
    let rejected = hdmnet(&["train", "--config", &stages]);
    assert!(!rejected.status.success());
    assert!(String::from_utf8_lossy(&rejected.stderr).contains("L = 4"));
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let cfg = write_config(dir.path(), "steps = 4\nbatch = 2\ntrain_episodes = 3\nlr = 0.1\nseed = 5\n");
    let out = hdmnet(&["train", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().next(), Some("step,loss,ce,kl"));
    assert_eq!(log_text.lines().count(), 5);

    let bytes = std::fs::read(&ckpt).unwrap();
    let net = hdmnet::train::load_model(&ckpt).unwrap();
    let again = dir.path().join("again.ckpt");
    hdmnet::train::save_model(&again, &net).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let ckpt = ckpt.to_str().unwrap();
    let eval = |seed: &str| hdmnet(&["eval", "--ckpt", ckpt, "--episodes", "6", "--seed", seed]);
    let (a, b) = (eval("2"), eval("2"));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("miou="));

    let dump = dir.path().join("dump");
    let out = hdmnet(&["dump-corr", "--ckpt", ckpt, "--out", dump.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let heat = std::fs::read(dump.join("stage1_corr.pgm")).unwrap();
    assert!(heat.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(heat.len(), 11 + 64);
    assert!(std::fs::read(dump.join("prediction.pgm")).unwrap().starts_with(b"P5\n64 64\n255\n"));
}

#[test]
fn make_data_exports_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = hdmnet(&["make-data", "--out", out_dir.to_str().unwrap(), "--episodes", "3", "--k", "2", "--split", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let index = std::fs::read_to_string(out_dir.join("episodes.csv")).unwrap();
    assert_eq!(index.lines().count(), 4);
    for line in index.lines().skip(1) {
        let class: usize = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(class < 6, "train split only");
    }
    let ep = out_dir.join("episode002");
    let image = std::fs::read(ep.join("support1.ppm")).unwrap();
    assert!(image.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(image.len(), 13 + 3 * 64 * 64);
    let mask = std::fs::read(ep.join("query_mask.pgm")).unwrap();
    assert!(mask[13..].iter().all(|&b| b == 0 || b == 255));
    assert!(mask[13..].contains(&255));
}
