use std::path::Path;
use std::process::{Command, Output};

fn darslp(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darslp"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("run darslp")
}

const TINY: &[&str] = &[
    "--stage-override",
    "synth.n_train=6",
    "--stage-override",
    "synth.n_dev=2",
    "--stage-override",
    "synth.n_test=2",
    "--stage-override",
    "ae.max_steps=5",
];

#[test]
fn show_config_prints_effective_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = darslp(dir.path(), &["--seed", "5", "show-config"]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["paths"]["workdir"], dir.path().to_str().unwrap());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = darslp(dir.path(), &["train-gen", "--phase", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = darslp(dir.path(), &["--stage-override", "gen.bogus=1", "synth-data"]);
    assert_eq!(out.status.code(), Some(2));

    let out = darslp(dir.path(), &["analyze-latents", "--what", "histogram"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join(".darslp.lock"), std::process::id().to_string()).unwrap();
    let out = darslp(dir.path(), &["synth-data"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stages_report_cached_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cmd: &str| {
        let mut args = TINY.to_vec();
        args.push(cmd);
        let out = darslp(dir.path(), &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(run("synth-data"), "synth-data: done\n");
    assert_eq!(run("train-ae"), "train-ae: done\n");
    assert_eq!(run("synth-data"), "synth-data: cached\n");
    assert_eq!(run("train-ae"), "train-ae: cached\n");
}
