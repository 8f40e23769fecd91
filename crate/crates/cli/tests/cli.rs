use std::path::Path;
use std::process::{Command, Output};

fn adclick(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adclick"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) -> String {
    let o = adclick(&["synth", "--output-dir", dir.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("toy.toml").display().to_string()
}

#[test]
fn unknown_command_prints_usage() {
    let o = adclick(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn errors_are_one_line_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let o = adclick(&["build-bank", "--config", &cfg, "--device", "cuda:0"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: kind=unsupported_device msg="), "{err}");

    let o = adclick(&["evaluate-iis", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error: kind=config"), "{}", stderr(&o));

    let o = adclick(&["build-bank", "--config", &cfg, "no_such_key=1"]);
    assert!(stderr(&o).contains("error: kind=config"));
}

#[test]
fn bank_building_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let read = |out: &str| {
        let o = adclick(&["build-bank", "--config", &cfg, "--output-dir", out, "categories=[\"tile\"]"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(Path::new(out).join("banks/fit/tile.bank")).unwrap()
    };
    let a = read(dir.path().join("a").to_str().unwrap());
    let b = read(dir.path().join("b").to_str().unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn train_then_evaluate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let common = ["--config", cfg.as_str(), "--output-dir", run_s];
    let small = ["categories=[\"tile\"]", "train.steps=2", "train.batch_size=2", "eval.noc_cap=2"];

    let o = adclick(&[&["train"][..], &common, &small].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("checkpoint_final.safetensors");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ck = ckpt.to_str().unwrap();
    let o = adclick(&[&["evaluate-iis", "--checkpoint", ck, "--clicks", "1,2"][..], &common, &small].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "| Category | 1-click | 2-click | NoC80 |");
    assert!(lines[2].starts_with("| metric |"));
    assert!(lines.iter().any(|l| l.starts_with("| tile |")));
    assert_eq!(std::fs::read_to_string(run.join("iis_table.md")).unwrap().trim_end(), table.trim_end());

    let seg = dir.path().join("seg");
    let seg_s = seg.to_str().unwrap();
    let o = adclick(&[&["train-seg", "--config", &cfg, "--output-dir", seg_s, "seg.per_category=4"][..], &small].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let seg_ck = seg.join("checkpoint_final.safetensors");
    let o = adclick(&["evaluate-ad", "--config", &cfg, "--output-dir", seg_s, "--checkpoint", seg_ck.to_str().unwrap(), small[0]]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("| Category | AP | PRO | P-AUROC | I-AUROC |"));

    let o = adclick(&[&["export", "--checkpoint", ck, "--clicks", "1"][..], &common, &small].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let labels: Vec<_> = std::fs::read_dir(run.join("labels")).unwrap().collect();
    assert!(!labels.is_empty());
}
