use std::path::Path;
use std::process::{Command, Output};

fn nnspeaker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnspeaker"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_names_build() {
    let o = nnspeaker(&["--version"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains(env!("CARGO_PKG_VERSION")), "{text}");
    assert!(text.contains("target:"), "{text}");
}

#[test]
fn unknown_config_key_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "vad.stepp = 7\n").unwrap();
    let o = nnspeaker(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("vad.stepp"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = nnspeaker(&["gradcheck", "--sizes", "9:5:4", "--samples", "7", "--lambda", "2.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("max relative error"));

    let o = nnspeaker(&["gradcheck", "--sizes", "9"]);
    assert!(!o.status.success());
}

#[test]
fn vad_writes_mask_and_voiced_audio() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = nnspeaker(&[
        "synth",
        "--speakers",
        "2",
        "--files",
        "2",
        "--duration",
        "1.0",
        "--out",
        corpus.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let wav = corpus.join("DR1/MSYN000/SX000.wav");
    assert!(wav.is_file());
    let mask = dir.path().join("mask.csv");
    let voiced = dir.path().join("voiced.wav");
    let o = nnspeaker(&[
        "vad",
        "--in",
        wav.to_str().unwrap(),
        "--out",
        voiced.to_str().unwrap(),
        "--step",
        "5",
        "--mask-out",
        mask.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&mask).unwrap();
    // 1 s at 50 ms / 25 ms framing, plus a header.
    assert_eq!(text.lines().count(), 39 + 1);
    let voiced_frames = text.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert!(voiced_frames > 0);
    let kept = nnspeaker::corpus::read_wav::<f64>(&voiced).unwrap();
    assert!(!kept.is_empty() && kept.len() < 8000);

    let o = nnspeaker(&["vad", "--in", wav.to_str().unwrap(), "--step", "0"]);
    assert!(!o.status.success());
}

fn write_config(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "run.out_dir = \"{}\"\ncorpus.speakers = 5\ncorpus.duration_s = 1.5\nsplit.n_in_domain = 3\nnn.hidden = [12]\nnn.max_total_iters = 40\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn run_then_rerun_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = nnspeaker(&["run", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first).matches(" done ").count(), 6, "{}", stdout(&first));
    for f in ["model.nnsm", "classify_report.json", "verify_report.json", "roc.csv"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }

    let second = nnspeaker(&["run", "--config", &cfg]);
    assert!(second.status.success());
    assert_eq!(stdout(&second).matches("up to date").count(), 6, "{}", stdout(&second));

    let partial = nnspeaker(&["run", "--config", &cfg, "--stages", "train,eval-classify"]);
    assert_eq!(stdout(&partial).lines().count(), 2);
}
