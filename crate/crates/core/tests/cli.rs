//! End-to-end runs of the `flowsep` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use flowsep::wav::{read_wav, write_wav};

const TINY: &str = r#"
[model]
n_blocks = 1
embed_dim = 8
n_heads = 2
n_bands = 4
time_embed_dim = 8
time_hidden = 8

[train]
steps = 3
batch_size = 2

[data]
n_eval = 2

[sample]
schedule = "linear:3"
"#;

fn flowsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsep")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let out = flowsep(&["selftest", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(text.contains("7 checks, 0 failed"), "{text}");
}

#[test]
fn train_separate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run = dir.path().join("run");
    let out = flowsep(&["train", "--config", &cfg, "--out-dir", s(&run), "--log-every", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(csv.starts_with("step,lr,loss,grad_norm,used,skipped,clamped"));
    assert!(run.join("config.toml").exists());

    let y: Vec<f64> = (0..2400).map(|n| 0.05 * (0.03 * n as f64).sin() + 0.03 * (0.4 * n as f64).sin()).collect();
    let input = dir.path().join("mix.wav");
    write_wav(&input, &y, 16_000).unwrap();
    let model = run.join("model.ckpt");
    let sep = dir.path().join("sep");
    let out = flowsep(&["separate", "--model", s(&model), "--input", s(&input), "--out-dir", s(&sep), "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_wav(&sep.join("mix_src1.wav"), 16_000).unwrap();
    let b = read_wav(&sep.join("mix_src2.wav"), 16_000).unwrap();
    assert_eq!(a.len(), y.len());
    // f32 files: the sum matches the mixture to single precision
    let worst = a.iter().zip(&b).zip(&y).fold(0.0f64, |m, ((p, q), r)| m.max((p + q - r).abs()));
    assert!(worst < 1e-6, "{worst}");

    let metrics = dir.path().join("metrics.csv");
    let out = flowsep(&["eval", "--model", s(&model), "--config", &cfg, "--out", s(&metrics)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean SI-SDR"));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 3);
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let table = dir.path().join("ablation.csv");
    let runs = dir.path().join("runs");
    let out = flowsep(&[
        "ablate", "--config", &cfg, "--axes", "schedule", "--steps", "2", "--out", s(&table), "--runs-dir", s(&runs),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "loss,time_weighting,noise,schedule,assignment,sisdr,baseline");
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[2].contains(",custom5,"), "{text}");
    assert!(runs.join("run00").join("loss.csv").exists());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nembed_dim = 10\nn_heads = 4\n").unwrap();
    let out = flowsep(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed_dim"));

    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&flowsep(&["train", "--config", s(&cfg)])), 2);

    let good = write_tiny(dir.path());
    assert_eq!(code(&flowsep(&["ablate", "--config", &good, "--axes", "loss,loss"])), 2);
    assert_eq!(code(&flowsep(&["eval", "--model", "x", "--config", &good, "--schedule", "cubic"])), 2);
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = flowsep(&["separate", "--model", s(&missing), "--input", s(&dir.path().join("in.wav"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&flowsep(&["train", "--config", s(&dir.path().join("none.toml"))])), 4);
}
