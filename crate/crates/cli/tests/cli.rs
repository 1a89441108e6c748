use std::path::Path;
use std::process::{Command, Output};

use labeldiff::config::{RunConfig, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labeldiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, variant: Variant) -> std::path::PathBuf {
    let mut c = RunConfig::desk();
    c.variant = variant;
    c.data.image_size = 32;
    c.data.count = 40;
    c.dcg.global_channels = vec![4, 8];
    c.dcg.global_strides = vec![2, 2];
    c.dcg.local_channels = vec![4];
    c.dcg.local_strides = vec![2];
    c.dcg.roi_size = 16;
    c.dcg.roi_count = 2;
    c.dcg.attention_dim = 8;
    c.denoiser.latent_dim = 16;
    c.denoiser.encoder_channels = vec![4, 8];
    c.denoiser.encoder_strides = vec![2, 2];
    c.schedule.timesteps = 40;
    c.schedule.inference_steps = 8;
    c.optim.batch_size = 8;
    c.optim.warmup_epochs = 1;
    c.optim.epochs = 2;
    c.eval.every = 1;
    let path = dir.join("tiny.toml");
    c.save(&path).unwrap();
    path
}

fn assert_error(o: &Output, code: i32, tag: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("E_")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with(&format!("{tag}: ")), "stderr: {err}");
}

#[test]
fn gen_data_writes_folder_index_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(&[
        "gen-data", "--classes", "3", "--count", "12", "--size", "16", "--noise", "0.1", "--blur", "0.5", "--imbalance", "1,1,2",
        "--seed", "4", "--out", out.to_str().unwrap(), "--log-level", "warn",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("index.csv").exists() && out.join("manifest.json").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 12);
    let classes = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert!(classes <= 3 && classes >= 2);
}

#[test]
fn train_eval_infer_and_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::Full);
    let cfg = cfg.to_str().unwrap();
    let run_dir = dir.path().join("run");
    let rd = run_dir.to_str().unwrap();
    let o = run(&["train", "--config", cfg, "--out-dir", rd, "--log-level", "warn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.json", "curves.csv", "best.dmic", "last.dmic", "config.toml"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["final_eval"]["accuracy"].as_f64().unwrap();
    let ckpt = run_dir.join("last.dmic");
    let ck = ckpt.to_str().unwrap();

    let eval_dir = dir.path().join("eval");
    let o = run(&["eval", "--checkpoint", ck, "--out-dir", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(ev["accuracy"].as_f64().unwrap(), acc);

    let data = dir.path().join("data");
    let o = run(&["gen-data", "--count", "6", "--size", "32", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let class_dir = std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    let pngs = std::fs::read_dir(&class_dir).unwrap().count();
    let traj = dir.path().join("traj.csv");
    let o = run(&[
        "infer", "--checkpoint", ck, "--input", class_dir.to_str().unwrap(), "--steps", "4", "--trajectory-out", traj.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), pngs + 1);
    assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 1 + pngs * 4);

    let viz_dir = dir.path().join("viz");
    let o = run(&["viz", "--checkpoint", ck, "--steps-to-record", "40,1", "--overlays", "2", "--out-dir", viz_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectory_t40.csv", "trajectory_t1.csv", "scatter.svg", "silhouette.csv", "saliency/saliency_1.png"] {
        assert!(viz_dir.join(f).exists(), "{f}");
    }

    let o = run(&["viz", "--checkpoint", ck, "--steps-to-record", "8", "--out-dir", viz_dir.to_str().unwrap()]);
    assert_error(&o, 4, "E_RUNTIME");
}

#[test]
fn repeated_training_is_byte_identical_and_resume_extends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Variant::C2);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = run(&["train", "--config", cfg, "--seed", "5", "--out-dir", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(a.join("metrics.json")).unwrap(), std::fs::read(b.join("metrics.json")).unwrap());

    let c = dir.path().join("c");
    let last = a.join("last.dmic");
    let o = run(&[
        "train", "--config", cfg, "--seed", "5", "--epochs", "3", "--resume", last.to_str().unwrap(), "--out-dir", c.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(c.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["epochs"].as_u64(), Some(3));
}

#[test]
fn errors_carry_a_single_line_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "variant = \"full\"\nseed = \"zero\"\n").unwrap();
    assert_error(&run(&["train", "--config", bad.to_str().unwrap()]), 2, "E_CONFIG");
    assert_error(&run(&["train", "--variant", "C3"]), 2, "E_CONFIG");
    assert_error(&run(&["bogus"]), 2, "E_CONFIG");
    let missing = dir.path().join("missing.dmic");
    assert_error(&run(&["eval", "--checkpoint", missing.to_str().unwrap()]), 3, "E_DATA");
    let corrupt = dir.path().join("corrupt.dmic");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert_error(&run(&["infer", "--checkpoint", corrupt.to_str().unwrap(), "--input", "."]), 3, "E_DATA");
    assert_error(&run(&["ablate", "--seeds", "", "--config", tiny_config(dir.path(), Variant::Basic).to_str().unwrap()]), 2, "E_CONFIG");
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["gen-data", "train", "infer", "eval", "ablate", "viz"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
