use fpm_core::raster::load_phase;
use fpm_core::report::read_metrics_csv;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fpm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small frames and a few training steps so every command runs in seconds.
const TINY: &str = "seed = 5
sim.width = 128
sim.height = 128
sim.frames = 2
train.phase1_epochs = 2
train.phase2_epochs = 1
train.iterations_per_epoch = 2
train.batch_size = 1
transfer.iterations = 2
bench.repetitions = 5
bench.patches = 2
bench.oracle_iterations = 1
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir` except run manifests, as (relative path, bytes).
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dump_config_lists_dotted_defaults() {
    let out = ok(&["--dump-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "optics.pattern = \"P4\"",
        "train.phase2.beta2 = 0.05",
        "sim.r = 4",
        "model.preset = \"desk\"",
    ] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "optics.pattern = \"P7\"\n");
    let out = fpm(&[
        "--config",
        s(&cfg),
        "simulate",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optics.pattern"));
    assert_eq!(fpm(&["simulate"]).status.code(), Some(1));
    assert_eq!(fpm(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpm(&[
        "oracle",
        "--stacks",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_one_stack_per_frame_and_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", s(&cfg), "simulate", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "simulate", "--out", s(&b)]);
    let snap = snapshot(&a);
    assert_eq!(snap, snapshot(&b));
    let pngs = |t: &str| {
        snap.iter()
            .filter(|(p, _)| {
                p.starts_with(format!("stacks/{t}")) && p.extension().unwrap() == "png"
            })
            .count()
    };
    assert_eq!((pngs("t000"), pngs("t001")), (29, 29));
    let (truth, r) = load_phase(&a.join("truth/t000.phs")).unwrap();
    assert_eq!((truth.width, truth.height, r), (128, 128, 4));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_frames_still_emit_frame_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{TINY}sim.frames = 0\n").replace("sim.frames = 2\n", ""),
    );
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "simulate", "--out", s(&out)]);
    let stacks: Vec<_> = std::fs::read_dir(out.join("stacks")).unwrap().collect();
    assert_eq!(stacks.len(), 1);
    assert!(out.join("stacks/t000/manifest.json").is_file());
}

#[test]
fn evaluate_identical_rasters_gives_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let sim = dir.path().join("sim");
    ok(&["--config", s(&cfg), "simulate", "--out", s(&sim)]);
    let truth = sim.join("truth");
    let out = dir.path().join("eval");
    ok(&[
        "--config",
        s(&cfg),
        "evaluate",
        "--pred",
        s(&truth),
        "--truth",
        s(&truth),
        "--out",
        s(&out),
    ]);
    let rows = read_metrics_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!((r.frame_index, r.mae, r.ssim), (i, 0.0, 1.0));
        assert_eq!(r.time_min, 2.0 * i as f64);
    }
    assert!(out.join("mae_curve.png").is_file());
    assert!(out.join("coverage/t001_pred.png").is_file());
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let c = s(&cfg);
    let sim = dir.path().join("sim");
    ok(&["--config", c, "simulate", "--out", s(&sim)]);
    let stack0 = sim.join("stacks/t000");
    let label0 = sim.join("truth/t000.phs");
    let run_train = |out: &Path| {
        ok(&[
            "--config",
            c,
            "train",
            "--stack",
            s(&stack0),
            "--label",
            s(&label0),
            "--out",
            s(out),
        ]);
    };
    let (t1, t2) = (dir.path().join("train1"), dir.path().join("train2"));
    run_train(&t1);
    run_train(&t2);
    assert_eq!(snapshot(&t1), snapshot(&t2));
    let loss = std::fs::read_to_string(t1.join("loss.csv")).unwrap();
    assert_eq!(
        loss.lines().next().unwrap(),
        "step,l_total,l_mae,l_fmae,l_g,l_reg,d_loss,lr"
    );
    assert_eq!(loss.lines().count(), 1 + 6);

    let ckpt = t1.join("checkpoint.ckpt");
    let (p1, p2) = (dir.path().join("pred1"), dir.path().join("pred2"));
    ok(&[
        "--config",
        c,
        "--threads",
        "1",
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--stacks",
        s(&sim.join("stacks")),
        "--out",
        s(&p1),
    ]);
    ok(&[
        "--config",
        c,
        "--threads",
        "2",
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--stacks",
        s(&sim.join("stacks")),
        "--out",
        s(&p2),
    ]);
    assert_eq!(snapshot(&p1), snapshot(&p2));
    let (img, r) = load_phase(&p1.join("t001.phs")).unwrap();
    assert_eq!((img.width, img.height, r), (4 * 32, 4 * 32, 4));

    let tr = dir.path().join("transfer");
    ok(&[
        "--config",
        c,
        "transfer",
        "--checkpoint",
        s(&ckpt),
        "--stack",
        s(&sim.join("stacks/t001")),
        "--label",
        s(&sim.join("truth/t001.phs")),
        "--out",
        s(&tr),
    ]);
    assert_eq!(
        std::fs::read_to_string(tr.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2
    );

    let ev = dir.path().join("eval");
    ok(&[
        "--config",
        c,
        "evaluate",
        "--pred",
        s(&p1),
        "--truth",
        s(&sim.join("truth")),
        "--out",
        s(&ev),
    ]);
    let rows = read_metrics_csv(&ev.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mae > 0.0 && r.mae.is_finite()));
}

#[test]
fn oracle_writes_one_phase_raster_per_stack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}oracle.iterations = 3\n"));
    let sim = dir.path().join("sim");
    ok(&["--config", s(&cfg), "simulate", "--out", s(&sim)]);
    let out = dir.path().join("oracle");
    ok(&[
        "--config",
        s(&cfg),
        "oracle",
        "--stacks",
        s(&sim.join("stacks")),
        "--out",
        s(&out),
    ]);
    for t in ["t000", "t001"] {
        let (img, r) = load_phase(&out.join(format!("{t}.phs"))).unwrap();
        assert_eq!((img.width, img.height, r), (128, 128, 4));
    }
}

#[test]
fn bench_reports_both_timings_and_handles_zero_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY
            .to_string()
            .replace("bench.patches = 2", "bench.patches = 0"),
    );
    let out = dir.path().join("bench");
    ok(&["--config", s(&cfg), "bench", "--out", s(&out)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["generator"]["work_items"], 0);
    assert_eq!(report["generator"]["rate_median"], 0.0);
    assert_eq!(report["oracle"]["work_items"], 1);
    assert!(report["oracle"]["median_s"].as_f64().unwrap() > 0.0);
}
