//! The `trajvid` binary end to end on a tiny configuration.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use support::{tiny_config, tiny_scenes};
use trajvid::config::RunConfig;
use trajvid::core::colormap::heatmap_rgb8;
use trajvid::core::VideoTensor;
use trajvid::io::{flo, raster};
use trajvid::model::Ablation;
use trajvid::pipeline::{frame_file_name, HEATMAP_FILE};
use trajvid::train::{checkpoint_name, load_model, LOG_FILE};

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = tiny_config();
    cfg.data.scenes = tiny_scenes();
    cfg.data.count = 6;
    cfg.train.batch_size = 2;
    cfg.train.core_steps = 5;
    cfg.train.cond_steps = 5;
    cfg.train.completion_steps = 0;
    cfg.train.checkpoint_every = 10;
    cfg.sampler.steps = 4;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn trajvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajvid")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a dataset and trains the tiny model; returns the run directory.
fn trained(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let conf = write_config(dir, cfg);
    let data = dir.join("data");
    let run = dir.join("run");
    ok(trajvid(&["--config", s(&conf), "synth", "--out", s(&data)]));
    ok(trajvid(&["--config", s(&conf), "train", "--data", s(&data), "--out", s(&run)]));
    run
}

fn log_losses(run: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(run.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap() as usize, v["loss"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn help_exits_zero_for_every_command() {
    for cmd in [vec!["--help"], vec!["synth", "--help"], vec!["train", "--help"], vec!["generate", "--help"], vec![
        "evaluate", "--help",
    ], vec!["serve", "--help"]]
    {
        let out = trajvid(&cmd);
        assert!(out.status.success(), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd:?}");
    }
    assert_eq!(trajvid(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synth_layout_determinism_and_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny_run_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(trajvid(&["--config", s(&conf), "--seed", "11", "synth", "--count", "2", "--out", s(out)]));
    }
    let mut clips: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    clips.sort();
    assert_eq!(clips.len(), 2);
    for clip in &clips {
        let names: Vec<String> = fs::read_dir(clip)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("frame_") && n.ends_with(".png")).count(), 4);
        assert_eq!(names.iter().filter(|n| n.ends_with(".flo")).count(), 3);
        for f in ["depth0.png", "seg0.png", "meta.json"] {
            assert!(names.iter().any(|n| n == f), "{f} missing in {}", clip.display());
        }
        let other = b.join(clip.file_name().unwrap());
        for n in &names {
            assert_eq!(fs::read(clip.join(n)).unwrap(), fs::read(other.join(n)).unwrap(), "{n}");
        }
    }

    let out = trajvid(&["--config", s(&conf), "synth", "--count", "0", "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn ten_step_training_writes_one_checkpoint_and_ten_log_lines() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), &tiny_run_config());
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    assert_eq!(ckpts, vec![checkpoint_name(10)]);
    let losses = log_losses(&run);
    assert_eq!(losses.iter().map(|l| l.0).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(losses.iter().all(|l| l.1.is_finite()));
}

#[test]
fn ablation_flags_are_recorded_in_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config();
    cfg.model = cfg.model.with_ablation(Ablation {
        use_segment_feature: true,
        use_depth_branch: false,
        use_msf: true,
    });
    let run = trained(dir.path(), &cfg);
    let (model, info) = load_model(&run.join(checkpoint_name(10))).unwrap();
    let want = Ablation {
        use_segment_feature: true,
        use_depth_branch: false,
        use_msf: true,
    };
    assert_eq!(info.ablation, want);
    assert_eq!(model.config.ablation(), want);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config();
    cfg.train.checkpoint_every = 4;
    let full = trained(dir.path(), &cfg);
    let conf = dir.path().join("run.toml");
    let resumed = dir.path().join("resumed");
    ok(trajvid(&[
        "--config",
        s(&conf),
        "train",
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&resumed),
        "--resume",
        s(&full.join(checkpoint_name(4))),
    ]));
    let a = log_losses(&full);
    let b = log_losses(&resumed);
    assert_eq!(b.iter().map(|l| l.0).collect::<Vec<_>>(), (5..=10).collect::<Vec<_>>());
    for (x, y) in a[4..].iter().zip(&b) {
        assert_eq!(x, y);
    }
    assert_eq!(
        fs::read(full.join(checkpoint_name(10))).unwrap(),
        fs::read(resumed.join(checkpoint_name(10))).unwrap()
    );
}

#[test]
fn generate_writes_frames_flow_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), &tiny_run_config());
    let conf = dir.path().join("run.toml");
    let ckpt = run.join(checkpoint_name(10));
    let image = dir.path().join("data").join(trajvid::dataset::clip_dir_name(0)).join("frame_0000.png");
    assert!(image.exists());
    let traj = dir.path().join("click.json");
    fs::write(&traj, r#"{"frames": 4, "tracks": [[{"x": 7, "y": 8}, {"x": 7, "y": 8}, {"x": 7, "y": 8}, {"x": 7, "y": 8}]]}"#).unwrap();
    let gen = |out: &Path| {
        ok(trajvid(&[
            "--config",
            s(&conf),
            "--seed",
            "5",
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&image),
            "--trajectory",
            s(&traj),
            "--out",
            s(out),
        ]))
    };
    let (a, b) = (dir.path().join("gen_a"), dir.path().join("gen_b"));
    gen(&a);
    gen(&b);

    let mut frames = Vec::new();
    for t in 0..4 {
        let bytes = fs::read(a.join(frame_file_name(t))).unwrap();
        assert_eq!(bytes, fs::read(b.join(frame_file_name(t))).unwrap());
        frames.push(raster::decode_rgb(&bytes).unwrap());
    }
    for t in 0..3 {
        let f = flo::read(&a.join(flo::file_name(t))).unwrap();
        assert_eq!((f.width, f.height), (16, 16));
        assert!(f.dx.iter().chain(&f.dy).all(|&v| v == 0.0), "stationary click gives zero flow");
    }
    assert!(!a.join(flo::file_name(3)).exists());

    let (_, _, heat) = {
        let img = image::load_from_memory(&fs::read(a.join(HEATMAP_FILE)).unwrap()).unwrap().to_rgb8();
        (img.width(), img.height(), img.into_raw())
    };
    let video = VideoTensor::from_frames(&frames, 8.0).unwrap();
    let expect = heatmap_rgb8(&video).unwrap();
    let worst = heat.iter().zip(&expect).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
    assert!(worst <= 8, "heatmap differs from the emitted frames by {worst}");
}

#[test]
fn invalid_trajectory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), &tiny_run_config());
    let conf = dir.path().join("run.toml");
    let image = dir.path().join("data").join(trajvid::dataset::clip_dir_name(0)).join("frame_0000.png");
    for (name, body) in [
        ("syntax.json", "{\"frames\": 4, \"tracks\": ["),
        ("bounds.json", r#"{"frames": 4, "tracks": [[{"x": 70, "y": 8}, {"x": 7, "y": 8}, {"x": 7, "y": 8}, {"x": 7, "y": 8}]]}"#),
        ("frames.json", r#"{"frames": 3, "tracks": [[{"x": 1, "y": 1}, {"x": 1, "y": 1}, {"x": 1, "y": 1}]]}"#),
    ] {
        let traj = dir.path().join(name);
        fs::write(&traj, body).unwrap();
        let out = trajvid(&[
            "--config",
            s(&conf),
            "generate",
            "--checkpoint",
            s(&run.join(checkpoint_name(10))),
            "--image",
            s(&image),
            "--trajectory",
            s(&traj),
            "--out",
            s(&dir.path().join("never")),
        ]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!dir.path().join("never").exists());
    }
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config();
    cfg.train.core_lr = 1e30;
    cfg.train.lr = 1e30;
    let conf = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    ok(trajvid(&["--config", s(&conf), "synth", "--out", s(&data)]));
    let out = trajvid(&["--config", s(&conf), "train", "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), &tiny_run_config());
    let conf = dir.path().join("run.toml");
    let report = dir.path().join("report.json");
    ok(trajvid(&[
        "--config",
        s(&conf),
        "evaluate",
        "--checkpoint",
        s(&run.join(checkpoint_name(10))),
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&report),
    ]));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let names: Vec<&str> = v["metrics"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    for k in ["psnr_db", "ssim", "flow_epe", "frechet_frames_pix4", "frechet_videos_pix4"] {
        assert!(names.contains(&k), "{k} missing from {names:?}");
    }
}
