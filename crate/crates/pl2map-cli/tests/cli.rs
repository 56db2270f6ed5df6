//! Drives the compiled binary the way a user would: full pipeline runs,
//! exit code conventions, determinism, and manifest output.

use pl2map::dataio::{load_checkpoint, load_scene};
use pl2map::model::{init_params, ModelConfig};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pl2map"))
        .args(args)
        .output()
        .expect("spawn pl2map")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two images, noiseless observations, small descriptors. Enough signal
/// to overfit in seconds.
fn gen_tiny_scene(dir: &Path, cameras: u32, seed: u32) {
    run_ok(&[
        "gen-synth",
        "--out",
        s(dir),
        "--seed",
        &seed.to_string(),
        "--set",
        &format!("synth.cameras={cameras}"),
        "--set",
        "synth.points=30",
        "--set",
        "synth.lines=8",
        "--set",
        "synth.descriptor_dim=16",
        "--set",
        "synth.tokens_per_line=4",
        "--set",
        "synth.noise_sigma=0",
        "--set",
        "synth.dropout=0",
    ]);
}

#[test]
fn pipeline_learns_a_desk_scene_and_relocalizes_it() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let ckpt = tmp.path().join("model.ckpt");
    let map = tmp.path().join("map.txt");
    let poses = tmp.path().join("poses.txt");
    gen_tiny_scene(&scene, 2, 5);

    run_ok(&[
        "train",
        "--scene",
        s(&scene),
        "--out",
        s(&ckpt),
        "--iters",
        "2000",
        "--seed",
        "3",
        "--set",
        "train.lr=2e-3",
        "--set",
        "train.drops=3",
        "--set",
        "train.augment=false",
        "--set",
        "train.log_every=500",
        "--set",
        "model.point_hidden=64",
        "--set",
        "model.line_hidden=64",
    ]);
    assert!(ckpt.is_file());
    let log = fs::read_to_string(tmp.path().join("model.ckpt.log")).unwrap();
    assert!(log.contains("iter=0 "), "training log should start at iteration 0:\n{log}");

    run_ok(&["infer", "--checkpoint", s(&ckpt), "--scene", s(&scene), "--out", s(&map), "--threshold", "0"]);
    let map_text = fs::read_to_string(&map).unwrap();
    // 2 images x (30 points + 8 lines), nothing filtered at threshold 0
    assert_eq!(map_text.lines().count(), 76);
    assert!(map_text.lines().all(|l| l.starts_with("P ") || l.starts_with("L ")));

    run_ok(&[
        "localize",
        "--checkpoint",
        s(&ckpt),
        "--scene",
        s(&scene),
        "--out",
        s(&poses),
        "--seed",
        "11",
        "--with-lines",
        "--set",
        "ransac.min_point_reliability=0",
        "--set",
        "ransac.min_line_reliability=0",
    ]);
    let pose_text = fs::read_to_string(&poses).unwrap();
    let ok_lines: Vec<&str> =
        pose_text.lines().filter(|l| l.split_whitespace().nth(1) == Some("ok")).collect();
    assert_eq!(ok_lines.len(), 2, "both views should localize:\n{pose_text}");

    let out = run_ok(&["eval", "--estimates", s(&poses), "--scene", s(&scene)]);
    let line = String::from_utf8(out.stdout).unwrap();
    let parts: Vec<f64> =
        line.trim().split(" / ").map(|p| p.parse().expect("numeric summary")).collect();
    assert_eq!(parts.len(), 3, "summary should be cm / deg / accuracy: {line:?}");
    assert!(parts[0] < 5.0, "median translation {} cm too large", parts[0]);
    assert!(parts[1] < 5.0, "median rotation {} deg too large", parts[1]);
    assert_eq!(parts[2], 100.0, "both views should land in the 5cm/5deg bucket");
}

#[test]
fn eval_of_ground_truth_poses_prints_the_zero_line() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    gen_tiny_scene(&scene_dir, 3, 9);

    // write estimates straight from the ground truth the records carry
    let scene = load_scene(&scene_dir).unwrap();
    let mut text = String::new();
    for img in &scene.images {
        let q = img.pose.rotation.quaternion();
        let t = img.pose.translation;
        text.push_str(&format!(
            "{} ok {} {} {} {} {} {} {}\n",
            img.id, q.w, q.i, q.j, q.k, t.x, t.y, t.z
        ));
    }
    let estimates = tmp.path().join("estimates.txt");
    fs::write(&estimates, text).unwrap();

    let out = run_ok(&["eval", "--estimates", s(&estimates), "--scene", s(&scene_dir)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0.0 / 0.00 / 100.0");
}

#[test]
fn zero_iteration_training_saves_the_untouched_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let ckpt = tmp.path().join("init.ckpt");
    gen_tiny_scene(&scene, 1, 2);

    run_ok(&["train", "--scene", s(&scene), "--out", s(&ckpt), "--iters", "0", "--seed", "9"]);

    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.iteration, 0);
    let expected_config = ModelConfig {
        descriptor_dim: 16,
        line_tokens: 4,
        ..ModelConfig::default()
    };
    assert_eq!(loaded.config, expected_config);
    let expected = init_params(&expected_config, 9).unwrap();
    assert_eq!(loaded.params, expected, "checkpoint must hold the seed-9 initialization bit for bit");
}

#[test]
fn repeated_runs_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_tiny_scene(&scene, 2, 4);

    let train_args = |out: &str| {
        vec![
            "train".to_string(),
            "--scene".into(),
            s(&scene).to_string(),
            "--out".into(),
            out.to_string(),
            "--iters".into(),
            "20".into(),
            "--set".into(),
            "model.point_hidden=32".into(),
            "--set".into(),
            "model.line_hidden=32".into(),
        ]
    };
    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    for out in [&a, &b] {
        let args: Vec<String> = train_args(s(out));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_ok(&refs);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "training is seeded, checkpoints must match");

    let p1 = tmp.path().join("p1.txt");
    let p2 = tmp.path().join("p2.txt");
    for out in [&p1, &p2] {
        run_ok(&[
            "localize",
            "--checkpoint",
            s(&a),
            "--scene",
            s(&scene),
            "--out",
            s(out),
            "--seed",
            "11",
            "--set",
            "ransac.min_point_reliability=0",
        ]);
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "localization is seeded per image");
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();

    // unknown flag is a usage error
    let out = run(&["train", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));

    // missing subcommand is a usage error
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));

    // missing scene directory is a runtime error with a message
    let missing = tmp.path().join("nope");
    let ckpt = tmp.path().join("nope.ckpt");
    let out = run(&["train", "--scene", s(&missing), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // a --set key the subcommand does not read is a runtime error
    let scene = tmp.path().join("scene");
    gen_tiny_scene(&scene, 1, 1);
    let out = run(&[
        "train",
        "--scene",
        s(&scene),
        "--out",
        s(&ckpt),
        "--iters",
        "0",
        "--set",
        "train.iterz=5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.iterz"));
}

#[test]
fn config_file_is_overridden_by_set_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_tiny_scene(&scene, 1, 3);

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# shared settings\ntrain.seed = 21\ntrain.log_every = 50\nsynth.points = 999\n").unwrap();

    // file seed applies
    let ckpt = tmp.path().join("file.ckpt");
    run_ok(&["train", "--scene", s(&scene), "--out", s(&ckpt), "--iters", "0", "--config", s(&cfg)]);
    let manifest = fs::read_to_string(tmp.path().join("file.ckpt.run.txt")).unwrap();
    assert!(manifest.contains("config train.seed=21"), "manifest should record the file seed:\n{manifest}");

    // --set beats the file, and the unused synth.points file key is ignored
    let ckpt2 = tmp.path().join("set.ckpt");
    run_ok(&[
        "train",
        "--scene",
        s(&scene),
        "--out",
        s(&ckpt2),
        "--iters",
        "0",
        "--config",
        s(&cfg),
        "--set",
        "train.seed=22",
    ]);
    let manifest = fs::read_to_string(tmp.path().join("set.ckpt.run.txt")).unwrap();
    assert!(manifest.contains("config train.seed=22"));

    let a = load_checkpoint(&ckpt).unwrap();
    let b = load_checkpoint(&ckpt2).unwrap();
    assert_ne!(a.params, b.params, "different seeds must give different initializations");
}

#[test]
fn every_run_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_tiny_scene(&scene, 1, 6);

    let manifest = fs::read_to_string(scene.join("run-manifest.txt")).unwrap();
    for needle in ["command gen-synth", "argv ", "git ", "elapsed_s ", "config synth.seed=6", "config synth.points=30"] {
        assert!(manifest.contains(needle), "manifest missing {needle:?}:\n{manifest}");
    }
}
