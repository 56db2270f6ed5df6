//! Batch command line for the point-line map pipeline: synthesize a
//! scene, train the network, export the predicted map, localize query
//! images, and score the estimates.
//!
//! Every run is configured by defaults, then an optional key=value
//! config file, then repeated `--set key=value` overrides, then the
//! dedicated flags; later layers win. Each run writes a manifest
//! recording the effective configuration, the seed, the git revision,
//! and wall time, so any artifact can be regenerated. Logs go to
//! standard error, data to files, and the exit code is 0 on success,
//! 1 on runtime failure, 2 on bad flags.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pl2map::dataio::{
    export_map, generate_synthetic, load_checkpoint, load_scene, save_checkpoint, save_scene,
    Checkpoint, MapPrediction, SceneDataset, SynthSpec,
};
use pl2map::geometry::Pose;
use pl2map::model::{predict, AttentionKind, ModelConfig, Prediction};
use pl2map::pose::{
    ransac_pnp, refine_points_lines, Correspondences, LinePair, PointPair, PoseError, RansacConfig,
};
use pl2map::training::{eval_metrics, train, TrainConfig};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "pl2map", version, about = "Point-line map learning and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic desk-scale scene directory
    GenSynth(GenSynthArgs),
    /// Train the map network on a scene and write a checkpoint
    Train(TrainArgs),
    /// Predict the 3D map for a scene and export it as text
    Infer(InferArgs),
    /// Estimate a camera pose for every image in a scene
    Localize(LocalizeArgs),
    /// Score pose estimates against the scene's ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Key=value config file (unknown keys are allowed, they may belong
    /// to other subcommands)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.iters=500 (repeatable;
    /// keys the subcommand does not read are an error)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output scene directory
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for --set synth.seed=N
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Scene directory to train on
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for --set train.iters=N (0 saves the initialization)
    #[arg(long)]
    iters: Option<usize>,
    /// Shorthand for --set train.seed=N
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory to run the network over
    #[arg(long)]
    scene: PathBuf,
    /// Map text output path
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for --set infer.threshold=X (drop entries below this
    /// predicted reliability)
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory with query images
    #[arg(long)]
    scene: PathBuf,
    /// Pose estimates output path
    #[arg(long)]
    out: PathBuf,
    /// Refine each pose jointly with line correspondences
    #[arg(long)]
    with_lines: bool,
    /// Shorthand for --set ransac.seed=N (per image the seed is this
    /// plus the image index)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Estimates file produced by localize
    #[arg(long)]
    estimates: PathBuf,
    /// Scene directory holding ground-truth poses
    #[arg(long)]
    scene: PathBuf,
}

// ---- layered configuration ----------------------------------------------

/// Key=value store with recorded resolution: every key a subcommand
/// consults lands in `resolved` with its effective value, which becomes
/// the manifest's config snapshot. Keys set via --set must be consulted
/// or the run fails; config-file keys may be spares for other commands.
struct Settings {
    values: BTreeMap<String, String>,
    from_set: BTreeSet<String>,
    resolved: RefCell<BTreeMap<String, String>>,
    consulted: RefCell<BTreeSet<String>>,
}

impl Settings {
    fn load(cfg: &ConfigArgs) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = &cfg.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').with_context(|| {
                    format!("{}:{}: expected key=value, got {line:?}", path.display(), i + 1)
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let mut from_set = BTreeSet::new();
        for entry in &cfg.sets {
            let (k, v) = entry
                .split_once('=')
                .with_context(|| format!("--set {entry:?}: expected key=value"))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
            from_set.insert(k.trim().to_string());
        }
        Ok(Settings {
            values,
            from_set,
            resolved: RefCell::new(BTreeMap::new()),
            consulted: RefCell::new(BTreeSet::new()),
        })
    }

    /// Highest-precedence layer: dedicated flags.
    fn override_key(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.clone());
            self.from_set.insert(key.to_string());
        }
    }

    fn lookup(&self, key: &str) -> Option<&str> {
        self.consulted.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|s| s.as_str())
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    fn parse_with<T>(&self, key: &str, default: T, to_s: impl Fn(&T) -> String, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        match self.lookup(key) {
            Some(s) => {
                let v = parse(s).with_context(|| format!("config key {key}={s:?}"))?;
                self.record(key, to_s(&v));
                Ok(v)
            }
            None => {
                self.record(key, to_s(&default));
                Ok(default)
            }
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, usize::to_string, |s| Ok(s.parse()?))
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, u64::to_string, |s| Ok(s.parse()?))
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, f64::to_string, |s| Ok(s.parse()?))
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, bool::to_string, |s| match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => bail!("expected true/false, got {other:?}"),
        })
    }

    fn string(&self, key: &str, default: &str) -> Result<String> {
        self.parse_with(key, default.to_string(), String::clone, |s| Ok(s.to_string()))
    }

    fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        let join = |v: &Vec<usize>| {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        self.parse_with(key, default.to_vec(), join, |s| {
            s.split(',')
                .map(|p| Ok(p.trim().parse::<usize>()?))
                .collect::<Result<Vec<usize>>>()
        })
    }

    fn pattern(&self, key: &str, default: &[AttentionKind]) -> Result<Vec<AttentionKind>> {
        let join = |v: &Vec<AttentionKind>| {
            v.iter()
                .map(|k| match k {
                    AttentionKind::SelfAttn => "self",
                    AttentionKind::CrossAttn => "cross",
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        self.parse_with(key, default.to_vec(), join, |s| {
            s.split(',')
                .map(|p| match p.trim() {
                    "self" => Ok(AttentionKind::SelfAttn),
                    "cross" => Ok(AttentionKind::CrossAttn),
                    other => bail!("expected self or cross, got {other:?}"),
                })
                .collect()
        })
    }

    /// Every --set key must have been consulted by the subcommand.
    fn ensure_consumed(&self) -> Result<()> {
        let consulted = self.consulted.borrow();
        let stray: Vec<&String> =
            self.from_set.iter().filter(|k| !consulted.contains(*k)).collect();
        if !stray.is_empty() {
            bail!("unknown config keys for this subcommand: {stray:?}");
        }
        Ok(())
    }

    fn snapshot(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

fn synth_spec(st: &Settings) -> Result<SynthSpec> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_cameras: st.usize("synth.cameras", d.n_cameras)?,
        n_points: st.usize("synth.points", d.n_points)?,
        n_lines: st.usize("synth.lines", d.n_lines)?,
        extent_m: st.f64("synth.extent_m", d.extent_m)?,
        descriptor_dim: st.usize("synth.descriptor_dim", d.descriptor_dim)?,
        tokens_per_line: st.usize("synth.tokens_per_line", d.tokens_per_line)?,
        noise_sigma: st.f64("synth.noise_sigma", d.noise_sigma)?,
        dropout: st.f64("synth.dropout", d.dropout)?,
        seed: st.u64("synth.seed", d.seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Model dimensions follow the scene; architecture knobs come from
/// config keys.
fn model_config(st: &Settings, scene: &SceneDataset) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let config = ModelConfig {
        descriptor_dim: scene.descriptor_dim,
        line_tokens: scene.tokens_per_line,
        heads: st.usize("model.heads", d.heads)?,
        pattern: st.pattern("model.pattern", &d.pattern)?,
        point_head_hidden: st.usize_list("model.point_hidden", &d.point_head_hidden)?,
        line_head_hidden: st.usize_list("model.line_hidden", &d.line_head_hidden)?,
        beta: st.f64("model.beta", d.beta)?,
        encoder_expansion: st.usize("model.encoder_expansion", d.encoder_expansion)?,
    };
    config.validate()?;
    Ok(config)
}

fn train_config(st: &Settings) -> Result<TrainConfig> {
    let preset = st.string("train.preset", "indoor")?;
    let d = match preset.as_str() {
        "indoor" => TrainConfig::default(),
        "outdoor" => TrainConfig::outdoor(),
        other => bail!("train.preset must be indoor or outdoor, got {other:?}"),
    };
    let mut schedule = d.schedule;
    schedule.tau_max = st.f64("train.tau_max", schedule.tau_max)?;
    schedule.tau_min = st.f64("train.tau_min", schedule.tau_min)?;
    let mut weights = d.weights;
    weights.map = st.f64("train.weight_map", weights.map)?;
    weights.reliability = st.f64("train.weight_reliability", weights.reliability)?;
    weights.reprojection = st.f64("train.weight_reprojection", weights.reprojection)?;
    let config = TrainConfig {
        iterations: st.usize("train.iters", d.iterations)?,
        start_lr: st.f64("train.lr", d.start_lr)?,
        decay: st.f64("train.decay", d.decay)?,
        lr_drops: st.usize("train.drops", d.lr_drops)?,
        rotation_max_deg: st.f64("train.rotation_deg", d.rotation_max_deg)?,
        scale_min: st.f64("train.scale_min", d.scale_min)?,
        scale_max: st.f64("train.scale_max", d.scale_max)?,
        descriptor_noise: st.f64("train.descriptor_noise", d.descriptor_noise)?,
        augment: st.bool("train.augment", d.augment)?,
        schedule,
        weights,
        seed: st.u64("train.seed", d.seed)?,
        log_every: st.usize("train.log_every", d.log_every)?,
    };
    config.validate()?;
    Ok(config)
}

fn ransac_config(st: &Settings) -> Result<RansacConfig> {
    let d = RansacConfig::default();
    let config = RansacConfig {
        threshold_px: st.f64("ransac.threshold_px", d.threshold_px)?,
        confidence: st.f64("ransac.confidence", d.confidence)?,
        max_iterations: st.usize("ransac.max_iters", d.max_iterations)?,
        min_point_reliability: st.f64("ransac.min_point_reliability", d.min_point_reliability)?,
        min_line_reliability: st.f64("ransac.min_line_reliability", d.min_line_reliability)?,
        seed: st.u64("ransac.seed", d.seed)?,
    };
    config.validate()?;
    Ok(config)
}

// ---- run manifest --------------------------------------------------------

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(
    path: &Path,
    command: &str,
    settings: &Settings,
    started: Instant,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("command {command}\n"));
    let argv: Vec<String> = std::env::args().collect();
    out.push_str(&format!("argv {}\n", argv.join(" ")));
    out.push_str(&format!("git {}\n", git_describe()));
    out.push_str(&format!("elapsed_s {:.3}\n", started.elapsed().as_secs_f64()));
    for (k, v) in settings.snapshot() {
        out.push_str(&format!("config {k}={v}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(())
}

// ---- inference helpers ---------------------------------------------------

fn predict_image(
    ckpt: &Checkpoint,
    img: &pl2map::dataio::ImageRecord,
) -> Result<Prediction> {
    let descriptors = if img.n_points() > 0 { Some(&img.descriptors) } else { None };
    let pred = predict(&ckpt.params, &ckpt.config, descriptors, &img.line_tokens)
        .with_context(|| format!("inference on image {}", img.id))?;
    Ok(pred)
}

fn correspondences(img: &pl2map::dataio::ImageRecord, pred: &Prediction) -> Correspondences {
    Correspondences {
        points: img
            .keypoints
            .iter()
            .zip(&pred.points)
            .map(|(kp, p)| PointPair { pixel: *kp, point: p.coords, reliability: p.reliability })
            .collect(),
        lines: img
            .line_segments
            .iter()
            .zip(&pred.lines)
            .map(|(seg, l)| LinePair { segment: *seg, line: l.line, reliability: l.reliability })
            .collect(),
    }
}

fn check_scene_matches(ckpt: &Checkpoint, scene: &SceneDataset) -> Result<()> {
    if scene.descriptor_dim != ckpt.config.descriptor_dim {
        bail!(
            "scene descriptors are {}-dim but the checkpoint expects {}",
            scene.descriptor_dim,
            ckpt.config.descriptor_dim
        );
    }
    if scene.tokens_per_line != ckpt.config.line_tokens {
        bail!(
            "scene lines carry {} tokens but the checkpoint expects {}",
            scene.tokens_per_line,
            ckpt.config.line_tokens
        );
    }
    Ok(())
}

// ---- subcommands ---------------------------------------------------------

fn run_gen_synth(args: GenSynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut st = Settings::load(&args.cfg)?;
    st.override_key("synth.seed", args.seed.map(|s| s.to_string()));
    let spec = synth_spec(&st)?;
    st.ensure_consumed()?;
    let scene = generate_synthetic(&spec)?;
    save_scene(&scene, &args.out)?;
    eprintln!(
        "wrote scene: {} images, {} points and {} lines each, to {}",
        scene.images.len(),
        spec.n_points,
        spec.n_lines,
        args.out.display()
    );
    write_manifest(&args.out.join("run-manifest.txt"), "gen-synth", &st, started)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut st = Settings::load(&args.cfg)?;
    st.override_key("train.iters", args.iters.map(|v| v.to_string()));
    st.override_key("train.seed", args.seed.map(|v| v.to_string()));
    let scene = load_scene(&args.scene)?;
    let mcfg = model_config(&st, &scene)?;
    let tcfg = train_config(&st)?;
    st.ensure_consumed()?;

    let log_path = PathBuf::from(format!("{}.log", args.out.display()));
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("creating log {}", log_path.display()))?;
    let result = train(&scene, &mcfg, &tcfg, &mut |line| {
        eprintln!("{line}");
        let _ = writeln!(log_file, "{line}");
    })?;
    save_checkpoint(
        &Checkpoint { config: mcfg, params: result.params, iteration: result.iterations as u64 },
        &args.out,
    )?;
    eprintln!(
        "trained {} iterations ({} skipped on non-finite gradients), checkpoint at {}",
        result.iterations,
        result.nonfinite_skips,
        args.out.display()
    );
    write_manifest(
        &PathBuf::from(format!("{}.run.txt", args.out.display())),
        "train",
        &st,
        started,
    )
}

fn run_infer(args: InferArgs) -> Result<()> {
    let started = Instant::now();
    let mut st = Settings::load(&args.cfg)?;
    st.override_key("infer.threshold", args.threshold.map(|v| v.to_string()));
    let threshold = st.f64("infer.threshold", 0.0)?;
    st.ensure_consumed()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    check_scene_matches(&ckpt, &scene)?;

    let mut predictions = Vec::with_capacity(scene.images.len());
    for img in &scene.images {
        let pred = predict_image(&ckpt, img)?;
        predictions.push(MapPrediction {
            points: pred.points.iter().map(|p| (p.coords, p.reliability)).collect(),
            lines: pred.lines.iter().map(|l| (l.line, l.reliability)).collect(),
        });
    }
    export_map(&predictions, threshold, &args.out)?;
    let kept: usize = predictions
        .iter()
        .map(|p| {
            p.points.iter().filter(|(_, r)| *r >= threshold).count()
                + p.lines.iter().filter(|(_, r)| *r >= threshold).count()
        })
        .sum();
    eprintln!(
        "exported {kept} map entries at reliability >= {threshold} to {}",
        args.out.display()
    );
    write_manifest(
        &PathBuf::from(format!("{}.run.txt", args.out.display())),
        "infer",
        &st,
        started,
    )
}

fn run_localize(args: LocalizeArgs) -> Result<()> {
    let started = Instant::now();
    let mut st = Settings::load(&args.cfg)?;
    st.override_key("ransac.seed", args.seed.map(|v| v.to_string()));
    let base = ransac_config(&st)?;
    st.ensure_consumed()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    check_scene_matches(&ckpt, &scene)?;

    let mut out = String::new();
    out.push_str("# id status qw qx qy qz tx ty tz point_inliers line_inliers iterations\n");
    let mut failures = 0usize;
    for (idx, img) in scene.images.iter().enumerate() {
        let pred = predict_image(&ckpt, img)?;
        let corr = correspondences(img, &pred);
        let cfg = RansacConfig { seed: base.seed.wrapping_add(idx as u64), ..base };
        match ransac_pnp(&corr, &img.intrinsics, &cfg) {
            Ok(est) => {
                let est = if args.with_lines {
                    refine_points_lines(&est.pose, &corr, &img.intrinsics, &cfg)
                } else {
                    est
                };
                let q = est.pose.rotation.quaternion();
                let t = est.pose.translation;
                out.push_str(&format!(
                    "{} ok {} {} {} {} {} {} {} {} {} {}\n",
                    img.id,
                    q.w, q.i, q.j, q.k,
                    t.x, t.y, t.z,
                    est.n_point_inliers(),
                    est.n_line_inliers(),
                    est.iterations
                ));
            }
            Err(e @ (PoseError::NotEnoughPoints { .. } | PoseError::NoHypothesis { .. })) => {
                failures += 1;
                let reason = match e {
                    PoseError::NotEnoughPoints { .. } => "not-enough-points",
                    _ => "no-hypothesis",
                };
                out.push_str(&format!("{} failed {reason}\n", img.id));
            }
            Err(e) => return Err(e.into()),
        }
    }
    fs::write(&args.out, out)
        .with_context(|| format!("writing estimates {}", args.out.display()))?;
    eprintln!(
        "localized {} of {} images ({} failed), estimates at {}",
        scene.images.len() - failures,
        scene.images.len(),
        failures,
        args.out.display()
    );
    write_manifest(
        &PathBuf::from(format!("{}.run.txt", args.out.display())),
        "localize",
        &st,
        started,
    )
}

fn parse_estimates(path: &Path) -> Result<Vec<(String, Option<Pose>)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading estimates {}", path.display()))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || format!("{}:{}: malformed estimate line {line:?}", path.display(), i + 1);
        match fields.get(1).copied() {
            Some("ok") if fields.len() >= 9 => {
                let mut nums = [0.0f64; 7];
                for (slot, s) in nums.iter_mut().zip(&fields[2..9]) {
                    *slot = s.parse().with_context(bad)?;
                }
                let pose = Pose::from_wxyz_txyz(
                    [nums[0], nums[1], nums[2], nums[3]],
                    [nums[4], nums[5], nums[6]],
                );
                out.push((fields[0].to_string(), Some(pose)));
            }
            Some("failed") => out.push((fields[0].to_string(), None)),
            _ => bail!(bad()),
        }
    }
    Ok(out)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let st = Settings::load(&args.cfg)?;
    st.ensure_consumed()?;
    let scene = load_scene(&args.scene)?;
    let gt: BTreeMap<&str, &Pose> =
        scene.images.iter().map(|img| (img.id.as_str(), &img.pose)).collect();
    let estimates = parse_estimates(&args.estimates)?;
    if estimates.is_empty() {
        bail!("no estimates in {}", args.estimates.display());
    }
    let mut est_poses = Vec::new();
    let mut gt_poses = Vec::new();
    let mut failures = 0usize;
    for (id, pose) in &estimates {
        let truth = gt
            .get(id.as_str())
            .with_context(|| format!("estimate for unknown image {id:?}"))?;
        match pose {
            Some(p) => {
                est_poses.push(*p);
                gt_poses.push(**truth);
            }
            None => failures += 1,
        }
    }
    if est_poses.is_empty() {
        bail!("all {} estimates are localization failures", failures);
    }
    let summary = eval_metrics(&est_poses, &gt_poses)?;
    // failures count against accuracy but cannot enter the medians
    let total = est_poses.len() + failures;
    let accuracy = summary.accuracy_pct * est_poses.len() as f64 / total as f64;
    eprintln!(
        "evaluated {} images ({} failed); medians over successful estimates",
        total, failures
    );
    println!(
        "{:.1} / {:.2} / {:.1}",
        summary.median_translation_cm, summary.median_rotation_deg, accuracy
    );
    write_manifest(
        &PathBuf::from(format!("{}.eval-run.txt", args.estimates.display())),
        "eval",
        &st,
        started,
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => run_gen_synth(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Localize(args) => run_localize(args),
        Command::Eval(args) => run_eval(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args_with(sets: &[&str]) -> ConfigArgs {
        ConfigArgs { config: None, sets: sets.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn set_overrides_and_records_effective_values() {
        let st = Settings::load(&args_with(&["train.iters=42"])).unwrap();
        assert_eq!(st.usize("train.iters", 7).unwrap(), 42);
        assert_eq!(st.usize("train.drops", 7).unwrap(), 7);
        let snap = st.snapshot();
        assert_eq!(snap.get("train.iters").map(String::as_str), Some("42"));
        assert_eq!(snap.get("train.drops").map(String::as_str), Some("7"));
        assert!(st.ensure_consumed().is_ok());
    }

    #[test]
    fn unconsumed_set_key_is_an_error() {
        let st = Settings::load(&args_with(&["train.iterz=42"])).unwrap();
        let _ = st.usize("train.iters", 7).unwrap();
        assert!(st.ensure_consumed().is_err());
    }

    #[test]
    fn flag_overrides_beat_set() {
        let mut st = Settings::load(&args_with(&["train.seed=1"])).unwrap();
        st.override_key("train.seed", Some("9".to_string()));
        assert_eq!(st.u64("train.seed", 0).unwrap(), 9);
    }

    #[test]
    fn bad_value_names_the_key() {
        let st = Settings::load(&args_with(&["ransac.threshold_px=wide"])).unwrap();
        let err = st.f64("ransac.threshold_px", 3.0).unwrap_err();
        assert!(format!("{err:#}").contains("ransac.threshold_px"));
    }
}
