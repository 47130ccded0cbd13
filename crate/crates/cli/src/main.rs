//! `cdgmae` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 file or format
//! error, 3 numerical failure.

mod plot;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdgmae::io::{atomic_write, fmt6, read_records, render_table};
use cdgmae::labelprop::{load_videos, run_eval, save_videos, EvalVideo, FeatureExtractor, IdentityFeatures, PropagationConfig, Task};
use cdgmae::metrics::{evaluate_pairs, FeatureSet};
use cdgmae::model::{extract_features, load_checkpoint, ModelConfig, ModelParams};
use cdgmae::synth::{gen_video, write_ppm, Motion, SceneSpec};
use cdgmae::train::{flops_breakdown, scene_seed, BagDataset, TrainConfig, Trainer};
use cdgmae::{verify, Error, Result, Tensor};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "cdgmae", version, about = "Cross-view masked autoencoder toolkit")]
struct Cli {
    /// `key = value` file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate bags of synthetic views (one real image plus M views each).
    SynthViews(SynthViewsArgs),
    /// Generate annotated synthetic videos for label propagation.
    SynthVideo(SynthVideoArgs),
    /// Pretrain a model; writes a checkpoint, a step log and the resolved config.
    Train(TrainArgs),
    /// Print an analytic FLOPs table for (anchors, anchor mask) pairs.
    Flops(FlopsArgs),
    /// Global, local and nearest-patch similarity of view pairs.
    Metrics(MetricsArgs),
    /// Label propagation on videos with a checkpoint or the identity stub.
    Labelprop(LabelpropArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Summary tables and plot files from record logs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthViewsArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bags: Option<usize>,
    /// Generated views per bag (M).
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    /// Also export every image as PPM next to its tensor file.
    #[arg(long)]
    ppm: bool,
}

#[derive(Args, Debug)]
struct SynthVideoArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// static, linear or random
    #[arg(long)]
    motion: Option<String>,
    /// Maximum drift in px/frame for random motion.
    #[arg(long)]
    speed: Option<f64>,
    /// Velocity for linear motion, px/frame.
    #[arg(long, allow_hyphen_values = true)]
    vx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    vy: Option<f64>,
    #[arg(long)]
    ppm: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory for `checkpoint/`, `train.log` and `config.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train on saved bags instead of generating them.
    #[arg(long)]
    bags: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    anchor_mask: Option<f64>,
    #[arg(long)]
    target_mask: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    num_bags: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated anchor counts; crossed with `--anchor-mask`.
    #[arg(long)]
    anchors: Option<String>,
    /// Comma-separated anchor mask ratios.
    #[arg(long)]
    anchor_mask: Option<String>,
    #[arg(long)]
    target_mask: Option<f64>,
    /// Explicit `N:r_a` list such as `1:0,2:0.25`; replaces the cross product.
    #[arg(long)]
    pairs: Option<String>,
    /// Add per-component columns.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Feature tensor files, taken two at a time as (first, second) pairs.
    #[arg(long, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Bag directory used with `--checkpoint`.
    #[arg(long)]
    bags: Option<PathBuf>,
    /// `views`: real image against each of its views; `random`: real image
    /// against the next bag's real image.
    #[arg(long)]
    pairing: Option<String>,
    /// Also report nearest-patch similarity from the second view to the first.
    #[arg(long)]
    both_directions: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LabelpropArgs {
    #[arg(long)]
    videos: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use one-hot per-patch features instead of a model.
    #[arg(long)]
    identity_stub: bool,
    /// Patch size of the identity stub; 1 reproduces pixel labels exactly.
    #[arg(long)]
    patch_size: Option<usize>,
    /// segmentation, parts or pose
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    queue_length: Option<usize>,
    #[arg(long)]
    neighborhood: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run the model checks on the tiny preset (the only supported size).
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Record log files (`key=value` per line).
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key for the horizontal axis.
    #[arg(long)]
    x: Option<String>,
    /// Comma-separated keys to plot.
    #[arg(long)]
    y: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) | Error::Degenerate(_) => 3,
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::SynthViews(a) => synth_views(a, config, cli.seed),
        Command::SynthVideo(a) => synth_video(a, config, cli.seed),
        Command::Train(a) => train(a, config, cli.seed),
        Command::Flops(a) => flops(a, config),
        Command::Metrics(a) => metrics(a, config, cli.seed),
        Command::Labelprop(a) => labelprop(a, config),
        Command::Gradcheck(a) => gradcheck(a, config, cli.seed),
        Command::Report(a) => report(a, config),
    }
}

fn path_setting(s: &Settings, key: &str) -> Result<PathBuf> {
    s.require::<String>(key).map(PathBuf::from)
}

fn synth_views(a: SynthViewsArgs, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let mut s = Settings::load(config, &["out", "bags", "views", "strength", "size", "seed", "ppm"])?;
    s.flag("out", a.out.map(|p| p.display().to_string()))
        .flag("bags", a.bags)
        .flag("views", a.views)
        .flag("strength", a.strength)
        .flag("size", a.size)
        .flag("seed", seed)
        .switch("ppm", a.ppm);
    let out = path_setting(&s, "out")?;
    let data = BagDataset::generate(s.or("bags", 64)?, s.or("size", 32)?, s.or("views", 4)?, s.or("strength", 0.5)?, s.or("seed", 1)?)?;
    data.save(&out)?;
    if s.or("ppm", false)? {
        for (i, bag) in data.bags.iter().enumerate() {
            let dir = out.join(format!("bag_{i:04}"));
            write_ppm(&dir.join("real.ppm"), &bag.real)?;
            for (v, img) in bag.views.iter().enumerate() {
                write_ppm(&dir.join(format!("view_{v:02}.ppm")), img)?;
            }
        }
    }
    println!("wrote {} bags to {}", data.len(), out.display());
    Ok(0)
}

fn synth_video(a: SynthVideoArgs, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let keys = ["out", "videos", "frames", "size", "motion", "speed", "vx", "vy", "seed", "ppm"];
    let mut s = Settings::load(config, &keys)?;
    s.flag("out", a.out.map(|p| p.display().to_string()))
        .flag("videos", a.videos)
        .flag("frames", a.frames)
        .flag("size", a.size)
        .flag("motion", a.motion)
        .flag("speed", a.speed)
        .flag("vx", a.vx)
        .flag("vy", a.vy)
        .flag("seed", seed)
        .switch("ppm", a.ppm);
    let out = path_setting(&s, "out")?;
    let motion = match s.or("motion", "random".to_string())?.as_str() {
        "static" => Motion::Static,
        "linear" => Motion::Linear { vx: s.or("vx", 1.0)?, vy: s.or("vy", 0.0)? },
        "random" => Motion::Random { speed: s.or("speed", 1.5)? },
        other => return Err(Error::Config(format!("unknown motion `{other}` (static, linear or random)"))),
    };
    let (n, frames, size, seed) = (s.or("videos", 20usize)?, s.or("frames", 8usize)?, s.or("size", 32usize)?, s.or("seed", 1u64)?);
    let videos = (0..n)
        .map(|i| {
            let v = gen_video(&SceneSpec::random(scene_seed(seed, i), size), frames, motion)?;
            Ok(EvalVideo::from_synth(format!("video_{i:03}"), &v))
        })
        .collect::<Result<Vec<_>>>()?;
    save_videos(&out, &videos)?;
    if s.or("ppm", false)? {
        for v in &videos {
            for (t, f) in v.frames.iter().enumerate() {
                write_ppm(&out.join(&v.name).join(format!("frame_{t:03}.ppm")), f)?;
            }
        }
    }
    println!("wrote {n} videos to {}", out.display());
    Ok(0)
}

fn train(a: TrainArgs, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let mut allowed: Vec<String> = TrainConfig::KEYS.iter().map(|k| k.to_string()).collect();
    allowed.extend(ModelConfig::KEYS.iter().map(|k| format!("model.{k}")));
    allowed.extend(["out".to_string(), "bags".to_string()]);
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    let mut s = Settings::load(config, &allowed)?;
    s.flag("out", a.out.map(|p| p.display().to_string()))
        .flag("bags", a.bags.map(|p| p.display().to_string()))
        .flag("preset", a.preset)
        .flag("strategy", a.strategy)
        .flag("num_anchors", a.anchors)
        .flag("anchor_mask", a.anchor_mask)
        .flag("target_mask", a.target_mask)
        .flag("steps", a.steps)
        .flag("epochs", a.epochs)
        .flag("batch_size", a.batch_size)
        .flag("base_lr", a.lr)
        .flag("num_bags", a.num_bags)
        .flag("threads", a.threads)
        .flag("seed", seed);
    let out = path_setting(&s, "out")?;
    let bags: Option<String> = s.get("bags")?;
    let cfg = TrainConfig::from_kv(&s.without(&["out", "bags"]))?;
    let mut trainer = match bags {
        Some(dir) => Trainer::new(cfg.clone(), BagDataset::load(Path::new(&dir))?)?,
        None => Trainer::from_config(cfg.clone())?,
    };
    atomic_write(&out.join("config.txt"), cfg.to_kv().render().as_bytes())?;
    let history = trainer.run(Some(&out.join("train.log")), Some(&out.join("checkpoint")))?;
    let (first, last) = (history[0].loss, history[history.len() - 1].loss);
    println!("steps {}  loss {} -> {}", history.len(), fmt6(first), fmt6(last));
    Ok(0)
}

fn reference_pairs() -> Vec<(usize, f64)> {
    vec![(1, 0.0), (2, 0.0), (2, 0.25), (2, 0.5), (3, 0.25), (3, 0.5), (4, 0.25), (4, 0.5)]
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, f64)>> {
    text.split(',')
        .map(|item| {
            let bad = || Error::Config(format!("`pairs` item {item:?} is not N:r_a"));
            let (n, r) = item.trim().split_once(':').ok_or_else(bad)?;
            Ok((n.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn flops(a: FlopsArgs, config: Option<&Path>) -> Result<u8> {
    let mut s = Settings::load(config, &["preset", "anchors", "anchor_mask", "target_mask", "pairs", "breakdown"])?;
    s.flag("preset", a.preset)
        .flag("anchors", a.anchors)
        .flag("anchor_mask", a.anchor_mask)
        .flag("target_mask", a.target_mask)
        .flag("pairs", a.pairs)
        .switch("breakdown", a.breakdown);
    let model = ModelConfig::preset(&s.or("preset", "vit-s16".to_string())?)?;
    let target_mask: f64 = s.or("target_mask", 0.9)?;
    let pairs = match (s.get::<String>("pairs")?, s.get::<String>("anchors")?, s.get::<String>("anchor_mask")?) {
        (Some(p), _, _) => parse_pairs(&p)?,
        (None, None, None) => reference_pairs(),
        _ => {
            let ns = s.list::<usize>("anchors", vec![1])?;
            let rs = s.list::<f64>("anchor_mask", vec![0.0])?;
            ns.iter().flat_map(|&n| rs.iter().map(move |&r| (n, r))).collect()
        }
    };
    let detailed = s.or("breakdown", false)?;
    let mut header = vec!["N", "r_a", "r_t", "GFLOPs"];
    if detailed {
        header.extend(["target_enc", "anchor_enc", "decoder", "enc_attn_excl"]);
    }
    let mut rows = Vec::new();
    for (n, r) in pairs {
        if !(0.0..1.0).contains(&r) || n == 0 {
            return Err(Error::Config(format!("invalid pair N={n}, r_a={r}")));
        }
        let b = flops_breakdown(&model, n, r, target_mask);
        let mut row = vec![n.to_string(), fmt6(r), fmt6(target_mask), fmt6(b.gflops())];
        if detailed {
            let dec = b.decoder_embed + b.decoder_self_attention + b.decoder_cross_attention + b.decoder_mlp + b.head + b.loss;
            row.extend([b.target_encoder, b.anchor_encoders, dec, b.encoder_attention].map(|v| fmt6(v / 1e9)));
        }
        rows.push(row);
    }
    print!("{}", render_table(&header, &rows));
    Ok(0)
}

fn features_of(params: &ModelParams, image: &Tensor<f32>, id: String) -> Result<FeatureSet> {
    let (cls, patches) = extract_features(params, image)?;
    FeatureSet::new(cls, patches, params.config.grid(), id)
}

fn metrics(a: MetricsArgs, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let mut s = Settings::load(config, &["checkpoint", "bags", "pairing", "both_directions", "out", "seed"])?;
    s.flag("checkpoint", a.checkpoint.map(|p| p.display().to_string()))
        .flag("bags", a.bags.map(|p| p.display().to_string()))
        .flag("pairing", a.pairing)
        .flag("out", a.out.map(|p| p.display().to_string()))
        .flag("seed", seed)
        .switch("both_directions", a.both_directions);
    let (pairs, label) = if !a.features.is_empty() {
        if !a.features.len().is_multiple_of(2) {
            return Err(Error::Config("`--features` takes an even number of files".into()));
        }
        let sets = a.features.iter().map(|p| FeatureSet::load(p)).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = sets.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        (pairs, "files".to_string())
    } else {
        let (params, _) = load_checkpoint(&path_setting(&s, "checkpoint")?)?;
        let data = BagDataset::load(&path_setting(&s, "bags")?)?;
        let pairing = s.or("pairing", "views".to_string())?;
        let mut pairs = Vec::new();
        for (i, bag) in data.bags.iter().enumerate() {
            let real = features_of(&params, &bag.real, format!("bag_{i:04}/real"))?;
            match pairing.as_str() {
                "views" => {
                    for (v, img) in bag.views.iter().enumerate() {
                        pairs.push((real.clone(), features_of(&params, img, format!("bag_{i:04}/view_{v:02}"))?));
                    }
                }
                "random" => {
                    let j = (i + 1) % data.len();
                    pairs.push((real, features_of(&params, &data.bags[j].real, format!("bag_{j:04}/real"))?));
                }
                other => return Err(Error::Config(format!("unknown pairing `{other}` (views or random)"))),
            }
        }
        (pairs, pairing)
    };
    let summary = evaluate_pairs(&pairs, s.or("both_directions", false)?)?;
    print!("{}", summary.table(&label));
    if let Some(out) = s.get::<String>("out")? {
        summary.write(Path::new(&out), "metrics", &label)?;
    }
    Ok(0)
}

fn labelprop(a: LabelpropArgs, config: Option<&Path>) -> Result<u8> {
    let keys =
        ["videos", "checkpoint", "identity_stub", "patch_size", "task", "top_k", "queue_length", "neighborhood", "temperature", "out"];
    let mut s = Settings::load(config, &keys)?;
    s.flag("videos", a.videos.map(|p| p.display().to_string()))
        .flag("checkpoint", a.checkpoint.map(|p| p.display().to_string()))
        .switch("identity_stub", a.identity_stub)
        .flag("patch_size", a.patch_size)
        .flag("task", a.task)
        .flag("top_k", a.top_k)
        .flag("queue_length", a.queue_length)
        .flag("neighborhood", a.neighborhood)
        .flag("temperature", a.temperature)
        .flag("out", a.out.map(|p| p.display().to_string()));
    let videos = load_videos(&path_setting(&s, "videos")?)?;
    let task: Task = s.or("task", "segmentation".to_string())?.parse()?;
    let d = PropagationConfig::default();
    let cfg = PropagationConfig {
        top_k: s.or("top_k", d.top_k)?,
        queue_length: s.or("queue_length", d.queue_length)?,
        neighborhood: s.or("neighborhood", d.neighborhood)?,
        temperature: s.or("temperature", d.temperature)?,
        ..d
    };
    let stub;
    let params;
    let extractor: &dyn FeatureExtractor = if s.or("identity_stub", false)? {
        stub = IdentityFeatures { patch_size: s.or("patch_size", 1)? };
        &stub
    } else {
        params = load_checkpoint(&path_setting(&s, "checkpoint")?)?.0;
        &params
    };
    let report = run_eval(extractor, &videos, task, &cfg)?;
    print!("{}", report.table());
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt6);
    match task {
        Task::Segmentation => println!("J_m = {}  F_m = {}", show(report.j_mean()), show(report.f_mean())),
        Task::Parts => println!("mIoU = {}", show(report.miou_mean())),
        Task::Pose => {
            let (p10, p20) = report.pck_mean();
            println!("PCK@0.1 = {}  PCK@0.2 = {}", show(p10), show(p20));
        }
    }
    if let Some(out) = s.get::<String>("out")? {
        report.write(Path::new(&out), "labelprop")?;
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let mut s = Settings::load(config, &["tiny", "trials", "seed"])?;
    s.switch("tiny", a.tiny).flag("trials", a.trials).flag("seed", seed);
    let report = verify::run_suite(s.or("trials", 20)?, s.or("seed", 0)?)?;
    let rows: Vec<Vec<String>> = report
        .worst_by_name()
        .into_iter()
        .map(|(name, err, tol)| {
            let status = if err <= tol { "PASS" } else { "FAIL" };
            vec![name, format!("{err:.3e}"), format!("{tol:.0e}"), status.to_string()]
        })
        .collect();
    print!("{}", render_table(&["check", "worst_rel_error", "tolerance", "status"], &rows));
    let failed = report.trials.iter().filter(|t| !t.passed()).count();
    println!("{} trials, {failed} failed", report.trials.len());
    Ok(if failed == 0 { 0 } else { 3 })
}

fn report(a: ReportArgs, config: Option<&Path>) -> Result<u8> {
    let mut s = Settings::load(config, &["out", "x", "y"])?;
    s.flag("out", a.out.map(|p| p.display().to_string())).flag("x", a.x).flag("y", a.y);
    if a.input.is_empty() {
        return Err(Error::Config("`--input` needs at least one record file".into()));
    }
    let out = path_setting(&s, "out")?;
    let x: String = s.or("x", "step".to_string())?;
    for path in &a.input {
        let records = read_records(path)?;
        let stem = path.file_stem().map(|p| p.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
        let table = plot::summary_table(&records);
        println!("{}", path.display());
        print!("{table}");
        atomic_write(&out.join(format!("{stem}.summary.txt")), table.as_bytes())?;
        let ys: Vec<String> = match s.get::<String>("y")? {
            Some(list) => list.split(',').map(|k| k.trim().to_string()).collect(),
            None => plot::numeric_keys(&records).into_iter().filter(|k| *k != x).collect(),
        };
        let rows = plot::series(&records, &x, &ys);
        if rows.is_empty() || ys.is_empty() {
            continue;
        }
        atomic_write(&out.join(format!("{stem}.dat")), plot::dat_file(&x, &ys, &rows).as_bytes())?;
        atomic_write(&out.join(format!("{stem}.svg")), plot::svg_plot(&stem, &x, &ys, &rows).as_bytes())?;
    }
    Ok(0)
}
