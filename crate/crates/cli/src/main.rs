use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dynsplat_core::config::{load_config, RunConfig};
use dynsplat_core::dataio::{
    depth_to_image, load_checkpoint, load_frames, load_manifest, load_seed_points, make_toy_scene, save_checkpoint,
    storage_report, write_image, write_toy_scene, Checkpoint, Frame, Profile, Split, StorageReport, ToyConfig,
};
use dynsplat_core::losses::LossRecord;
use dynsplat_core::metrics::{psnr, ssim, FrameMetrics, MetricReport};
use dynsplat_core::trainer::{TrainConfig, Trainer};
use dynsplat_core::{Error, Image};

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Deformable hash-encoded Gaussian splatting for dynamic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a scene manifest and write a checkpoint.
    Train(TrainArgs),
    /// Render one view of a checkpoint at any time in [0, 1].
    Render(RenderArgs),
    /// Score a checkpoint against the frames of a manifest.
    Eval(EvalArgs),
    /// Print the storage breakdown of a checkpoint.
    Info(InfoArgs),
    /// Write a synthetic dynamic scene.
    MakeToy(MakeToyArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Manifest file or a directory containing `manifest.json`.
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` (alias `toy`) or `paper`; ignored when the config names one.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations to run (default: the schedule's total).
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a training-profile checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write `model.export.dspl` (f32, no optimizer state).
    #[arg(long)]
    export: bool,
    /// Write `checkpoint_<iteration>.dspl` every N iterations.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    /// Manifest supplying the camera.
    #[arg(long)]
    dataset: PathBuf,
    /// Frame index in the manifest whose camera is used.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Time to render at (default: the frame's own time).
    #[arg(long)]
    time: Option<f64>,
    /// Also write a normalized depth map next to the image.
    #[arg(long)]
    depth: bool,
    /// Output image (`.png` or `.ppm`).
    #[arg(long, default_value = "render.png")]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct InfoArgs {
    checkpoint: PathBuf,
    /// Report for a hypothetical point count with the same networks.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct MakeToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only `default` exists.
    #[arg(long, default_value = "default")]
    preset: String,
    /// JSON file of toy-scene fields overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::Manifest { .. } | Error::Parse { .. }) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn manifest_path(p: &Path) -> Result<PathBuf, Failure> {
    if !p.exists() {
        return Err(usage(anyhow!("dataset not found: {}", p.display())));
    }
    Ok(if p.is_dir() { p.join("manifest.json") } else { p.to_path_buf() })
}

fn load_scene(p: &Path) -> Result<(dynsplat_core::dataio::SceneManifest, Vec<Frame>), Failure> {
    let path = manifest_path(p)?;
    let m = load_manifest(&path).with_context(|| format!("loading {}", path.display()))?;
    let frames = load_frames(&m)?;
    Ok((m, frames))
}

fn load_ckpt(p: &Path) -> Result<(Checkpoint, Profile), Failure> {
    if !p.exists() {
        return Err(usage(anyhow!("checkpoint not found: {}", p.display())));
    }
    Ok(load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?)
}

fn checkpoint_of(t: &Trainer) -> Checkpoint {
    Checkpoint {
        model: t.model.clone(),
        config: t.config.clone(),
        iteration: t.iteration as u64,
        extent: t.extent,
        optimizer: Some(t.optimizer.clone()),
    }
}

fn trainer_for(ck: Checkpoint) -> Trainer {
    Trainer::resume(ck.config, ck.model, ck.optimizer, ck.iteration as usize, ck.extent)
}

fn train(a: TrainArgs) -> CmdResult {
    let mut run = match &a.config {
        Some(p) if !p.exists() => return Err(usage(anyhow!("config not found: {}", p.display()))),
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let (Some(name), None) = (&a.preset, &a.config) {
        run.train = TrainConfig::preset(name)?;
        run.preset = name.clone();
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    let dataset = a
        .dataset
        .clone()
        .or(run.dataset.clone())
        .ok_or_else(|| usage(anyhow!("no dataset given (positional argument or `dataset` in the config)")))?;
    let out = a.out.clone().or(run.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let (manifest, frames) = load_scene(&dataset)?;
    let train_frames: Vec<Frame> = frames.iter().filter(|f| f.split == Split::Train).cloned().collect();
    if train_frames.is_empty() {
        return Err(usage(anyhow!("{} has no training frames", dataset.display())));
    }

    let mut trainer = match &a.resume {
        Some(p) => trainer_for(load_ckpt(p)?.0),
        None => {
            let seeds = manifest.seed_points.as_deref().map(load_seed_points).transpose()?;
            Trainer::from_frames(run.train.clone(), &train_frames, seeds.as_ref(), manifest.aabb)?
        }
    };
    let iters = a.iters.unwrap_or(trainer.config.total_iters.saturating_sub(trainer.iteration));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut log = String::from(LossRecord::CSV_HEADER);
    log.push('\n');
    let quiet = a.json;
    let start = Instant::now();
    let mut last: Option<LossRecord> = None;
    let mut save_error: Option<Error> = None;
    let every = a.checkpoint_every.filter(|&n| n > 0);
    trainer.train(&train_frames, iters, |t, r| {
        log.push_str(&r.csv_row());
        log.push('\n');
        if let Some(n) = every {
            if t.iteration % n == 0 && save_error.is_none() {
                let p = out.join(format!("checkpoint_{}.dspl", t.iteration));
                save_error = save_checkpoint(&p, &checkpoint_of(t), Profile::Training).err();
            }
        }
        if !quiet && (t.iteration % 100 == 0 || t.iteration == 1) {
            eprintln!("iter {:>6}  loss {:.5}  l1 {:.5}  points {}", t.iteration, r.total, r.l1, r.points);
        }
        last = Some(r.clone());
    })?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    let seconds = start.elapsed().as_secs_f64();

    let ck = checkpoint_of(&trainer);
    let ck_path = out.join("checkpoint.dspl");
    save_checkpoint(&ck_path, &ck, Profile::Training)?;
    if a.export {
        save_checkpoint(&out.join("model.export.dspl"), &ck, Profile::Export)?;
    }
    let write = |name: &str, text: &str| -> anyhow::Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("losses.csv", &log)?;
    write("events.log", &trainer.events.join("\n"))?;

    let opts = trainer.forward_options();
    let mut total = 0.0;
    for f in &train_frames {
        let out = trainer.model.render(&f.camera, &opts)?;
        total += psnr(&Image::from(&out), &f.image)?;
    }
    let train_psnr = total / train_frames.len() as f64;
    if a.json {
        let summary = json!({
            "checkpoint": ck_path,
            "iterations": trainer.iteration,
            "points": trainer.model.cloud.len(),
            "seconds": seconds,
            "final_loss": last.as_ref().map(|r| r.total),
            "train_psnr": train_psnr,
            "events": trainer.events,
        });
        println!("{summary}");
    } else {
        println!(
            "{} iterations in {:.1}s, {} points, train PSNR {:.2} dB",
            trainer.iteration,
            seconds,
            trainer.model.cloud.len(),
            train_psnr
        );
        println!("checkpoint written to {}", ck_path.display());
    }
    Ok(())
}

fn depth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("render");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("png");
    out.with_file_name(format!("{stem}_depth.{ext}"))
}

fn render(a: RenderArgs) -> CmdResult {
    let (ck, _) = load_ckpt(&a.checkpoint)?;
    let path = manifest_path(&a.dataset)?;
    let m = load_manifest(&path)?;
    let spec = m
        .frames
        .get(a.frame)
        .ok_or_else(|| usage(anyhow!("frame {} out of range ({} frames)", a.frame, m.frames.len())))?;
    let (w, h) = dynsplat_core::dataio::read_image(&spec.image).map(|i| (i.width, i.height))?;
    let mut cam = dynsplat_core::dataio::frame_camera(spec, w, h, m.near, m.far);
    if let Some(t) = a.time {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(anyhow!("time {t} is outside [0, 1]")));
        }
        cam.time = t;
    }
    let trainer = trainer_for(ck);
    let start = Instant::now();
    let out = trainer.model.render(&cam, &trainer.forward_options())?;
    let seconds = start.elapsed().as_secs_f64();
    write_image(&a.out, &Image::from(&out))?;
    let depth = if a.depth {
        let p = depth_path(&a.out);
        write_image(&p, &depth_to_image(&out.depth, &out.alpha, out.width, out.height))?;
        Some(p)
    } else {
        None
    };
    if a.json {
        println!("{}", json!({ "image": a.out, "depth": depth, "time": cam.time, "seconds": seconds }));
    } else {
        println!("wrote {} (t = {})", a.out.display(), cam.time);
        if let Some(p) = depth {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let (ck, _) = load_ckpt(&a.checkpoint)?;
    let (_, frames) = load_scene(&a.dataset)?;
    let chosen: Vec<&Frame> = frames
        .iter()
        .filter(|f| match a.split {
            SplitArg::Train => f.split == Split::Train,
            SplitArg::Test => f.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    if chosen.is_empty() {
        return Err(usage(anyhow!("{} has no frames in the requested split", a.dataset.display())));
    }
    let trainer = trainer_for(ck);
    let opts = trainer.forward_options();
    let mut report = MetricReport::default();
    for f in chosen {
        let start = Instant::now();
        let out = trainer.model.render(&f.camera, &opts)?;
        let render_seconds = start.elapsed().as_secs_f64();
        let img = Image::from(&out);
        report.frames.push(FrameMetrics {
            frame: f.name.clone(),
            psnr: psnr(&img, &f.image)?,
            ssim: ssim(&img, &f.image)?,
            render_seconds,
        });
    }
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.json {
        println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    } else if a.out.is_none() {
        print!("{}", report.to_csv());
    } else {
        println!(
            "{} frames: PSNR {:.2} dB, SSIM {:.4}, {:.1} FPS",
            report.frames.len(),
            report.mean_psnr(),
            report.mean_ssim(),
            report.fps()
        );
    }
    Ok(())
}

fn info(a: InfoArgs) -> CmdResult {
    let (ck, profile) = load_ckpt(&a.checkpoint)?;
    let mut report = storage_report(&ck);
    if let Some(n) = a.points {
        report = StorageReport::from_parts(n, report.deform_bytes / 4, report.hash_table_bytes / 4, report.decoder_bytes / 4, report.overhead_bytes);
    }
    if a.json {
        let v = json!({
            "checkpoint": a.checkpoint,
            "profile": profile,
            "iteration": ck.iteration,
            "storage": report,
        });
        println!("{v}");
    } else {
        println!("checkpoint            {} ({profile:?} profile)", a.checkpoint.display());
        println!("iteration             {}", ck.iteration);
        print!("{}", report.to_text());
    }
    Ok(())
}

fn make_toy(a: MakeToyArgs) -> CmdResult {
    let mut cfg = match a.preset.as_str() {
        "default" | "desk" | "toy" => ToyConfig::default(),
        other => return Err(usage(anyhow!("unknown toy preset `{other}`"))),
    };
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg = serde_json::from_str(&text).map_err(|e| usage(anyhow!("{}: {e}", p.display())))?;
    }
    let scene = make_toy_scene(a.seed, &cfg)?;
    write_toy_scene(&scene, &a.out)?;
    if a.json {
        println!("{}", json!({ "out": a.out, "frames": scene.frames.len(), "seed": a.seed }));
    } else {
        println!("wrote {} frames to {}", scene.frames.len(), a.out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Info(a) => info(a),
        Command::MakeToy(a) => make_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
