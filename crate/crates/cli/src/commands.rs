//! Subcommand definitions and dispatch.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnp::audio::AudioTrack;
use dnp::bench::benchmark;
use dnp::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dnp::field::{ConditioningInput, Drive, LatentInput};
use dnp::gradcheck::check_tiny;
use dnp::model::{DriveMode, ModelConfig, Preset, Variant};
use dnp::numcore::GradCheckOptions;
use dnp::render::{audio_drive, reenact, Renderer};
use dnp::scene::{generate_scene, load_dataset, save_dataset, synth_audio_track, SceneSpec};
use dnp::tracks::read_tracks;
use dnp::training::{evaluate, mean_frame_metrics, Split, TrainConfig, Trainer};
use dnp::{tensor_file, DnpError};
use serde::Serialize;

use crate::service::{self, AppState};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "dnp", version, about = "Train, evaluate and serve conditioned portrait models")]
pub struct Cli {
    /// Seed for scene generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic portrait video with ground-truth tracks.
    MakeScene(MakeScene),
    /// Train a model on a scene directory.
    Train(Train),
    /// Score a checkpoint against a scene split.
    Evaluate(Evaluate),
    /// Render one frame from explicit conditioning.
    Render(RenderArgs),
    /// Render a frame sequence from a tracks.jsonl stream.
    Reenact(Reenact),
    /// Time the forward pass at several resolutions.
    Bench(Bench),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP rendering service.
    Serve(Serve),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Expression,
    Audio,
}

impl From<ModeArg> for DriveMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Expression => DriveMode::Expression,
            ModeArg::Audio => DriveMode::Audio,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Desk,
    Full,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Full => Preset::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    HeldOut,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::HeldOut => Split::HeldOut,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}, expected one of A-F"))
}

#[derive(Debug, Args)]
pub struct MakeScene {
    /// Number of frames.
    #[arg(long = "T", alias = "frames", default_value_t = 300)]
    pub frames: usize,
    /// Square resolution in pixels.
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    /// Number of expression components (1-8).
    #[arg(long, default_value_t = 8)]
    pub n_exp: usize,
    /// Also synthesize an audio feature track.
    #[arg(long)]
    pub audio: bool,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Scene directory written by make-scene.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_variant, default_value = "F")]
    pub variant: Variant,
    #[arg(long, value_enum, default_value = "expression")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 20_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Latent width for variants D-F.
    #[arg(long, default_value_t = 32)]
    pub n_v: usize,
    /// Decoder upsampling stages (overrides the preset).
    #[arg(long)]
    pub stages: Option<usize>,
    /// Steps between JSON loss lines on stderr; 0 disables them.
    #[arg(long, default_value_t = 1000)]
    pub snapshot_every: u64,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "held-out")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Six comma-separated values: yaw, pitch, roll, tx, ty, scale.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub pose: Option<Vec<f64>>,
    /// Expression weights (or the audio code of an audio-driven model).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub expression: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gaze: Option<Vec<f64>>,
    /// Use this training frame's latent instead of the mean.
    #[arg(long)]
    pub latent_row: Option<usize>,
    /// Output resolution (default: the training resolution).
    #[arg(long)]
    pub res: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Reenact {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Driving tracks.jsonl.
    #[arg(long)]
    pub tracks: PathBuf,
    /// Audio features (audio.bin) for audio-driven models.
    #[arg(long)]
    pub audio: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Bench {
    /// Checkpoint to time. Without one, a freshly initialized model is used.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant, default_value = "F")]
    pub variant: Variant,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub res: Vec<usize>,
    /// Timed frames per resolution.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: PresetArg,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Static UI assets served under `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

/// Failure of a subcommand, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<DnpError> for CliError {
    fn from(e: DnpError) -> Self {
        let validation = e.is_validation() || matches!(e, DnpError::Format { .. } | DnpError::Io { .. });
        if validation {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, text + "\n").map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be positive"));
        }
        // Fails only when a pool already exists (e.g. a second call in one
        // process), in which case the existing pool is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.as_deref();
    match &cli.command {
        Command::MakeScene(a) => make_scene(a, cli.seed, out),
        Command::Train(a) => train(a, cli.seed, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Render(a) => render_cmd(a, out),
        Command::Reenact(a) => reenact_cmd(a, out),
        Command::Bench(a) => bench(a, cli.seed, out),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
        Command::Serve(a) => serve(a),
    }
}

fn make_scene(a: &MakeScene, seed: u64, out: Option<&Path>) -> CliResult {
    let dir = out.ok_or_else(|| invalid("make-scene needs --out DIR"))?;
    let mut spec = SceneSpec::with_resolution(a.res, seed);
    spec.n_exp = a.n_exp;
    spec.validate()?;
    let mut d = generate_scene(&spec, a.frames)?;
    if a.audio {
        d.audio = Some(synth_audio_track(&d)?);
    }
    save_dataset(&d, dir)?;
    eprintln!(
        "wrote {} frames ({} train, {} held out) to {}",
        d.len(),
        d.train.len(),
        d.held_out.len(),
        dir.display()
    );
    Ok(())
}

fn train(a: &Train, seed: u64, out: Option<&Path>) -> CliResult {
    let out = out.unwrap_or(Path::new("model.dnpc"));
    let d = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&d, load_checkpoint(p)?)?,
        None => {
            let mut cfg = TrainConfig::new(a.variant, a.steps, seed);
            cfg.mode = a.mode.into();
            cfg.preset = a.preset.into();
            cfg.lr = a.lr;
            cfg.n_v = a.n_v;
            cfg.stages = a.stages;
            cfg.snapshot_every = a.snapshot_every;
            Trainer::new(&d, cfg)?
        }
    };
    let mut log = std::io::stderr();
    trainer.run(Some(&mut log))?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, out)?;
    eprintln!("saved step {} checkpoint to {}", ckpt.step, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    variant: String,
    split: Split,
    step: u64,
    metrics: dnp::training::Metrics,
    mean_frame_baseline: dnp::training::Metrics,
}

fn evaluate_cmd(a: &Evaluate, out: Option<&Path>) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let d = load_dataset(&a.data)?;
    let split: Split = a.split.into();
    let report = EvalReport {
        variant: ckpt.model.config.variant.name().to_string(),
        split,
        step: ckpt.step,
        metrics: evaluate(&ckpt.model, &d, split)?,
        mean_frame_baseline: mean_frame_metrics(&d, split)?,
    };
    print_json(&report, out)
}

fn vector(name: &str, v: &Option<Vec<f64>>, len: usize) -> CliResult<Vec<f64>> {
    match v {
        None => Ok(vec![0.0; len]),
        Some(v) if v.len() == len => Ok(v.clone()),
        Some(v) => Err(invalid(format!("--{name} needs {len} values, got {}", v.len()))),
    }
}

fn render_cmd(a: &RenderArgs, out: Option<&Path>) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let cfg = &ckpt.model.config;
    let pose = vector("pose", &a.pose, 6)?;
    let drive = vector("expression", &a.expression, cfg.drive_len())?;
    let gaze = vector("gaze", &a.gaze, 2)?;
    let cond = ConditioningInput {
        pose: std::array::from_fn(|k| pose[k]),
        drive: match cfg.mode {
            DriveMode::Expression => Drive::Expression(drive),
            DriveMode::Audio => Drive::AudioCode(drive),
        },
        gaze: [gaze[0], gaze[1]],
        latent: match a.latent_row {
            Some(r) if r >= cfg.train_frames => {
                return Err(invalid(format!("--latent-row {r}: model has {} training frames", cfg.train_frames)))
            }
            Some(r) => LatentInput::Row(r),
            None => LatentInput::Mean,
        },
    };
    let (h, w) = match a.res {
        Some(r) => (r, r),
        None => (cfg.height, cfg.width),
    };
    if cfg.variant == Variant::B && (h, w) != (cfg.height, cfg.width) {
        return Err(invalid("the learned-input variant renders only at its training resolution"));
    }
    cfg.grid_for(h, w)?;
    let path = out.unwrap_or(Path::new("frame.png"));
    let img = Renderer::new(ckpt.model)?.render_at(&cond, h, w)?;
    img.save_png(path)?;
    Ok(())
}

fn reenact_cmd(a: &Reenact, out: Option<&Path>) -> CliResult {
    let dir = out.ok_or_else(|| invalid("reenact needs --out DIR"))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let file = fs::File::open(&a.tracks).map_err(|e| invalid(format!("{}: {e}", a.tracks.display())))?;
    let tracks = read_tracks(std::io::BufReader::new(file)).map_err(|e| invalid(format!("{}: {e}", a.tracks.display())))?;
    let frames = match (&a.audio, ckpt.model.config.mode) {
        (Some(p), DriveMode::Audio) => {
            let audio = AudioTrack::new(tensor_file::load(p)?)?;
            audio_drive(&ckpt.model, &tracks, &audio)?
        }
        (None, DriveMode::Audio) => return Err(invalid("audio-driven model needs --audio")),
        (Some(_), DriveMode::Expression) => return Err(invalid("--audio given for an expression-driven model")),
        (None, DriveMode::Expression) => reenact(&ckpt.model, &tracks)?,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (i, img) in frames.iter().enumerate() {
        img.save_png(&dir.join(format!("{i:06}.png")))?;
    }
    eprintln!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}

fn bench(a: &Bench, seed: u64, out: Option<&Path>) -> CliResult {
    if a.frames == 0 {
        return Err(invalid("--frames must be positive"));
    }
    if a.res.is_empty() {
        return Err(invalid("--res needs at least one resolution"));
    }
    let model = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let cfg = ModelConfig::preset(a.preset.into(), a.variant, DriveMode::Expression, 64, 8, 270);
            Checkpoint::fresh(cfg, seed)?.model
        }
    };
    let report = benchmark(&model, &a.res, a.frames)?;
    print_json(&report, out)
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult {
    if !matches!(a.preset, PresetArg::Tiny) {
        return Err(invalid("gradcheck runs on the tiny preset only"));
    }
    let opts = GradCheckOptions {
        eps: a.eps,
        seed,
        ..GradCheckOptions::default()
    };
    let t0 = std::time::Instant::now();
    let reports = check_tiny(seed, &opts)?;
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        println!(
            "{name}: max rel err {:.3e} over {} coordinates in {} tensors ({} skipped)",
            r.max_rel_error,
            r.checked,
            r.tensors.len(),
            r.skipped
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max rel err {worst:.3e} ({:.1}s)", t0.elapsed().as_secs_f64());
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("max rel err {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

fn serve(a: &Serve) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            return Err(invalid(format!("--ui-dir {} is not a directory", dir.display())));
        }
    }
    let state = Arc::new(AppState::new(ckpt.model)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(service::serve(state, a.ui_dir.clone(), &a.addr))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.addr)))?;
    let _ = std::io::stderr().flush();
    Ok(())
}
