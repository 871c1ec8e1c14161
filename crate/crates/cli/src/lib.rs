//! Subcommands of the `m3ddm` executable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use m3ddm_core::denoiser::DenoiserConfig;
use m3ddm_core::executor::execute_plan;
use m3ddm_core::guidance::{ClipRunner, GuidanceConfig, InitMode};
use m3ddm_core::io::write_atomic;
use m3ddm_core::mask::{FrameMask, MaskSpec, Side};
use m3ddm_core::metrics::{evaluate, metrics_csv};
use m3ddm_core::optim::AdamConfig;
use m3ddm_core::planner::{plan, PlanMode};
use m3ddm_core::sampler::{SamplerConfig, SamplerKind};
use m3ddm_core::schedule::NoiseSchedule;
use m3ddm_core::synth::{Motif, SyntheticSpec};
use m3ddm_core::train::{checkpoint_header, loss_csv, train, TrainConfig};
use m3ddm_core::video::{write_corpus, FrameGeom, Video};
use m3ddm_core::Params32;

#[derive(Parser, Debug)]
#[command(name = "m3ddm", version, about = "Masked 3D diffusion video outpainting on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic video corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the denoiser on a corpus.
    Train(TrainArgs),
    /// Print a coarse-to-fine inference plan.
    Plan(PlanArgs),
    /// Outpaint one video of a corpus.
    Outpaint(OutpaintArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value = "moving-square")]
    pub motif: String,
    #[arg(long, default_value_t = 1)]
    pub max_speed: u32,
    /// Square side or pattern scale.
    #[arg(long, default_value_t = 6)]
    pub shape_size: usize,
    #[arg(long, default_value_t = 30)]
    pub fps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    #[arg(long, default_value_t = 16)]
    pub clip_frames: usize,
    #[arg(long, default_value = "16,32", value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub token_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub global_frames: usize,
    #[arg(long, default_value_t = 4)]
    pub norm_groups: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path; the loss log goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliPlanMode {
    Hybrid,
    Ctf,
    Dense,
    InfillOnly,
}

impl From<CliPlanMode> for PlanMode {
    fn from(m: CliPlanMode) -> Self {
        match m {
            CliPlanMode::Hybrid | CliPlanMode::Ctf => PlanMode::Hybrid,
            CliPlanMode::Dense => PlanMode::Dense,
            CliPlanMode::InfillOnly => PlanMode::InfillOnly,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value = "30,15,1", value_delimiter = ',')]
    pub levels: Vec<usize>,
    #[arg(long, value_enum, default_value_t = CliPlanMode::Hybrid)]
    pub mode: CliPlanMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskStrategyArg {
    Single,
    Four,
    BiHorizontal,
    BiVertical,
    Sides,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Left,
    Right,
    Top,
    Bottom,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Left => Side::Left,
            SideArg::Right => Side::Right,
            SideArg::Top => Side::Top,
            SideArg::Bottom => Side::Bottom,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OutpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file holding the input video.
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum, default_value_t = MaskStrategyArg::Single)]
    pub mask_strategy: MaskStrategyArg,
    /// Hidden sides for `single` (first value) and `sides`.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "right")]
    pub side: Vec<SideArg>,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, value_enum, default_value_t = CliPlanMode::Ctf)]
    pub mode: CliPlanMode,
    #[arg(long, default_value = "30,15,1", value_delimiter = ',')]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub s1: f64,
    #[arg(long, default_value_t = 4.0)]
    pub s2: f64,
    #[arg(long, default_value = "pure")]
    pub init: String,
    #[arg(long, default_value = "ddim")]
    pub sampler: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; replaced as a whole on success.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Corpus file with the prediction (first video unless `--pred-index`).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub pred_index: usize,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub truth_index: usize,
    /// PGM mask, nonzero = visible.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// SHA-256 of a git blob object (`"blob <len>\0" ‖ content`).
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Record of one invocation; identical manifests reproduce identical
/// outputs.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: &impl std::fmt::Debug) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            config: format!("{config:?}"),
            ..Default::default()
        }
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push((path.display().to_string(), git_blob_sha256(bytes)));
    }

    fn output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.push((name.into(), git_blob_sha256(bytes)));
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\nseed={}\nconfig={}\n", self.command, self.seed, self.config);
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input {h} {p}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "output {h} {p}");
        }
        s
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pick(videos: Vec<Video>, index: usize, path: &Path) -> Result<Video> {
    let n = videos.len();
    videos
        .into_iter()
        .nth(index)
        .with_context(|| format!("{} holds {n} videos, index {index} requested", path.display()))
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<String> {
    let spec = SyntheticSpec {
        motif: a.motif.parse::<Motif>()?,
        frames: a.frames,
        geom: FrameGeom {
            h: a.size,
            w: a.size,
            c: a.channels,
        },
        fps: a.fps,
        max_speed: a.max_speed,
        size: a.shape_size,
        seed: a.seed,
    };
    let videos = spec.generate(a.count)?;
    write_corpus(&a.out, &videos)?;
    let bytes = read(&a.out)?;
    let mut m = RunManifest::new("gen-corpus", a.seed, a);
    m.output(&a.out.display().to_string(), &bytes);
    write_atomic(&sibling(&a.out, ".manifest"), m.render().as_bytes())?;
    Ok(format!("wrote {} videos to {}\n", videos.len(), a.out.display()))
}

pub fn net_config(n: &NetArgs, corpus: &[Video]) -> Result<DenoiserConfig> {
    let g = corpus.first().context("corpus is empty")?.geom;
    ensure!(g.h == g.w, "frames must be square, got {}x{}", g.h, g.w);
    let cfg = DenoiserConfig {
        frames: n.clip_frames,
        size: g.h,
        channels: g.c,
        widths: n.widths.clone(),
        token_dim: n.token_dim,
        global_frames: n.global_frames,
        norm_groups: n.norm_groups,
        ..DenoiserConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_cmd(a: &TrainArgs) -> Result<String> {
    let bytes = read(&a.corpus)?;
    let corpus = m3ddm_core::video::decode_corpus(&bytes).with_context(|| format!("decoding {}", a.corpus.display()))?;
    let net = net_config(&a.net, &corpus)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            warmup_steps: a.warmup,
            ..AdamConfig::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (params, log) = train(&corpus, &net, &cfg, |l| {
        if l.step % 100 == 0 {
            eprintln!("step {:>6}  loss {:.5}  lr {:.2e}", l.step, l.loss, l.lr);
        }
    })?;
    let ckpt = params.to_checkpoint_bytes(&checkpoint_header(&net, &cfg));
    let losses = loss_csv(&log);
    let loss_path = sibling(&a.out, ".loss.csv");
    write_atomic(&a.out, &ckpt)?;
    write_atomic(&loss_path, losses.as_str().as_bytes())?;
    let mut m = RunManifest::new("train", a.seed, a);
    m.input(&a.corpus, &bytes);
    m.output(&a.out.display().to_string(), &ckpt);
    m.output(&loss_path.display().to_string(), losses.as_str().as_bytes());
    write_atomic(&sibling(&a.out, ".manifest"), m.render().as_bytes())?;
    let last = log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    Ok(format!("trained {} steps, final loss {last:.5}, checkpoint {}\n", log.len(), a.out.display()))
}

pub fn plan_cmd(a: &PlanArgs) -> Result<String> {
    let p = plan(a.mode.into(), a.length, a.frames, &a.levels)?;
    let mut s = p.to_table();
    s.push('\n');
    s.push_str(p.depth_csv()?.as_str());
    s.push_str(&p.summary()?);
    s.push('\n');
    Ok(s)
}

fn mask_spec(a: &OutpaintArgs) -> Result<MaskSpec> {
    let first = Side::from(*a.side.first().context("--side needs a value")?);
    Ok(match a.mask_strategy {
        MaskStrategyArg::Single => MaskSpec::single(first, a.ratio),
        MaskStrategyArg::Four => MaskSpec::four(a.ratio),
        MaskStrategyArg::BiHorizontal => MaskSpec::bi(true, a.ratio),
        MaskStrategyArg::BiVertical => MaskSpec::bi(false, a.ratio),
        MaskStrategyArg::Sides => {
            let sides: Vec<Side> = a.side.iter().map(|&s| s.into()).collect();
            MaskSpec::sides_of(&sides, a.ratio)
        }
        MaskStrategyArg::All => MaskSpec::all(),
    })
}

/// Writes every file into a fresh sibling directory, then swaps it in.
fn write_dir_atomic(out: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    let name = out.file_name().context("output directory needs a name")?.to_string_lossy().into_owned();
    let tmp = out.with_file_name(format!(".{name}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).with_context(|| format!("clearing {}", tmp.display()))?;
    }
    std::fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    for (f, bytes) in files {
        std::fs::write(tmp.join(f), bytes).with_context(|| format!("writing {}", tmp.join(f).display()))?;
    }
    if out.exists() {
        ensure!(
            out.join("manifest").is_file(),
            "{} exists and is not a previous outpaint result; refusing to replace it",
            out.display()
        );
        std::fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    std::fs::rename(&tmp, out).with_context(|| format!("renaming into {}", out.display()))?;
    Ok(())
}

pub fn outpaint_cmd(a: &OutpaintArgs) -> Result<String> {
    let ckpt_bytes = read(&a.checkpoint)?;
    let (params, header) = Params32::from_checkpoint_bytes(&ckpt_bytes).with_context(|| format!("decoding {}", a.checkpoint.display()))?;
    let net = DenoiserConfig::from_header(&header)?;
    let video_bytes = read(&a.video)?;
    let corpus = m3ddm_core::video::decode_corpus(&video_bytes).with_context(|| format!("decoding {}", a.video.display()))?;
    let video = pick(corpus, a.index, &a.video)?;
    ensure!(
        video.geom.h == net.size && video.geom.w == net.size && video.geom.c == net.channels,
        "video frames are {}x{}x{} but the checkpoint expects {}x{}x{}",
        video.geom.h,
        video.geom.w,
        video.geom.c,
        net.size,
        net.size,
        net.channels
    );
    let spec = mask_spec(a)?;
    let mask = spec.realize(video.geom.h, video.geom.w);
    let guidance = GuidanceConfig {
        s1: a.s1,
        s2: a.s2,
        ..GuidanceConfig::default()
    };
    let init: InitMode = a.init.parse()?;
    let kind: SamplerKind = a.sampler.parse()?;
    let sampler = SamplerConfig {
        num_inference_steps: a.steps,
        kind,
    };
    let schedule = NoiseSchedule::default();
    let mode: PlanMode = a.mode.into();
    let p = plan(mode, video.len(), net.frames, &a.levels)?;
    let runner = ClipRunner {
        params: &params,
        net: &net,
        schedule: &schedule,
        sampler: &sampler,
        guidance: &guidance,
        init,
    };
    let exec = execute_plan(&p, &video, &mask, &runner, a.seed, Some(&video))?;
    let records = evaluate(&exec.video, &video, &mask)?;

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for t in 0..exec.video.len() {
        let ext = if video.geom.c == 1 { "pgm" } else { "ppm" };
        files.push((format!("frame_{t:05}.{ext}"), exec.video.frame_pnm(t)?));
    }
    files.push(("video.m3dv".into(), m3ddm_core::video::encode_corpus(std::slice::from_ref(&exec.video))));
    files.push(("mask.pgm".into(), mask.to_pgm()));
    files.push(("calls.csv".into(), exec.records_csv().as_str().as_bytes().to_vec()));
    files.push(("metrics.csv".into(), metrics_csv(&records).as_str().as_bytes().to_vec()));
    files.push(("plan.txt".into(), p.to_table().into_bytes()));
    let mut m = RunManifest::new("outpaint", a.seed, a);
    m.input(&a.checkpoint, &ckpt_bytes);
    m.input(&a.video, &video_bytes);
    for (f, b) in &files {
        m.output(f, b);
    }
    files.push(("manifest".into(), m.render().into_bytes()));
    write_dir_atomic(&a.out, &files)?;

    let hidden = &records[1];
    Ok(format!(
        "outpainted {} frames with {} calls (chain depth {}), hidden mse {}, wrote {}\n",
        exec.video.len(),
        p.calls.len(),
        p.chain_depth()?,
        hidden.mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
        a.out.display()
    ))
}

pub fn eval_cmd(a: &EvalArgs) -> Result<String> {
    let pb = read(&a.pred)?;
    let tb = read(&a.truth)?;
    let mb = read(&a.mask)?;
    let pred = pick(m3ddm_core::video::decode_corpus(&pb)?, a.pred_index, &a.pred)?;
    let truth = pick(m3ddm_core::video::decode_corpus(&tb)?, a.truth_index, &a.truth)?;
    let mask = FrameMask::from_pgm(&mb).with_context(|| format!("decoding {}", a.mask.display()))?;
    let records = evaluate(&pred, &truth, &mask)?;
    let csv = metrics_csv(&records);
    write_atomic(&a.out, csv.as_str().as_bytes())?;
    let mut m = RunManifest::new("eval", 0, a);
    m.input(&a.pred, &pb);
    m.input(&a.truth, &tb);
    m.input(&a.mask, &mb);
    m.output(&a.out.display().to_string(), csv.as_str().as_bytes());
    write_atomic(&sibling(&a.out, ".manifest"), m.render().as_bytes())?;
    Ok(csv.as_str().to_string())
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Outpaint(a) => outpaint_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

/// Applies `M3DDM_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("M3DDM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("M3DDM_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("M3DDM_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Keeps freed tensor buffers on the heap instead of returning them to the
/// kernel; the training loop reallocates the same sizes every step and glibc
/// otherwise serves each one with fresh zeroed pages.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
}
