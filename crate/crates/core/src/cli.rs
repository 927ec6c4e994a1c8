//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::backbone::{condition_for_clip, Model};
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{generate_corpus, oracle_pitch, CorpusConfig, FeatureLayout, FeatureSequence};
use crate::error::{Error, Result};
use crate::eval::{self, parse_eval_report};
use crate::grpo::{self, GrpoConfig};
use crate::report;
use crate::sampler::{sample_ode, SamplerConfig};
use crate::storage;
use crate::trainer::{self, TrainConfig, TrainState};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "melodyflow", version, about = "Melody-conditioned flow-matching synthesis toolkit")]
pub struct Cli {
    /// Base seed for every random stream of the command.
    #[arg(long, global = true, env = "MELODYFLOW_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic corpus management.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Pre-training and post-training.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Generate features for one clip.
    Sample(SampleArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Render an evaluation JSON as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CorpusConfig::default().frames)]
    pub frames: usize,
    #[arg(long, default_value_t = CorpusConfig::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = CorpusConfig::default().feature_dim)]
    pub feature_dim: usize,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    Pretrain(PretrainArgs),
    Grpo(GrpoArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Flat `key = value` file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (the schedule still spans `total_steps`).
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GrpoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = GrpoConfig::default().group_size)]
    pub group_size: usize,
    #[arg(long, default_value_t = GrpoConfig::default().kl_weight)]
    pub beta: f64,
    #[arg(long, default_value_t = GrpoConfig::default().noise_level_a)]
    pub noise_a: f64,
    #[arg(long, default_value_t = GrpoConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = GrpoConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = GrpoConfig::default().prompts_per_step)]
    pub prompts_per_step: usize,
    /// Use the unclipped policy ratio.
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clip directory inside a corpus.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = SamplerConfig::default().cfg_scale)]
    pub cfg_scale: f64,
    /// Output `features.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a sine rendering of the generated pitch contour.
    #[arg(long)]
    pub wav: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = SamplerConfig::default().cfg_scale)]
    pub cfg_scale: f64,
    /// Only the last N clips of the corpus.
    #[arg(long)]
    pub last: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Earlier evaluation to diff against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Reward-curve log from post-training; plotted next to the report.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    build: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started_unix_ms: u128,
    elapsed_ms: u128,
}

struct Run {
    command: &'static str,
    seed: Option<u64>,
    started: Instant,
    started_unix_ms: u128,
}

impl Run {
    fn new(command: &'static str, seed: Option<u64>) -> Self {
        Self {
            command,
            seed,
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        }
    }

    fn finish(self, path: &Path, config: serde_json::Value, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
        let manifest = Manifest {
            command: self.command.to_string(),
            config,
            seed: self.seed,
            build: build_id(),
            inputs,
            outputs,
            started_unix_ms: self.started_unix_ms,
            elapsed_ms: self.started.elapsed().as_millis(),
        };
        write_atomic(path, &serde_json::to_vec_pretty(&manifest)?)
    }
}

fn build_id() -> String {
    match option_env!("MELODYFLOW_BUILD_ID") {
        Some(id) => format!("{} ({id})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn corpus_generate(args: &GenerateArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("corpus generate", seed);
    let config = CorpusConfig {
        frames: args.frames,
        vocab_size: args.vocab_size,
        feature_dim: args.feature_dim,
        ..CorpusConfig::default()
    };
    config.validate()?;
    let clips = generate_corpus(args.n, &config, seed.unwrap_or(0))?;
    storage::save_corpus(&args.out, &config, &clips)?;
    info!("wrote {} clips to {}", clips.len(), args.out.display());
    run.finish(
        &args.out.join("manifest.json"),
        serde_json::to_value(config)?,
        vec![],
        vec![args.out.clone()],
    )
}

fn pretrain(args: &PretrainArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("train pretrain", seed);
    let mut config = match &args.config {
        Some(p) => TrainConfig::parse_flat(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let (corpus_config, clips) = storage::load_corpus(&args.corpus)?;
    if corpus_config.feature_dim != config.model.feature_dim || corpus_config.vocab_size != config.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus has D_f={} V={}, model expects D_f={} V={}",
            corpus_config.feature_dim, corpus_config.vocab_size, config.model.feature_dim, config.model.vocab_size
        )));
    }
    let layout = FeatureLayout::from_config(&corpus_config)?;
    let mut state = match &args.resume {
        Some(p) => TrainState::from_checkpoint(checkpoint::load(p, Some(&config.model))?)?,
        None => TrainState::new(&config)?,
    };
    ensure_parent(&args.out)?;
    let log_path = sidecar(&args.out, ".log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)?;
    let stop = args.stop_at.unwrap_or(config.total_steps);
    trainer::train_until(&mut state, &layout, &clips, &config, stop, |entry, _| {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    checkpoint::save(&args.out, &state.to_checkpoint(&config)?)?;
    info!("saved step {} to {}", state.step, args.out.display());
    let mut inputs = vec![args.corpus.clone()];
    inputs.extend(args.config.clone());
    inputs.extend(args.resume.clone());
    run.finish(
        &sidecar(&args.out, ".manifest.json"),
        serde_json::to_value(&config)?,
        inputs,
        vec![args.out.clone(), log_path],
    )
}

fn grpo(args: &GrpoArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("train grpo", seed);
    let ckpt = checkpoint::load(&args.checkpoint, None)?;
    let (corpus_config, clips) = storage::load_corpus(&args.corpus)?;
    let layout = FeatureLayout::from_config(&corpus_config)?;
    let config = GrpoConfig {
        group_size: args.group_size,
        kl_weight: args.beta,
        noise_level_a: args.noise_a,
        steps: args.steps,
        learning_rate: args.lr,
        prompts_per_step: args.prompts_per_step,
        ratio_clip: if args.no_clip { None } else { GrpoConfig::default().ratio_clip },
        seed: seed.unwrap_or(0),
        ..GrpoConfig::default()
    };
    ensure_parent(&args.out)?;
    let curve_path = sidecar(&args.out, ".rewards.jsonl");
    let mut curve = fs::File::create(&curve_path)?;
    let (model, _) = grpo::post_train(&ckpt.model, &layout, &clips, &config, |p| {
        serde_json::to_writer(&mut curve, p)?;
        curve.write_all(b"\n")?;
        Ok(())
    })?;
    let out = Checkpoint {
        model,
        step: ckpt.step,
        optimizer: None,
        extra: serde_json::json!({ "grpo": &config, "pretrain": ckpt.extra }),
    };
    checkpoint::save(&args.out, &out)?;
    run.finish(
        &sidecar(&args.out, ".manifest.json"),
        serde_json::to_value(&config)?,
        vec![args.checkpoint.clone(), args.corpus.clone()],
        vec![args.out.clone(), curve_path],
    )
}

fn corpus_config_for_clip(clip_dir: &Path) -> Result<CorpusConfig> {
    let index = clip_dir.parent().map(|p| p.join("corpus.json"));
    match index {
        Some(p) if p.exists() => {
            let v: serde_json::Value = serde_json::from_slice(&fs::read(p)?)?;
            Ok(serde_json::from_value(v["config"].clone())?)
        }
        _ => Ok(CorpusConfig::default()),
    }
}

/// 16-bit mono PCM at 24 kHz; each voiced frame is a sine at its note, unvoiced frames are silent.
pub fn write_pitch_wav(path: &Path, contour: &[u32], frame_rate: f64) -> Result<()> {
    const RATE: u32 = 24_000;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Format(format!("wav: {e}"));
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let per_frame = f64::from(RATE) / frame_rate;
    let mut phase = 0.0f64;
    let mut written = 0usize;
    for (k, &note) in contour.iter().enumerate() {
        let end = ((k + 1) as f64 * per_frame).round() as usize;
        // note 1 sits at MIDI 48
        let freq = 440.0 * 2f64.powf((f64::from(note) + 47.0 - 69.0) / 12.0);
        while written < end {
            let sample = if note == 0 {
                0
            } else {
                phase = (phase + freq / f64::from(RATE)).fract();
                ((phase * std::f64::consts::TAU).sin() * 0.3 * f64::from(i16::MAX)) as i16
            };
            w.write_sample(sample).map_err(wav_err)?;
            written += 1;
        }
    }
    w.finalize().map_err(wav_err)
}

fn sample(args: &SampleArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("sample", seed);
    let ckpt = checkpoint::load(&args.checkpoint, None)?;
    let corpus_config = corpus_config_for_clip(&args.clip)?;
    let clip = storage::load_clip(&args.clip, &corpus_config)?;
    let layout = FeatureLayout::from_config(&corpus_config)?;
    let sampler = SamplerConfig {
        steps: args.steps,
        cfg_scale: args.cfg_scale,
        ..SamplerConfig::default()
    };
    let cond = condition_for_clip(&ckpt.model, &clip)?;
    let x = sample_ode(&ckpt.model, &cond, &sampler, seed.unwrap_or(0))?;
    let features = FeatureSequence::new(x, corpus_config.frame_rate)?;
    ensure_parent(&args.out)?;
    storage::write_features(&args.out, &features)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(wav) = &args.wav {
        write_pitch_wav(wav, &oracle_pitch(&layout, &features)?, corpus_config.frame_rate)?;
        outputs.push(wav.clone());
    }
    run.finish(
        &sidecar(&args.out, ".manifest.json"),
        serde_json::to_value(sampler)?,
        vec![args.checkpoint.clone(), args.clip.clone()],
        outputs,
    )
}

fn evaluate(args: &EvalArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("eval", seed);
    let ckpt = checkpoint::load(&args.checkpoint, None)?;
    let (corpus_config, clips) = storage::load_corpus(&args.corpus)?;
    let layout = FeatureLayout::from_config(&corpus_config)?;
    let clips = match args.last {
        Some(n) => &clips[clips.len().saturating_sub(n)..],
        None => &clips[..],
    };
    let sampler = SamplerConfig {
        steps: args.steps,
        cfg_scale: args.cfg_scale,
        ..SamplerConfig::default()
    };
    let model: &Model = &ckpt.model;
    let report = eval::evaluate(model, &layout, clips, &sampler, seed.unwrap_or(0))?;
    ensure_parent(&args.out)?;
    write_atomic(&args.out, &serde_json::to_vec_pretty(&report)?)?;
    run.finish(
        &sidecar(&args.out, ".manifest.json"),
        serde_json::to_value(sampler)?,
        vec![args.checkpoint.clone(), args.corpus.clone()],
        vec![args.out.clone()],
    )
}

fn render_report(args: &ReportArgs, seed: Option<u64>) -> Result<()> {
    let run = Run::new("report", seed);
    let current = parse_eval_report(&fs::read(&args.input)?)?;
    let baseline = match &args.baseline {
        Some(p) => Some(parse_eval_report(&fs::read(p)?)?),
        None => None,
    };
    let mut md = report::render_markdown(&current, baseline.as_ref());
    let mut outputs = vec![args.out.clone()];
    ensure_parent(&args.out)?;
    if let Some(curves) = &args.curves {
        let points = report::parse_curve_log(&fs::read_to_string(curves)?)?;
        let svg = args.out.with_extension("rewards.svg");
        report::plot_curves(&points, &svg)?;
        let name = svg.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        md.push_str(&format!("\n![post-training rewards]({name})\n"));
        outputs.push(svg);
    }
    write_atomic(&args.out, md.as_bytes())?;
    let mut inputs = vec![args.input.clone()];
    inputs.extend(args.baseline.clone());
    inputs.extend(args.curves.clone());
    run.finish(&sidecar(&args.out, ".manifest.json"), serde_json::Value::Null, inputs, outputs)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Corpus(CorpusCommand::Generate(a)) => corpus_generate(a, seed),
        Command::Train(TrainCommand::Pretrain(a)) => pretrain(a, seed),
        Command::Train(TrainCommand::Grpo(a)) => grpo(a, seed),
        Command::Sample(a) => sample(a, seed),
        Command::Eval(a) => evaluate(a, seed),
        Command::Report(a) => render_report(a, seed),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_go_to_stderr() {
        for argv in [&["melodyflow", "bogus"][..], &["melodyflow", "eval", "--nope"]] {
            assert!(Cli::try_parse_from(argv).unwrap_err().use_stderr());
        }
        assert!(!Cli::try_parse_from(["melodyflow", "--help"]).unwrap_err().use_stderr());
        let cli = Cli::try_parse_from(["melodyflow", "sample", "--checkpoint", "m", "--clip", "c", "--out", "o", "--seed", "5"]).unwrap();
        assert_eq!(cli.seed, Some(5));
    }

    #[test]
    fn missing_input_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        let out = dir.path().join("r.md");
        let code = run(["melodyflow", "report", "--in", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_IO);
    }

    #[test]
    fn malformed_report_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        let err = parse_eval_report(&fs::read(&bad).unwrap()).unwrap_err();
        assert_eq!(err.category(), "parse");
        assert_eq!(exit_code(&err), EXIT_OTHER);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn wav_length_follows_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.wav");
        write_pitch_wav(&p, &[0, 10, 10, 0], 93.75).unwrap();
        let r = hound::WavReader::open(&p).unwrap();
        assert_eq!(r.spec().sample_rate, 24_000);
        assert_eq!(r.spec().bits_per_sample, 16);
        assert_eq!(r.len(), 4 * 256);
    }
}
