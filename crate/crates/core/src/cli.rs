//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{write_corpus, AnnotatedDir, Dataset, PairedDir, PretrainSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate_corpus, list_images, DEFAULT_ERROR_THRESHOLD};
use crate::model::Generator;
use crate::nn::{no_grad, Mode};
use crate::settings::RunConfig;
use crate::tensor_io;
use crate::trainer::{config_differences, Corpus, LossLog, Phase, TrainState, CHECKPOINT_KIND};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "last.ckpt";
pub const LOSS_LOG_FILE: &str = "losses.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Parser, Debug)]
#[command(name = "text-eraser", version, about = "Scene text removal: data, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired corpus (image/, label/, mask/, annotation/).
    MakeData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint segmentation and masked-image pretraining on image/ + annotation/.
    Pretrain(TrainArgs),
    /// Encoder segmentation finetuning on image/ + annotation/.
    FinetuneEncoder(TrainArgs),
    /// Adversarial text-removal training on image/ + label/ + mask/.
    Train(TrainArgs),
    /// Erase text from every image in a directory.
    Erase {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compare predictions with same-named ground-truth images.
    Eval {
        /// Directory of predictions.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory of ground-truth images.
        #[arg(long)]
        gt: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Both)]
        format: ReportFormat,
        /// Gray-level difference above which a pixel counts as an error.
        #[arg(long, default_value_t = DEFAULT_ERROR_THRESHOLD)]
        threshold: u8,
    },
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Corpus root.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory for checkpoints, the loss log and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to resume (same phase) or to initialize weights from.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Summary,
    Both,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    extractor_seed: u64,
    inputs: BTreeMap<&'static str, String>,
    config: String,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, inputs: BTreeMap<&'static str, String>) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.train.seed,
        extractor_seed: cfg.extractor.seed,
        inputs,
        config: cfg.to_flat_string(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(out.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    RunConfig::from_sources(&text, &overrides).map_err(|e| CliError::Usage(e.to_string()))
}

fn device(name: &str) -> std::result::Result<Device, CliError> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(CliError::Usage(format!("unsupported device `{other}` (only `cpu` is available)"))),
    }
}

/// Reads the generator stored in a checkpoint of any phase.
pub fn load_generator(path: &Path, device: &Device) -> Result<(Generator, RunConfig)> {
    let file = tensor_io::read_file(path, device)?;
    if file.meta["kind"] != CHECKPOINT_KIND {
        return Err(Error::Corrupt(format!("{} is not a training checkpoint", path.display())));
    }
    let cfg: RunConfig =
        serde_json::from_value(file.meta["config"].clone()).map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    let generator = Generator::new(&cfg.model, cfg.train.seed, DType::F32, device)?;
    let gen: BTreeMap<String, Tensor> =
        file.tensors.iter().filter_map(|(k, v)| k.strip_prefix("gen/").map(|k| (k.to_string(), v.clone()))).collect();
    generator.store().restore(&gen)?;
    Ok((generator, cfg))
}

fn checkpoint_phase(path: &Path, device: &Device) -> Result<Phase> {
    let file = tensor_io::read_file(path, device)?;
    serde_json::from_value(file.meta["phase"].clone()).map_err(|e| Error::Corrupt(format!("phase: {e}")))
}

/// Runs the model on one image of any size. The image is resized to the
/// model input size and the prediction resized back.
pub fn erase_image(generator: &Generator, img: &Image) -> Result<Image> {
    let size = generator.config().input_size;
    let x = img.resize_bilinear(size, size).to_tensor(DType::F32, &Device::Cpu)?;
    let out = no_grad(|| generator.forward(&x, Mode::Eval))?.image.clamp(0.0, 1.0)?;
    Ok(Image::from_tensor(&out, 0)?.resize_bilinear(img.height, img.width).quantize())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run_training(phase: Phase, args: &TrainArgs, cfg: &RunConfig, dev: &Device) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut inputs = BTreeMap::from([("in", path_str(&args.input))]);
    let mut state = match &args.ckpt {
        Some(ck) => {
            inputs.insert("ckpt", path_str(ck));
            let (_, ck_cfg) = load_generator(ck, dev)?;
            if checkpoint_phase(ck, dev)? == phase {
                let diffs = config_differences(&ck_cfg, cfg);
                if !diffs.is_empty() {
                    log::warn!(
                        "checkpoint config differs from the command line in {}; resuming with the checkpoint's",
                        diffs.join(", ")
                    );
                }
                TrainState::load(ck, dev)?
            } else {
                let mut run_cfg = cfg.clone();
                if ck_cfg.model != cfg.model {
                    log::warn!("checkpoint model config differs from the command line; using the checkpoint's");
                    run_cfg.model = ck_cfg.model.clone();
                }
                let mut s = TrainState::new(phase, &run_cfg, DType::F32, dev)?;
                let n = s.init_from(ck)?;
                log::info!("initialized {n} parameters from {}", ck.display());
                s
            }
        }
        None => TrainState::new(phase, cfg, DType::F32, dev)?,
    };
    write_manifest(&args.out, phase.name(), &state.cfg, inputs)?;
    let mut log = LossLog::append(&args.out.join(LOSS_LOG_FILE))?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let every = state.cfg.train.checkpoint_every;
    let epochs = state.cfg.train.epochs;
    let on_epoch = |s: &TrainState| {
        if s.epoch % every == 0 || s.epoch == epochs {
            s.save(&ckpt)?;
        }
        Ok(())
    };
    match phase {
        Phase::Train => {
            let data = PairedDir::open(&args.input)?;
            state.run(Corpus::Paired(&data), &mut log, on_epoch)?;
        }
        _ => {
            let data = AnnotatedDir::open(&args.input)?;
            let data: &dyn Dataset<PretrainSample> = &data;
            state.run(Corpus::Annotated(data), &mut log, on_epoch)?;
        }
    }
    if !ckpt.exists() {
        state.save(&ckpt)?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    let dev = device(&cli.device)?;
    let cfg = resolve_config(cli)?;
    let out_dir = match &cli.command {
        Command::MakeData { out } | Command::Erase { out, .. } | Command::Eval { out, .. } => out.clone(),
        Command::Pretrain(a) | Command::FinetuneEncoder(a) | Command::Train(a) => a.out.clone(),
    };
    let result = run_command(cli, &cfg, &dev);
    if let Err(CliError::Runtime(e)) = &result {
        if out_dir.is_dir() {
            let _ = std::fs::write(out_dir.join(FAILURE_MARKER), format!("{e}\n"));
        }
    }
    result
}

fn run_command(cli: &Cli, cfg: &RunConfig, dev: &Device) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::MakeData { out } => {
            std::fs::create_dir_all(out).map_err(Error::from)?;
            let names = write_corpus(out, cfg.data.samples, cfg.sample_size(), cfg.train.seed)?;
            write_manifest(out, "make-data", cfg, BTreeMap::new())?;
            log::info!("wrote {} samples to {}", names.len(), out.display());
        }
        Command::Pretrain(a) => run_training(Phase::Pretrain, a, cfg, dev)?,
        Command::FinetuneEncoder(a) => run_training(Phase::FinetuneEncoder, a, cfg, dev)?,
        Command::Train(a) => run_training(Phase::Train, a, cfg, dev)?,
        Command::Erase { input, out, ckpt } => {
            if input.canonicalize().ok() == out.canonicalize().ok() && out.exists() {
                return Err(CliError::Usage("--out must differ from --in; inputs are never overwritten".into()));
            }
            let (generator, ck_cfg) = load_generator(ckpt, dev)?;
            std::fs::create_dir_all(out).map_err(Error::from)?;
            let files = list_images(input)?;
            for p in &files {
                let name = p.file_name().expect("listed file");
                let img = Image::load(p, false)?;
                let erased = erase_image(&generator, &img)?;
                let tmp = out.join(format!(".{}.partial", name.to_string_lossy()));
                erased.save_png(&tmp)?;
                std::fs::rename(&tmp, out.join(name)).map_err(Error::from)?;
            }
            let inputs = BTreeMap::from([("in", path_str(input)), ("ckpt", path_str(ckpt))]);
            write_manifest(out, "erase", &ck_cfg, inputs)?;
            log::info!("erased {} images into {}", files.len(), out.display());
        }
        Command::Eval { input, gt, out, format, threshold } => {
            let report = evaluate_corpus(input, gt, *threshold)?;
            std::fs::create_dir_all(out).map_err(Error::from)?;
            if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
                std::fs::write(out.join("metrics.csv"), report.to_csv()).map_err(Error::from)?;
            }
            let summary = report.summary();
            if matches!(format, ReportFormat::Summary | ReportFormat::Both) {
                std::fs::write(out.join("summary.txt"), &summary).map_err(Error::from)?;
            }
            print!("{summary}");
            let inputs = BTreeMap::from([("in", path_str(input)), ("gt", path_str(gt))]);
            write_manifest(out, "eval", cfg, inputs)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
